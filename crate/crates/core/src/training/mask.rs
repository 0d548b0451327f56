use crate::error::{Error, Result};
use crate::model::PhonemeSequence;
use crate::numerics::RngStream;

/// Prosody-smoothing mask decision for one training sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub apply: bool,
    /// Inclusive word span, present when `apply` is true.
    pub word_span: Option<(usize, usize)>,
    /// Per-phoneme mask; `true` marks phonemes whose context is hidden.
    pub phoneme_mask: Vec<bool>,
}

/// With probability `mask_probability`, hide the prosody context of a span
/// of one to three whole words (clamped to the sentence length, start
/// uniform over valid positions). Otherwise the context stays fully visible.
pub fn sample_prosody_mask(
    seq: &PhonemeSequence,
    rng: &mut RngStream,
    mask_probability: f64,
    max_span_words: usize,
) -> Result<MaskSpec> {
    let words = seq.word_count();
    if words == 0 {
        return Err(Error::Contract("mask sampling needs at least one word".into()));
    }
    if !rng.coin(mask_probability) {
        return Ok(MaskSpec {
            apply: false,
            word_span: None,
            phoneme_mask: vec![false; seq.len()],
        });
    }
    let span = (1 + rng.below(max_span_words)).min(words);
    let start = rng.below(words - span + 1);
    let end = start + span - 1;
    let range = seq.phonemes_of_words(start, end);
    let mut mask = vec![false; seq.len()];
    for m in &mut mask[range] {
        *m = true;
    }
    Ok(MaskSpec {
        apply: true,
        word_span: Some((start, end)),
        phoneme_mask: mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ten_word_sentence() -> PhonemeSequence {
        // two phonemes per word, ten words
        let mut ids = Vec::new();
        let mut words = Vec::new();
        for w in 0..10 {
            ids.extend([1, 2]);
            words.extend([w, w]);
        }
        PhonemeSequence::new(ids, words).unwrap()
    }

    #[test]
    fn one_word_sentence_masks_the_whole_context() {
        let seq = PhonemeSequence::new(vec![1, 2, 3], vec![0, 0, 0]).unwrap();
        let mut rng = RngStream::new(1, "mask");
        // draw until an applied mask shows up
        for _ in 0..64 {
            let spec = sample_prosody_mask(&seq, &mut rng, 0.5, 3).unwrap();
            if spec.apply {
                assert_eq!(spec.word_span, Some((0, 0)));
                assert!(spec.phoneme_mask.iter().all(|&m| m));
                return;
            }
        }
        panic!("no applied mask in 64 draws");
    }

    #[test]
    fn apply_rate_is_roughly_half() {
        let seq = ten_word_sentence();
        let mut rng = RngStream::new(7, "mask");
        let n = 10_000;
        let applied = (0..n)
            .filter(|_| sample_prosody_mask(&seq, &mut rng, 0.5, 3).unwrap().apply)
            .count();
        let rate = applied as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn span_lengths_are_uniform_over_one_to_three() {
        let seq = ten_word_sentence();
        let mut rng = RngStream::new(11, "mask");
        let mut counts = [0usize; 3];
        let mut applied = 0;
        while applied < 10_000 {
            let spec = sample_prosody_mask(&seq, &mut rng, 0.5, 3).unwrap();
            if let Some((s, e)) = spec.word_span {
                counts[e - s] += 1;
                applied += 1;
            }
        }
        // chi-square against uniform over three bins; p > 0.01 <=> chi2 < 9.21
        let expected = applied as f64 / 3.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 9.21, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn masked_phonemes_cover_exactly_the_span_words() {
        let seq = ten_word_sentence();
        let mut rng = RngStream::new(13, "mask");
        for _ in 0..100 {
            let spec = sample_prosody_mask(&seq, &mut rng, 1.0, 3).unwrap();
            let (s, e) = spec.word_span.unwrap();
            assert!(e - s < 3);
            for (i, &m) in spec.phoneme_mask.iter().enumerate() {
                let w = seq.word_index()[i];
                assert_eq!(m, w >= s && w <= e);
            }
        }
    }
}
