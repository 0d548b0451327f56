//! Inference modes: zero-shot full-sentence generation from a reference
//! feature, and word insertion with prosody-context conditioning and
//! frame-exact splicing. The artifact stops at mel level; `SplicePlan`
//! carries the frame indices a vocoder-equipped system would need.

use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::model::{
    Model, PhonemeSequence, ProsodyContext, ProsodyTrack, ReferenceFeature, VarianceMode,
};
use crate::numerics::{Real, Tensor};

/// A word-insertion job against one original utterance.
#[derive(Debug, Clone)]
pub struct InsertionRequest<T: Real> {
    pub original_mel: Tensor<T>,
    pub original_text: PhonemeSequence,
    pub original_prosody: ProsodyTrack<T>,
    /// The post-insertion phoneme sequence.
    pub new_text: PhonemeSequence,
    /// Half-open phoneme index range into `new_text` covering exactly the
    /// inserted words.
    pub insert_phoneme_range: std::ops::Range<usize>,
    /// Global factor source; defaults to the edited utterance's own feature
    /// but any same-speaker feature works.
    pub ref_feature: ReferenceFeature<T>,
}

impl<T: Real> InsertionRequest<T> {
    pub fn validate(&self) -> Result<()> {
        let r = &self.insert_phoneme_range;
        if r.start > r.end || r.end > self.new_text.len() {
            return Err(Error::Input(format!(
                "insertion range {r:?} outside new text of {}",
                self.new_text.len()
            )));
        }
        if self.original_prosody.len() != self.original_text.len() {
            return Err(Error::Input(format!(
                "original prosody covers {} phonemes, text has {}",
                self.original_prosody.len(),
                self.original_text.len()
            )));
        }
        if self.new_text.len() - (r.end - r.start) != self.original_text.len() {
            return Err(Error::Input(
                "new text minus the insertion range must equal the original text".into(),
            ));
        }
        let kept: Vec<usize> = (0..self.new_text.len())
            .filter(|i| !r.contains(i))
            .map(|i| self.new_text.ids()[i])
            .collect();
        if kept != self.original_text.ids() {
            return Err(Error::Input(
                "phonemes outside the insertion range do not match the original".into(),
            ));
        }
        let t0 = self.original_prosody.total_frames()?;
        if t0 != self.original_mel.shape()[0] {
            return Err(Error::Input(format!(
                "original durations sum to {t0} but mel has {} frames",
                self.original_mel.shape()[0]
            )));
        }
        Ok(())
    }
}

/// Frame bookkeeping for splicing the generated segment into the original.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplicePlan {
    /// Original frames kept before the insertion point.
    pub left_frames: usize,
    /// Generated frames.
    pub insert_frames: usize,
    /// Original frames kept after the insertion point.
    pub right_frames: usize,
}

/// Zero-shot full-sentence generation: tokens from the reference, encode,
/// variance-adapt in infer mode, decode. Returns the mel and the
/// discretized durations that produced it.
pub fn generate_full<T: Real>(
    model: &Model<T>,
    text: &PhonemeSequence,
    feat: &ReferenceFeature<T>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if text.is_empty() {
        return Err(Error::Input("empty text".into()));
    }
    let mut ctx = Ctx::eval(&model.store);
    let tokens = model.encode_global_factors(&mut ctx, feat)?;
    let h = model.encode_phonemes(&mut ctx, text, tokens)?;
    let out = model.variance_adapt(&mut ctx, h, None, None, VarianceMode::Infer)?;
    let mel = model.decode_mel(&mut ctx, out.h_reg, tokens)?;
    Ok((ctx.tape.to_tensor(mel), out.durations))
}

/// Word insertion. The whole new sentence is generated with the original
/// prosody as teacher outside the insertion range (so context frames align
/// one-to-one with the original) and predictions inside; only the generated
/// segment is new, and the context regions of `full_mel` are bit-exact
/// copies of the original.
pub fn insert_words<T: Real>(
    model: &Model<T>,
    req: &InsertionRequest<T>,
) -> Result<(Option<Tensor<T>>, SplicePlan, Tensor<T>)> {
    req.validate()?;
    let r = req.insert_phoneme_range.clone();
    let t0 = req.original_mel.shape()[0];
    let orig_durations = req.original_prosody.durations_usize()?;

    // cumulative original duration at the left edge of the range
    let left_frames: usize = orig_durations[..r.start].iter().sum();

    if r.is_empty() {
        let plan = SplicePlan {
            left_frames,
            insert_frames: 0,
            right_frames: t0 - left_frames,
        };
        return Ok((None, plan, req.original_mel.clone()));
    }

    let n_new = req.new_text.len();
    // teacher tracks over the new text: original values outside the range,
    // placeholders inside (those positions are predicted)
    let mut duration = Vec::with_capacity(n_new);
    let mut pitch = Vec::with_capacity(n_new);
    let mut energy = Vec::with_capacity(n_new);
    let mut predict = Vec::with_capacity(n_new);
    let mut orig_i = 0usize;
    for i in 0..n_new {
        if r.contains(&i) {
            duration.push(0);
            pitch.push(T::zero());
            energy.push(T::zero());
            predict.push(true);
        } else {
            duration.push(req.original_prosody.duration[orig_i]);
            pitch.push(req.original_prosody.pitch[orig_i]);
            energy.push(req.original_prosody.energy[orig_i]);
            predict.push(false);
            orig_i += 1;
        }
    }
    let teacher = ProsodyTrack::new(duration, pitch, energy)?;
    // prosody context: the teacher track with the insertion region masked
    let prosody_ctx = ProsodyContext::masked(&teacher, predict.clone())?;

    let mut ctx = Ctx::eval(&model.store);
    let tokens = model.encode_global_factors(&mut ctx, &req.ref_feature)?;
    let h = model.encode_phonemes(&mut ctx, &req.new_text, tokens)?;
    let out = model.variance_adapt(
        &mut ctx,
        h,
        Some(&prosody_ctx),
        Some(&teacher),
        VarianceMode::Inpaint { predict },
    )?;
    let mel_new = model.decode_mel(&mut ctx, out.h_reg, tokens)?;
    let mel_new = ctx.tape.to_tensor(mel_new);

    let insert_frames: usize = out.durations[r.start..r.end].iter().sum();
    let plan = SplicePlan {
        left_frames,
        insert_frames,
        right_frames: t0 - left_frames,
    };

    let n_mels = model.cfg.n_mels;
    let mut seg = Vec::with_capacity(insert_frames * n_mels);
    for t in left_frames..left_frames + insert_frames {
        seg.extend_from_slice(mel_new.row(t));
    }
    let segment = Tensor::new(vec![insert_frames, n_mels], seg)?;
    let full = splice(&req.original_mel, Some(&segment), &plan)?;
    Ok((Some(segment), plan, full))
}

/// Copy `[0, left)` of the original, then the segment, then the rest of the
/// original. All copies are bit-exact; nothing is regenerated.
pub fn splice<T: Real>(
    original: &Tensor<T>,
    segment: Option<&Tensor<T>>,
    plan: &SplicePlan,
) -> Result<Tensor<T>> {
    let t0 = original.shape()[0];
    let n_mels = original.shape()[1];
    if plan.left_frames + plan.right_frames != t0 {
        return Err(Error::Input(format!(
            "plan keeps {} + {} frames of a {t0}-frame original",
            plan.left_frames, plan.right_frames
        )));
    }
    let seg_rows = segment.map_or(0, |s| s.shape()[0]);
    if seg_rows != plan.insert_frames {
        return Err(Error::Input(format!(
            "segment has {seg_rows} frames, plan says {}",
            plan.insert_frames
        )));
    }
    if let Some(s) = segment {
        if s.shape()[1] != n_mels {
            return Err(Error::Input(format!(
                "segment has {} channels, original has {n_mels}",
                s.shape()[1]
            )));
        }
    }
    let mut data = Vec::with_capacity((t0 + plan.insert_frames) * n_mels);
    data.extend_from_slice(&original.data()[..plan.left_frames * n_mels]);
    if let Some(s) = segment {
        data.extend_from_slice(s.data());
    }
    data.extend_from_slice(&original.data()[plan.left_frames * n_mels..]);
    Tensor::new(vec![t0 + plan.insert_frames, n_mels], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::RngStream;

    fn toy_model() -> Model<f32> {
        Model::new(ModelConfig::gradcheck(), 3).unwrap()
    }

    fn request(model: &Model<f32>) -> InsertionRequest<f32> {
        // original: words [0][1] with 2+2 phonemes; insert one 2-phoneme word
        // between them
        let original_text =
            PhonemeSequence::new(vec![1, 2, 3, 4], vec![0, 0, 1, 1]).unwrap();
        let new_text =
            PhonemeSequence::new(vec![1, 2, 7, 8, 3, 4], vec![0, 0, 1, 1, 2, 2]).unwrap();
        let original_prosody = ProsodyTrack::new(
            vec![2, 3, 2, 4],
            vec![0.1, -0.1, 0.2, 0.0],
            vec![0.5, 0.6, 0.4, 0.5],
        )
        .unwrap();
        let mut rng = RngStream::new(5, "insert-test");
        let original_mel: Tensor<f32> = rng.normal(vec![11, model.cfg.n_mels]);
        let ref_feature =
            ReferenceFeature::new(rng.normal(vec![6, model.cfg.ref_feat_dim])).unwrap();
        InsertionRequest {
            original_mel,
            original_text,
            original_prosody,
            new_text,
            insert_phoneme_range: 2..4,
            ref_feature,
        }
    }

    #[test]
    fn generate_full_frame_count_matches_durations() {
        let model = toy_model();
        let text = PhonemeSequence::new(vec![1, 2, 3], vec![0, 1, 1]).unwrap();
        let mut rng = RngStream::new(8, "gen-test");
        let feat =
            ReferenceFeature::new(rng.normal(vec![5, model.cfg.ref_feat_dim])).unwrap();
        let (mel, durations) = generate_full(&model, &text, &feat).unwrap();
        let total: usize = durations.iter().sum();
        assert_eq!(mel.shape(), &[total, model.cfg.n_mels]);

        // determinism
        let (mel2, d2) = generate_full(&model, &text, &feat).unwrap();
        assert_eq!(mel.data(), mel2.data());
        assert_eq!(durations, d2);
    }

    #[test]
    fn insertion_splices_context_bit_exactly() {
        let model = toy_model();
        let req = request(&model);
        let (segment, plan, full) = insert_words(&model, &req).unwrap();
        let segment = segment.unwrap();

        // boundary counts follow the original durations
        assert_eq!(plan.left_frames, 5);
        assert_eq!(plan.right_frames, 6);
        assert_eq!(plan.insert_frames, segment.shape()[0]);
        assert_eq!(
            full.shape()[0],
            req.original_mel.shape()[0] + plan.insert_frames
        );

        // context regions are bit-identical to the original
        let n_mels = model.cfg.n_mels;
        for t in 0..plan.left_frames {
            assert_eq!(full.row(t), req.original_mel.row(t));
        }
        for t in 0..plan.right_frames {
            assert_eq!(
                full.row(plan.left_frames + plan.insert_frames + t),
                req.original_mel.row(plan.left_frames + t)
            );
        }
        // the middle is the generated segment
        for t in 0..plan.insert_frames {
            assert_eq!(full.row(plan.left_frames + t), segment.row(t));
        }
        let _ = n_mels;
    }

    #[test]
    fn insertion_durations_come_from_the_predictor_inside_the_range() {
        let model = toy_model();
        let req = request(&model);
        let (_, plan, _) = insert_words(&model, &req).unwrap();
        // reproduce the inserted durations through the public pieces
        let (_, durations) = {
            let mut ctx = Ctx::eval(&model.store);
            let tokens = model.encode_global_factors(&mut ctx, &req.ref_feature).unwrap();
            let h = model
                .encode_phonemes(&mut ctx, &req.new_text, tokens)
                .unwrap();
            let teacher = ProsodyTrack::new(
                vec![2, 3, 0, 0, 2, 4],
                vec![0.1, -0.1, 0.0, 0.0, 0.2, 0.0],
                vec![0.5, 0.6, 0.0, 0.0, 0.4, 0.5],
            )
            .unwrap();
            let predict = vec![false, false, true, true, false, false];
            let pc = ProsodyContext::masked(&teacher, predict.clone()).unwrap();
            let out = model
                .variance_adapt(
                    &mut ctx,
                    h,
                    Some(&pc),
                    Some(&teacher),
                    VarianceMode::Inpaint { predict },
                )
                .unwrap();
            (ctx.tape.to_tensor(out.d_hat), out.durations)
        };
        let inserted: usize = durations[2..4].iter().sum();
        assert_eq!(plan.insert_frames, inserted);
        // outside the range the teacher durations pass through untouched
        assert_eq!(durations[0], 2);
        assert_eq!(durations[1], 3);
        assert_eq!(durations[4], 2);
        assert_eq!(durations[5], 4);
    }

    #[test]
    fn empty_insertion_range_degenerates_to_the_original() {
        let model = toy_model();
        let mut req = request(&model);
        req.new_text = req.original_text.clone();
        req.insert_phoneme_range = 2..2;
        let (segment, plan, full) = insert_words(&model, &req).unwrap();
        assert!(segment.is_none());
        assert_eq!(plan.insert_frames, 0);
        assert_eq!(full.data(), req.original_mel.data());
    }

    #[test]
    fn request_validation_catches_mismatches() {
        let model = toy_model();
        let mut req = request(&model);
        req.insert_phoneme_range = 2..9;
        assert!(matches!(req.validate(), Err(Error::Input(_))));

        let mut req = request(&model);
        req.new_text = PhonemeSequence::new(vec![1, 9, 7, 8, 3, 4], vec![0, 0, 1, 1, 2, 2])
            .unwrap();
        assert!(matches!(req.validate(), Err(Error::Input(_))));
    }

    #[test]
    fn splice_matches_naive_concatenation() {
        let mut rng = RngStream::new(21, "splice");
        for case in 0..50 {
            let t0 = 2 + case % 5;
            let l = case % (t0 + 1);
            let ins = case % 4;
            let n_mels = 3;
            let original: Tensor<f32> = rng.normal(vec![t0, n_mels]);
            let segment: Option<Tensor<f32>> = if ins > 0 {
                Some(rng.normal(vec![ins, n_mels]))
            } else {
                None
            };
            let plan = SplicePlan {
                left_frames: l,
                insert_frames: ins,
                right_frames: t0 - l,
            };
            let got = splice(&original, segment.as_ref(), &plan).unwrap();

            let mut want: Vec<f32> = Vec::new();
            want.extend_from_slice(&original.data()[..l * n_mels]);
            if let Some(s) = &segment {
                want.extend_from_slice(s.data());
            }
            want.extend_from_slice(&original.data()[l * n_mels..]);
            assert_eq!(got.data(), &want[..]);
        }
    }

    #[test]
    fn splice_rejects_inconsistent_plans() {
        let mut rng = RngStream::new(22, "splice");
        let original: Tensor<f32> = rng.normal(vec![4, 3]);
        let seg: Tensor<f32> = rng.normal(vec![2, 3]);
        let bad_plan = SplicePlan {
            left_frames: 3,
            insert_frames: 2,
            right_frames: 3,
        };
        assert!(matches!(
            splice(&original, Some(&seg), &bad_plan),
            Err(Error::Input(_))
        ));
        let plan = SplicePlan {
            left_frames: 2,
            insert_frames: 1,
            right_frames: 2,
        };
        assert!(matches!(
            splice(&original, Some(&seg), &plan),
            Err(Error::Input(_))
        ));
    }
}
