use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Architecture constants. Paper-scale values are the defaults; `toy()` and
/// `gradcheck()` shrink everything for fast runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Global factor token count.
    pub m: usize,
    /// Phoneme encoder depth.
    pub l_e: usize,
    /// Mel decoder depth.
    pub l_d: usize,
    /// Global factor encoder depth.
    pub l_s: usize,
    pub d_model: usize,
    pub ffn_hidden: usize,
    /// Channels inside the global factor encoder.
    pub gfe_channels: usize,
    pub gfe_ffn_hidden: usize,
    pub n_heads: usize,
    pub n_mels: usize,
    pub phoneme_vocab: usize,
    /// Cap on a single phoneme's predicted duration, in frames.
    pub max_duration: usize,
    /// Reference feature width (stand-in for a self-supervised feature).
    pub ref_feat_dim: usize,
    /// Shared space for the alignment projections.
    pub align_dim: usize,
    pub predictor_hidden: usize,
    pub predictor_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            m: 60,
            l_e: 6,
            l_d: 6,
            l_s: 3,
            d_model: 384,
            ffn_hidden: 1536,
            gfe_channels: 192,
            gfe_ffn_hidden: 512,
            n_heads: 2,
            n_mels: 20,
            phoneme_vocab: 40,
            max_duration: 50,
            ref_feat_dim: 32,
            align_dim: 32,
            predictor_hidden: 256,
            predictor_dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// Desk-scale config for overfit and adaptation runs.
    pub fn toy() -> Self {
        ModelConfig {
            m: 8,
            l_e: 2,
            l_d: 2,
            l_s: 2,
            d_model: 32,
            ffn_hidden: 128,
            gfe_channels: 16,
            gfe_ffn_hidden: 32,
            n_heads: 2,
            n_mels: 20,
            phoneme_vocab: 40,
            max_duration: 50,
            ref_feat_dim: 32,
            align_dim: 16,
            predictor_hidden: 32,
            predictor_dropout: 0.1,
        }
    }

    /// Minimal config for double-precision gradient checks.
    pub fn gradcheck() -> Self {
        ModelConfig {
            m: 4,
            l_e: 2,
            l_d: 2,
            l_s: 1,
            d_model: 8,
            ffn_hidden: 16,
            gfe_channels: 8,
            gfe_ffn_hidden: 16,
            n_heads: 2,
            n_mels: 6,
            phoneme_vocab: 10,
            max_duration: 20,
            ref_feat_dim: 5,
            align_dim: 4,
            predictor_hidden: 8,
            predictor_dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("m", self.m),
            ("l_e", self.l_e),
            ("l_d", self.l_d),
            ("l_s", self.l_s),
            ("d_model", self.d_model),
            ("ffn_hidden", self.ffn_hidden),
            ("gfe_channels", self.gfe_channels),
            ("gfe_ffn_hidden", self.gfe_ffn_hidden),
            ("n_heads", self.n_heads),
            ("n_mels", self.n_mels),
            ("phoneme_vocab", self.phoneme_vocab),
            ("max_duration", self.max_duration),
            ("ref_feat_dim", self.ref_feat_dim),
            ("align_dim", self.align_dim),
            ("predictor_hidden", self.predictor_hidden),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.gfe_channels % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "gfe_channels {} not divisible by n_heads {}",
                self.gfe_channels, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.predictor_dropout) {
            return Err(Error::Config("predictor_dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Phoneme ids plus the word each phoneme belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSequence {
    ids: Vec<usize>,
    word_index: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, word_index: Vec<usize>) -> Result<Self> {
        if ids.is_empty() || ids.len() != word_index.len() {
            return Err(Error::Input(format!(
                "phoneme ids ({}) and word indices ({}) must be non-empty and equal",
                ids.len(),
                word_index.len()
            )));
        }
        if word_index[0] != 0 {
            return Err(Error::Input("word indices must start at 0".into()));
        }
        for w in word_index.windows(2) {
            if w[1] != w[0] && w[1] != w[0] + 1 {
                return Err(Error::Input(
                    "word indices must be non-decreasing without gaps".into(),
                ));
            }
        }
        Ok(PhonemeSequence { ids, word_index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn word_index(&self) -> &[usize] {
        &self.word_index
    }

    pub fn word_count(&self) -> usize {
        self.word_index.last().map_or(0, |&w| w + 1)
    }

    /// Phoneme index range covering words `start..=end` (inclusive).
    pub fn phonemes_of_words(&self, start: usize, end: usize) -> std::ops::Range<usize> {
        let lo = self.word_index.iter().position(|&w| w == start).unwrap_or(0);
        let hi = self
            .word_index
            .iter()
            .rposition(|&w| w == end)
            .map_or(lo, |i| i + 1);
        lo..hi
    }
}

/// Phoneme-level prosody: integer frame durations plus normalized pitch and
/// energy values.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyTrack<T: Real> {
    pub duration: Vec<i64>,
    pub pitch: Vec<T>,
    pub energy: Vec<T>,
}

impl<T: Real> ProsodyTrack<T> {
    pub fn new(duration: Vec<i64>, pitch: Vec<T>, energy: Vec<T>) -> Result<Self> {
        if duration.len() != pitch.len() || pitch.len() != energy.len() {
            return Err(Error::Input(format!(
                "prosody track lengths disagree: {} / {} / {}",
                duration.len(),
                pitch.len(),
                energy.len()
            )));
        }
        Ok(ProsodyTrack {
            duration,
            pitch,
            energy,
        })
    }

    pub fn len(&self) -> usize {
        self.duration.len()
    }

    pub fn is_empty(&self) -> bool {
        self.duration.is_empty()
    }

    pub fn total_frames(&self) -> Result<usize> {
        let mut sum = 0usize;
        for &d in &self.duration {
            if d < 0 {
                return Err(Error::Input(format!("negative duration {d}")));
            }
            sum += d as usize;
        }
        Ok(sum)
    }

    pub fn durations_usize(&self) -> Result<Vec<usize>> {
        self.duration
            .iter()
            .map(|&d| {
                if d < 0 {
                    Err(Error::Input(format!("negative duration {d}")))
                } else {
                    Ok(d as usize)
                }
            })
            .collect()
    }
}

/// Prosody context for inpainting: the known tracks with masked positions
/// forced to zero. `mask[i] == true` means position `i` is unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyContext<T: Real> {
    pub d_ctx: Vec<T>,
    pub p_ctx: Vec<T>,
    pub e_ctx: Vec<T>,
    pub mask: Vec<bool>,
}

impl<T: Real> ProsodyContext<T> {
    /// Build from a track, zeroing the masked positions.
    pub fn masked(track: &ProsodyTrack<T>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != track.len() {
            return Err(Error::Input(format!(
                "mask length {} for {} phonemes",
                mask.len(),
                track.len()
            )));
        }
        let zero_if = |masked: bool, v: T| if masked { T::zero() } else { v };
        Ok(ProsodyContext {
            d_ctx: track
                .duration
                .iter()
                .zip(&mask)
                .map(|(&d, &m)| zero_if(m, T::of(d as f64)))
                .collect(),
            p_ctx: track
                .pitch
                .iter()
                .zip(&mask)
                .map(|(&p, &m)| zero_if(m, p))
                .collect(),
            e_ctx: track
                .energy
                .iter()
                .zip(&mask)
                .map(|(&e, &m)| zero_if(m, e))
                .collect(),
            mask,
        })
    }

    /// Fully unmasked context carrying the whole track.
    pub fn full(track: &ProsodyTrack<T>) -> Self {
        Self::masked(track, vec![false; track.len()]).expect("lengths match")
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mask.len();
        if self.d_ctx.len() != n || self.p_ctx.len() != n || self.e_ctx.len() != n {
            return Err(Error::Input("context track lengths disagree".into()));
        }
        for i in 0..n {
            if self.mask[i]
                && (self.d_ctx[i] != T::zero()
                    || self.p_ctx[i] != T::zero()
                    || self.e_ctx[i] != T::zero())
            {
                return Err(Error::Input(format!(
                    "masked position {i} carries non-zero context"
                )));
            }
        }
        Ok(())
    }
}

/// Reference feature sequence the global factor encoder queries, `[t_f, c_f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFeature<T: Real>(pub Tensor<T>);

impl<T: Real> ReferenceFeature<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.shape().len() != 2 || t.shape()[0] < 1 {
            return Err(Error::Input(format!(
                "reference feature must be [t_f, c_f], got {:?}",
                t.shape()
            )));
        }
        Ok(ReferenceFeature(t))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }
}

/// The extracted global factor token set `[m, d_model]`. Row 0 is the
/// designated style token added to every phoneme encoder input.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFactorTokens<T: Real>(pub Tensor<T>);

impl<T: Real> GlobalFactorTokens<T> {
    pub fn token_count(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn style_token(&self) -> &[T] {
        self.0.row(0)
    }

    /// Mean over tokens; used for speaker-similarity reporting.
    pub fn mean_pooled(&self) -> Vec<T> {
        let (m, d) = (self.0.shape()[0], self.0.shape()[1]);
        let mut out = vec![T::zero(); d];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(self.0.row(i)) {
                *o = *o + v;
            }
        }
        let mn = T::of(m as f64);
        for o in &mut out {
            *o = *o / mn;
        }
        out
    }
}
