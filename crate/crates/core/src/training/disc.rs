use crate::error::{Error, Result};
use crate::layers::{Conv1dParams, Ctx, LinearParams, ParamId, ParamStore};
use crate::numerics::{Real, RngStream, Tape, Var};

const LEAKY_SLOPE: f64 = 0.2;

/// Strided convolutional critic over fixed-length mel chunks. Every
/// intermediate activation is exposed for the feature-matching loss.
#[derive(Debug, Clone)]
pub struct DiscriminatorParams {
    pub convs: Vec<Conv1dParams>,
    pub head: LinearParams,
    pub chunk: usize,
    head_in: usize,
}

impl DiscriminatorParams {
    /// Four stride-2 kernel-5 convolutions (n_mels -> 64 -> 128 -> 256 ->
    /// 256) and a dense scalar head.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        n_mels: usize,
        chunk: usize,
    ) -> Result<Self> {
        let channels = [n_mels, 64, 128, 256, 256];
        let mut convs = Vec::new();
        let mut t = chunk;
        for i in 0..channels.len() - 1 {
            convs.push(Conv1dParams::init(
                store,
                rng,
                &format!("disc.conv{i}"),
                channels[i],
                channels[i + 1],
                5,
                2,
                2,
            ));
            t = (t + 2 * 2 - 5) / 2 + 1;
            if t == 0 {
                return Err(Error::Config(format!(
                    "chunk of {chunk} frames collapses at conv {i}"
                )));
            }
        }
        let head_in = t * channels[channels.len() - 1];
        let head = LinearParams::init(store, rng, "disc.head", head_in, 1);
        Ok(DiscriminatorParams {
            convs,
            head,
            chunk,
            head_in,
        })
    }

    /// Bind parameters through a `Ctx` (trainable when the ctx is).
    pub fn bind<T: Real>(&self, ctx: &mut Ctx<T>) -> BoundDiscriminator {
        let bind_pair = |ctx: &mut Ctx<T>, w: ParamId, b: ParamId| (ctx.p(w), ctx.p(b));
        BoundDiscriminator {
            convs: self
                .convs
                .iter()
                .map(|c| bind_pair(ctx, c.w, c.b))
                .collect(),
            head: bind_pair(ctx, self.head.w, self.head.b),
        }
    }

    /// Bind parameters as constants on an arbitrary tape (generator step:
    /// gradients flow through the critic but not into it).
    pub fn bind_frozen<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
    ) -> BoundDiscriminator {
        let bind_pair =
            |tape: &mut Tape<T>, w: ParamId, b: ParamId| (tape.constant(store.get(w)), tape.constant(store.get(b)));
        BoundDiscriminator {
            convs: self
                .convs
                .iter()
                .map(|c| bind_pair(tape, c.w, c.b))
                .collect(),
            head: bind_pair(tape, self.head.w, self.head.b),
        }
    }

    /// `x: [chunk, n_mels]` -> scalar score plus per-layer features.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundDiscriminator,
        x: Var,
    ) -> Result<DiscOutput> {
        let shape = tape.shape(x).to_vec();
        if shape[0] != self.chunk {
            return Err(Error::Input(format!(
                "discriminator expects exactly {} frames, got {}",
                self.chunk, shape[0]
            )));
        }
        let mut h = x;
        let mut features = Vec::with_capacity(self.convs.len());
        for (conv, &(w, b)) in self.convs.iter().zip(&bound.convs) {
            h = tape.conv1d(h, w, b, conv.stride, conv.padding)?;
            h = tape.leaky_relu(h, T::of(LEAKY_SLOPE));
            features.push(h);
        }
        let flat = tape.reshape(h, vec![1, self.head_in])?;
        let (hw, hb) = bound.head;
        let scored = tape.matmul(flat, hw)?;
        let scored = tape.add_row(scored, hb)?;
        let score = tape.reshape(scored, vec![1])?;
        Ok(DiscOutput { score, features })
    }
}

/// Parameter vars for one forward pass.
pub struct BoundDiscriminator {
    convs: Vec<(Var, Var)>,
    head: (Var, Var),
}

pub struct DiscOutput {
    /// `[1]` critic score.
    pub score: Var,
    /// Post-activation output of every convolution, shallow to deep.
    pub features: Vec<Var>,
}

/// Pad a `[t, n_mels]` mel with zero rows up to `chunk` frames, or slice the
/// window starting at `start`. Returns the chunk rows on the tape.
pub fn mel_chunk<T: Real>(
    tape: &mut Tape<T>,
    mel: Var,
    start: usize,
    chunk: usize,
) -> Result<Var> {
    let t = tape.shape(mel)[0];
    let n_mels = tape.shape(mel)[1];
    if t >= chunk {
        if start + chunk > t {
            return Err(Error::Input(format!(
                "chunk [{start}, {}) outside {t} frames",
                start + chunk
            )));
        }
        let idx: Vec<usize> = (start..start + chunk).collect();
        tape.gather_rows(mel, &idx)
    } else {
        if start != 0 {
            return Err(Error::Input(format!(
                "padded chunk must start at 0, got {start}"
            )));
        }
        let pad = tape.zeros(vec![chunk - t, n_mels]);
        tape.concat_rows(mel, pad)
    }
}
