//! Model assembly: global factor encoder, phoneme encoder with style
//! injection, variance adaptor with length regulation and prosody-context
//! conditioning, and the link-attention mel decoder.

pub mod types;

pub use types::{
    GlobalFactorTokens, ModelConfig, PhonemeSequence, ProsodyContext, ProsodyTrack,
    ReferenceFeature,
};

use crate::alignment::AlignmentParams;
use crate::error::{Error, Result};
use crate::layers::{
    cross_attention_module, fft_block, link_attention_block, positional_encoding,
    variance_predictor, Conv1dParams, CrossAttentionModuleParams, Ctx, FftBlockParams,
    LinearParams, LinkAttentionBlockParams, ParamId, ParamStore, VariancePredictorParams,
};
use crate::numerics::{Real, RngStream, Tape, Var};

/// Layer handles into the parameter store. Reconstructible from the config
/// alone; construction order defines parameter identity.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub prototypes: ParamId,
    pub gfe_modules: Vec<CrossAttentionModuleParams>,
    pub gfe_proj: LinearParams,
    pub embedding: ParamId,
    pub encoder_blocks: Vec<FftBlockParams>,
    pub dur_predictor: VariancePredictorParams,
    pub pitch_predictor: VariancePredictorParams,
    pub energy_predictor: VariancePredictorParams,
    pub dur_embed: Conv1dParams,
    pub pitch_embed: Conv1dParams,
    pub energy_embed: Conv1dParams,
    pub decoder_blocks: Vec<LinkAttentionBlockParams>,
    pub linking_keys: ParamId,
    pub mel_out: LinearParams,
    pub align: AlignmentParams,
}

/// The full synthesis model: config, parameters, and layer handles.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub arch: Architecture,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed, "init");
        let arch = Self::build(&cfg, &mut store, &mut rng)?;
        Ok(Model { cfg, store, arch })
    }

    fn build(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
    ) -> Result<Architecture> {
        let proto_std = (1.0 / cfg.gfe_channels as f64).sqrt();
        let prototypes = store.normal(
            "gfe.prototypes",
            rng,
            vec![cfg.m, cfg.gfe_channels],
            proto_std,
        );
        let gfe_modules = (0..cfg.l_s)
            .map(|i| {
                CrossAttentionModuleParams::init(
                    store,
                    rng,
                    &format!("gfe.module{i}"),
                    cfg.m,
                    cfg.gfe_channels,
                    cfg.ref_feat_dim,
                    cfg.gfe_ffn_hidden,
                    cfg.n_heads,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let gfe_proj = LinearParams::init(store, rng, "gfe.proj", cfg.gfe_channels, cfg.d_model);

        let embedding = store.normal(
            "encoder.embedding",
            rng,
            vec![cfg.phoneme_vocab, cfg.d_model],
            0.3,
        );
        let encoder_blocks = (0..cfg.l_e)
            .map(|i| {
                FftBlockParams::init(
                    store,
                    rng,
                    &format!("encoder.block{i}"),
                    cfg.d_model,
                    cfg.ffn_hidden,
                    cfg.n_heads,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let predictor = |store: &mut ParamStore<T>, rng: &mut RngStream, name: &str| {
            VariancePredictorParams::init(
                store,
                rng,
                name,
                cfg.d_model,
                cfg.predictor_hidden,
                cfg.predictor_dropout,
            )
        };
        let dur_predictor = predictor(store, rng, "variance.duration");
        let pitch_predictor = predictor(store, rng, "variance.pitch");
        let energy_predictor = predictor(store, rng, "variance.energy");

        let embed = |store: &mut ParamStore<T>, rng: &mut RngStream, name: &str| {
            Conv1dParams::init(store, rng, name, 1, cfg.d_model, 3, 1, 1)
        };
        let dur_embed = embed(store, rng, "variance.dur_embed");
        let pitch_embed = embed(store, rng, "variance.pitch_embed");
        let energy_embed = embed(store, rng, "variance.energy_embed");

        let decoder_blocks = (0..cfg.l_d)
            .map(|i| {
                LinkAttentionBlockParams::init(
                    store,
                    rng,
                    &format!("decoder.block{i}"),
                    cfg.d_model,
                    cfg.ffn_hidden,
                    cfg.n_heads,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let key_std = (1.0 / cfg.d_model as f64).sqrt();
        let linking_keys = store.normal(
            "decoder.linking_keys",
            rng,
            vec![cfg.m, cfg.d_model],
            key_std,
        );
        let mel_out = LinearParams::init(store, rng, "decoder.mel_out", cfg.d_model, cfg.n_mels);

        let align = AlignmentParams::init(
            store,
            rng,
            "align",
            cfg.n_mels,
            cfg.d_model,
            cfg.align_dim,
        );

        Ok(Architecture {
            prototypes,
            gfe_modules,
            gfe_proj,
            embedding,
            encoder_blocks,
            dur_predictor,
            pitch_predictor,
            energy_predictor,
            dur_embed,
            pitch_embed,
            energy_embed,
            decoder_blocks,
            linking_keys,
            mel_out,
            align,
        })
    }

    /// Prototype tokens queried through the cross-attention stack against
    /// the reference feature, then projected to decoder width. `[m, d_model]`.
    pub fn encode_global_factors(
        &self,
        ctx: &mut Ctx<T>,
        feat: &ReferenceFeature<T>,
    ) -> Result<Var> {
        if feat.frames() == 0 {
            return Err(Error::Contract("empty reference feature".into()));
        }
        if feat.dim() != self.cfg.ref_feat_dim {
            return Err(Error::Dimension(format!(
                "reference feature dim {} but model expects {}",
                feat.dim(),
                self.cfg.ref_feat_dim
            )));
        }
        let f = ctx.tape.constant(&feat.0);
        let mut z = ctx.p(self.arch.prototypes);
        for module in &self.arch.gfe_modules {
            z = cross_attention_module(ctx, module, z, f)?;
        }
        self.arch.gfe_proj.forward(ctx, z)
    }

    /// Raw embedding lookup (no positional encoding, no style); also the
    /// phoneme-side input of the alignment module.
    pub fn embed_phonemes_raw(&self, ctx: &mut Ctx<T>, seq: &PhonemeSequence) -> Result<Var> {
        let table = ctx.p(self.arch.embedding);
        ctx.tape.embedding(table, seq.ids())
    }

    /// Embedding + positional encoding + style token broadcast, then the
    /// feed-forward transformer stack. `[n, d_model]`.
    pub fn encode_phonemes(
        &self,
        ctx: &mut Ctx<T>,
        seq: &PhonemeSequence,
        tokens: Var,
    ) -> Result<Var> {
        let emb = self.embed_phonemes_raw(ctx, seq)?;
        let pe = positional_encoding::<T>(seq.len(), self.cfg.d_model);
        let pe = ctx.tape.constant(&pe);
        let mut x = ctx.tape.add(emb, pe)?;

        // style injection: the first token is added to every position
        let s1 = ctx.tape.gather_rows(tokens, &[0])?;
        let s1 = ctx.tape.reshape(s1, vec![self.cfg.d_model])?;
        x = ctx.tape.add_row(x, s1)?;

        for blk in &self.arch.encoder_blocks {
            x = fft_block(ctx, blk, x, None)?;
        }
        Ok(x)
    }

    /// Scalar track `[n]` embedded by a kernel-3 convolution to `[n, d_model]`,
    /// with rows at masked positions forced back to zero.
    fn embed_track(
        &self,
        ctx: &mut Ctx<T>,
        conv: &Conv1dParams,
        track: Var,
        masked_rows: Option<&[bool]>,
    ) -> Result<Var> {
        let n = ctx.tape.numel(track);
        let col = ctx.tape.reshape(track, vec![n, 1])?;
        let emb = conv.forward(ctx, col)?;
        match masked_rows {
            Some(mask) => {
                let coef: Vec<T> = mask
                    .iter()
                    .map(|&m| if m { T::zero() } else { T::one() })
                    .collect();
                ctx.tape.mul_rows(emb, &coef)
            }
            None => Ok(emb),
        }
    }

    /// Variance adaptor. Predicts per-phoneme log-duration, pitch, and
    /// energy from the (optionally context-conditioned) encoder output,
    /// adds pitch/energy embeddings, and length-regulates.
    pub fn variance_adapt(
        &self,
        ctx: &mut Ctx<T>,
        h: Var,
        prosody_ctx: Option<&ProsodyContext<T>>,
        teacher: Option<&ProsodyTrack<T>>,
        mode: VarianceMode,
    ) -> Result<VarianceOutput> {
        let n = ctx.tape.shape(h)[0];

        let base = match prosody_ctx {
            Some(pc) => {
                if pc.len() != n {
                    return Err(Error::Input(format!(
                        "prosody context covers {} phonemes, input has {n}",
                        pc.len()
                    )));
                }
                pc.validate()?;
                // duration context in log(1+d) to match the regression domain
                let d_log: Vec<T> = pc
                    .d_ctx
                    .iter()
                    .map(|&d| (d + T::one()).ln())
                    .collect();
                let dv = ctx.tape.leaf_data(vec![n], d_log, false);
                let pv = ctx.tape.leaf_data(vec![n], pc.p_ctx.clone(), false);
                let ev = ctx.tape.leaf_data(vec![n], pc.e_ctx.clone(), false);
                let de = self.embed_track(ctx, &self.arch.dur_embed, dv, Some(&pc.mask))?;
                let pe = self.embed_track(ctx, &self.arch.pitch_embed, pv, Some(&pc.mask))?;
                let ee = self.embed_track(ctx, &self.arch.energy_embed, ev, Some(&pc.mask))?;
                let x = ctx.tape.add(h, de)?;
                let x = ctx.tape.add(x, pe)?;
                ctx.tape.add(x, ee)?
            }
            None => h,
        };

        let d_hat = variance_predictor(ctx, &self.arch.dur_predictor, base)?;
        let p_hat = variance_predictor(ctx, &self.arch.pitch_predictor, base)?;
        let e_hat = variance_predictor(ctx, &self.arch.energy_predictor, base)?;

        let need_teacher = !matches!(mode, VarianceMode::Infer);
        let teacher = match (need_teacher, teacher) {
            (true, None) => {
                return Err(Error::Contract(
                    "teacher prosody required outside infer mode".into(),
                ))
            }
            (_, t) => t,
        };
        if let Some(t) = teacher {
            if t.len() != n {
                return Err(Error::Input(format!(
                    "teacher prosody covers {} phonemes, input has {n}",
                    t.len()
                )));
            }
        }

        // which positions take predicted values instead of teacher values
        let predict: Vec<bool> = match &mode {
            VarianceMode::Train => vec![false; n],
            VarianceMode::Infer => vec![true; n],
            VarianceMode::Inpaint { predict } => {
                if predict.len() != n {
                    return Err(Error::Input(format!(
                        "inpaint mask covers {} phonemes, input has {n}",
                        predict.len()
                    )));
                }
                predict.clone()
            }
        };

        let predicted_durations = self.discretize_durations(ctx.tape.value(d_hat));
        let mut durations = Vec::with_capacity(n);
        for i in 0..n {
            if predict[i] {
                durations.push(predicted_durations[i]);
            } else {
                let d = teacher.expect("teacher checked above").duration[i];
                if d < 0 {
                    return Err(Error::Input(format!("negative teacher duration {d}")));
                }
                durations.push(d as usize);
            }
        }
        if durations.iter().sum::<usize>() == 0 {
            return Err(Error::Contract(
                "length regulation needs at least one frame".into(),
            ));
        }

        // pitch/energy values feeding the embeddings: predictions where
        // `predict`, teacher values elsewhere
        let mix = |ctx: &mut Ctx<T>, pred: Var, teach: Option<&[T]>| -> Result<Var> {
            if predict.iter().all(|&p| p) {
                return Ok(pred);
            }
            let teach = teach.expect("teacher checked above");
            let coef: Vec<T> = predict
                .iter()
                .map(|&p| if p { T::one() } else { T::zero() })
                .collect();
            let masked_pred = {
                let col = ctx.tape.reshape(pred, vec![n, 1])?;
                let kept = ctx.tape.mul_rows(col, &coef)?;
                ctx.tape.reshape(kept, vec![n])?
            };
            let teach_masked: Vec<T> = teach
                .iter()
                .zip(&predict)
                .map(|(&v, &p)| if p { T::zero() } else { v })
                .collect();
            let tv = ctx.tape.leaf_data(vec![n], teach_masked, false);
            ctx.tape.add(masked_pred, tv)
        };
        let pitch_in = mix(ctx, p_hat, teacher.map(|t| t.pitch.as_slice()))?;
        let energy_in = mix(ctx, e_hat, teacher.map(|t| t.energy.as_slice()))?;

        let pe = self.embed_track(ctx, &self.arch.pitch_embed, pitch_in, None)?;
        let ee = self.embed_track(ctx, &self.arch.energy_embed, energy_in, None)?;
        let x = ctx.tape.add(base, pe)?;
        let x = ctx.tape.add(x, ee)?;

        let h_reg = length_regulate(&mut ctx.tape, x, &durations)?;
        Ok(VarianceOutput {
            h_reg,
            d_hat,
            p_hat,
            e_hat,
            durations,
        })
    }

    /// Inverse of the log(1+d) regression target, rounded and clamped to
    /// `[1, max_duration]`.
    pub fn discretize_durations(&self, d_hat: &[T]) -> Vec<usize> {
        d_hat
            .iter()
            .map(|&v| {
                let frames = (v.as_f64().exp() - 1.0).round();
                (frames.max(1.0) as usize).min(self.cfg.max_duration)
            })
            .collect()
    }

    /// Positional encoding, the link-attention stack, and the mel head.
    /// `[t, d_model] -> [t, n_mels]`.
    pub fn decode_mel(&self, ctx: &mut Ctx<T>, h_reg: Var, tokens: Var) -> Result<Var> {
        let t = ctx.tape.shape(h_reg)[0];
        let pe = positional_encoding::<T>(t, self.cfg.d_model);
        let pe = ctx.tape.constant(&pe);
        let mut x = ctx.tape.add(h_reg, pe)?;
        let keys = ctx.p(self.arch.linking_keys);
        for blk in &self.arch.decoder_blocks {
            x = link_attention_block(ctx, blk, x, tokens, keys, None)?;
        }
        self.arch.mel_out.forward(ctx, x)
    }

    /// Global tokens as a plain tensor (eval mode), for similarity reports.
    pub fn extract_tokens(&self, feat: &ReferenceFeature<T>) -> Result<GlobalFactorTokens<T>> {
        let mut ctx = Ctx::eval(&self.store);
        let s = self.encode_global_factors(&mut ctx, feat)?;
        Ok(GlobalFactorTokens(ctx.tape.to_tensor(s)))
    }
}

/// Duration switch for the variance adaptor: teacher everywhere (train),
/// predictions everywhere (infer), or a per-position mix (insertion).
#[derive(Debug, Clone)]
pub enum VarianceMode {
    Train,
    Infer,
    Inpaint { predict: Vec<bool> },
}

pub struct VarianceOutput {
    /// Length-regulated hidden sequence `[sum(durations), d_model]`.
    pub h_reg: Var,
    /// Per-phoneme log(1+frames) duration prediction.
    pub d_hat: Var,
    pub p_hat: Var,
    pub e_hat: Var,
    /// The durations actually used for length regulation.
    pub durations: Vec<usize>,
}

/// Repeat row `i` of `h` `durations[i]` times, in order. Zero-duration rows
/// are dropped.
pub fn length_regulate<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    durations: &[usize],
) -> Result<Var> {
    let rows = tape.shape(h)[0];
    if durations.len() != rows {
        return Err(Error::Dimension(format!(
            "{} durations for {rows} rows",
            durations.len()
        )));
    }
    let total: usize = durations.iter().sum();
    if total == 0 {
        return Err(Error::Contract(
            "length regulation needs at least one frame".into(),
        ));
    }
    let mut idx = Vec::with_capacity(total);
    for (i, &d) in durations.iter().enumerate() {
        idx.extend(std::iter::repeat(i).take(d));
    }
    tape.gather_rows(h, &idx)
}
