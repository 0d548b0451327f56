//! Two-stage training: reconstruction with prosody smoothing, then
//! adversarial refinement with a mel-chunk critic.

pub mod disc;
pub mod lamb;
pub mod loss;
pub mod mask;
pub mod schedule;

pub use disc::{mel_chunk, DiscriminatorParams};
pub use lamb::{clip_grad_norm, lamb_step, LambConfig, LambState};
pub use loss::{
    feature_matching_loss, feature_matching_loss_var, hinge_d_loss, hinge_d_loss_var,
    stage1_loss, stage2_loss, Alphas, Stage1LossBreakdown, Stage1Pred, Stage1Target,
    DEFAULT_ALPHAS, DEFAULT_LAMBDA,
};
pub use mask::{sample_prosody_mask, MaskSpec};
pub use schedule::{poly_lr, PolySchedule};

use crate::alignment::{
    expand_track, extract_durations, pool_phoneme_prosody, soft_alignment, FrameProsody,
};
use crate::error::{Error, Result};
use crate::layers::{Ctx, ParamStore};
use crate::model::{
    Model, PhonemeSequence, ProsodyContext, ProsodyTrack, ReferenceFeature, VarianceMode,
};
use crate::numerics::{RngStream, Tensor, Var};

/// Optimization constants for both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub stage1: PolySchedule,
    pub stage2: StageTwoSchedule,
    /// Duration, pitch, energy, alignment weights.
    pub alpha: Alphas,
    /// Feature-loss weight in the stage-two objective.
    pub lambda_feat: f64,
    pub mask_probability: f64,
    pub mask_span_words: usize,
    /// Critic input length in frames.
    pub disc_chunk: usize,
    pub grad_clip: f64,
    pub lamb_eps: f64,
    pub trust_clip: f64,
    /// Use corpus oracle durations instead of the learned alignment.
    pub oracle_alignment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.98,
            stage1: PolySchedule::default(),
            stage2: StageTwoSchedule::default(),
            alpha: DEFAULT_ALPHAS,
            lambda_feat: DEFAULT_LAMBDA,
            mask_probability: 0.5,
            mask_span_words: 3,
            disc_chunk: 32,
            grad_clip: 1.0,
            lamb_eps: 1e-6,
            trust_clip: 10.0,
            oracle_alignment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.disc_chunk == 0 || self.mask_span_words == 0 {
            return Err(Error::Config(
                "batch_size, disc_chunk, mask_span_words must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_probability) {
            return Err(Error::Config("mask_probability must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn lamb(&self) -> LambConfig {
        LambConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.lamb_eps,
            weight_decay: self.weight_decay,
            trust_clip: self.trust_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTwoSchedule {
    pub lr_model: f64,
    pub lr_disc: f64,
    pub steps: u64,
}

impl Default for StageTwoSchedule {
    fn default() -> Self {
        StageTwoSchedule {
            lr_model: 1e-4,
            lr_disc: 5e-5,
            steps: 20_000,
        }
    }
}

/// One training utterance.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub speaker: usize,
    pub seq: PhonemeSequence,
    pub mel: Tensor<f32>,
    pub oracle: ProsodyTrack<f32>,
    pub feat: ReferenceFeature<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<TrainSample>,
}

impl Dataset {
    pub fn validate(&self, cfg: &crate::model::ModelConfig) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Input("dataset is empty".into()));
        }
        for s in &self.samples {
            if s.mel.shape()[1] != cfg.n_mels {
                return Err(Error::Input(format!(
                    "{}: mel has {} channels, model expects {}",
                    s.id,
                    s.mel.shape()[1],
                    cfg.n_mels
                )));
            }
            if s.feat.dim() != cfg.ref_feat_dim {
                return Err(Error::Input(format!(
                    "{}: feature dim {} vs model {}",
                    s.id,
                    s.feat.dim(),
                    cfg.ref_feat_dim
                )));
            }
            if s.oracle.len() != s.seq.len() {
                return Err(Error::Input(format!(
                    "{}: prosody covers {} phonemes, text has {}",
                    s.id,
                    s.oracle.len(),
                    s.seq.len()
                )));
            }
            if s.oracle.total_frames()? != s.mel.shape()[0] {
                return Err(Error::Input(format!(
                    "{}: durations sum to {} but mel has {} frames",
                    s.id,
                    s.oracle.total_frames()?,
                    s.mel.shape()[0]
                )));
            }
            if let Some(&bad) = s.seq.ids().iter().find(|&&i| i >= cfg.phoneme_vocab) {
                return Err(Error::Input(format!(
                    "{}: phoneme id {bad} outside vocabulary {}",
                    s.id, cfg.phoneme_vocab
                )));
            }
        }
        Ok(())
    }
}

/// The deterministic random streams a run consumes. Counters are part of
/// the checkpoint so a resumed run continues the exact sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct RngSet {
    pub data: RngStream,
    pub mask: RngStream,
    pub dropout: RngStream,
    pub chunk: RngStream,
}

impl RngSet {
    pub fn new(seed: u64) -> Self {
        RngSet {
            data: RngStream::new(seed, "data"),
            mask: RngStream::new(seed, "mask"),
            dropout: RngStream::new(seed, "dropout"),
            chunk: RngStream::new(seed, "chunk"),
        }
    }
}

/// Per-step scalars, one metrics line each.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    pub s1: Stage1LossBreakdown,
    pub d_loss: Option<f64>,
    pub feat_loss: Option<f64>,
    pub total: f64,
    pub padded_chunks: usize,
    pub wall_ms: u128,
}

impl StepMetrics {
    pub fn log_line(&self) -> String {
        let mut line = format!(
            "step={} stage={} lr={} mel={} dur={} pitch={} energy={} align={}",
            self.step,
            self.stage,
            self.lr,
            self.s1.mel_mse,
            self.s1.dur_mse,
            self.s1.pitch_mse,
            self.s1.energy_mse,
            self.s1.align_loss
        );
        if let (Some(d), Some(f)) = (self.d_loss, self.feat_loss) {
            line.push_str(&format!(" d_loss={d} feat={f} padded={}", self.padded_chunks));
        }
        line.push_str(&format!(" total={} wall_ms={}", self.total, self.wall_ms));
        line
    }

    /// Log line minus the wall-clock field, for resume-equivalence checks.
    pub fn deterministic_line(&self) -> String {
        strip_walltime(&self.log_line())
    }
}

pub fn strip_walltime(line: &str) -> String {
    match line.rsplit_once(" wall_ms=") {
        Some((head, _)) => head.to_string(),
        None => line.to_string(),
    }
}

/// Critic parameters, their store, and optimizer state.
#[derive(Debug, Clone)]
pub struct DiscBundle {
    pub store: ParamStore<f32>,
    pub params: DiscriminatorParams,
    pub opt: LambState<f32>,
}

impl DiscBundle {
    pub fn new(n_mels: usize, chunk: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed, "disc-init");
        let params = DiscriminatorParams::init(&mut store, &mut rng, n_mels, chunk)?;
        let opt = LambState::new(&store);
        Ok(DiscBundle { store, params, opt })
    }
}

/// Teacher prosody for one sample: either the corpus oracle or the current
/// hard alignment path with pooled frame-level pitch/energy.
fn teacher_track(
    oracle_alignment: bool,
    sample: &TrainSample,
    log_a: &Tensor<f32>,
) -> Result<ProsodyTrack<f32>> {
    if oracle_alignment {
        return Ok(sample.oracle.clone());
    }
    let durations = extract_durations(log_a)?;
    let oracle_durations = sample.oracle.durations_usize()?;
    let frames = FrameProsody {
        frame_pitch: expand_track(&sample.oracle.pitch, &oracle_durations),
        frame_energy: expand_track(&sample.oracle.energy, &oracle_durations),
    };
    let (pitch, energy) = pool_phoneme_prosody(&frames, &durations)?;
    ProsodyTrack::new(durations.iter().map(|&d| d as i64).collect(), pitch, energy)
}

/// Owns everything a run mutates: model, optimizer, streams, and (stage
/// two) the critic.
pub struct Trainer {
    pub model: Model<f32>,
    pub tcfg: TrainConfig,
    pub stage: u8,
    /// Completed steps within the current stage.
    pub step: u64,
    pub opt: LambState<f32>,
    pub rngs: RngSet,
    pub disc: Option<DiscBundle>,
}

impl Trainer {
    pub fn stage1(model: Model<f32>, tcfg: TrainConfig) -> Result<Self> {
        tcfg.validate()?;
        let opt = LambState::new(&model.store);
        let rngs = RngSet::new(tcfg.seed);
        Ok(Trainer {
            model,
            tcfg,
            stage: 1,
            step: 0,
            opt,
            rngs,
            disc: None,
        })
    }

    /// Enter stage two from a reconstruction-trained model: fresh critic,
    /// fresh optimizer state, fresh stage-local streams.
    pub fn stage2(model: Model<f32>, tcfg: TrainConfig) -> Result<Self> {
        tcfg.validate()?;
        let disc = DiscBundle::new(model.cfg.n_mels, tcfg.disc_chunk, tcfg.seed)?;
        let opt = LambState::new(&model.store);
        let rngs = RngSet::new(tcfg.seed.wrapping_add(1));
        Ok(Trainer {
            model,
            tcfg,
            stage: 2,
            step: 0,
            opt,
            rngs,
            disc: Some(disc),
        })
    }

    /// Run `steps` more steps, reporting each step's metrics.
    pub fn run(
        &mut self,
        data: &Dataset,
        steps: u64,
        mut observer: impl FnMut(&StepMetrics) -> Result<()>,
    ) -> Result<()> {
        data.validate(&self.model.cfg)?;
        for _ in 0..steps {
            let metrics = match self.stage {
                1 => self.step_stage1(data)?,
                2 => self.step_stage2(data)?,
                s => return Err(Error::Config(format!("unknown stage {s}"))),
            };
            observer(&metrics)?;
        }
        Ok(())
    }


    /// Teacher-forced forward of one sample, returning the loss vars.
    fn forward_sample(
        ctx: &mut Ctx<f32>,
        model: &Model<f32>,
        tcfg: &TrainConfig,
        sample: &TrainSample,
        mask: &MaskSpec,
        teacher_of: impl Fn(&Tensor<f32>) -> Result<ProsodyTrack<f32>>,
    ) -> Result<(loss::Stage1Loss, Var)> {
        let mel_const = ctx.tape.constant(&sample.mel);
        let phon_raw = model.embed_phonemes_raw(ctx, &sample.seq)?;
        let align = soft_alignment(ctx, &model.arch.align, mel_const, phon_raw)?;
        let log_a_t = ctx.tape.to_tensor(align.log_a);
        let teacher = teacher_of(&log_a_t)?;

        let prosody_ctx = ProsodyContext::masked(&teacher, mask.phoneme_mask.clone())?;
        let tokens = model.encode_global_factors(ctx, &sample.feat)?;
        let h = model.encode_phonemes(ctx, &sample.seq, tokens)?;
        let out = model.variance_adapt(
            ctx,
            h,
            Some(&prosody_ctx),
            Some(&teacher),
            VarianceMode::Train,
        )?;
        let mel_hat = model.decode_mel(ctx, out.h_reg, tokens)?;

        let durations = teacher.durations_usize()?;
        let l = stage1_loss(
            &mut ctx.tape,
            &Stage1Pred {
                mel: mel_hat,
                d_hat: out.d_hat,
                p_hat: out.p_hat,
                e_hat: out.e_hat,
                log_a: align.log_a,
            },
            &Stage1Target {
                mel: &sample.mel,
                durations: &durations,
                pitch: &teacher.pitch,
                energy: &teacher.energy,
            },
            &tcfg.alpha,
        )?;
        Ok((l, mel_hat))
    }

    fn step_stage1(&mut self, data: &Dataset) -> Result<StepMetrics> {
        let start = std::time::Instant::now();
        let oracle_alignment = self.tcfg.oracle_alignment;
        let lr = poly_lr(self.step, &self.tcfg.stage1);
        let indices = self
            .rngs
            .data
            .indices(self.tcfg.batch_size, data.samples.len());
        let masks: Vec<MaskSpec> = indices
            .iter()
            .map(|&i| {
                sample_prosody_mask(
                    &data.samples[i].seq,
                    &mut self.rngs.mask,
                    self.tcfg.mask_probability,
                    self.tcfg.mask_span_words,
                )
            })
            .collect::<Result<_>>()?;

        let mut ctx = Ctx::train(&self.model.store, &mut self.rngs.dropout);
        let mut breakdown = Stage1LossBreakdown::zero();
        let mut batch_total: Option<Var> = None;
        for (&i, mask) in indices.iter().zip(&masks) {
            let sample = &data.samples[i];
            let (l, _) = Self::forward_sample(
                &mut ctx,
                &self.model,
                &self.tcfg,
                sample,
                mask,
                |log_a| teacher_track(oracle_alignment, sample, log_a),
            )?;
            breakdown.add(&l.breakdown(&ctx.tape));
            batch_total = Some(match batch_total {
                Some(prev) => ctx.tape.add(prev, l.total)?,
                None => l.total,
            });
        }
        let scale = 1.0 / indices.len() as f64;
        breakdown.scale(scale);
        let total = ctx.tape.scale(batch_total.expect("non-empty batch"), scale as f32);

        let grads = ctx.collect_grads(total)?;
        drop(ctx);
        self.model.store.record_grads(&grads);
        clip_grad_norm(&mut self.model.store, self.tcfg.grad_clip);
        lamb_step(&mut self.model.store, &mut self.opt, lr, &self.tcfg.lamb())?;
        self.model.store.clear_grads();

        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            stage: 1,
            lr,
            s1: breakdown,
            d_loss: None,
            feat_loss: None,
            total: breakdown.total,
            padded_chunks: 0,
            wall_ms: start.elapsed().as_millis(),
        })
    }

    fn step_stage2(&mut self, data: &Dataset) -> Result<StepMetrics> {
        let start = std::time::Instant::now();
        let oracle_alignment = self.tcfg.oracle_alignment;
        let lr_model = self.tcfg.stage2.lr_model;
        let lr_disc = self.tcfg.stage2.lr_disc;
        let chunk = self.tcfg.disc_chunk;

        let indices = self
            .rngs
            .data
            .indices(self.tcfg.batch_size, data.samples.len());
        let masks: Vec<MaskSpec> = indices
            .iter()
            .map(|&i| {
                sample_prosody_mask(
                    &data.samples[i].seq,
                    &mut self.rngs.mask,
                    self.tcfg.mask_probability,
                    self.tcfg.mask_span_words,
                )
            })
            .collect::<Result<_>>()?;
        let mut padded_chunks = 0usize;
        let starts: Vec<usize> = indices
            .iter()
            .map(|&i| {
                let t = data.samples[i].mel.shape()[0];
                if t > chunk {
                    self.rngs.chunk.below(t - chunk + 1)
                } else {
                    if t < chunk {
                        padded_chunks += 1;
                        log::info!(
                            "utterance {} has {t} < {chunk} frames; zero-padding chunk",
                            data.samples[i].id
                        );
                    }
                    0
                }
            })
            .collect();

        // critic step on detached generator output
        let fakes: Vec<Tensor<f32>> = {
            let mut out = Vec::with_capacity(indices.len());
            for (&i, mask) in indices.iter().zip(&masks) {
                let sample = &data.samples[i];
                let mut ctx = Ctx::eval(&self.model.store);
                let (_, mel_hat) = Self::forward_sample(
                    &mut ctx,
                    &self.model,
                    &self.tcfg,
                    sample,
                    mask,
                    |log_a| teacher_track(oracle_alignment, sample, log_a),
                )?;
                out.push(ctx.tape.to_tensor(mel_hat));
            }
            out
        };

        let disc = self.disc.as_mut().expect("stage two has a critic");
        let mut d_loss_mean;
        {
            let mut dummy = RngStream::new(0, "disc-dropout");
            let mut dctx = Ctx::train(&disc.store, &mut dummy);
            let bound = disc.params.bind(&mut dctx);
            let mut acc: Option<Var> = None;
            for ((&i, fake), &cstart) in indices.iter().zip(&fakes).zip(&starts) {
                let real = dctx.tape.constant(&data.samples[i].mel);
                let fake_v = dctx.tape.constant(fake);
                let real_chunk = mel_chunk(&mut dctx.tape, real, cstart, chunk)?;
                let fake_chunk = mel_chunk(&mut dctx.tape, fake_v, cstart, chunk)?;
                let real_out = disc.params.forward(&mut dctx.tape, &bound, real_chunk)?;
                let fake_out = disc.params.forward(&mut dctx.tape, &bound, fake_chunk)?;
                let h = hinge_d_loss_var(&mut dctx.tape, real_out.score, fake_out.score)?;
                acc = Some(match acc {
                    Some(prev) => dctx.tape.add(prev, h)?,
                    None => h,
                });
            }
            let scale = 1.0 / indices.len() as f32;
            let d_total = dctx.tape.scale(acc.expect("non-empty batch"), scale);
            d_loss_mean = dctx.tape.scalar(d_total) as f64;
            let grads = dctx.collect_grads(d_total)?;
            drop(dctx);
            disc.store.record_grads(&grads);
            clip_grad_norm(&mut disc.store, self.tcfg.grad_clip);
            lamb_step(&mut disc.store, &mut disc.opt, lr_disc, &self.tcfg.lamb())?;
            disc.store.clear_grads();
        }
        if !d_loss_mean.is_finite() {
            return Err(Error::Numeric("critic loss diverged".into()));
        }
        d_loss_mean = d_loss_mean.max(0.0);

        // generator step through the frozen critic
        let disc = self.disc.as_ref().expect("stage two has a critic");
        let mut ctx = Ctx::train(&self.model.store, &mut self.rngs.dropout);
        let frozen = disc.params.bind_frozen(&mut ctx.tape, &disc.store);
        let mut breakdown = Stage1LossBreakdown::zero();
        let mut s1_acc: Option<Var> = None;
        let mut feat_acc: Option<Var> = None;
        for ((&i, mask), &cstart) in indices.iter().zip(&masks).zip(&starts) {
            let sample = &data.samples[i];
            let (l, mel_hat) = Self::forward_sample(
                &mut ctx,
                &self.model,
                &self.tcfg,
                sample,
                mask,
                |log_a| teacher_track(oracle_alignment, sample, log_a),
            )?;
            breakdown.add(&l.breakdown(&ctx.tape));
            s1_acc = Some(match s1_acc {
                Some(prev) => ctx.tape.add(prev, l.total)?,
                None => l.total,
            });

            let real = ctx.tape.constant(&sample.mel);
            let real_chunk = mel_chunk(&mut ctx.tape, real, cstart, chunk)?;
            let fake_chunk = mel_chunk(&mut ctx.tape, mel_hat, cstart, chunk)?;
            let real_out = disc.params.forward(&mut ctx.tape, &frozen, real_chunk)?;
            let fake_out = disc.params.forward(&mut ctx.tape, &frozen, fake_chunk)?;
            let fm = feature_matching_loss_var(
                &mut ctx.tape,
                &real_out.features,
                &fake_out.features,
            )?;
            feat_acc = Some(match feat_acc {
                Some(prev) => ctx.tape.add(prev, fm)?,
                None => fm,
            });
        }
        let scale = 1.0 / indices.len() as f32;
        breakdown.scale(scale as f64);
        let s1_mean = ctx.tape.scale(s1_acc.expect("batch"), scale);
        let feat_mean = ctx.tape.scale(feat_acc.expect("batch"), scale);
        let feat_value = ctx.tape.scalar(feat_mean) as f64;
        let weighted = ctx.tape.scale(feat_mean, self.tcfg.lambda_feat as f32);
        let g_total = ctx.tape.add(s1_mean, weighted)?;
        let total_value = ctx.tape.scalar(g_total) as f64;

        let grads = ctx.collect_grads(g_total)?;
        drop(ctx);
        self.model.store.record_grads(&grads);
        clip_grad_norm(&mut self.model.store, self.tcfg.grad_clip);
        lamb_step(
            &mut self.model.store,
            &mut self.opt,
            lr_model,
            &self.tcfg.lamb(),
        )?;
        self.model.store.clear_grads();

        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            stage: 2,
            lr: lr_model,
            s1: breakdown,
            d_loss: Some(d_loss_mean),
            feat_loss: Some(feat_value),
            total: total_value,
            padded_chunks,
            wall_ms: start.elapsed().as_millis(),
        })
    }
}
