use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Loss weights for the reconstruction stage: duration, pitch, energy,
/// alignment. The mel term always has weight one.
pub type Alphas = [f64; 4];

pub const DEFAULT_ALPHAS: Alphas = [0.1, 0.1, 0.1, 1.0];
pub const DEFAULT_LAMBDA: f64 = 10.0;

/// Per-component values of the stage-one loss for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1LossBreakdown {
    pub mel_mse: f64,
    pub dur_mse: f64,
    pub pitch_mse: f64,
    pub energy_mse: f64,
    pub align_loss: f64,
    pub total: f64,
}

impl Stage1LossBreakdown {
    pub fn recompose(&self, alpha: &Alphas) -> f64 {
        self.mel_mse
            + alpha[0] * self.dur_mse
            + alpha[1] * self.pitch_mse
            + alpha[2] * self.energy_mse
            + alpha[3] * self.align_loss
    }

    pub fn zero() -> Self {
        Stage1LossBreakdown {
            mel_mse: 0.0,
            dur_mse: 0.0,
            pitch_mse: 0.0,
            energy_mse: 0.0,
            align_loss: 0.0,
            total: 0.0,
        }
    }

    pub fn add(&mut self, other: &Self) {
        self.mel_mse += other.mel_mse;
        self.dur_mse += other.dur_mse;
        self.pitch_mse += other.pitch_mse;
        self.energy_mse += other.energy_mse;
        self.align_loss += other.align_loss;
        self.total += other.total;
    }

    pub fn scale(&mut self, k: f64) {
        self.mel_mse *= k;
        self.dur_mse *= k;
        self.pitch_mse *= k;
        self.energy_mse *= k;
        self.align_loss *= k;
        self.total *= k;
    }
}

/// Predicted quantities entering the stage-one loss.
pub struct Stage1Pred {
    /// `[t, n_mels]` teacher-forced mel prediction.
    pub mel: Var,
    /// `[n]` log(1+frames) duration prediction.
    pub d_hat: Var,
    pub p_hat: Var,
    pub e_hat: Var,
    /// `[t, n]` log alignment posterior for the alignment loss.
    pub log_a: Var,
}

/// Ground truth entering the stage-one loss. Duration targets are given in
/// frames and compared in the log(1+d) regression domain.
pub struct Stage1Target<'a, T: Real> {
    pub mel: &'a Tensor<T>,
    pub durations: &'a [usize],
    pub pitch: &'a [T],
    pub energy: &'a [T],
}

/// Loss vars on the tape; scalar values are read back for logging.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Loss {
    pub mel_mse: Var,
    pub dur_mse: Var,
    pub pitch_mse: Var,
    pub energy_mse: Var,
    pub align_loss: Var,
    pub total: Var,
}

impl Stage1Loss {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> Stage1LossBreakdown {
        Stage1LossBreakdown {
            mel_mse: tape.scalar(self.mel_mse).as_f64(),
            dur_mse: tape.scalar(self.dur_mse).as_f64(),
            pitch_mse: tape.scalar(self.pitch_mse).as_f64(),
            energy_mse: tape.scalar(self.energy_mse).as_f64(),
            align_loss: tape.scalar(self.align_loss).as_f64(),
            total: tape.scalar(self.total).as_f64(),
        }
    }
}

/// Mean-squared errors on mel, log-duration, pitch, and energy, plus the
/// weighted forward-sum alignment loss.
pub fn stage1_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: &Stage1Pred,
    target: &Stage1Target<T>,
    alpha: &Alphas,
) -> Result<Stage1Loss> {
    if tape.shape(pred.mel) != target.mel.shape() {
        return Err(Error::Input(format!(
            "mel shapes disagree: {:?} vs {:?}",
            tape.shape(pred.mel),
            target.mel.shape()
        )));
    }
    let n = tape.numel(pred.d_hat);
    if target.durations.len() != n || target.pitch.len() != n || target.energy.len() != n {
        return Err(Error::Input(format!(
            "prosody target lengths {} / {} / {} for {n} phonemes",
            target.durations.len(),
            target.pitch.len(),
            target.energy.len()
        )));
    }

    let mel_t = tape.constant(target.mel);
    let mel_mse = tape.mse(pred.mel, mel_t)?;

    let dur_log: Vec<T> = target
        .durations
        .iter()
        .map(|&d| T::of((d as f64 + 1.0).ln()))
        .collect();
    let dur_t = tape.leaf_data(vec![n], dur_log, false);
    let dur_mse = tape.mse(pred.d_hat, dur_t)?;

    let pitch_t = tape.leaf_data(vec![n], target.pitch.to_vec(), false);
    let pitch_mse = tape.mse(pred.p_hat, pitch_t)?;

    let energy_t = tape.leaf_data(vec![n], target.energy.to_vec(), false);
    let energy_mse = tape.mse(pred.e_hat, energy_t)?;

    let align_loss = tape.forward_sum(pred.log_a)?;

    let dur_w = tape.scale(dur_mse, T::of(alpha[0]));
    let pitch_w = tape.scale(pitch_mse, T::of(alpha[1]));
    let energy_w = tape.scale(energy_mse, T::of(alpha[2]));
    let align_w = tape.scale(align_loss, T::of(alpha[3]));
    let mut total = tape.add(mel_mse, dur_w)?;
    total = tape.add(total, pitch_w)?;
    total = tape.add(total, energy_w)?;
    total = tape.add(total, align_w)?;

    Ok(Stage1Loss {
        mel_mse,
        dur_mse,
        pitch_mse,
        energy_mse,
        align_loss,
        total,
    })
}

/// Margin loss for the discriminator: `max(0, 1 - d_real) + max(0, 1 + d_fake)`.
pub fn hinge_d_loss(d_real: f64, d_fake: f64) -> f64 {
    (1.0 - d_real).max(0.0) + (1.0 + d_fake).max(0.0)
}

/// Tape form of [`hinge_d_loss`] over scalar vars.
pub fn hinge_d_loss_var<T: Real>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let neg_real = tape.scale(d_real, -T::one());
    let real_margin = tape.add_scalar(neg_real, T::one());
    let real_term = tape.relu(real_margin);
    let fake_margin = tape.add_scalar(d_fake, T::one());
    let fake_term = tape.relu(fake_margin);
    let sum = tape.add(real_term, fake_term)?;
    Ok(tape.sum_all(sum))
}

/// Mean over layers of the per-element-normalized L1 distance between real
/// and generated discriminator features.
pub fn feature_matching_loss<T: Real>(
    feats_real: &[Tensor<T>],
    feats_fake: &[Tensor<T>],
) -> Result<f64> {
    if feats_real.len() != feats_fake.len() || feats_real.is_empty() {
        return Err(Error::Input(format!(
            "feature lists of {} vs {} layers",
            feats_real.len(),
            feats_fake.len()
        )));
    }
    let mut sum = 0.0;
    for (r, f) in feats_real.iter().zip(feats_fake) {
        if r.shape() != f.shape() {
            return Err(Error::Input(format!(
                "feature shapes disagree: {:?} vs {:?}",
                r.shape(),
                f.shape()
            )));
        }
        let l1: f64 = r
            .data()
            .iter()
            .zip(f.data())
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .sum();
        sum += l1 / r.numel() as f64;
    }
    Ok(sum / feats_real.len() as f64)
}

/// Tape form of [`feature_matching_loss`]; `feats_real` are usually
/// constants, `feats_fake` carry gradient back into the generator.
pub fn feature_matching_loss_var<T: Real>(
    tape: &mut Tape<T>,
    feats_real: &[Var],
    feats_fake: &[Var],
) -> Result<Var> {
    if feats_real.len() != feats_fake.len() || feats_real.is_empty() {
        return Err(Error::Input(format!(
            "feature lists of {} vs {} layers",
            feats_real.len(),
            feats_fake.len()
        )));
    }
    let n_layers = feats_real.len();
    let mut acc: Option<Var> = None;
    for (&r, &f) in feats_real.iter().zip(feats_fake) {
        if tape.shape(r) != tape.shape(f) {
            return Err(Error::Input(format!(
                "feature shapes disagree: {:?} vs {:?}",
                tape.shape(r),
                tape.shape(f)
            )));
        }
        let d_l = tape.numel(r);
        let diff = tape.sub(r, f)?;
        let a = tape.abs(diff);
        let s = tape.sum_all(a);
        let normed = tape.scale(s, T::of(1.0 / d_l as f64));
        acc = Some(match acc {
            Some(prev) => tape.add(prev, normed)?,
            None => normed,
        });
    }
    Ok(tape.scale(acc.unwrap(), T::of(1.0 / n_layers as f64)))
}

/// Stage-two objective: stage-one loss plus `lambda` times the feature loss.
pub fn stage2_loss(stg1: f64, feat: f64, lambda: f64) -> f64 {
    stg1 + lambda * feat
}
