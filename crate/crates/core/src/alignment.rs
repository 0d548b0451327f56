//! Ground-truth prosody extraction: soft frame-to-phoneme alignment trained
//! jointly with the model, hard duration extraction, and phoneme-level
//! pooling of frame-level pitch and energy.

use crate::error::{Error, Result};
use crate::layers::{Ctx, LinearParams, ParamStore};
use crate::numerics::{Real, RngStream, Tape, Tensor, Var};

/// Soft alignment output: `a[t, j]` is frame `t`'s distribution over
/// phonemes, each row summing to one; `log_a` is its log.
#[derive(Debug, Clone)]
pub struct AlignmentMatrix<T: Real> {
    pub a: Tensor<T>,
    pub log_a: Tensor<T>,
}

/// Frame-level prosody tracks paired with a mel of the same length.
#[derive(Debug, Clone)]
pub struct FrameProsody<T: Real> {
    pub frame_pitch: Vec<T>,
    pub frame_energy: Vec<T>,
}

/// Learned projections of mel frames and phoneme embeddings into a shared
/// alignment space.
#[derive(Debug, Clone)]
pub struct AlignmentParams {
    pub proj_mel: LinearParams,
    pub proj_phon: LinearParams,
}

impl AlignmentParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        prefix: &str,
        n_mels: usize,
        d_phon: usize,
        d_align: usize,
    ) -> Self {
        AlignmentParams {
            proj_mel: LinearParams::init(store, rng, &format!("{prefix}.mel"), n_mels, d_align),
            proj_phon: LinearParams::init(store, rng, &format!("{prefix}.phon"), d_phon, d_align),
        }
    }
}

/// Alignment vars on the tape: softmax and log-softmax of the same logits.
pub struct AlignmentVars {
    pub a: Var,
    pub log_a: Var,
}

/// `mel: [t, n_mels]`, `phon: [n, d_phon]`. Each mel frame's distribution
/// over phonemes is the softmax of negated squared distances between the
/// two projections.
pub fn soft_alignment<T: Real>(
    ctx: &mut Ctx<T>,
    p: &AlignmentParams,
    mel: Var,
    phon: Var,
) -> Result<AlignmentVars> {
    let t = ctx.tape.shape(mel)[0];
    let n = ctx.tape.shape(phon)[0];
    if t < n {
        return Err(Error::Contract(format!(
            "soft_alignment needs frames >= phonemes, got {t} < {n}"
        )));
    }
    let pm = p.proj_mel.forward(ctx, mel)?;
    let pp = p.proj_phon.forward(ctx, phon)?;

    // -|pm_t - pp_j|^2 = 2 pm.pp - |pm|^2 - |pp|^2
    let pm_sq = ctx.tape.mul(pm, pm)?;
    let pm_sumsq = ctx.tape.sum_lastdim(pm_sq)?;
    let pp_sq = ctx.tape.mul(pp, pp)?;
    let pp_sumsq = ctx.tape.sum_lastdim(pp_sq)?;
    let ppt = ctx.tape.transpose(pp)?;
    let cross = ctx.tape.matmul(pm, ppt)?;
    let neg2cross = ctx.tape.scale(cross, T::of(-2.0));
    let with_row = ctx.tape.add_row(neg2cross, pp_sumsq)?;
    let dist_sq = ctx.tape.add_col(with_row, pm_sumsq)?;
    let logits = ctx.tape.scale(dist_sq, T::of(-1.0));

    let a = ctx.tape.softmax_lastdim(logits, None)?;
    let log_a = ctx.tape.log_softmax_lastdim(logits)?;
    Ok(AlignmentVars { a, log_a })
}

/// Differentiable negative log-probability of all monotonic surjective
/// non-decreasing frame-to-phoneme assignments through `log_a: [t, n]`
/// (every frame emits one phoneme, paths start at phoneme 0, end at the
/// last phoneme, and skip none). Computed by dynamic programming in log
/// space; the gradient is the negated state-occupancy posterior.
pub fn forward_sum_loss<T: Real>(tape: &mut Tape<T>, log_a: Var) -> Result<Var> {
    tape.forward_sum(log_a)
}

/// Non-tape convenience for oracles and reporting.
pub fn forward_sum_loss_value<T: Real>(log_a: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let v = tape.constant(log_a);
    let loss = tape.forward_sum(v)?;
    Ok(tape.scalar(loss))
}

/// Hard durations from the maximum-likelihood monotonic surjective path
/// through `log_a: [t, n]`. Every duration is at least one and they sum to
/// `t`. Viterbi ties resolve toward staying in the current phoneme during
/// back-tracing, which advances phoneme transitions as early as possible.
pub fn extract_durations<T: Real>(log_a: &Tensor<T>) -> Result<Vec<usize>> {
    let s = log_a.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("extract_durations on {s:?}")));
    }
    let (t, n) = (s[0], s[1]);
    if t < n {
        return Err(Error::Contract(format!(
            "extract_durations needs frames >= phonemes, got {t} < {n}"
        )));
    }
    let la = log_a.data();
    let ninf = T::neg_infinity();

    // score[t, j] plus whether the best predecessor advanced the phoneme
    let mut score = vec![ninf; t * n];
    let mut advanced = vec![false; t * n];
    score[0] = la[0];
    for ti in 1..t {
        for j in 0..n {
            let stay = score[(ti - 1) * n + j];
            let adv = if j > 0 { score[(ti - 1) * n + j - 1] } else { ninf };
            // ties prefer stay: the transition into phoneme j then happened
            // at an earlier frame
            let (best, from_adv) = if adv > stay { (adv, true) } else { (stay, false) };
            if best > ninf {
                score[ti * n + j] = la[ti * n + j] + best;
                advanced[ti * n + j] = from_adv;
            }
        }
    }

    let mut durations = vec![0usize; n];
    let mut j = n - 1;
    for ti in (0..t).rev() {
        durations[j] += 1;
        if ti > 0 && advanced[ti * n + j] {
            j -= 1;
        }
    }
    debug_assert_eq!(j, 0);
    debug_assert_eq!(durations.iter().sum::<usize>(), t);
    Ok(durations)
}

/// Mean of the frame-level tracks over each phoneme's span.
pub fn pool_phoneme_prosody<T: Real>(
    fp: &FrameProsody<T>,
    durations: &[usize],
) -> Result<(Vec<T>, Vec<T>)> {
    let total: usize = durations.iter().sum();
    if total != fp.frame_pitch.len() || total != fp.frame_energy.len() {
        return Err(Error::Input(format!(
            "durations sum to {total} but tracks have {} / {} frames",
            fp.frame_pitch.len(),
            fp.frame_energy.len()
        )));
    }
    let mut pitch = Vec::with_capacity(durations.len());
    let mut energy = Vec::with_capacity(durations.len());
    let mut offset = 0;
    for &d in durations {
        if d == 0 {
            pitch.push(T::zero());
            energy.push(T::zero());
            continue;
        }
        let dn = T::of(d as f64);
        let p = fp.frame_pitch[offset..offset + d]
            .iter()
            .fold(T::zero(), |s, &v| s + v)
            / dn;
        let e = fp.frame_energy[offset..offset + d]
            .iter()
            .fold(T::zero(), |s, &v| s + v)
            / dn;
        pitch.push(p);
        energy.push(e);
        offset += d;
    }
    Ok((pitch, energy))
}

/// Expand a phoneme-level track to frame level by repeating each value for
/// its duration.
pub fn expand_track<T: Real>(track: &[T], durations: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(durations.iter().sum());
    for (&v, &d) in track.iter().zip(durations) {
        out.extend(std::iter::repeat(v).take(d));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    // ── Exhaustive path oracles ─────────────────────────────────────────

    /// All monotonic surjective non-decreasing paths as per-frame phoneme
    /// indices.
    fn all_paths(t: usize, n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut path = Vec::with_capacity(t);
        fn rec(t: usize, n: usize, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if path.len() == t {
                if path.last() == Some(&(n - 1)) {
                    out.push(path.clone());
                }
                return;
            }
            let cur = *path.last().unwrap();
            for next in [cur, cur + 1] {
                if next < n {
                    path.push(next);
                    rec(t, n, path, out);
                    path.pop();
                }
            }
        }
        path.push(0);
        rec(t, n, &mut path, &mut out);
        out
    }

    fn brute_force_loss(log_a: &Tensor<f64>) -> f64 {
        let (t, n) = (log_a.shape()[0], log_a.shape()[1]);
        let mut total = f64::NEG_INFINITY;
        for path in all_paths(t, n) {
            let s: f64 = path
                .iter()
                .enumerate()
                .map(|(ti, &j)| log_a.data()[ti * n + j])
                .sum();
            total = if total == f64::NEG_INFINITY {
                s
            } else {
                let (hi, lo) = if total > s { (total, s) } else { (s, total) };
                hi + (lo - hi).exp().ln_1p()
            };
        }
        -total
    }

    /// Best path by exhaustive search; ties pick the lexicographically
    /// largest index sequence (transitions as early as possible).
    fn brute_force_durations(log_a: &Tensor<f64>) -> Vec<usize> {
        let (t, n) = (log_a.shape()[0], log_a.shape()[1]);
        let mut best: Option<(f64, Vec<usize>)> = None;
        for path in all_paths(t, n) {
            let s: f64 = path
                .iter()
                .enumerate()
                .map(|(ti, &j)| log_a.data()[ti * n + j])
                .sum();
            best = match best {
                None => Some((s, path)),
                Some((bs, bp)) => {
                    if s > bs || (s == bs && path > bp) {
                        Some((s, path))
                    } else {
                        Some((bs, bp))
                    }
                }
            };
        }
        let (_, path) = best.unwrap();
        let mut d = vec![0usize; n];
        for j in path {
            d[j] += 1;
        }
        d
    }

    fn random_log_a(seed: u64, t: usize, n: usize) -> Tensor<f64> {
        let mut rng = RngStream::new(seed, "align-test");
        let logits: Tensor<f64> = rng.normal(vec![t, n]);
        let mut tape = Tape::new();
        let v = tape.constant(&logits);
        let la = tape.log_softmax_lastdim(v).unwrap();
        tape.to_tensor(la)
    }

    #[test]
    fn single_phoneme_loss_is_sum_of_logs() {
        let log_a = Tensor::new(vec![4, 1], vec![-0.1, -0.2, -0.3, -0.4]).unwrap();
        let loss = forward_sum_loss_value(&log_a).unwrap();
        assert!((loss - 1.0f64).abs() < 1e-12);
    }

    #[test]
    fn uniform_two_phonemes_three_frames() {
        // every entry 1/2: two paths of probability 1/8 each
        let half = 0.5f64.ln();
        let log_a = Tensor::new(vec![3, 2], vec![half; 6]).unwrap();
        let loss = forward_sum_loss_value(&log_a).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn dp_matches_brute_force_enumeration() {
        for seed in 0..30 {
            let t = 2 + (seed as usize % 6); // up to 7
            let n = 1 + (seed as usize % 4).min(t - 1);
            let log_a = random_log_a(seed, t, n.min(t));
            let dp = forward_sum_loss_value(&log_a).unwrap();
            let bf = brute_force_loss(&log_a);
            assert!((dp - bf).abs() < 1e-6, "t={t} n={n}: {dp} vs {bf}");
        }
    }

    #[test]
    fn forward_sum_rejects_t_less_than_n() {
        let log_a = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(
            forward_sum_loss_value(&log_a),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            extract_durations(&log_a),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn forward_sum_gradient_matches_finite_differences() {
        let log_a = random_log_a(77, 6, 3);
        let err = grad_check(
            |t, v| t.forward_sum(v),
            &log_a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn loss_invariant_to_row_shift_before_renormalization() {
        let mut rng = RngStream::new(3, "align-test");
        let logits: Tensor<f64> = rng.normal(vec![5, 3]);
        let loss_of = |lg: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(lg);
            let la = tape.log_softmax_lastdim(v).unwrap();
            let l = tape.forward_sum(la).unwrap();
            tape.scalar(l)
        };
        let base = loss_of(&logits);
        let mut shifted = logits.clone();
        for v in shifted.data_mut()[6..9].iter_mut() {
            *v += 13.5; // shift one entire row
        }
        let after = loss_of(&shifted);
        assert!((base - after).abs() < 1e-9, "{base} vs {after}");
    }

    #[test]
    fn durations_single_phoneme() {
        let log_a = Tensor::new(vec![5, 1], vec![-0.5; 5]).unwrap();
        assert_eq!(extract_durations(&log_a).unwrap(), vec![5]);
    }

    #[test]
    fn durations_block_diagonal() {
        // frames 0-1 peak on phoneme 0, frames 2-4 on phoneme 1
        let hi = (0.9f64).ln();
        let lo = (0.1f64).ln();
        let data = vec![hi, lo, hi, lo, lo, hi, lo, hi, lo, hi];
        let log_a = Tensor::new(vec![5, 2], data).unwrap();
        assert_eq!(extract_durations(&log_a).unwrap(), vec![2, 3]);
    }

    #[test]
    fn durations_tie_break_advances_early() {
        // all entries equal: every path ties; earliest transitions win,
        // so every phoneme after the first gets exactly one frame... the
        // lexicographically largest path is [0, 1, 1, 1] -> d = [1, 3]
        let log_a = Tensor::new(vec![4, 2], vec![0.5f64.ln(); 8]).unwrap();
        assert_eq!(extract_durations(&log_a).unwrap(), vec![1, 3]);
        let oracle = brute_force_durations(&log_a);
        assert_eq!(oracle, vec![1, 3]);
    }

    #[test]
    fn durations_match_exhaustive_search() {
        for seed in 100..160 {
            let t = 3 + (seed as usize % 5);
            let n = 1 + (seed as usize % 3);
            let log_a = random_log_a(seed, t, n);
            let dp = extract_durations(&log_a).unwrap();
            let bf = brute_force_durations(&log_a);
            assert_eq!(dp, bf, "t={t} n={n}");
            assert_eq!(dp.iter().sum::<usize>(), t);
            assert!(dp.iter().all(|&d| d >= 1));
        }
    }

    #[test]
    fn soft_alignment_rows_sum_to_one_and_n1_is_ones() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = RngStream::new(9, "init");
        let p = AlignmentParams::init(&mut store, &mut rng, "align", 4, 6, 3);
        let mut data_rng = RngStream::new(10, "data");
        let mel: Tensor<f64> = data_rng.normal(vec![5, 4]);
        let phon: Tensor<f64> = data_rng.normal(vec![2, 6]);

        let mut ctx = Ctx::eval(&store);
        let melv = ctx.tape.constant(&mel);
        let phonv = ctx.tape.constant(&phon);
        let av = soft_alignment(&mut ctx, &p, melv, phonv).unwrap();
        for row in ctx.tape.value(av.a).chunks(2) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }

        let one: Tensor<f64> = data_rng.normal(vec![3, 6]);
        let onev = ctx.tape.constant(&Tensor::new(vec![1, 6], one.row(0).to_vec()).unwrap());
        let av1 = soft_alignment(&mut ctx, &p, melv, onev).unwrap();
        assert!(ctx.tape.value(av1.a).iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn soft_alignment_peaks_where_projections_coincide() {
        // identity-ish setup: mel projection of frame t equals phoneme j's
        // projection exactly for j = 0, far for j = 1
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = RngStream::new(11, "init");
        let p = AlignmentParams::init(&mut store, &mut rng, "align", 2, 2, 2);
        // overwrite with identity projections, zero bias
        for (w, vals) in [
            (p.proj_mel.w, vec![1.0, 0.0, 0.0, 1.0]),
            (p.proj_phon.w, vec![1.0, 0.0, 0.0, 1.0]),
        ] {
            store.get_mut(w).data_mut().copy_from_slice(&vals);
        }
        let mel = Tensor::new(vec![2, 2], vec![0.0, 0.0, 10.0, 10.0]).unwrap();
        let phon = Tensor::new(vec![2, 2], vec![0.0, 0.0, 10.0, 10.0]).unwrap();
        let mut ctx = Ctx::eval(&store);
        let melv = ctx.tape.constant(&mel);
        let phonv = ctx.tape.constant(&phon);
        let av = soft_alignment(&mut ctx, &p, melv, phonv).unwrap();
        let a = ctx.tape.value(av.a);
        assert!(a[0] > 0.999, "frame 0 should lock onto phoneme 0: {a:?}");
        assert!(a[3] > 0.999, "frame 1 should lock onto phoneme 1: {a:?}");
    }

    #[test]
    fn soft_alignment_t_less_than_n_is_contract_error() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = RngStream::new(12, "init");
        let p = AlignmentParams::init(&mut store, &mut rng, "align", 4, 6, 3);
        let mut ctx = Ctx::eval(&store);
        let mel = ctx.tape.zeros(vec![2, 4]);
        let phon = ctx.tape.zeros(vec![3, 6]);
        assert!(matches!(
            soft_alignment(&mut ctx, &p, mel, phon),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pooling_matches_naive_loop() {
        let fp = FrameProsody {
            frame_pitch: vec![1.0f64, 2.0, 3.0, 4.0],
            frame_energy: vec![0.5, 0.5, 1.5, 2.5],
        };
        let (p, e) = pool_phoneme_prosody(&fp, &[2, 2]).unwrap();
        assert_eq!(p, vec![1.5, 3.5]);
        assert_eq!(e, vec![0.5, 2.0]);

        // constant pitch pools to the constant
        let fp2 = FrameProsody {
            frame_pitch: vec![0.7f64; 6],
            frame_energy: vec![0.0; 6],
        };
        let (p2, _) = pool_phoneme_prosody(&fp2, &[1, 2, 3]).unwrap();
        assert!(p2.iter().all(|&v| (v - 0.7).abs() < 1e-12));

        // random tracks vs naive loop
        let mut rng = RngStream::new(13, "pool");
        let pitch: Vec<f64> = rng.normal_vec(10);
        let energy: Vec<f64> = rng.normal_vec(10);
        let d = [3usize, 1, 4, 2];
        let fp3 = FrameProsody {
            frame_pitch: pitch.clone(),
            frame_energy: energy.clone(),
        };
        let (p3, e3) = pool_phoneme_prosody(&fp3, &d).unwrap();
        let mut off = 0;
        for (i, &di) in d.iter().enumerate() {
            let want_p: f64 = pitch[off..off + di].iter().sum::<f64>() / di as f64;
            let want_e: f64 = energy[off..off + di].iter().sum::<f64>() / di as f64;
            assert_eq!(p3[i], want_p);
            assert_eq!(e3[i], want_e);
            off += di;
        }
    }

    #[test]
    fn pooling_rejects_mismatched_totals() {
        let fp = FrameProsody {
            frame_pitch: vec![0.0f64; 5],
            frame_energy: vec![0.0; 5],
        };
        assert!(matches!(
            pool_phoneme_prosody(&fp, &[2, 2]),
            Err(Error::Input(_))
        ));
    }
}
