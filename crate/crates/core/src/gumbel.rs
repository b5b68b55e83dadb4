//! Gumbel noise, Gumbel-max sampling, the tempered softmax relaxation,
//! straight-through estimators, and top-down noise inference.
//!
//! Everything here is pure given an explicit `RngHandle`; the tape variants
//! register the analytic relaxation Jacobian so gradients can flow through
//! discrete token choices.

use crate::error::{GgdError, Result};
use crate::rng::RngHandle;
use crate::tensor::{argmax, softmax_slice, Tape, Tensor, Var};

/// Uniform draws are clamped into [CLAMP, 1-CLAMP] before the double log so
/// noise values stay finite.
pub const UNIFORM_CLAMP: f64 = 1e-12;

/// Per-step noise vector, one value per vocabulary entry.
pub type GumbelNoise = Vec<f64>;

/// Standard Gumbel value from a uniform draw: -log(-log(u)).
pub fn sample_gumbel(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

/// Draw a noise vector of length `k`.
pub fn sample_noise(k: usize, rng: &mut RngHandle) -> GumbelNoise {
    (0..k).map(|_| rng.gumbel()).collect()
}

/// A selected word as a one-hot vector, stored by index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HardToken {
    pub index: usize,
    pub vocab: usize,
}

impl HardToken {
    pub fn one_hot(&self) -> Tensor {
        Tensor::one_hot(self.index, self.vocab)
    }
}

/// A relaxed token: a point on the simplex plus the temperature that
/// produced it.
#[derive(Clone, Debug)]
pub struct SoftToken {
    pub probs: Vec<f64>,
    pub tau: f64,
}

/// One decoded step: the hard choice, its relaxation, and the noise that
/// (actually or counterfactually) produced it.
#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    pub hard: HardToken,
    pub soft: SoftToken,
    pub noise: GumbelNoise,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct GumbelTrajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl GumbelTrajectory {
    /// Number of steps at which argmax(noise + logits) fails to reproduce
    /// the stored hard token. Zero for any trajectory built by this crate.
    pub fn consistency_violations(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| {
                let sum: Vec<f64> = s
                    .logits
                    .iter()
                    .zip(&s.noise)
                    .map(|(a, g)| a + g)
                    .collect();
                argmax(&sum) != s.hard.index
            })
            .count()
    }
}

fn check_pair(logits: &[f64], noise: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(GgdError::Dimension("empty logit vector".into()));
    }
    if logits.len() != noise.len() {
        return Err(GgdError::Dimension(format!(
            "logits length {} vs noise length {}",
            logits.len(),
            noise.len()
        )));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(GgdError::Domain(format!("temperature must be positive, got {tau}")))
    }
}

/// argmax(noise + logits); ties break toward the lowest index.
pub fn gumbel_max(logits: &[f64], noise: &[f64]) -> Result<HardToken> {
    check_pair(logits, noise)?;
    let perturbed: Vec<f64> = logits.iter().zip(noise).map(|(a, g)| a + g).collect();
    Ok(HardToken { index: argmax(&perturbed), vocab: logits.len() })
}

/// softmax((noise + logits)/tau).
pub fn gumbel_softmax(logits: &[f64], noise: &[f64], tau: f64) -> Result<SoftToken> {
    check_pair(logits, noise)?;
    check_tau(tau)?;
    let scaled: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(a, g)| (a + g) / tau)
        .collect();
    Ok(SoftToken { probs: softmax_slice(&scaled), tau })
}

/// Row-major Jacobian of the tempered softmax at `probs`:
/// J[i][j] = probs_i (δ_ij − probs_j) / tau.
pub fn relaxation_jacobian(probs: &[f64], tau: f64) -> Vec<f64> {
    let k = probs.len();
    let mut j = vec![0.0; k * k];
    for i in 0..k {
        for l in 0..k {
            let delta = if i == l { 1.0 } else { 0.0 };
            j[i * k + l] = probs[i] * (delta - probs[l]) / tau;
        }
    }
    j
}

/// Jᵀ·g for the tempered-softmax Jacobian, without materializing J.
fn jacobian_vjp(probs: &[f64], tau: f64, g: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(g).map(|(p, x)| p * x).sum();
    probs
        .iter()
        .zip(g)
        .map(|(p, x)| p * (x - inner) / tau)
        .collect()
}

/// Tape op: relaxed token from logits. Forward is the tempered softmax of
/// the noise-perturbed logits; backward is the analytic Jacobian with the
/// noise held constant.
pub fn gumbel_softmax_var(
    tape: &mut Tape,
    logits: Var,
    noise: &[f64],
    tau: f64,
) -> Result<(SoftToken, Var)> {
    let soft = gumbel_softmax(tape.value(logits).data(), noise, tau)?;
    let value = Tensor::vector(soft.probs.clone());
    let probs = soft.probs.clone();
    let var = tape.custom(vec![logits], value, move |_, g| {
        vec![Tensor::vector(jacobian_vjp(&probs, tau, g.data()))]
    });
    Ok((soft, var))
}

/// Which relaxation backs a straight-through token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    /// Backward at softmax((noise + logits)/tau): the relaxation of the
    /// perturbed distribution that actually selected the word.
    StGumbel,
    /// Backward at softmax(logits/tau), ignoring the noise, so the gradient
    /// is independent of which word was selected.
    St,
}

impl Estimator {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "st-gumbel" => Ok(Estimator::StGumbel),
            "st" => Ok(Estimator::St),
            other => Err(GgdError::Config(format!("unknown estimator '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::StGumbel => "st-gumbel",
            Estimator::St => "st",
        }
    }
}

/// Tape op: straight-through token. Forward value is the one-hot winner of
/// argmax(noise + logits); backward applies the relaxation Jacobian chosen
/// by `estimator`.
pub fn st_token_var(
    tape: &mut Tape,
    logits: Var,
    noise: &[f64],
    tau: f64,
    estimator: Estimator,
) -> Result<(HardToken, SoftToken, Var)> {
    let raw = tape.value(logits).data().to_vec();
    let hard = gumbel_max(&raw, noise)?;
    check_tau(tau)?;
    let soft = match estimator {
        Estimator::StGumbel => gumbel_softmax(&raw, noise, tau)?,
        Estimator::St => SoftToken {
            probs: softmax_slice(&raw.iter().map(|a| a / tau).collect::<Vec<_>>()),
            tau,
        },
    };
    let probs = soft.probs.clone();
    let var = tape.custom(vec![logits], hard.one_hot(), move |_, g| {
        vec![Tensor::vector(jacobian_vjp(&probs, tau, g.data()))]
    });
    Ok((hard, soft, var))
}

/// Tape op: the plain straight-through estimator as a standalone sampler.
/// Forward draws from softmax(logits) by inverse CDF; backward is the
/// relaxation Jacobian at softmax(logits/tau), which by construction does
/// not depend on the drawn word.
pub fn st_plain_var(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    rng: &mut RngHandle,
) -> Result<(HardToken, SoftToken, Var)> {
    let raw = tape.value(logits).data().to_vec();
    if raw.is_empty() {
        return Err(GgdError::Dimension("empty logit vector".into()));
    }
    check_tau(tau)?;
    let probs = softmax_slice(&raw);
    let u = rng.uniform01();
    let mut acc = 0.0;
    let mut index = probs.len() - 1;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            index = i;
            break;
        }
    }
    let hard = HardToken { index, vocab: raw.len() };
    let soft = SoftToken {
        probs: softmax_slice(&raw.iter().map(|a| a / tau).collect::<Vec<_>>()),
        tau,
    };
    let back = soft.probs.clone();
    let var = tape.custom(vec![logits], hard.one_hot(), move |_, g| {
        vec![Tensor::vector(jacobian_vjp(&back, tau, g.data()))]
    });
    Ok((hard, soft, var))
}

/// Deterministic core of top-down noise inference, driven by explicit
/// uniforms. `u_rest[selected]` is ignored.
///
/// Construction: the maximum of the perturbed logits is distributed as a
/// Gumbel centered at log-sum-exp of the logits ("top" value); every other
/// coordinate is an independent Gumbel truncated to lie below the top. The
/// returned noise is that perturbed sample minus the logits, so
/// argmax(noise + logits) always re-selects `selected`.
pub fn infer_noise_from_uniforms(
    selected: usize,
    logits: &[f64],
    u_top: f64,
    u_rest: &[f64],
) -> Result<GumbelNoise> {
    if logits.is_empty() {
        return Err(GgdError::Dimension("empty logit vector".into()));
    }
    if selected >= logits.len() {
        return Err(GgdError::Contract(format!(
            "selected index {selected} out of range {}",
            logits.len()
        )));
    }
    if u_rest.len() != logits.len() {
        return Err(GgdError::Dimension("uniform vector length mismatch".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&a| (a - m).exp()).sum::<f64>().ln();
    let top = sample_gumbel(u_top) + lse;
    let mut perturbed = vec![0.0; logits.len()];
    for i in 0..logits.len() {
        if i == selected {
            perturbed[i] = top;
        } else {
            let free = sample_gumbel(u_rest[i]) + logits[i];
            // top - log(1 + e^{top - free}), evaluated stably
            let d = top - free;
            let trunc = if d > 0.0 {
                top - (d + (-d).exp().ln_1p())
            } else {
                top - d.exp().ln_1p()
            };
            perturbed[i] = trunc;
        }
    }
    Ok(perturbed
        .iter()
        .zip(logits)
        .map(|(p, a)| p - a)
        .collect())
}

/// Sample noise consistent with `selected` being the argmax winner for
/// `logits`. Uniform draws come from `rng` in index order, the top draw
/// first.
pub fn infer_noise(selected: usize, logits: &[f64], rng: &mut RngHandle) -> Result<GumbelNoise> {
    let u_top = rng.uniform01();
    let u_rest: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, _)| if i == selected { 0.5 } else { rng.uniform01() })
        .collect();
    infer_noise_from_uniforms(selected, logits, u_top, &u_rest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::chi_square_gof;

    #[test]
    fn sample_gumbel_known_points() {
        // u = e^{-1}: -log(-log(e^{-1})) = -log(1) = 0
        assert!((sample_gumbel((-1.0_f64).exp())).abs() < 1e-12);
        // u = e^{-e}: -log(e) = -1
        assert!((sample_gumbel((-std::f64::consts::E).exp()) + 1.0).abs() < 1e-12);
        // u = 0.5: -log(log 2) = 0.36651292...
        assert!((sample_gumbel(0.5) - 0.3665129205816643).abs() < 1e-12);
    }

    #[test]
    fn sample_gumbel_clamps_extremes() {
        assert!(sample_gumbel(0.0).is_finite());
        assert!(sample_gumbel(1.0).is_finite());
    }

    #[test]
    fn gumbel_max_hand_cases() {
        let t = gumbel_max(&[10.0, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(t.index, 0);
        let t = gumbel_max(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(t.index, 1);
    }

    #[test]
    fn gumbel_max_tie_breaks_low() {
        let t = gumbel_max(&[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(t.index, 0);
    }

    #[test]
    fn gumbel_max_empty_is_dimension_error() {
        assert!(matches!(gumbel_max(&[], &[]), Err(GgdError::Dimension(_))));
    }

    #[test]
    fn gumbel_max_matches_softmax_frequencies() {
        let logits = [0.5_f64.ln(), 0.3_f64.ln(), 0.2_f64.ln()];
        let mut rng = RngHandle::new(2024);
        let n = 100_000;
        let mut counts = [0u64; 3];
        for _ in 0..n {
            let noise = sample_noise(3, &mut rng);
            counts[gumbel_max(&logits, &noise).unwrap().index] += 1;
        }
        let probs = softmax_slice(&logits);
        let (_stat, p) = chi_square_gof(&counts, &probs);
        assert!(p > 0.001, "chi-square p = {p}");
        // and the obvious sanity check on raw frequencies
        for (c, p) in counts.iter().zip(&probs) {
            let f = *c as f64 / n as f64;
            assert!((f - p).abs() < 0.01, "freq {f} vs prob {p}");
        }
    }

    #[test]
    fn gumbel_softmax_symmetry() {
        let s = gumbel_softmax(&[0.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(s.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn gumbel_softmax_tempered_evaluation() {
        // softmax((ln 2)/0.5, 0) = softmax(2 ln 2, 0) = (4/5, 1/5)
        let s = gumbel_softmax(&[2.0_f64.ln(), 0.0], &[0.0, 0.0], 0.5).unwrap();
        assert!((s.probs[0] - 0.8).abs() < 1e-12);
        assert!((s.probs[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn gumbel_softmax_high_temperature_is_uniform() {
        let logits = [1.7, -0.4, 0.9, 2.2];
        let noise = [0.3, -1.0, 0.5, 0.0];
        let s = gumbel_softmax(&logits, &noise, 1000.0).unwrap();
        for &p in &s.probs {
            assert!((p - 0.25).abs() < 1e-3);
        }
    }

    #[test]
    fn gumbel_softmax_rejects_non_positive_tau() {
        assert!(matches!(
            gumbel_softmax(&[0.0], &[0.0], 0.0),
            Err(GgdError::Domain(_))
        ));
        assert!(matches!(
            gumbel_softmax(&[0.0], &[0.0], -1.0),
            Err(GgdError::Domain(_))
        ));
    }

    #[test]
    fn low_temperature_sharpens() {
        // With a clear winner the tau→0 relaxation is essentially one-hot.
        let logits = [1.0, 0.5, -0.3];
        let noise = [0.2, 0.1, 0.0];
        let s = gumbel_softmax(&logits, &noise, 0.001).unwrap();
        let top = s.probs.iter().cloned().fold(0.0, f64::max);
        assert!(top > 1.0 - 1e-6);
    }

    #[test]
    fn jacobian_rows_sum_to_zero() {
        let probs = softmax_slice(&[0.3, -1.0, 0.8, 0.1]);
        let j = relaxation_jacobian(&probs, 0.7);
        for i in 0..4 {
            let row_sum: f64 = j[i * 4..(i + 1) * 4].iter().sum();
            assert!(row_sum.abs() < 1e-12, "row {i} sums to {row_sum}");
        }
    }

    /// Finite-difference Jacobian of the forward relaxation, the oracle for
    /// the analytic rule.
    fn fd_jacobian(logits: &[f64], noise: &[f64], tau: f64, h: f64) -> Vec<f64> {
        let k = logits.len();
        let mut j = vec![0.0; k * k];
        for col in 0..k {
            let mut plus = logits.to_vec();
            plus[col] += h;
            let mut minus = logits.to_vec();
            minus[col] -= h;
            let yp = gumbel_softmax(&plus, noise, tau).unwrap().probs;
            let ym = gumbel_softmax(&minus, noise, tau).unwrap().probs;
            for row in 0..k {
                j[row * k + col] = (yp[row] - ym[row]) / (2.0 * h);
            }
        }
        j
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let mut rng = RngHandle::new(7);
        for _ in 0..50 {
            let k = 2 + rng.below(6);
            let logits: Vec<f64> = (0..k).map(|_| rng.uniform01() * 6.0 - 3.0).collect();
            let noise: Vec<f64> = (0..k).map(|_| rng.uniform01() * 6.0 - 3.0).collect();
            let tau = 0.1 + rng.uniform01() * 4.9;
            let soft = gumbel_softmax(&logits, &noise, tau).unwrap();
            let analytic = relaxation_jacobian(&soft.probs, tau);
            let fd = fd_jacobian(&logits, &noise, tau, 1e-6);
            let scale = fd.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs())).max(1e-8);
            for (a, f) in analytic.iter().zip(&fd) {
                assert!(
                    (a - f).abs() / scale < 1e-6,
                    "jacobian mismatch: {a} vs {f} (tau {tau})"
                );
            }
        }
    }

    #[test]
    fn st_token_forward_is_one_hot_and_argmax_consistent() {
        let mut rng = RngHandle::new(5);
        let mut tape = Tape::new();
        for _ in 0..100 {
            let logits: Vec<f64> = (0..6).map(|_| rng.uniform01() * 4.0 - 2.0).collect();
            let noise = sample_noise(6, &mut rng);
            let tau = 0.5;
            let lv = tape.constant(Tensor::vector(logits.clone()));
            let (hard, soft, var) = st_token_var(&mut tape, lv, &noise, tau, Estimator::StGumbel).unwrap();
            let v = tape.value(var);
            assert_eq!(v.data().iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(v.data()[hard.index], 1.0);
            // the soft relaxation peaks at the same index
            assert_eq!(argmax(&soft.probs), hard.index);
        }
    }

    #[test]
    fn st_backward_matches_relaxation_jacobian() {
        let logits = vec![0.4, -0.2, 1.1];
        let noise = vec![0.3, 0.9, -0.5];
        let tau = 0.8;
        // Pull back unit vectors through the ST node and compare against the
        // finite-difference Jacobian of the forward relaxation.
        let fd = fd_jacobian(&logits, &noise, tau, 1e-6);
        let scale = fd.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
        for row in 0..3 {
            let mut tape = Tape::new();
            let lv = tape.leaf(Tensor::vector(logits.clone()));
            let (_, _, var) = st_token_var(&mut tape, lv, &noise, tau, Estimator::StGumbel).unwrap();
            let e = tape.constant(Tensor::one_hot(row, 3));
            let out = tape.dot(var, e).unwrap();
            let grads = tape.backward(out).unwrap();
            let got = grads.get(lv).unwrap().data().to_vec();
            for col in 0..3 {
                let expect = fd[row * 3 + col];
                assert!(
                    (got[col] - expect).abs() / scale < 1e-6,
                    "ST backward ({row},{col}): {} vs {expect}",
                    got[col]
                );
            }
        }
    }

    #[test]
    fn plain_st_backward_ignores_the_sample() {
        // Two different draws from the same logits must produce identical
        // backward relaxations.
        let logits = vec![0.0, 0.0, 0.0];
        let tau = 0.5;
        let mut grads_seen: Vec<Vec<f64>> = Vec::new();
        let mut indices = std::collections::HashSet::new();
        for seed in 0..20 {
            let mut rng = RngHandle::new(seed);
            let mut tape = Tape::new();
            let lv = tape.leaf(Tensor::vector(logits.clone()));
            let (hard, _, var) = st_plain_var(&mut tape, lv, tau, &mut rng).unwrap();
            indices.insert(hard.index);
            let e = tape.constant(Tensor::one_hot(0, 3));
            let out = tape.dot(var, e).unwrap();
            let g = tape.backward(out).unwrap();
            grads_seen.push(g.get(lv).unwrap().data().to_vec());
        }
        assert!(indices.len() > 1, "expected varied samples");
        for g in &grads_seen[1..] {
            assert_eq!(g, &grads_seen[0]);
        }
    }

    #[test]
    fn plain_st_tau_one_is_softmax_jacobian() {
        let logits = vec![0.7, -0.3, 0.1];
        let mut rng = RngHandle::new(3);
        let mut tape = Tape::new();
        let lv = tape.leaf(Tensor::vector(logits.clone()));
        let (_, soft, _) = st_plain_var(&mut tape, lv, 1.0, &mut rng).unwrap();
        let probs = softmax_slice(&logits);
        for (a, b) in soft.probs.iter().zip(&probs) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn plain_st_samples_uniformly_on_flat_logits() {
        let mut rng = RngHandle::new(77);
        let mut counts = [0u64; 2];
        for _ in 0..100_000 {
            let mut tape = Tape::new();
            let lv = tape.constant(Tensor::vector(vec![0.0, 0.0]));
            let (hard, _, _) = st_plain_var(&mut tape, lv, 1.0, &mut rng).unwrap();
            counts[hard.index] += 1;
        }
        let (_s, p) = chi_square_gof(&counts, &[0.5, 0.5]);
        assert!(p > 0.001, "chi-square p = {p}");
    }

    #[test]
    fn st_and_st_gumbel_coincide_at_zero_noise_argmax() {
        // With zero noise the two backward relaxations are the same object.
        let logits = vec![1.0, 0.2, -0.4];
        let zero = vec![0.0; 3];
        let tau = 0.6;
        let mut t1 = Tape::new();
        let l1 = t1.leaf(Tensor::vector(logits.clone()));
        let (h1, s1, _) = st_token_var(&mut t1, l1, &zero, tau, Estimator::StGumbel).unwrap();
        let mut t2 = Tape::new();
        let l2 = t2.leaf(Tensor::vector(logits.clone()));
        let (h2, s2, _) = st_token_var(&mut t2, l2, &zero, tau, Estimator::St).unwrap();
        assert_eq!(h1.index, h2.index);
        assert_eq!(h1.index, argmax(&softmax_slice(&logits)));
        assert_eq!(s1.probs, s2.probs);
    }

    #[test]
    fn infer_noise_single_category() {
        let mut rng = RngHandle::new(1);
        let g = infer_noise(0, &[0.3], &mut rng).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g[0].is_finite());
    }

    #[test]
    fn infer_noise_hand_evaluation() {
        // logits (0,0), selected 0, u = u_1 = e^{-1}:
        // top = 0 + ln 2; free_1 = 0; trunc_1 = ln2 - log(1 + e^{ln2}) = ln(2/3)
        let u = (-1.0_f64).exp();
        let g = infer_noise_from_uniforms(0, &[0.0, 0.0], u, &[0.0, u]).unwrap();
        assert!((g[0] - 2.0_f64.ln()).abs() < 1e-12, "g0 = {}", g[0]);
        assert!((g[1] - (2.0_f64 / 3.0).ln()).abs() < 1e-12, "g1 = {}", g[1]);
        assert_eq!(argmax(&g), 0);
    }

    #[test]
    fn inferred_noise_reselects_the_token() {
        let mut rng = RngHandle::new(9);
        for _ in 0..500 {
            let k = 2 + rng.below(9);
            let logits: Vec<f64> = (0..k).map(|_| rng.uniform01() * 10.0 - 5.0).collect();
            let selected = rng.below(k);
            let g = infer_noise(selected, &logits, &mut rng).unwrap();
            let perturbed: Vec<f64> = g.iter().zip(&logits).map(|(x, a)| x + a).collect();
            assert_eq!(argmax(&perturbed), selected, "logits {logits:?} noise {g:?}");
            // the top value is attained at the selected index and nowhere above it
            let top = perturbed[selected];
            for (i, &p) in perturbed.iter().enumerate() {
                if i != selected {
                    assert!(p <= top);
                }
            }
        }
    }
}
