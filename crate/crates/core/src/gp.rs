//! Gaussian-process regression surrogate.
//!
//! Squared-exponential kernel with one length scale per input dimension.
//! Inputs are mapped to the unit hypercube of the search space, targets are
//! centered on their mean and divided by their standard deviation before the
//! linear algebra runs; posterior moments are mapped back to seconds. Working
//! in standardized units makes every computation exactly equivariant to
//! scaling the targets by a power of two.

use rand::Rng;

use crate::domain::SearchSpace;
use crate::error::{Error, Result};
use crate::linalg::{backward_solve, cholesky_in_place, forward_solve, inverse_from_cholesky};
use crate::seeding::rng_from_seed;

pub const DEFAULT_LENGTH_SCALE: f64 = 0.2;
pub const DEFAULT_NOISE_RATIO: f64 = 1e-6;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;
/// A pivot smaller than this fraction of the diagonal scale counts as a failed factorization.
const PIVOT_FLOOR: f64 = 1e-11;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Kernel hyperparameters. Length scales are in normalized input units,
/// variances in seconds squared.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GpHyperparams {
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl GpHyperparams {
    /// `l = 0.2` per dimension, signal variance equal to the target variance,
    /// noise at `1e-6` of the signal.
    pub fn default_for(dim: usize, targets: &[f64]) -> Self {
        let (_, scale) = target_stats(targets);
        let signal = scale * scale;
        GpHyperparams {
            length_scales: vec![DEFAULT_LENGTH_SCALE; dim],
            signal_variance: signal,
            noise_variance: DEFAULT_NOISE_RATIO * signal,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.length_scales.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: self.length_scales.len(),
            });
        }
        let ok = self.length_scales.iter().all(|&l| l > 0.0 && l.is_finite())
            && self.signal_variance > 0.0
            && self.signal_variance.is_finite()
            && self.noise_variance >= 0.0
            && self.noise_variance.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::config("gp.hyperparams", format!("invalid hyperparameters {self:?}")))
        }
    }
}

/// Mean and standardization scale of the targets. The scale falls back to 1
/// for constant data.
fn target_stats(targets: &[f64]) -> (f64, f64) {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    let scale = if var > 0.0 && var.is_finite() { var.sqrt() } else { 1.0 };
    (mean, scale)
}

#[derive(Debug, Clone)]
struct Normalizer {
    lo: Vec<f64>,
    width: Vec<f64>,
}

impl Normalizer {
    fn new(space: &SearchSpace) -> Self {
        let lo = space.bounds().iter().map(|b| b.lo).collect();
        let width = space
            .bounds()
            .iter()
            .map(|b| if b.width() > 0.0 { b.width() } else { 1.0 })
            .collect();
        Normalizer { lo, width }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lo.iter().zip(&self.width))
            .map(|(v, (lo, w))| (v - lo) / w)
            .collect()
    }
}

#[inline]
fn scaled_sq_dist(a: &[f64], b: &[f64], inv_ls2: &[f64]) -> f64 {
    let mut s = 0.0;
    for d in 0..a.len() {
        let diff = a[d] - b[d];
        s += diff * diff * inv_ls2[d];
    }
    s
}

/// Adds the smallest jitter from the escalation ladder that lets the
/// factorization succeed. Returns the factor and the jitter used.
fn factorize(kernel: &[f64], n: usize, diag_scale: f64) -> Result<(Vec<f64>, f64)> {
    let floor = PIVOT_FLOOR * diag_scale;
    let attempt = |jitter: f64| {
        let mut a = kernel.to_vec();
        for i in 0..n {
            a[i * n + i] += jitter;
        }
        cholesky_in_place(&mut a, n, floor).then_some(a)
    };
    if let Some(l) = attempt(0.0) {
        return Ok((l, 0.0));
    }
    let mut rel = JITTER_START;
    loop {
        let jitter = rel * diag_scale;
        if let Some(l) = attempt(jitter) {
            return Ok((l, jitter));
        }
        if rel >= JITTER_MAX {
            return Err(Error::Numerical { jitter });
        }
        rel *= 10.0;
    }
}

/// A fitted surrogate. Immutable; posterior queries are pure.
#[derive(Debug, Clone)]
pub struct GpModel {
    normalizer: Normalizer,
    inputs: Vec<Vec<f64>>,
    /// Targets minus their mean, in seconds.
    centered: Vec<f64>,
    mean: f64,
    scale: f64,
    hyper: GpHyperparams,
    inv_ls2: Vec<f64>,
    /// Signal variance in standardized units.
    amp: f64,
    /// Lower Cholesky factor of `K + noise I + jitter I`, standardized units.
    chol: Vec<f64>,
    alpha: Vec<f64>,
    jitter: f64,
}

impl GpModel {
    pub fn fit<X: AsRef<[f64]>>(
        inputs: &[X],
        targets: &[f64],
        space: &SearchSpace,
        hyper: GpHyperparams,
    ) -> Result<Self> {
        let dim = space.dim();
        if inputs.is_empty() {
            return Err(Error::config("gp.fit", "at least one observation is required"));
        }
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                found: targets.len(),
            });
        }
        for x in inputs {
            if x.as_ref().len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: x.as_ref().len(),
                });
            }
        }
        hyper.validate(dim)?;

        let normalizer = Normalizer::new(space);
        let inputs: Vec<Vec<f64>> = inputs.iter().map(|x| normalizer.apply(x.as_ref())).collect();
        let (mean, scale) = target_stats(targets);
        let centered: Vec<f64> = targets.iter().map(|y| y - mean).collect();
        let y_unit: Vec<f64> = centered.iter().map(|c| c / scale).collect();
        let s2 = scale * scale;
        let amp = hyper.signal_variance / s2;
        let noise = hyper.noise_variance / s2;
        let inv_ls2: Vec<f64> = hyper.length_scales.iter().map(|l| 1.0 / (l * l)).collect();

        let n = inputs.len();
        let mut k = vec![0.0; n * n];
        for a in 0..n {
            k[a * n + a] = amp + noise;
            for b in 0..a {
                let v = amp * (-0.5 * scaled_sq_dist(&inputs[a], &inputs[b], &inv_ls2)).exp();
                k[a * n + b] = v;
                k[b * n + a] = v;
            }
        }
        let (chol, jitter) = factorize(&k, n, amp + noise)?;
        let alpha = backward_solve(&chol, n, &forward_solve(&chol, n, &y_unit));

        Ok(GpModel {
            normalizer,
            inputs,
            centered,
            mean,
            scale,
            hyper,
            inv_ls2,
            amp,
            chol,
            alpha,
            jitter,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inv_ls2.len()
    }

    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.hyper
    }

    /// Mean of the training targets (the prior mean in seconds).
    pub fn target_mean(&self) -> f64 {
        self.mean
    }

    pub fn centered_targets(&self) -> &[f64] {
        &self.centered
    }

    /// Training inputs mapped to the unit hypercube.
    pub fn normalized_inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    /// Diagonal jitter actually added, in seconds squared.
    pub fn jitter(&self) -> f64 {
        self.jitter * self.scale * self.scale
    }

    /// Posterior mean and standard deviation in seconds.
    pub fn posterior(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(self.posterior_unchecked(x))
    }

    pub(crate) fn posterior_unchecked(&self, x: &[f64]) -> (f64, f64) {
        let z = self.normalizer.apply(x);
        let n = self.len();
        let kstar: Vec<f64> = self
            .inputs
            .iter()
            .map(|xi| self.amp * (-0.5 * scaled_sq_dist(&z, xi, &self.inv_ls2)).exp())
            .collect();
        let mu: f64 = kstar.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let v = forward_solve(&self.chol, n, &kstar);
        let var = self.amp - v.iter().map(|t| t * t).sum::<f64>();
        let std = var.max(0.0).sqrt();
        (self.mean + self.scale * mu, self.scale * std)
    }

    /// Exact Gaussian log evidence of the training targets (in seconds).
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len();
        self.lml_standardized() - n as f64 * self.scale.ln()
    }

    fn lml_standardized(&self) -> f64 {
        let n = self.len();
        let fit: f64 = self
            .centered
            .iter()
            .zip(&self.alpha)
            .map(|(c, a)| c / self.scale * a)
            .sum();
        let log_det: f64 = (0..n).map(|i| self.chol[i * n + i].ln()).sum();
        -0.5 * fit - log_det - 0.5 * n as f64 * LN_2PI
    }
}

/// Box bounds on the log-hyperparameters searched by [`optimize_hyperparams`].
/// Signal and noise bounds are relative to the target variance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HyperBounds {
    pub log_length_scale: (f64, f64),
    pub log_signal_ratio: (f64, f64),
    pub log_noise_ratio: (f64, f64),
}

impl Default for HyperBounds {
    fn default() -> Self {
        HyperBounds {
            log_length_scale: (0.02f64.ln(), 10f64.ln()),
            log_signal_ratio: (1e-3f64.ln(), 1e2f64.ln()),
            log_noise_ratio: (1e-8f64.ln(), 0.25f64.ln()),
        }
    }
}

/// Log evidence as a function of `[ln l_1 .. ln l_D, ln amp, ln noise]` in
/// standardized units, with pairwise squared distances cached.
struct Evidence {
    n: usize,
    dim: usize,
    /// Per pair `(a, b)` with `b < a`, the squared coordinate differences.
    sq_diffs: Vec<f64>,
    y: Vec<f64>,
}

struct EvidenceEval {
    value: f64,
    grad: Option<Vec<f64>>,
}

impl Evidence {
    fn new(inputs: &[Vec<f64>], y: Vec<f64>) -> Self {
        let n = inputs.len();
        let dim = inputs.first().map_or(0, |x| x.len());
        let mut sq_diffs = Vec::with_capacity(n * (n.saturating_sub(1)) / 2 * dim);
        for a in 0..n {
            for b in 0..a {
                for d in 0..dim {
                    let diff = inputs[a][d] - inputs[b][d];
                    sq_diffs.push(diff * diff);
                }
            }
        }
        Evidence { n, dim, sq_diffs, y }
    }

    fn eval(&self, theta: &[f64], with_grad: bool) -> Option<EvidenceEval> {
        let (n, dim) = (self.n, self.dim);
        let inv_ls2: Vec<f64> = theta[..dim].iter().map(|t| (-2.0 * t).exp()).collect();
        let amp = theta[dim].exp();
        let noise = theta[dim + 1].exp();

        let mut k = vec![0.0; n * n];
        let mut p = 0;
        for a in 0..n {
            k[a * n + a] = amp + noise;
            for b in 0..a {
                let d2: f64 = self.sq_diffs[p..p + dim]
                    .iter()
                    .zip(&inv_ls2)
                    .map(|(s, w)| s * w)
                    .sum();
                p += dim;
                let v = amp * (-0.5 * d2).exp();
                k[a * n + b] = v;
                k[b * n + a] = v;
            }
        }
        let (chol, _) = factorize(&k, n, amp + noise).ok()?;
        let alpha = backward_solve(&chol, n, &forward_solve(&chol, n, &self.y));
        let fit: f64 = self.y.iter().zip(&alpha).map(|(y, a)| y * a).sum();
        let log_det: f64 = (0..n).map(|i| chol[i * n + i].ln()).sum();
        let value = -0.5 * fit - log_det - 0.5 * n as f64 * LN_2PI;
        if !value.is_finite() {
            return None;
        }
        if !with_grad {
            return Some(EvidenceEval { value, grad: None });
        }

        // d lml / d theta_j = 1/2 tr((alpha alpha^T - K^{-1}) dK/d theta_j)
        let kinv = inverse_from_cholesky(&chol, n);
        let mut grad = vec![0.0; dim + 2];
        let mut trace_w = 0.0;
        let mut amp_sum = 0.0;
        let mut p = 0;
        for a in 0..n {
            let waa = alpha[a] * alpha[a] - kinv[a * n + a];
            trace_w += waa;
            amp_sum += 0.5 * waa * amp;
            for b in 0..a {
                let w = alpha[a] * alpha[b] - kinv[a * n + b];
                let kab = k[a * n + b];
                // Off-diagonal pairs appear twice in the trace, cancelling the 1/2.
                amp_sum += w * kab;
                let wk = w * kab;
                for d in 0..dim {
                    grad[d] += wk * self.sq_diffs[p + d] * inv_ls2[d];
                }
                p += dim;
            }
        }
        grad[dim] = amp_sum;
        grad[dim + 1] = 0.5 * noise * trace_w;
        Some(EvidenceEval {
            value,
            grad: Some(grad),
        })
    }
}

const ASCENT_ITERS: usize = 60;
const RPROP_INITIAL_STEP: f64 = 0.1;
const RPROP_MAX_STEP: f64 = 1.0;
const RPROP_MIN_STEP: f64 = 1e-4;

/// Sign-based gradient ascent with per-coordinate step adaptation (iRprop-),
/// projected onto the box. Returns the best point visited.
fn rprop_ascent(evidence: &Evidence, start: Vec<f64>, lo: &[f64], hi: &[f64]) -> Option<(Vec<f64>, f64)> {
    let m = start.len();
    let mut theta = start;
    let first = evidence.eval(&theta, true)?;
    let mut best = (theta.clone(), first.value);
    let mut grad = first.grad.expect("gradient requested");
    let mut prev_grad = vec![0.0; m];
    let mut step = vec![RPROP_INITIAL_STEP; m];

    for _ in 0..ASCENT_ITERS {
        for j in 0..m {
            let sign = grad[j] * prev_grad[j];
            if sign > 0.0 {
                step[j] = (step[j] * 1.2).min(RPROP_MAX_STEP);
            } else if sign < 0.0 {
                step[j] = (step[j] * 0.5).max(RPROP_MIN_STEP * 1e-2);
                grad[j] = 0.0;
            }
            if grad[j] != 0.0 {
                theta[j] = (theta[j] + step[j] * grad[j].signum()).clamp(lo[j], hi[j]);
            }
        }
        prev_grad = grad;
        let Some(next) = evidence.eval(&theta, true) else {
            break;
        };
        if next.value > best.1 {
            best = (theta.clone(), next.value);
        }
        grad = next.grad.expect("gradient requested");
        if step.iter().all(|&s| s < RPROP_MIN_STEP) {
            break;
        }
    }
    Some(best)
}

/// Multi-start maximization of the log marginal likelihood over the
/// log-hyperparameters. Start 0 is [`GpHyperparams::default_for`], followed by
/// `restarts` uniform draws inside `bounds`. The result never has lower
/// evidence than the default and is a pure function of the inputs and `seed`.
pub fn optimize_hyperparams<X: AsRef<[f64]>>(
    inputs: &[X],
    targets: &[f64],
    space: &SearchSpace,
    bounds: &HyperBounds,
    restarts: usize,
    seed: u64,
) -> Result<GpHyperparams> {
    let dim = space.dim();
    let default = GpHyperparams::default_for(dim, targets);
    if inputs.len() < 2 {
        return Err(Error::config(
            "gp.optimize_hyperparams",
            "at least two observations are required",
        ));
    }
    let default_model = GpModel::fit(inputs, targets, space, default.clone());

    let normalizer = Normalizer::new(space);
    let x_norm: Vec<Vec<f64>> = inputs.iter().map(|x| normalizer.apply(x.as_ref())).collect();
    let (mean, scale) = target_stats(targets);
    let y_unit: Vec<f64> = targets.iter().map(|y| (y - mean) / scale).collect();
    let evidence = Evidence::new(&x_norm, y_unit);

    let mut lo = vec![bounds.log_length_scale.0; dim];
    let mut hi = vec![bounds.log_length_scale.1; dim];
    lo.extend([bounds.log_signal_ratio.0, bounds.log_noise_ratio.0]);
    hi.extend([bounds.log_signal_ratio.1, bounds.log_noise_ratio.1]);

    let mut start0: Vec<f64> = vec![DEFAULT_LENGTH_SCALE.ln(); dim];
    start0.extend([0.0, DEFAULT_NOISE_RATIO.ln()]);
    let mut starts = vec![start0
        .iter()
        .zip(lo.iter().zip(&hi))
        .map(|(t, (l, h))| t.clamp(*l, *h))
        .collect::<Vec<f64>>()];
    let mut rng = rng_from_seed(seed);
    for _ in 0..restarts {
        starts.push(
            lo.iter()
                .zip(&hi)
                .map(|(l, h)| if h > l { rng.random_range(*l..*h) } else { *l })
                .collect(),
        );
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        if let Some((theta, value)) = rprop_ascent(&evidence, start, &lo, &hi) {
            if best.as_ref().is_none_or(|(_, v)| value > *v) {
                best = Some((theta, value));
            }
        }
    }

    let Some((theta, _)) = best else {
        return Ok(default);
    };
    let s2 = scale * scale;
    let candidate = GpHyperparams {
        length_scales: theta[..dim].iter().map(|t| t.exp()).collect(),
        signal_variance: theta[dim].exp() * s2,
        noise_variance: theta[dim + 1].exp() * s2,
    };
    let Ok(default_model) = default_model else {
        return Ok(candidate);
    };
    match GpModel::fit(inputs, targets, space, candidate.clone()) {
        Ok(m) if m.log_marginal_likelihood() >= default_model.log_marginal_likelihood() => Ok(candidate),
        _ => Ok(default),
    }
}
