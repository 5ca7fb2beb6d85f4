//! Confidence-bound acquisition with a sigmoid exploration schedule, and the
//! constrained inner optimizer that picks the next layout to simulate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{DesignProblem, LayoutVector};
use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::seeding::rng_from_seed;

pub const DEFAULT_KAPPA0: f64 = 2.0;
pub const DEFAULT_KAPPA_SCALE: f64 = 0.1;
/// Midpoint of the decay as a fraction of the evaluation budget.
pub const DEFAULT_KAPPA_MIDPOINT: f64 = 0.75;

/// `kappa(k) = kappa0 / (1 + exp(-scale * (translation - k)))`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaSchedule {
    pub kappa0: f64,
    pub scale: f64,
    pub translation: f64,
}

impl KappaSchedule {
    pub fn new(kappa0: f64, scale: f64, translation: f64) -> Result<Self> {
        if !(kappa0 > 0.0 && scale > 0.0 && translation > 0.0) {
            return Err(Error::config(
                "kappa_schedule",
                "kappa0, scale and translation must all be positive",
            ));
        }
        Ok(KappaSchedule {
            kappa0,
            scale,
            translation,
        })
    }

    /// Default schedule for a budget of `n_sim` evaluations: decay midpoint at 75% of it.
    pub fn for_budget(n_sim: usize) -> Self {
        KappaSchedule {
            kappa0: DEFAULT_KAPPA0,
            scale: DEFAULT_KAPPA_SCALE,
            translation: DEFAULT_KAPPA_MIDPOINT * n_sim as f64,
        }
    }

    pub fn kappa(&self, k: usize) -> f64 {
        kappa(self, k)
    }
}

pub fn kappa(schedule: &KappaSchedule, k: usize) -> f64 {
    schedule.kappa0 / (1.0 + (-schedule.scale * (schedule.translation - k as f64)).exp())
}

/// Sign convention of the confidence bound. Lower values are always preferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceBound {
    /// `mu - kappa * sigma`: optimistic bound for minimization.
    #[default]
    Lower,
    /// `mu + kappa * sigma`, minimized as written.
    Upper,
}

pub fn acquisition_value(model: &GpModel, x: &[f64], kappa: f64, bound: ConfidenceBound) -> Result<f64> {
    let (mean, std) = model.posterior(x)?;
    Ok(combine(mean, std, kappa, bound))
}

#[inline]
fn combine(mean: f64, std: f64, kappa: f64, bound: ConfidenceBound) -> f64 {
    match bound {
        ConfidenceBound::Lower => mean - kappa * std,
        ConfidenceBound::Upper => mean + kappa * std,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    /// Feasible uniform seeds drawn per proposal.
    pub n_starts: usize,
    /// How many of the best seeds are refined by pattern search.
    pub refine_top: usize,
    /// Pattern-search sweeps per refined seed.
    pub refine_steps: usize,
    /// Step decay after a sweep without improvement, in (0, 1).
    pub refine_shrink: f64,
    /// Initial step as a fraction of each coordinate's range.
    pub initial_step: f64,
    pub seed: u64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            n_starts: 256,
            refine_top: 8,
            refine_steps: 40,
            refine_shrink: 0.5,
            initial_step: 0.1,
            seed: 0,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 {
            return Err(Error::config("proposal.n_starts", "must be at least 1"));
        }
        if !(self.refine_shrink > 0.0 && self.refine_shrink < 1.0) {
            return Err(Error::config("proposal.refine_shrink", "must lie in (0, 1)"));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(Error::config("proposal.initial_step", "must be positive"));
        }
        Ok(())
    }
}

/// Draws up to `wanted` feasible points uniformly from the search box by
/// rejection, giving up after `budget` draws.
pub(crate) fn sample_feasible<R: Rng>(
    problem: &DesignProblem,
    wanted: usize,
    budget: usize,
    rng: &mut R,
) -> (Vec<Vec<f64>>, RejectionStats) {
    let mut out = Vec::with_capacity(wanted);
    let mut stats = RejectionStats {
        draws: 0,
        violations: vec![0; problem.constraints().len()],
    };
    while out.len() < wanted && stats.draws < budget {
        stats.draws += 1;
        let x: Vec<f64> = problem
            .space()
            .bounds()
            .iter()
            .map(|b| if b.hi > b.lo { rng.random_range(b.lo..=b.hi) } else { b.lo })
            .collect();
        let values = problem.constraint_values(&x);
        let mut ok = true;
        for (count, g) in stats.violations.iter_mut().zip(&values) {
            if *g > 0.0 {
                *count += 1;
                ok = false;
            }
        }
        if ok {
            out.push(x);
        }
    }
    (out, stats)
}

pub(crate) struct RejectionStats {
    pub draws: usize,
    violations: Vec<usize>,
}

impl RejectionStats {
    /// Infeasibility error naming the most frequently violated constraint.
    pub fn into_error(self, problem: &DesignProblem) -> Error {
        let tightest = self
            .violations
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, count)| {
                format!(
                    "#{i} {} (violated by {count} of {} draws)",
                    problem.constraints()[i],
                    self.draws
                )
            })
            .unwrap_or_else(|| "none".to_owned());
        Error::Infeasible {
            draws: self.draws,
            tightest,
        }
    }
}

const MIN_RELATIVE_STEP: f64 = 1e-9;

/// Coordinate-wise pattern search from `x`, accepting only feasible strict
/// improvements. Returns the final point and its value.
fn pattern_search(
    problem: &DesignProblem,
    mut x: Vec<f64>,
    mut fx: f64,
    config: &ProposalConfig,
    f: &impl Fn(&[f64]) -> f64,
) -> (Vec<f64>, f64) {
    let bounds = problem.space().bounds();
    let mut step: Vec<f64> = bounds.iter().map(|b| config.initial_step * b.width()).collect();
    let min_step: Vec<f64> = bounds.iter().map(|b| MIN_RELATIVE_STEP * b.width()).collect();
    for _ in 0..config.refine_steps {
        if step.iter().zip(&min_step).all(|(s, m)| s <= m) {
            break;
        }
        let mut improved = false;
        for d in 0..x.len() {
            if step[d] <= 0.0 {
                continue;
            }
            for dir in [1.0, -1.0] {
                let moved = (x[d] + dir * step[d]).clamp(bounds[d].lo, bounds[d].hi);
                if moved == x[d] {
                    continue;
                }
                let mut cand = x.clone();
                cand[d] = moved;
                if !problem.is_feasible(&cand) {
                    continue;
                }
                let fc = f(&cand);
                if fc < fx {
                    x = cand;
                    fx = fc;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            for s in &mut step {
                *s *= config.refine_shrink;
            }
        }
    }
    (x, fx)
}

/// Next layout to evaluate: the feasible minimizer of the acquisition found by
/// multi-start pattern search. Deterministic given `config.seed`.
pub fn propose_next(
    model: &GpModel,
    problem: &DesignProblem,
    kappa: f64,
    bound: ConfidenceBound,
    config: &ProposalConfig,
) -> Result<LayoutVector> {
    config.validate()?;
    if model.dim() != problem.dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.dim(),
            found: model.dim(),
        });
    }
    let mut rng = rng_from_seed(config.seed);
    let budget = config.n_starts.saturating_mul(1000);
    let (seeds, stats) = sample_feasible(problem, config.n_starts, budget, &mut rng);
    if seeds.is_empty() {
        return Err(stats.into_error(problem));
    }

    let acq = |x: &[f64]| {
        let (mean, std) = model.posterior_unchecked(x);
        combine(mean, std, kappa, bound)
    };
    let values: Vec<f64> = seeds.iter().map(|x| acq(x)).collect();
    let mut order: Vec<usize> = (0..seeds.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));

    // (value, seed index, point); the lexicographic minimum wins.
    let mut best = (values[order[0]], order[0], seeds[order[0]].clone());
    for &i in order.iter().take(config.refine_top.max(1)) {
        let (x, fx) = pattern_search(problem, seeds[i].clone(), values[i], config, &acq);
        if fx < best.0 || (fx == best.0 && i < best.1) {
            best = (fx, i, x);
        }
    }
    problem.layout(best.2)
}
