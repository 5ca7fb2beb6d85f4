//! Exhaustive grid search, used to check optimizer quality on small scenes.

use serde::{Deserialize, Serialize};

use crate::domain::DesignProblem;
use crate::driver::Evaluator;
use crate::error::{Error, Result};

pub const MAX_GRID_POINTS: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub grid_points: usize,
    /// Grid points that satisfied every constraint and were evaluated.
    pub evaluated: usize,
    pub best_x: Vec<f64>,
    pub best_objective: f64,
    /// Largest feasible, non-penalized objective seen.
    pub worst_objective: f64,
}

impl OracleResult {
    pub fn range(&self) -> f64 {
        self.worst_objective - self.best_objective
    }
}

/// Evaluates every feasible point of an `n`-per-axis grid spanning the search
/// box (degenerate axes contribute one value). Ties go to the first point in
/// enumeration order, where the last coordinate varies fastest.
pub fn grid_search(problem: &DesignProblem, n: usize, evaluator: &mut dyn Evaluator) -> Result<OracleResult> {
    if n < 2 {
        return Err(Error::config("grid", "need at least 2 points per dimension"));
    }
    let axes: Vec<Vec<f64>> = problem
        .space()
        .bounds()
        .iter()
        .map(|b| {
            if b.hi > b.lo {
                (0..n).map(|i| if i + 1 == n { b.hi } else { b.lo + b.width() * i as f64 / (n - 1) as f64 }).collect()
            } else {
                vec![b.lo]
            }
        })
        .collect();
    let total = axes.iter().try_fold(1u128, |acc, a| acc.checked_mul(a.len() as u128));
    let total = match total {
        Some(t) if t <= MAX_GRID_POINTS => t as usize,
        _ => {
            return Err(Error::config(
                "grid",
                format!(
                    "{n}^{} grid exceeds {MAX_GRID_POINTS} points; use fewer optimized entities or a coarser grid",
                    problem.dim()
                ),
            ))
        }
    };

    let dim = axes.len();
    let mut idx = vec![0usize; dim];
    let mut evaluated = 0;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..total {
        let x: Vec<f64> = idx.iter().zip(&axes).map(|(&i, a)| a[i]).collect();
        if problem.is_feasible(&x) {
            evaluated += 1;
            let r = evaluator.evaluate(&problem.layout(x.clone())?)?;
            if r.feasible && !r.penalized {
                worst = worst.max(r.objective);
                if best.as_ref().is_none_or(|(_, b)| r.objective < *b) {
                    best = Some((x, r.objective));
                }
            }
        }
        for d in (0..dim).rev() {
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
    let (best_x, best_objective) = best.ok_or(Error::NoSolution)?;
    Ok(OracleResult {
        grid_points: total,
        evaluated,
        best_x,
        best_objective,
        worst_objective: worst,
    })
}
