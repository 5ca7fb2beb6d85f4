//! The outer Bayesian optimization loop and its iteration history.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acquisition::{propose_next, ConfidenceBound, KappaSchedule, ProposalConfig};
use crate::domain::{DesignProblem, EvaluationResult, LayoutVector};
use crate::error::{Error, Result};
use crate::gp::{optimize_hyperparams, GpHyperparams, GpModel, HyperBounds};
use crate::seeding::{derive_seed, rng_from_seed, Stream};
use crate::simulator::CellSimulator;

/// Consecutive transport failures after which a run is abandoned.
pub const MAX_TRANSPORT_FAILURES: usize = 3;

/// A black-box objective. Implementations must return (possibly an error)
/// in bounded time.
pub trait Evaluator {
    fn evaluate(&mut self, x: &LayoutVector) -> Result<EvaluationResult>;

    /// Objective recorded for a failed evaluation.
    fn penalty(&self) -> f64;
}

impl Evaluator for CellSimulator {
    fn evaluate(&mut self, x: &LayoutVector) -> Result<EvaluationResult> {
        CellSimulator::evaluate(self, x, false)
    }

    fn penalty(&self) -> f64 {
        self.cell().penalty()
    }
}

impl<E: Evaluator + ?Sized> Evaluator for &mut E {
    fn evaluate(&mut self, x: &LayoutVector) -> Result<EvaluationResult> {
        (**self).evaluate(x)
    }

    fn penalty(&self) -> f64 {
        (**self).penalty()
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(&mut self, x: &LayoutVector) -> Result<EvaluationResult> {
        (**self).evaluate(x)
    }

    fn penalty(&self) -> f64 {
        (**self).penalty()
    }
}

/// Wraps a plain function of the coordinates; every value is a feasible cycle time.
pub struct FnEvaluator<F> {
    f: F,
    penalty: f64,
}

impl<F: FnMut(&[f64]) -> f64> FnEvaluator<F> {
    pub fn new(f: F, penalty: f64) -> Self {
        FnEvaluator { f, penalty }
    }
}

impl<F: FnMut(&[f64]) -> f64> Evaluator for FnEvaluator<F> {
    fn evaluate(&mut self, x: &LayoutVector) -> Result<EvaluationResult> {
        Ok(EvaluationResult::cycle_time((self.f)(x.coords())))
    }

    fn penalty(&self) -> f64 {
        self.penalty
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Random initial designs, counted against `n_sim`.
    pub n_init: usize,
    /// Total evaluation budget.
    pub n_sim: usize,
    /// Overrides the default schedule derived from `n_sim`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<KappaSchedule>,
    pub bound: ConfidenceBound,
    pub proposal: ProposalConfig,
    /// Hyperparameters are re-optimized every `refit_every` proposals.
    pub refit_every: usize,
    pub hyper_restarts: usize,
    pub hyper_bounds: HyperBounds,
    pub stall_limit: usize,
    /// Seconds the incumbent must drop by to reset the stall counter.
    pub improvement_tol: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            n_init: 20,
            n_sim: 200,
            schedule: None,
            bound: ConfidenceBound::Lower,
            proposal: ProposalConfig::default(),
            refit_every: 5,
            hyper_restarts: 8,
            hyper_bounds: HyperBounds::default(),
            stall_limit: 40,
            improvement_tol: 0.05,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_init == 0 || self.n_init >= self.n_sim {
            return Err(Error::config(
                "optimizer.n_init",
                format!("need 1 <= n_init < n_sim, got n_init={} n_sim={}", self.n_init, self.n_sim),
            ));
        }
        if self.stall_limit == 0 {
            return Err(Error::config("optimizer.stall_limit", "must be at least 1"));
        }
        if !(self.improvement_tol >= 0.0 && self.improvement_tol.is_finite()) {
            return Err(Error::config("optimizer.improvement_tol", "must be non-negative"));
        }
        if self.refit_every == 0 {
            return Err(Error::config("optimizer.refit_every", "must be at least 1"));
        }
        if let Some(s) = &self.schedule {
            KappaSchedule::new(s.kappa0, s.scale, s.translation)?;
        }
        self.proposal.validate()
    }

    pub fn schedule(&self) -> KappaSchedule {
        self.schedule.unwrap_or_else(|| KappaSchedule::for_budget(self.n_sim))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Zero-based evaluation index.
    pub k: usize,
    pub x: Vec<f64>,
    pub objective: f64,
    pub feasible: bool,
    pub penalized: bool,
    /// Absent for initial designs.
    pub kappa: Option<f64>,
    /// Best feasible objective up to and including this record.
    pub incumbent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Stalled,
    TransportAbort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPoint {
    pub k: usize,
    pub x: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub seed: u64,
    pub config: OptimizerConfig,
    pub records: Vec<IterationRecord>,
    pub best: Option<BestPoint>,
    pub stop_reason: StopReason,
    /// False when the run was abandoned before its stopping rule fired.
    pub complete: bool,
}

impl OptimizationReport {
    /// Copy with every timing field zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for rec in &mut r.records {
            rec.wall_ms = 0.0;
        }
        r
    }

    /// Incumbent after evaluation `k`, carrying the final value past an early stop.
    pub fn incumbent_at(&self, k: usize) -> Option<f64> {
        self.records.iter().take_while(|r| r.k <= k).last().and_then(|r| r.incumbent)
    }
}

/// `n` distinct feasible points drawn uniformly over the search box.
pub fn init_design(problem: &DesignProblem, n: usize, seed: u64) -> Result<Vec<LayoutVector>> {
    if n == 0 {
        return Err(Error::config("optimizer.n_init", "must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let budget = 1000 * n;
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut draws = 0;
    let mut stats = None;
    while points.len() < n && draws < budget {
        let (batch, s) = crate::acquisition::sample_feasible(problem, n - points.len(), budget - draws, &mut rng);
        draws += s.draws;
        for x in batch {
            if !points.contains(&x) {
                points.push(x);
            }
        }
        stats = Some(s);
    }
    if points.len() < n {
        let mut s = stats.expect("at least one batch was drawn");
        s.draws = draws;
        return Err(s.into_error(problem));
    }
    points.into_iter().map(|x| problem.layout(x)).collect()
}

/// Minimum over feasible, non-penalized records; ties go to the earliest.
pub fn best_so_far(report: &OptimizationReport) -> Result<(Vec<f64>, f64)> {
    best_record(&report.records)
        .map(|r| (r.x.clone(), r.objective))
        .ok_or(Error::NoSolution)
}

fn best_record(records: &[IterationRecord]) -> Option<&IterationRecord> {
    let mut best: Option<&IterationRecord> = None;
    for r in records.iter().filter(|r| r.feasible && !r.penalized) {
        if best.is_none_or(|b| r.objective < b.objective) {
            best = Some(r);
        }
    }
    best
}

struct History<'a> {
    records: Vec<IterationRecord>,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    incumbent: Option<f64>,
    transport_failures: usize,
    evaluator: &'a mut dyn Evaluator,
}

impl History<'_> {
    /// Evaluates `x` and appends a record. Returns false once transport has
    /// failed too many times in a row.
    fn observe(&mut self, k: usize, x: LayoutVector, kappa: Option<f64>) -> bool {
        let started = Instant::now();
        let outcome = self.evaluator.evaluate(&x);
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        let (result, error) = match outcome {
            Ok(r) => {
                self.transport_failures = 0;
                (r, None)
            }
            Err(e) => {
                if matches!(e, Error::Transport(_)) {
                    self.transport_failures += 1;
                } else {
                    self.transport_failures = 0;
                }
                (EvaluationResult::penalty(self.evaluator.penalty()), Some(e.to_string()))
            }
        };
        if result.feasible && !result.penalized && self.incumbent.is_none_or(|b| result.objective < b) {
            self.incumbent = Some(result.objective);
        }
        let coords = x.into_coords();
        self.inputs.push(coords.clone());
        self.targets.push(result.objective);
        self.records.push(IterationRecord {
            k,
            x: coords,
            objective: result.objective,
            feasible: result.feasible,
            penalized: result.penalized,
            kappa,
            incumbent: self.incumbent,
            error,
            wall_ms,
        });
        self.transport_failures < MAX_TRANSPORT_FAILURES
    }
}

fn target_variance(targets: &[f64]) -> f64 {
    GpHyperparams::default_for(0, targets).signal_variance
}

/// Runs the optimization loop. Evaluation failures become penalized records;
/// only configuration, infeasibility and numerical problems are errors.
pub fn run(
    config: &OptimizerConfig,
    problem: &DesignProblem,
    evaluator: &mut dyn Evaluator,
) -> Result<OptimizationReport> {
    config.validate()?;
    let seed = config.seed;
    let schedule = config.schedule();
    let initial = init_design(problem, config.n_init, derive_seed(seed, Stream::InitDesign, 0))?;

    let mut history = History {
        records: Vec::with_capacity(config.n_sim),
        inputs: Vec::with_capacity(config.n_sim),
        targets: Vec::with_capacity(config.n_sim),
        incumbent: None,
        transport_failures: 0,
        evaluator,
    };
    let finish = |history: History, stop_reason: StopReason| {
        let best = best_record(&history.records).map(|r| BestPoint {
            k: r.k,
            x: r.x.clone(),
            objective: r.objective,
        });
        OptimizationReport {
            seed,
            config: config.clone(),
            records: history.records,
            best,
            stop_reason,
            complete: stop_reason != StopReason::TransportAbort,
        }
    };

    for (k, x) in initial.into_iter().enumerate() {
        if !history.observe(k, x, None) {
            return Ok(finish(history, StopReason::TransportAbort));
        }
    }

    let mut reference = history.incumbent;
    let mut stalled = 0;
    // Hyperparameters together with the target variance they were fitted at.
    let mut hyper: Option<(GpHyperparams, f64)> = None;
    for k in config.n_init..config.n_sim {
        let var = target_variance(&history.targets);
        let h = match &hyper {
            Some((h, fitted_var)) if (k - config.n_init) % config.refit_every != 0 => {
                let ratio = var / fitted_var;
                GpHyperparams {
                    length_scales: h.length_scales.clone(),
                    signal_variance: h.signal_variance * ratio,
                    noise_variance: h.noise_variance * ratio,
                }
            }
            _ if history.inputs.len() >= 2 => optimize_hyperparams(
                &history.inputs,
                &history.targets,
                problem.space(),
                &config.hyper_bounds,
                config.hyper_restarts,
                derive_seed(seed, Stream::Hyperparams, k as u64),
            )?,
            _ => GpHyperparams::default_for(problem.dim(), &history.targets),
        };
        hyper = Some((h.clone(), var));
        let model = GpModel::fit(&history.inputs, &history.targets, problem.space(), h)?;

        let kappa = schedule.kappa(k);
        let proposal = ProposalConfig {
            seed: derive_seed(seed, Stream::Proposal, k as u64),
            ..config.proposal.clone()
        };
        let x = propose_next(&model, problem, kappa, config.bound, &proposal)?;
        if !history.observe(k, x, Some(kappa)) {
            return Ok(finish(history, StopReason::TransportAbort));
        }

        match (history.incumbent, reference) {
            (Some(now), Some(r)) if now < r - config.improvement_tol => {
                reference = Some(now);
                stalled = 0;
            }
            (Some(now), None) => {
                reference = Some(now);
                stalled = 0;
            }
            _ => stalled += 1,
        }
        if stalled >= config.stall_limit && k + 1 < config.n_sim {
            return Ok(finish(history, StopReason::Stalled));
        }
    }
    Ok(finish(history, StopReason::Budget))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{BandMode, DistanceConstraint, EntityMap, Interval, SearchSpace};
    use proptest::prelude::{prop_assert_eq, proptest};
    use std::sync::Arc;

    fn square(dim: usize) -> DesignProblem {
        DesignProblem::unconstrained(SearchSpace::new(vec![Interval { lo: 0.0, hi: 1.0 }; dim]).unwrap()).unwrap()
    }

    fn bowl(c: [f64; 2]) -> impl FnMut(&[f64]) -> f64 {
        move |x: &[f64]| (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)
    }

    fn quick(n_init: usize, n_sim: usize, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            n_init,
            n_sim,
            seed,
            improvement_tol: 0.0,
            stall_limit: n_sim,
            proposal: ProposalConfig { n_starts: 64, ..ProposalConfig::default() },
            hyper_restarts: 2,
            ..OptimizerConfig::default()
        }
    }

    fn record(k: usize, objective: f64, feasible: bool) -> IterationRecord {
        IterationRecord {
            k,
            x: vec![k as f64],
            objective,
            feasible,
            penalized: !feasible,
            kappa: None,
            incumbent: None,
            error: None,
            wall_ms: 0.0,
        }
    }

    fn report_of(records: Vec<IterationRecord>) -> OptimizationReport {
        OptimizationReport {
            seed: 0,
            config: OptimizerConfig::default(),
            records,
            best: None,
            stop_reason: StopReason::Budget,
            complete: true,
        }
    }

    #[test]
    fn init_design_unconstrained_in_bounds() {
        let p = square(4);
        let pts = init_design(&p, 25, 3).unwrap();
        assert_eq!(pts.len(), 25);
        for x in &pts {
            assert!(p.space().contains(x.coords()));
        }
        assert_eq!(pts, init_design(&p, 25, 3).unwrap());
        assert_ne!(pts[0], init_design(&p, 25, 4).unwrap()[0]);
    }

    #[test]
    fn init_design_thin_band() {
        let map = Arc::new(EntityMap::sequential(vec!["a".into()], vec![("anchor".into(), [0.0, 0.0])]).unwrap());
        let space = SearchSpace::new(vec![Interval { lo: 0.0, hi: 1.0 }; 2]).unwrap();
        let c = DistanceConstraint::new("a", "anchor", 0.70, 0.72, BandMode::InsideBand).unwrap();
        let p = DesignProblem::new(map, space, vec![c]).unwrap();
        let pts = init_design(&p, 10, 1).unwrap();
        assert!(pts.iter().all(|x| p.is_feasible(x.coords())));

        let tight = DistanceConstraint::new("a", "anchor", 5.0, 6.0, BandMode::InsideBand).unwrap();
        let p = DesignProblem::new(p.map().clone(), p.space().clone(), vec![tight]).unwrap();
        match init_design(&p, 3, 1) {
            Err(Error::Infeasible { draws, tightest }) => {
                assert_eq!(draws, 3000);
                assert!(tightest.contains("a-anchor"), "{tightest}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn one_proposal_when_budget_is_init_plus_one() {
        let p = square(2);
        let mut ev = FnEvaluator::new(bowl([0.3, 0.6]), 100.0);
        let r = run(&quick(5, 6, 0), &p, &mut ev).unwrap();
        assert_eq!(r.records.len(), 6);
        assert_eq!(r.records.iter().filter(|r| r.kappa.is_some()).count(), 1);
        assert_eq!(r.stop_reason, StopReason::Budget);
    }

    #[test]
    fn bowl_minimum_is_found() {
        let p = square(2);
        let c = [0.3, 0.6];
        for seed in 0..2 {
            let mut ev = FnEvaluator::new(bowl(c), 100.0);
            let r = run(&quick(10, 60, seed), &p, &mut ev).unwrap();
            let (x, _) = best_so_far(&r).unwrap();
            let err = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt();
            assert!(err <= 0.05 * 2f64.sqrt(), "seed {seed}: {err}");
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let p = square(2);
        let cfg = quick(6, 14, 9);
        let a = run(&cfg, &p, &mut FnEvaluator::new(bowl([0.7, 0.2]), 100.0)).unwrap();
        let b = run(&cfg, &p, &mut FnEvaluator::new(bowl([0.7, 0.2]), 100.0)).unwrap();
        assert_eq!(
            serde_json::to_string(&a.without_timing()).unwrap(),
            serde_json::to_string(&b.without_timing()).unwrap()
        );
        for w in a.records.windows(2) {
            assert!(w[1].incumbent <= w[0].incumbent);
        }
    }

    #[test]
    fn scaled_objective_gives_same_trajectory() {
        let p = square(2);
        let cfg = quick(6, 16, 2);
        let mut f = bowl([0.4, 0.5]);
        let a = run(&cfg, &p, &mut FnEvaluator::new(bowl([0.4, 0.5]), 100.0)).unwrap();
        let b = run(&cfg, &p, &mut FnEvaluator::new(move |x: &[f64]| 4.0 * f(x), 400.0)).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.x, rb.x);
        }
    }

    #[test]
    fn stall_rule_stops_early() {
        let p = square(2);
        let cfg = OptimizerConfig { stall_limit: 3, improvement_tol: 1e9, ..quick(4, 30, 0) };
        let r = run(&cfg, &p, &mut FnEvaluator::new(bowl([0.5, 0.5]), 100.0)).unwrap();
        assert_eq!(r.records.len(), 7);
        assert_eq!(r.stop_reason, StopReason::Stalled);
        assert!(r.complete);
    }

    struct Flaky {
        calls: usize,
        transport_from: usize,
    }

    impl Evaluator for Flaky {
        fn evaluate(&mut self, x: &LayoutVector) -> Result<EvaluationResult> {
            self.calls += 1;
            if self.calls == 2 {
                return Err(Error::Evaluation { code: "eval".into(), message: "boom".into() });
            }
            if self.calls >= self.transport_from {
                return Err(Error::Transport("connection reset".into()));
            }
            Ok(EvaluationResult::cycle_time(1.0 + x.coords()[0]))
        }

        fn penalty(&self) -> f64 {
            50.0
        }
    }

    #[test]
    fn evaluator_errors_are_penalized_and_transport_aborts() {
        let p = square(2);
        let mut ev = Flaky { calls: 0, transport_from: 9 };
        let r = run(&quick(4, 20, 0), &p, &mut ev).unwrap();
        assert_eq!(r.records[1].objective, 50.0);
        assert!(r.records[1].penalized && r.records[1].error.as_deref().unwrap().contains("boom"));
        assert_eq!(r.records.len(), 8 + MAX_TRANSPORT_FAILURES);
        assert!(!r.complete);
        assert_eq!(r.stop_reason, StopReason::TransportAbort);
        assert!(best_so_far(&r).is_ok());
    }

    #[test]
    fn best_so_far_edge_cases() {
        let single = report_of(vec![record(0, 3.0, true)]);
        assert_eq!(best_so_far(&single).unwrap(), (vec![0.0], 3.0));
        let all_bad = report_of(vec![record(0, 3.0, false), record(1, 2.0, false)]);
        assert!(matches!(best_so_far(&all_bad), Err(Error::NoSolution)));
        let tie = report_of(vec![record(0, 5.0, true), record(1, 2.0, true), record(2, 2.0, true)]);
        assert_eq!(best_so_far(&tie).unwrap().0, vec![1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = OptimizerConfig { n_init: 200, ..OptimizerConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("n_init"));
        let bad = OptimizerConfig { stall_limit: 0, ..OptimizerConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!(OptimizerConfig::default().schedule().translation, 150.0);
    }

    proptest! {
        #[test]
        fn best_so_far_matches_scan(values in proptest::collection::vec((0u8..6, proptest::bool::ANY), 1..40)) {
            let records: Vec<_> = values.iter().enumerate().map(|(k, &(v, ok))| record(k, v as f64, ok)).collect();
            let report = report_of(records.clone());
            let mut scan: Option<(usize, f64)> = None;
            for (k, r) in records.iter().enumerate() {
                if r.feasible && !r.penalized && scan.is_none_or(|(_, b)| r.objective < b) {
                    scan = Some((k, r.objective));
                }
            }
            match scan {
                Some((k, v)) => prop_assert_eq!(best_so_far(&report).unwrap(), (vec![k as f64], v)),
                None => prop_assert_eq!(best_so_far(&report).is_err(), true),
            }
            // prefix monotonicity
            let mut last = f64::INFINITY;
            for n in 1..=records.len() {
                if let Ok((_, v)) = best_so_far(&report_of(records[..n].to_vec())) {
                    proptest::prop_assert!(v <= last);
                    last = v;
                }
            }
        }
    }
}
