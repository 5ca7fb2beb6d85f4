//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use cellopt::acquisition::{kappa, KappaSchedule};
use cellopt::domain::{Agent, DesignProblem, Interval, SearchSpace};
use cellopt::driver::{best_so_far, init_design, run, FnEvaluator, OptimizationReport, OptimizerConfig};
use cellopt::gp::{GpHyperparams, GpModel};
use cellopt::oracle::grid_search;
use cellopt::protocol::{RemoteEvaluator, Server};
use cellopt::scenario::ScenarioFile;
use cellopt::seeding::{derive_seed, Stream};
use cellopt::simulator::{evaluate, schedule};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Outcome = Result<String, String>;

fn path(rel: &str) -> String {
    format!("{}/{rel}", env!("CARGO_MANIFEST_DIR"))
}

fn reference() -> ScenarioFile {
    ScenarioFile::load(path("../../scenarios/reference.json")).unwrap()
}

fn mini() -> ScenarioFile {
    ScenarioFile::load(path("../../scenarios/mini.json")).unwrap()
}

struct ReferenceRuns {
    reports: Vec<OptimizationReport>,
    random_means: Vec<f64>,
    elapsed: Duration,
}

fn reference_runs() -> ReferenceRuns {
    let s = reference();
    let problem = s.problem().unwrap();
    let sim = s.simulator().unwrap();
    let started = Instant::now();
    let mut reports = Vec::new();
    let mut random_means = Vec::new();
    for seed in SEEDS {
        let config = OptimizerConfig { seed, ..s.optimizer.clone() };
        reports.push(run(&config, &problem, &mut sim.clone()).unwrap());
        let random = init_design(&problem, 200, derive_seed(seed, Stream::Baseline, 0)).unwrap();
        let total: f64 = random.iter().map(|x| sim.evaluate(x, false).unwrap().objective).sum();
        random_means.push(total / 200.0);
    }
    ReferenceRuns { reports, random_means, elapsed: started.elapsed() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c1_relative_improvement(runs: &ReferenceRuns) -> Outcome {
    let gains: Vec<f64> = runs
        .reports
        .iter()
        .zip(&runs.random_means)
        .map(|(r, mean)| (mean - best_so_far(r).unwrap().1) / mean)
        .collect();
    let med = median(gains.clone());
    let detail = format!(
        "median improvement {:.1}% (per seed: {}), {:.0} s for 5 runs",
        100.0 * med,
        gains.iter().map(|g| format!("{:.1}%", 100.0 * g)).collect::<Vec<_>>().join(", "),
        runs.elapsed.as_secs_f64()
    );
    if med >= 0.10 && runs.elapsed < Duration::from_secs(300) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c2_convergence_shape(runs: &ReferenceRuns) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (seed, r) in SEEDS.iter().zip(&runs.reports) {
        let at150 = r.incumbent_at(149).unwrap();
        let at200 = r.incumbent_at(199).unwrap();
        let rel = (at150 - at200) / at200;
        ok &= rel <= 0.02;
        parts.push(format!("seed {seed}: {at150:.3} -> {at200:.3} ({} evals)", r.records.len()));
    }
    let detail = parts.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c3_kappa_schedule() -> Outcome {
    let s = KappaSchedule::for_budget(200);
    let direct = |k: f64| 2.0 / (1.0 + (-0.1 * (150.0 - k)).exp());
    let mid = (kappa(&s, 150) - 1.0).abs();
    let strictly = (0..200).all(|k| kappa(&s, k + 1) < kappa(&s, k));
    let e0 = (kappa(&s, 0) - direct(0.0)).abs();
    let e200 = (kappa(&s, 200) - direct(200.0)).abs();
    let detail = format!(
        "|k(b)-1|={mid:e}, k(0)={:.12}, k(200)={:.12}, strictly decreasing: {strictly}",
        kappa(&s, 0),
        kappa(&s, 200)
    );
    if mid <= 1e-12 && strictly && e0 <= 1e-12 && e200 <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Explicit covariance matrix, LU inverse and determinant.
fn dense_reference(
    xs: &[Vec<f64>],
    ys: &[f64],
    space: &SearchSpace,
    h: &GpHyperparams,
    jitter: f64,
    queries: &[Vec<f64>],
) -> (Vec<(f64, f64)>, f64) {
    let b = space.bounds();
    let norm = |p: &[f64]| -> Vec<f64> { p.iter().zip(b).map(|(v, iv)| (v - iv.lo) / (iv.hi - iv.lo)).collect() };
    let kern = |p: &[f64], q: &[f64]| {
        let r2: f64 = p.iter().zip(q).zip(&h.length_scales).map(|((a, c), l)| ((a - c) / l).powi(2)).sum();
        h.signal_variance * (-0.5 * r2).exp()
    };
    let z: Vec<Vec<f64>> = xs.iter().map(|x| norm(x)).collect();
    let n = xs.len();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let y = DVector::from_iterator(n, ys.iter().map(|v| v - mean));
    let k = DMatrix::from_fn(n, n, |i, j| kern(&z[i], &z[j]) + if i == j { h.noise_variance + jitter } else { 0.0 });
    let det = k.clone().lu().determinant();
    let kinv = k.try_inverse().unwrap();
    let alpha = &kinv * &y;
    let lml = -0.5 * y.dot(&alpha) - 0.5 * det.ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let post = queries
        .iter()
        .map(|q| {
            let zq = norm(q);
            let ks = DVector::from_iterator(n, z.iter().map(|zi| kern(&zq, zi)));
            let m = mean + ks.dot(&alpha);
            let v = h.signal_variance - ks.dot(&(&kinv * &ks));
            (m, v.max(0.0).sqrt())
        })
        .collect();
    (post, lml)
}

fn c4_gp_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=50);
        let dim = rng.random_range(1..=8);
        let space = SearchSpace::new(
            (0..dim)
                .map(|_| {
                    let lo = rng.random_range(-3.0..3.0);
                    Interval { lo, hi: lo + rng.random_range(0.2..4.0) }
                })
                .collect(),
        )
        .unwrap();
        let sample = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            space.bounds().iter().map(|b| rng.random_range(b.lo..b.hi)).collect()
        };
        let xs: Vec<Vec<f64>> = (0..n).map(|_| sample(&mut rng)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 10.0 + x.iter().map(|v| (1.3 * v).cos()).sum::<f64>()).collect();
        let h = GpHyperparams {
            length_scales: (0..dim).map(|_| rng.random_range(0.1..1.5)).collect(),
            signal_variance: rng.random_range(0.2..3.0),
            noise_variance: rng.random_range(1e-4..1e-1),
        };
        let model = GpModel::fit(&xs, &ys, &space, h.clone()).unwrap();
        let mut queries: Vec<Vec<f64>> = (0..10).map(|_| sample(&mut rng)).collect();
        queries.push(xs[0].clone());
        let (post, lml) = dense_reference(&xs, &ys, &space, &h, model.jitter(), &queries);
        for (q, (m, s)) in queries.iter().zip(post) {
            let (gm, gs) = model.posterior(q).unwrap();
            worst = worst.max((gm - m).abs()).max((gs - s).abs());
        }
        worst = worst.max((model.log_marginal_likelihood() - lml).abs());
    }
    let elapsed = started.elapsed();
    let detail = format!("max deviation {worst:e} over 100 instances in {:.2} s", elapsed.as_secs_f64());
    if worst <= 1e-8 && elapsed < Duration::from_secs(30) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn check_constraints(problem: &DesignProblem, report: &OptimizationReport) -> Result<usize, String> {
    for r in &report.records {
        if !problem.space().contains(&r.x) {
            return Err(format!("record {} out of bounds", r.k));
        }
        let worst = problem.constraint_values(&r.x).into_iter().fold(f64::NEG_INFINITY, f64::max);
        if worst > 1e-12 {
            return Err(format!("record {} violates a constraint by {worst:e}", r.k));
        }
    }
    Ok(report.records.len())
}

fn c5_constraint_soundness(runs: &ReferenceRuns, mini_reports: &[OptimizationReport]) -> Outcome {
    let rp = reference().problem().unwrap();
    let mp = mini().problem().unwrap();
    let mut checked = 0;
    for r in &runs.reports {
        checked += check_constraints(&rp, r)?;
    }
    for r in mini_reports {
        checked += check_constraints(&mp, r)?;
    }
    Ok(format!("{checked} recorded layouts re-checked"))
}

fn c6_synthetic_bowl() -> Outcome {
    let space = SearchSpace::new(vec![Interval { lo: -1.0, hi: 2.0 }, Interval { lo: 0.0, hi: 1.5 }]).unwrap();
    let diagonal = space.diagonal();
    let problem = DesignProblem::unconstrained(space).unwrap();
    let c = [0.4, 1.1];
    let mut errs = Vec::new();
    for seed in SEEDS {
        let config = OptimizerConfig { n_init: 10, n_sim: 60, seed, ..OptimizerConfig::default() };
        let mut ev = FnEvaluator::new(move |x: &[f64]| (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2), 100.0);
        let report = run(&config, &problem, &mut ev).unwrap();
        let (x, _) = best_so_far(&report).unwrap();
        errs.push(((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt() / diagonal);
    }
    let detail = format!(
        "distance / diagonal per seed: {}",
        errs.iter().map(|e| format!("{:.4}", e)).collect::<Vec<_>>().join(", ")
    );
    if errs.iter().all(|e| *e <= 0.05) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mini_runs() -> Vec<OptimizationReport> {
    let s = mini();
    let problem = s.problem().unwrap();
    SEEDS
        .iter()
        .map(|&seed| {
            let config = OptimizerConfig { seed, ..s.optimizer.clone() };
            run(&config, &problem, &mut s.simulator().unwrap()).unwrap()
        })
        .collect()
}

fn c7_oracle_gap(reports: &[OptimizationReport]) -> Outcome {
    let s = mini();
    let problem = s.problem().unwrap();
    let oracle = grid_search(&problem, 21, &mut s.simulator().unwrap()).unwrap();
    let limit = oracle.best_objective + 0.05 * oracle.range();
    let found: Vec<f64> = reports.iter().map(|r| best_so_far(r).unwrap().1).collect();
    let detail = format!(
        "grid minimum {:.4} s, range {:.4} s, limit {:.4} s; BO per seed: {}",
        oracle.best_objective,
        oracle.range(),
        limit,
        found.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
    );
    if found.iter().all(|v| *v <= limit) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn replay_golden(addr: &str, golden: &str) -> String {
    let stream = TcpStream::connect(addr).unwrap();
    let mut w = stream.try_clone().unwrap();
    let mut r = BufReader::new(stream);
    let mut line = String::new();
    r.read_line(&mut line).unwrap();
    let mut transcript = format!("< {line}");
    for sent in golden.lines().filter_map(|l| l.strip_prefix("> ")) {
        w.write_all(format!("{sent}\n").as_bytes()).unwrap();
        line.clear();
        r.read_line(&mut line).unwrap();
        transcript.push_str(&format!("> {sent}\n< {line}"));
    }
    transcript
}

fn c8_protocol_equivalence(embedded: &OptimizationReport) -> Outcome {
    let s = mini();
    let problem = s.problem().unwrap();
    let server = Server::bind("127.0.0.1:0", Arc::new(s.entity_map().unwrap()), s.simulator().unwrap()).unwrap();
    let addr = server.local_addr().unwrap().to_string();
    let handle = server.shutdown_handle().unwrap();
    let join = thread::spawn(move || server.run().unwrap());

    let config = OptimizerConfig { seed: embedded.seed, ..s.optimizer.clone() };
    let mut client = RemoteEvaluator::connect(&addr, Duration::from_secs(10), s.cell.penalty()).unwrap();
    let remote = run(&config, &problem, &mut client).unwrap();
    client.close().unwrap();
    handle.shutdown();
    join.join().unwrap();
    let same_history = remote.without_timing() == embedded.without_timing();

    let trace = ScenarioFile::load(path("tests/fixtures/trace_scenario.json")).unwrap();
    let golden = std::fs::read_to_string(path("tests/fixtures/golden_transcript.txt")).unwrap();
    let mut stable = true;
    for _ in 0..2 {
        let server =
            Server::bind("127.0.0.1:0", Arc::new(trace.entity_map().unwrap()), trace.simulator().unwrap()).unwrap();
        let addr = server.local_addr().unwrap().to_string();
        let handle = server.shutdown_handle().unwrap();
        let join = thread::spawn(move || server.run().unwrap());
        stable &= replay_golden(&addr, &golden) == golden;
        handle.shutdown();
        join.join().unwrap();
    }
    let detail = format!(
        "{} records identical over TCP: {same_history}; golden transcript byte-stable: {stable}",
        remote.records.len()
    );
    if same_history && stable {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c9_simulator_fixtures() -> Outcome {
    let trace = ScenarioFile::load(path("tests/fixtures/trace_scenario.json")).unwrap();
    let x = trace.problem().unwrap().layout(vec![0.0, 0.0, 0.75, 0.0, 0.0, 1.0, 0.375, 0.5]).unwrap();
    let tl = schedule(&x, &trace.cell).unwrap();
    let expected: [(Agent, &str, f64, f64); 13] = [
        (Agent::Robot, "move_to:obj1", 0.0, 1.25),
        (Agent::Human, "walk_to:box1", 0.0, 2.0),
        (Agent::Robot, "pick:obj1", 1.25, 1.75),
        (Agent::Robot, "move_to:box1", 1.75, 2.875),
        (Agent::Human, "place_box:box1", 2.0, 3.5),
        (Agent::Robot, "place:obj1->box1", 3.5, 3.75),
        (Agent::Robot, "move_to:obj2", 3.75, 4.875),
        (Agent::Robot, "pick:obj2", 4.875, 5.375),
        (Agent::Robot, "move_to:box1", 5.375, 6.5),
        (Agent::Robot, "place:obj2->box1", 6.5, 6.75),
        (Agent::Human, "walk_to:box1", 6.75, 6.75),
        (Agent::Human, "remove_box:box1", 6.75, 7.75),
        (Agent::Human, "walk_to:staging", 7.75, 9.75),
    ];
    let trace_ok = tl.events.len() == expected.len()
        && tl
            .events
            .iter()
            .zip(expected)
            .all(|(e, (a, act, s, t))| e.agent == a && e.action == act && e.start_s == s && e.end_s == t)
        && tl.makespan_s == 9.75;

    let deg = ScenarioFile::load(path("tests/fixtures/degenerate_scenario.json")).unwrap();
    let xd = deg.problem().unwrap().layout(vec![0.5; 6]).unwrap();
    let r = evaluate(&xd, &deg.cell, false).unwrap();
    let formula = deg.cell.robot.t_pick + deg.cell.robot.t_place + deg.cell.human.t_remove_box;
    let deg_ok = r.objective == formula && r.feasible;
    let detail = format!(
        "hand trace makespan {} (expected 9.75, events match: {trace_ok}); degenerate {} vs formula {formula}",
        tl.makespan_s, r.objective
    );
    if trace_ok && deg_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let reference = reference_runs();
    let minis = mini_runs();
    let results: Vec<(&str, Outcome)> = vec![
        ("relative improvement over random layouts", c1_relative_improvement(&reference)),
        ("incumbent settled by iteration 150", c2_convergence_shape(&reference)),
        ("kappa schedule", c3_kappa_schedule()),
        ("GP matches dense oracle", c4_gp_oracle()),
        ("recorded layouts satisfy constraints", c5_constraint_soundness(&reference, &minis)),
        ("convex bowl minimum located", c6_synthetic_bowl()),
        ("BO within 5% of grid-oracle range", c7_oracle_gap(&minis)),
        ("TCP run identical to embedded run", c8_protocol_equivalence(&minis[0])),
        ("simulator fixtures exact", c9_simulator_fixtures()),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
