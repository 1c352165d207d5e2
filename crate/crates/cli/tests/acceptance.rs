//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::path::Path;
use std::time::Instant;

use lora_gd::commands::{compare_runs, run_experiment};
use lora_gd::RunConfig;
use lora_gd_core::losses::SmoothLoss;
use lora_gd_core::rng::SeededRng;
use lora_gd_core::trace_csv;
use lora_gd_core::verification::{
    check_descent_lemma, check_eta_bounds, check_gradj_consistency, check_growth, check_min_grad_bound,
    check_one_step, fit_rate_slope, CheckReport, GRADIENT_TOLERANCE,
};
use lora_gd_core::{LoraTrace, StackedAdapter};

const BUNDLED: [&str; 6] = [
    "small_quadratic",
    "scaled_quadratic",
    "logistic",
    "rank_gap",
    "zero_init",
    "bounded_quadratic",
];
const RADII: [f64; 3] = [0.1, 1.0, 10.0];

const GRADIENT_POINTS: usize = 100;
const GRADIENT_BUDGET_SECS: f64 = 5.0;
const DESCENT_PAIRS: usize = 1000;
const DESCENT_BUDGET_SECS: f64 = 30.0;
const RUN_BUDGET_SECS: f64 = 60.0;
const RANK_GAP_BUDGET_SECS: f64 = 60.0;
const SLOPE_BAND: (f64, f64) = (-1.3, -0.7);
const SLOPE_RANGE: (usize, usize) = (100, 10_000);
const SLOPE_POINTS: usize = 21;

struct Outcome {
    id: &'static str,
    title: &'static str,
    passed: bool,
    detail: String,
}

struct Run {
    name: &'static str,
    config: RunConfig,
    loss: Box<dyn SmoothLoss>,
    trace: LoraTrace,
}

fn load(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.cfg"));
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{e}"))
}

fn adapter_at_radius(rng: &mut SeededRng, m: usize, n: usize, r: usize, radius: f64) -> StackedAdapter {
    let raw = rng.gaussian_matrix(m + n, r, 1.0);
    let data = raw.scale(radius / raw.frob_norm()).unwrap();
    StackedAdapter::from_stacked(m, n, data).unwrap()
}

fn random_adapter(rng: &mut SeededRng, m: usize, n: usize, r: usize) -> StackedAdapter {
    StackedAdapter::stack(&rng.gaussian_matrix(m, r, 1.0), &rng.gaussian_matrix(r, n, 1.0)).unwrap()
}

fn worst(reports: &[(&str, CheckReport)]) -> (bool, String) {
    let failed: Vec<&str> = reports.iter().filter(|(_, r)| !r.passed).map(|(n, _)| *n).collect();
    let min = reports.iter().map(|(_, r)| r.worst_slack).fold(f64::INFINITY, f64::min);
    let count: usize = reports.iter().map(|(_, r)| r.count).sum();
    let detail = if failed.is_empty() {
        format!("{count} instances, worst scaled slack {min:.3e}")
    } else {
        format!("{count} instances, failing on {failed:?}, worst scaled slack {min:.3e}")
    };
    (failed.is_empty(), detail)
}

fn gradient_correctness() -> Outcome {
    let mut max_err: f64 = 0.0;
    let mut ok = true;
    let mut total = 0;
    for (k, name) in BUNDLED.iter().enumerate() {
        let config = load(name);
        let loss = config.build_loss().unwrap();
        let mut rng = SeededRng::new(1000 + k as u64, 0);
        for _ in 0..GRADIENT_POINTS {
            let v = random_adapter(&mut rng, config.m, config.n, config.r);
            let rep = check_gradj_consistency(&v, loss.as_ref()).unwrap();
            ok &= rep.passed;
            max_err = max_err.max(-rep.worst_slack);
            total += 1;
        }
    }
    let started = Instant::now();
    for loss_line in ["loss = quadratic", "loss = logistic"] {
        let config = RunConfig::parse(&format!("m = 8\nn = 8\nr = 2\nseed = 1\n{loss_line}\n")).unwrap();
        let loss = config.build_loss().unwrap();
        let mut rng = SeededRng::new(2000, 0);
        for _ in 0..GRADIENT_POINTS {
            let v = random_adapter(&mut rng, 8, 8, 2);
            let rep = check_gradj_consistency(&v, loss.as_ref()).unwrap();
            ok &= rep.passed;
            max_err = max_err.max(-rep.worst_slack);
            total += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        id: "1",
        title: "gradient correctness",
        passed: ok && max_err <= GRADIENT_TOLERANCE && secs < GRADIENT_BUDGET_SECS,
        detail: format!("{total} points, max relative error {max_err:.3e} (<= 1e-5), 8x8 r=2 in {secs:.2}s (< 5s)"),
    }
}

fn descent_lemma() -> Outcome {
    let started = Instant::now();
    let mut reports = Vec::new();
    for (k, name) in BUNDLED.iter().enumerate() {
        let config = load(name);
        let loss = config.build_loss().unwrap();
        let mut rng = SeededRng::new(3000 + k as u64, 0);
        let per_loss = (0..DESCENT_PAIRS).map(|i| {
            let (m, n, r) = (config.m, config.n, config.r);
            let v1 = adapter_at_radius(&mut rng, m, n, r, RADII[i % 3]);
            let step = adapter_at_radius(&mut rng, m, n, r, RADII[(i / 3) % 3]);
            let v2 = v1.axpy(1.0, &step).unwrap();
            check_descent_lemma(&v1, &v2, loss.as_ref()).unwrap()
        });
        reports.push((*name, CheckReport::merge("descent_lemma", per_loss)));
    }
    let secs = started.elapsed().as_secs_f64();
    let (ok, detail) = worst(&reports);
    Outcome {
        id: "2",
        title: "descent lemma",
        passed: ok && secs < DESCENT_BUDGET_SECS,
        detail: format!("{detail}, {secs:.2}s (< 30s)"),
    }
}

fn doubled_eta(trace: &LoraTrace) -> LoraTrace {
    let mut bad = trace.clone();
    bad.records.iter_mut().for_each(|r| r.eta *= 2.0);
    bad
}

fn main() {
    let mut outcomes = vec![gradient_correctness(), descent_lemma()];

    let started = Instant::now();
    let runs: Vec<Run> = BUNDLED
        .iter()
        .map(|name| {
            let config = load(name);
            let (loss, trace) = run_experiment(&config).unwrap();
            Run { name, config, loss, trace }
        })
        .collect();
    let one_step: Vec<_> = runs.iter().map(|r| (r.name, check_one_step(&r.trace))).collect();
    let run_secs = started.elapsed().as_secs_f64();
    let steps_ok = runs.iter().all(|r| r.trace.steps() == 10_000);
    let (ok3, detail) = worst(&one_step);
    outcomes.push(Outcome {
        id: "3",
        title: "one-step descent",
        passed: ok3 && steps_ok && run_secs < RUN_BUDGET_SECS,
        detail: format!("{detail}, T = 10^4 on {} configs in {run_secs:.2}s (< 60s)", runs.len()),
    });

    let eta: Vec<_> = runs.iter().map(|r| (r.name, check_eta_bounds(&r.trace, r.loss.as_ref()))).collect();
    let controls: Vec<(&str, bool)> = runs
        .iter()
        .filter(|r| r.trace.stationary_at != Some(0))
        .map(|r| (r.name, !check_eta_bounds(&doubled_eta(&r.trace), r.loss.as_ref()).passed))
        .collect();
    let (ok4, detail) = worst(&eta);
    let controls_ok = !controls.is_empty() && controls.iter().all(|(_, rejected)| *rejected);
    outcomes.push(Outcome {
        id: "4",
        title: "step-size upper bounds",
        passed: ok4 && controls_ok,
        detail: format!(
            "{detail}; doubled-eta control rejected on {}/{} nontrivial runs",
            controls.iter().filter(|(_, r)| *r).count(),
            controls.len()
        ),
    });

    let growth: Vec<_> = runs.iter().map(|r| (r.name, check_growth(&r.trace, r.loss.as_ref()))).collect();
    let (ok5, detail) = worst(&growth);
    outcomes.push(Outcome {
        id: "5",
        title: "iterate growth bound",
        passed: ok5,
        detail,
    });

    let min_grad: Vec<_> = runs
        .iter()
        .map(|r| (r.name, check_min_grad_bound(&r.trace, r.loss.as_ref())))
        .collect();
    let flat: Vec<_> = min_grad.iter().map(|(n, (rep, _))| (*n, rep.clone())).collect();
    let (ok6a, detail) = worst(&flat);
    outcomes.push(Outcome {
        id: "6a",
        title: "min-gradient bound",
        passed: ok6a,
        detail,
    });

    let (_, (_, series)) = min_grad.iter().find(|(n, _)| *n == "bounded_quadratic").unwrap();
    let slope = fit_rate_slope(series, SLOPE_RANGE.0, SLOPE_RANGE.1, SLOPE_POINTS);
    outcomes.push(Outcome {
        id: "6b",
        title: "bounded-iterate rate slope",
        passed: slope.is_some_and(|s| (SLOPE_BAND.0..=SLOPE_BAND.1).contains(&s)),
        detail: format!(
            "fitted slope of min |grad J|^2 vs T over [1e2, 1e4] = {} (band [-1.3, -0.7])",
            slope.map_or("undefined".into(), |s| format!("{s:.4}"))
        ),
    });

    let started = Instant::now();
    let (_, _, cmp) = compare_runs(&load("rank_gap")).unwrap();
    let secs = started.elapsed().as_secs_f64();
    outcomes.push(Outcome {
        id: "7",
        title: "rank-gap separation",
        passed: cmp.lora_final_grad_j_norm <= 1e-6
            && cmp.lora.final_grad_l_norm >= 0.1
            && cmp.full_rank.final_grad_l_norm <= 1e-8
            && secs < RANK_GAP_BUDGET_SECS,
        detail: format!(
            "LoRA |grad J| = {:.3e} (<= 1e-6), |grad L(BA)| = {:.3e} (>= 0.1); full rank |grad L(W)| = {:.3e} (<= 1e-8); {secs:.2}s",
            cmp.lora_final_grad_j_norm, cmp.lora.final_grad_l_norm, cmp.full_rank.final_grad_l_norm
        ),
    });

    let mismatched: Vec<&str> = runs
        .iter()
        .filter(|r| {
            let (_, again) = run_experiment(&r.config).unwrap();
            trace_csv::write_records(&again.records) != trace_csv::write_records(&r.trace.records)
                || again.final_point.data().to_text() != r.trace.final_point.data().to_text()
        })
        .map(|r| r.name)
        .collect();
    outcomes.push(Outcome {
        id: "8",
        title: "determinism",
        passed: mismatched.is_empty(),
        detail: if mismatched.is_empty() {
            format!("{} configs rerun byte-identical", runs.len())
        } else {
            format!("differing traces: {mismatched:?}")
        },
    });

    let certified = outcomes
        .iter()
        .filter(|o| ["3", "4", "5", "6a"].contains(&o.id))
        .all(|o| o.passed);
    outcomes.push(Outcome {
        id: "9",
        title: "log-rate regime",
        passed: certified,
        detail: "no tightness witness for the unbounded-iterate rate is measured; certified through criteria 3, 4, 5, 6a".into(),
    });

    for o in &outcomes {
        println!(
            "[{}] {:<3} {:<28} {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.id,
            o.title,
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
