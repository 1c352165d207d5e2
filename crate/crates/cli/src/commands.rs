use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lora_gd_core::losses::SmoothLoss;
use lora_gd_core::optimizer::{run_full_rank_gd, run_lora_gd};
use lora_gd_core::verification::{
    check_descent_lemma, check_eta_bounds, check_gradj_consistency, check_growth, check_min_grad_bound,
    check_one_step, check_recorded_state, fit_rate_slope, rate_series, CheckReport,
};
use lora_gd_core::{trace_csv, IterateRecord, LoraTrace, Matrix, StackedAdapter, Trace};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, EXIT_FAILED, EXIT_OK};

pub const CONFIG_FILE: &str = "config.cfg";
pub const TRACE_FILE: &str = "trace.csv";
pub const FINAL_V_FILE: &str = "final_V.txt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORTS_FILE: &str = "reports.jsonl";

/// Prefix range for the fitted rate slope.
pub const RATE_FIT_RANGE: (usize, usize) = (100, 10_000);
pub const RATE_FIT_POINTS: usize = 21;

#[derive(Debug, Clone, Default)]
pub struct Options {
    /// Overrides the configured output directory.
    pub out_dir: Option<PathBuf>,
    pub quiet: bool,
}

impl Options {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub config_digest: String,
    pub loss: String,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub steps: usize,
    pub final_j: f64,
    #[serde(rename = "final_gradJ_norm")]
    pub final_grad_j_norm: f64,
    #[serde(rename = "final_gradL_norm")]
    pub final_grad_l_norm: f64,
    /// Minimum of `gradJ_norm^2` over every record.
    #[serde(rename = "min_gradJ_sq")]
    pub min_grad_j_sq: f64,
    /// Sum of the `eta` column over every record.
    pub eta_sum: f64,
    pub rate_slope: Option<f64>,
    pub stationary_at: Option<usize>,
    pub wall_time_seconds: f64,
}

pub fn summarize(config: &RunConfig, trace: &LoraTrace, wall_time_seconds: f64) -> RunSummary {
    let last = trace.last();
    let series = rate_series(&trace.records);
    let hi = RATE_FIT_RANGE.1.min(trace.steps());
    RunSummary {
        config_digest: trace.config_digest.clone(),
        loss: config.loss.name().into(),
        m: config.m,
        n: config.n,
        r: config.r,
        steps: trace.steps(),
        final_j: last.j_value,
        final_grad_j_norm: last.grad_j_norm,
        final_grad_l_norm: last.grad_l_norm,
        min_grad_j_sq: trace.records.iter().map(|r| r.grad_j_norm.powi(2)).fold(f64::INFINITY, f64::min),
        eta_sum: trace.records.iter().map(|r| r.eta).sum(),
        rate_slope: fit_rate_slope(&series, RATE_FIT_RANGE.0, hi, RATE_FIT_POINTS),
        stationary_at: trace.stationary_at,
        wall_time_seconds,
    }
}

/// Builds the loss and runs LoRA gradient descent from the configured start.
pub fn run_experiment(config: &RunConfig) -> Result<(Box<dyn SmoothLoss>, LoraTrace), CliError> {
    let loss = config.build_loss()?;
    let trace = run_lora_gd(loss.as_ref(), config.initial_adapter(), config.steps)?.with_digest(config.digest());
    Ok((loss, trace))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::io(&path, e))
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("summary serializes");
    s.push('\n');
    s
}

fn finish(result: Result<i32, CliError>) -> i32 {
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn output_dir(config: &RunConfig, opts: &Options) -> PathBuf {
    opts.out_dir.clone().unwrap_or_else(|| config.out_dir.clone())
}

/// Writes `config.cfg`, `trace.csv`, `final_V.txt`, `final_B.txt`,
/// `final_A.txt` and `summary.json` into the output directory.
pub fn cmd_run(config_path: &Path, opts: &Options) -> i32 {
    finish(run_inner(config_path, opts))
}

fn run_inner(config_path: &Path, opts: &Options) -> Result<i32, CliError> {
    let config = RunConfig::load(config_path)?;
    let dir = output_dir(&config, opts);
    prepare_dir(&dir)?;
    let started = Instant::now();
    let (_, trace) = run_experiment(&config)?;
    let summary = summarize(&config, &trace, started.elapsed().as_secs_f64());

    write_file(&dir, CONFIG_FILE, &config.canonical())?;
    write_file(&dir, TRACE_FILE, &trace_csv::write_records(&trace.records))?;
    write_file(&dir, FINAL_V_FILE, &trace.final_point.data().to_text())?;
    write_file(&dir, "final_B.txt", &trace.final_point.b().to_text())?;
    write_file(&dir, "final_A.txt", &trace.final_point.a().to_text())?;
    write_file(&dir, SUMMARY_FILE, &to_json(&summary))?;

    opts.say(format!(
        "{}: {} steps, J = {:.6e}, |grad J| = {:.3e}, wrote {}",
        config.loss.name(),
        summary.steps,
        summary.final_j,
        summary.final_grad_j_norm,
        dir.display()
    ));
    Ok(EXIT_OK)
}

/// Everything `verify` needs, read back from a run directory.
pub struct RunDir {
    pub config: RunConfig,
    pub trace: LoraTrace,
}

pub fn load_run_dir(dir: &Path) -> Result<RunDir, CliError> {
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let trace_path = dir.join(TRACE_FILE);
    let records = trace_csv::read_records(&read_file(&trace_path)?).map_err(|source| CliError::Format {
        path: trace_path.clone(),
        source,
    })?;
    let v_path = dir.join(FINAL_V_FILE);
    let final_point = Matrix::from_text(&read_file(&v_path)?)
        .and_then(|data| StackedAdapter::from_stacked(config.m, config.n, data))
        .map_err(|source| CliError::Format { path: v_path, source })?;
    let trace = Trace {
        config_digest: config.digest(),
        records,
        final_point,
        stationary_at: None,
    };
    Ok(RunDir { config, trace })
}

/// Runs every applicable check on a trace produced from `config`.
pub fn verify_trace(config: &RunConfig, trace: &LoraTrace, loss: &dyn SmoothLoss) -> Result<Vec<CheckReport>, CliError> {
    let v0 = config.initial_adapter();
    let first: &IterateRecord = &trace.records[0];
    let last = trace.last();
    let along_step = |v: &StackedAdapter, rec: &IterateRecord| -> Result<CheckReport, CliError> {
        let g = lora_gd_core::optimizer::grad_j(v, loss)?;
        Ok(check_descent_lemma(v, &v.axpy(-rec.eta, &g.gradient)?, loss)?)
    };
    Ok(vec![
        check_recorded_state("initial_state", first, &v0, loss)?,
        check_recorded_state("final_state", last, &trace.final_point, loss)?,
        check_one_step(trace),
        check_eta_bounds(trace, loss),
        check_growth(trace, loss),
        check_min_grad_bound(trace, loss).0,
        CheckReport::merge(
            "descent_lemma",
            [along_step(&v0, first)?, along_step(&trace.final_point, last)?],
        ),
        CheckReport::merge(
            "gradJ_consistency",
            [
                check_gradj_consistency(&v0, loss)?,
                check_gradj_consistency(&trace.final_point, loss)?,
            ],
        ),
    ])
}

/// Re-checks a run directory; writes `reports.jsonl` and one
/// `witness_<check>.json` per failing check.
pub fn cmd_verify(dir: &Path, opts: &Options) -> i32 {
    finish(verify_inner(dir, opts))
}

fn verify_inner(dir: &Path, opts: &Options) -> Result<i32, CliError> {
    if !dir.is_dir() {
        return Err(CliError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let RunDir { config, trace } = load_run_dir(dir)?;
    let loss = config.build_loss()?;
    let reports = verify_trace(&config, &trace, loss.as_ref())?;

    let report_dir = opts.out_dir.clone().unwrap_or_else(|| dir.to_path_buf());
    prepare_dir(&report_dir)?;
    let mut lines = String::new();
    for rep in &reports {
        let witness_name = match (&rep.witness, rep.passed) {
            (Some(w), false) => {
                let name = format!("witness_{}.json", rep.check_name);
                write_file(&report_dir, &name, w)?;
                Some(name)
            }
            _ => None,
        };
        lines.push_str(&rep.to_json_line(witness_name.as_deref()));
        lines.push('\n');
        opts.say(format!(
            "[{}] {} (count {}, worst slack {:.3e})",
            if rep.passed { "PASS" } else { "FAIL" },
            rep.check_name,
            rep.count,
            rep.worst_slack
        ));
    }
    write_file(&report_dir, REPORTS_FILE, &lines)?;
    Ok(if reports.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_FAILED })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EndpointSummary {
    pub final_loss: f64,
    #[serde(rename = "final_gradL_norm")]
    pub final_grad_l_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub config_digest: String,
    pub steps: usize,
    pub lora: EndpointSummary,
    #[serde(rename = "lora_final_gradJ_norm")]
    pub lora_final_grad_j_norm: f64,
    pub full_rank: EndpointSummary,
    /// `||BA_final - W_final||` between the two endpoints.
    pub product_gap: f64,
    pub wall_time_seconds: f64,
}

pub fn compare_runs(config: &RunConfig) -> Result<(LoraTrace, Trace<Matrix>, CompareSummary), CliError> {
    let started = Instant::now();
    let (loss, lora) = run_experiment(config)?;
    let w0 = config.initial_adapter().product_block();
    let full = run_full_rank_gd(loss.as_ref(), w0, config.steps)?.with_digest(config.digest());
    let gap = lora.final_point.product_block().sub(&full.final_point)?.frob_norm();
    let summary = CompareSummary {
        config_digest: config.digest(),
        steps: config.steps,
        lora: EndpointSummary {
            final_loss: lora.last().j_value,
            final_grad_l_norm: lora.last().grad_l_norm,
        },
        lora_final_grad_j_norm: lora.last().grad_j_norm,
        full_rank: EndpointSummary {
            final_loss: full.last().j_value,
            final_grad_l_norm: full.last().grad_l_norm,
        },
        product_gap: gap,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((lora, full, summary))
}

/// Writes `lora_trace.csv`, `full_rank_trace.csv`, `final_V.txt`,
/// `final_W_full_rank.txt` and `compare.json`.
pub fn cmd_compare(config_path: &Path, opts: &Options) -> i32 {
    finish(compare_inner(config_path, opts))
}

fn compare_inner(config_path: &Path, opts: &Options) -> Result<i32, CliError> {
    let config = RunConfig::load(config_path)?;
    let dir = output_dir(&config, opts);
    prepare_dir(&dir)?;
    let (lora, full, summary) = compare_runs(&config)?;
    write_file(&dir, CONFIG_FILE, &config.canonical())?;
    write_file(&dir, "lora_trace.csv", &trace_csv::write_records(&lora.records))?;
    write_file(&dir, "full_rank_trace.csv", &trace_csv::write_records(&full.records))?;
    write_file(&dir, FINAL_V_FILE, &lora.final_point.data().to_text())?;
    write_file(&dir, "final_W_full_rank.txt", &full.final_point.to_text())?;
    write_file(&dir, "compare.json", &to_json(&summary))?;
    opts.say(format!(
        "lora: loss {:.6e}, |grad L| {:.3e}; full rank: loss {:.6e}, |grad L| {:.3e}; |BA - W| = {:.3e}",
        summary.lora.final_loss,
        summary.lora.final_grad_l_norm,
        summary.full_rank.final_loss,
        summary.full_rank.final_grad_l_norm,
        summary.product_gap
    ));
    Ok(EXIT_OK)
}
