//! Executable forms of the convergence inequalities for LoRA gradient
//! descent, plus independent gradient oracles.
//!
//! Inequality checks report a *scaled slack* `(rhs - lhs) / (1 + scale)`,
//! where the scale is named per check. A check passes when its worst scaled
//! slack is `>= -tolerance`. Bounds with a zero denominator are `+inf` and
//! never fail.

use serde::Serialize;
use serde_json::json;
use std::f64::consts::SQRT_2;

use crate::adapter::StackedAdapter;
use crate::error::Result;
use crate::losses::SmoothLoss;
use crate::matrix::Matrix;
use crate::optimizer::{grad_j, step_size, IterateRecord, LoraTrace};

/// Additive tolerance on scaled slacks of inequality checks.
pub const INEQUALITY_TOLERANCE: f64 = 1e-9;
/// Maximum pairwise relative error between gradient routes.
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
/// Central-difference step for gradient oracles.
pub const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub check_name: String,
    pub passed: bool,
    pub worst_slack: f64,
    pub tolerance: f64,
    pub count: usize,
    /// JSON describing the inputs at the worst margin.
    pub witness: Option<String>,
}

/// Wire form of a report, one JSON object per line.
#[derive(Debug, Serialize)]
pub struct ReportLine<'a> {
    pub check_name: &'a str,
    pub passed: bool,
    pub worst_slack: f64,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness_path: Option<&'a str>,
}

impl CheckReport {
    pub fn to_json_line(&self, witness_path: Option<&str>) -> String {
        let line = ReportLine {
            check_name: &self.check_name,
            passed: self.passed,
            // JSON has no infinity; an empty check is reported with slack 0
            worst_slack: if self.worst_slack.is_finite() { self.worst_slack } else { 0.0 },
            count: self.count,
            witness_path,
        };
        serde_json::to_string(&line).expect("report serializes")
    }

    /// Combines reports of one check over many instances.
    pub fn merge(name: &str, reports: impl IntoIterator<Item = CheckReport>) -> CheckReport {
        let mut acc = SlackTracker::new(name, INEQUALITY_TOLERANCE);
        for r in reports {
            acc.tolerance = r.tolerance;
            acc.count += r.count;
            if r.worst_slack < acc.worst {
                acc.worst = r.worst_slack;
                acc.witness = r.witness;
            }
        }
        acc.finish()
    }
}

struct SlackTracker {
    name: String,
    tolerance: f64,
    worst: f64,
    count: usize,
    witness: Option<String>,
}

impl SlackTracker {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            tolerance,
            worst: f64::INFINITY,
            count: 0,
            witness: None,
        }
    }

    /// Records `rhs >= lhs` scaled by `1 + scale`.
    fn observe(&mut self, lhs: f64, rhs: f64, scale: f64, witness: impl FnOnce() -> serde_json::Value) {
        self.count += 1;
        if rhs == f64::INFINITY {
            return;
        }
        let slack = (rhs - lhs) / (1.0 + scale.abs());
        if slack < self.worst || slack.is_nan() {
            self.worst = if slack.is_nan() { f64::NEG_INFINITY } else { slack };
            self.witness = Some(witness().to_string());
        }
    }

    fn finish(self) -> CheckReport {
        CheckReport {
            passed: self.worst >= -self.tolerance,
            check_name: self.name,
            worst_slack: self.worst,
            tolerance: self.tolerance,
            count: self.count,
            witness: self.witness,
        }
    }
}

fn record_json(r: &IterateRecord) -> serde_json::Value {
    serde_json::to_value(r).expect("record serializes")
}

fn matrix_json(m: &Matrix) -> serde_json::Value {
    json!({ "rows": m.rows(), "cols": m.cols(), "data": m.as_slice() })
}

/// Central differences `(f(X + eps E_ij) - f(X - eps E_ij)) / (2 eps)`.
pub fn fd_grad<F>(mut f: F, x: &Matrix, eps: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let (rows, cols) = x.shape();
    let base = x.as_slice();
    let mut probe = base.to_vec();
    let mut out = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        probe[k] = base[k] + eps;
        let fp = f(&Matrix::from_vec(rows, cols, probe.clone())?)?;
        probe[k] = base[k] - eps;
        let fm = f(&Matrix::from_vec(rows, cols, probe.clone())?)?;
        probe[k] = base[k];
        out.push((fp - fm) / (2.0 * eps));
    }
    Matrix::from_vec(rows, cols, out)
}

/// `||a - b|| / max(||a||, ||b||, 1)`.
pub fn relative_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    let diff = a.sub(b)?.frob_norm();
    Ok(diff / a.frob_norm().max(b.frob_norm()).max(1.0))
}

/// Explicit `m x (m+n)` extractor `[I_m 0]`.
pub fn extractor_top(m: usize, n: usize) -> Matrix {
    Matrix::from_fn(m, m + n, |i, j| if i == j { 1.0 } else { 0.0 }).expect("0/1 entries")
}

/// Explicit `(m+n) x n` extractor `[0; I_n]`.
pub fn extractor_right(m: usize, n: usize) -> Matrix {
    Matrix::from_fn(m + n, n, |i, j| if i == m + j { 1.0 } else { 0.0 }).expect("0/1 entries")
}

/// `2 Sym(E1^T G E2^T) V` with materialized extractors. Only used as an
/// oracle against the blockwise production route.
pub fn dense_grad_j(v: &StackedAdapter, g: &Matrix) -> Result<Matrix> {
    let (m, n) = (v.m(), v.n());
    let e1 = extractor_top(m, n);
    let e2 = extractor_right(m, n);
    let lifted = e1.transpose().matmul(g)?.matmul(&e2.transpose())?;
    lifted.sym()?.scale(2.0)?.matmul(v.data())
}

/// `J(V) = L(E1 V V^T E2)` with the outer product formed densely.
pub fn dense_j(v: &StackedAdapter, loss: &dyn SmoothLoss) -> Result<f64> {
    let (m, n) = (v.m(), v.n());
    let outer = v.data().matmul(&v.data().transpose())?;
    let w = extractor_top(m, n).matmul(&outer)?.matmul(&extractor_right(m, n))?;
    loss.eval(&w)
}

/// Left and right sides of the modified descent lemma between `v1` and `v2`.
pub fn descent_lemma_sides(v1: &StackedAdapter, v2: &StackedAdapter, loss: &dyn SmoothLoss) -> Result<(f64, f64)> {
    let lip = loss.lipschitz();
    let g = grad_j(v1, loss)?;
    let d = v2.axpy(-1.0, v1)?;
    let dn = d.norm();
    let v1n = v1.norm();
    let j1 = loss.eval(&v1.product_block())?;
    let j2 = loss.eval(&v2.product_block())?;
    let rhs = j1
        + g.gradient.inner(&d)?
        + (2.0 * SQRT_2 / 3.0) * lip * dn.powi(3) * v1n
        + SQRT_2 * lip * dn.powi(2) * v1n.powi(2)
        + (SQRT_2 * lip / 3.0) * dn.powi(3)
        + (SQRT_2 * lip / 4.0) * dn.powi(4)
        + g.grad_l_norm * dn.powi(2);
    Ok((j2, rhs))
}

/// Modified descent lemma for one pair; slack scaled by `1 + |rhs|`.
pub fn check_descent_lemma(v1: &StackedAdapter, v2: &StackedAdapter, loss: &dyn SmoothLoss) -> Result<CheckReport> {
    let (lhs, rhs) = descent_lemma_sides(v1, v2, loss)?;
    let mut acc = SlackTracker::new("descent_lemma", INEQUALITY_TOLERANCE);
    acc.observe(lhs, rhs, rhs, || {
        json!({ "v1": matrix_json(v1.data()), "v2": matrix_json(v2.data()), "lhs": lhs, "rhs": rhs })
    });
    Ok(acc.finish())
}

/// `J(V_{t+1}) <= J(V_t) - (eta_t / 5) ||grad J(V_t)||^2` for every step,
/// slack scaled by `1 + |J(V_t)|`.
pub fn check_one_step(trace: &LoraTrace) -> CheckReport {
    let mut acc = SlackTracker::new("one_step", INEQUALITY_TOLERANCE);
    for w in trace.records.windows(2) {
        let (now, next) = (&w[0], &w[1]);
        let rhs = now.j_value - now.eta / 5.0 * now.grad_j_norm.powi(2);
        acc.observe(next.j_value, rhs, now.j_value, || {
            json!({ "t": now.t, "record": record_json(now), "next": record_json(next) })
        });
    }
    acc.finish()
}

/// The four upper bounds on `eta_t` used to turn the descent lemma into a
/// one-step decrease, in order:
/// `1/(5(sqrt2 L||V||^2 + ||grad L||))`,
/// `(3/(10 sqrt2 L ||grad J|| ||V||))^(1/2)`,
/// `(4/(5 sqrt2 L ||grad J||^2))^(1/3)`,
/// `(3/(5 sqrt2 L ||grad J||))^(1/2)`.
pub fn eta_upper_bounds(rec: &IterateRecord, lipschitz: f64) -> [f64; 4] {
    let l = lipschitz;
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::INFINITY };
    [
        ratio(1.0, 5.0 * (SQRT_2 * l * rec.v_norm.powi(2) + rec.grad_l_norm)),
        ratio(3.0, 10.0 * SQRT_2 * l * rec.grad_j_norm * rec.v_norm).sqrt(),
        ratio(4.0, 5.0 * SQRT_2 * l * rec.grad_j_norm.powi(2)).cbrt(),
        ratio(3.0, 5.0 * SQRT_2 * l * rec.grad_j_norm).sqrt(),
    ]
}

pub fn check_eta_bounds(trace: &LoraTrace, loss: &dyn SmoothLoss) -> CheckReport {
    let mut acc = SlackTracker::new("eta_bounds", INEQUALITY_TOLERANCE);
    for rec in &trace.records {
        for (k, bound) in eta_upper_bounds(rec, loss.lipschitz()).into_iter().enumerate() {
            acc.observe(rec.eta, bound, rec.eta.max(bound), || {
                json!({ "t": rec.t, "bound_index": k, "bound": bound, "record": record_json(rec) })
            });
        }
    }
    acc.finish()
}

/// `||V_T||^2 <= ||V_0||^2 + T/(5 sqrt2 L) + 10 (J(V_0) - L*)` for every
/// prefix, slack scaled by `1 + ||V_0||^2`.
pub fn check_growth(trace: &LoraTrace, loss: &dyn SmoothLoss) -> CheckReport {
    let mut acc = SlackTracker::new("growth", INEQUALITY_TOLERANCE);
    let first = trace.records[0];
    let v0_sq = first.v_norm.powi(2);
    let excess = first.j_value - loss.lower_bound();
    for rec in &trace.records {
        let rhs = v0_sq + rec.t as f64 / (5.0 * SQRT_2 * loss.lipschitz()) + 10.0 * excess;
        acc.observe(rec.v_norm.powi(2), rhs, v0_sq, || json!({ "t": rec.t, "record": record_json(rec), "bound": rhs }));
    }
    acc.finish()
}

/// Telescoped quantities for the prefix of the first `steps` updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePoint {
    pub steps: usize,
    /// `min_{t < steps} ||grad J(V_t)||^2`.
    pub min_grad_sq: f64,
    /// `sum_{t < steps} eta_t`.
    pub eta_sum: f64,
}

pub fn rate_series(records: &[IterateRecord]) -> Vec<RatePoint> {
    let mut out = Vec::with_capacity(records.len().saturating_sub(1));
    let mut min_grad_sq = f64::INFINITY;
    let mut eta_sum = 0.0;
    for (i, rec) in records.iter().enumerate().take(records.len().saturating_sub(1)) {
        min_grad_sq = min_grad_sq.min(rec.grad_j_norm.powi(2));
        eta_sum += rec.eta;
        out.push(RatePoint {
            steps: i + 1,
            min_grad_sq,
            eta_sum,
        });
    }
    out
}

/// `min_{t<T} ||grad J||^2 * sum_{t<T} eta_t <= 5 (J(V_0) - L*)` for every
/// prefix `T >= 1`. Also returns the per-prefix series.
pub fn check_min_grad_bound(trace: &LoraTrace, loss: &dyn SmoothLoss) -> (CheckReport, Vec<RatePoint>) {
    let series = rate_series(&trace.records);
    let budget = 5.0 * (trace.records[0].j_value - loss.lower_bound());
    let mut acc = SlackTracker::new("min_grad_bound", INEQUALITY_TOLERANCE);
    for p in &series {
        let lhs = p.min_grad_sq * p.eta_sum;
        acc.observe(lhs, budget, lhs.max(budget), || json!({ "point": p, "budget": budget }));
    }
    (acc.finish(), series)
}

/// Least-squares slope of `log(min_grad_sq)` against `log(steps)` over
/// `points` logarithmically spaced prefixes in `[lo, hi]`.
///
/// `None` when the range is not covered by the series or a sampled
/// `min_grad_sq` is not positive.
pub fn fit_rate_slope(series: &[RatePoint], lo: usize, hi: usize, points: usize) -> Option<f64> {
    if lo == 0 || hi <= lo || hi > series.len() || points < 2 {
        return None;
    }
    let (llo, lhi) = ((lo as f64).ln(), (hi as f64).ln());
    let mut steps: Vec<usize> = (0..points)
        .map(|k| (llo + (lhi - llo) * k as f64 / (points - 1) as f64).exp().round() as usize)
        .collect();
    steps.dedup();
    let mut xs = Vec::with_capacity(steps.len());
    let mut ys = Vec::with_capacity(steps.len());
    for s in steps {
        let p = series[s - 1];
        if p.min_grad_sq.is_nan() || p.min_grad_sq <= 0.0 {
            return None;
        }
        xs.push((s as f64).ln());
        ys.push(p.min_grad_sq.ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Three-way agreement of `grad J(V)`: the blockwise production route, the
/// dense-extractor formula and central differences of `V -> J(V)`.
pub fn check_gradj_consistency(v: &StackedAdapter, loss: &dyn SmoothLoss) -> Result<CheckReport> {
    let blockwise = grad_j(v, loss)?;
    let dense = dense_grad_j(v, &blockwise.grad_l)?;
    let (m, n) = (v.m(), v.n());
    let numeric = fd_grad(
        |x| {
            let vv = StackedAdapter::from_stacked(m, n, x.clone())?;
            loss.eval(&vv.product_block())
        },
        v.data(),
        FD_EPS,
    )?;
    let block = blockwise.gradient.data();
    let pairs = [
        ("blockwise_vs_dense", relative_error(block, &dense)?),
        ("blockwise_vs_fd", relative_error(block, &numeric)?),
        ("dense_vs_fd", relative_error(&dense, &numeric)?),
    ];
    let mut acc = SlackTracker::new("gradJ_consistency", GRADIENT_TOLERANCE);
    for (name, err) in pairs {
        // slack = -err, so passing means err <= tolerance
        acc.observe(err, 0.0, 0.0, || json!({ "pair": name, "relative_error": err, "v": matrix_json(v.data()) }));
    }
    Ok(acc.finish())
}

/// Recomputes a stored record from the adapter it claims to describe.
pub fn check_recorded_state(
    name: &str,
    stored: &IterateRecord,
    v: &StackedAdapter,
    loss: &dyn SmoothLoss,
) -> Result<CheckReport> {
    let g = grad_j(v, loss)?;
    let fresh = IterateRecord {
        t: stored.t,
        eta: step_size(v.norm(), g.grad_l_norm, loss.lipschitz()),
        j_value: loss.eval(&v.product_block())?,
        v_norm: v.norm(),
        grad_j_norm: g.gradient.norm(),
        grad_l_norm: g.grad_l_norm,
    };
    let mut acc = SlackTracker::new(name, INEQUALITY_TOLERANCE);
    let fields = [
        (stored.eta, fresh.eta),
        (stored.j_value, fresh.j_value),
        (stored.v_norm, fresh.v_norm),
        (stored.grad_j_norm, fresh.grad_j_norm),
        (stored.grad_l_norm, fresh.grad_l_norm),
    ];
    for (a, b) in fields {
        let diff = (a - b).abs();
        acc.observe(diff, 0.0, a.abs().max(b.abs()), || {
            json!({ "stored": record_json(stored), "recomputed": record_json(&fresh) })
        });
    }
    Ok(acc.finish())
}

/// The last record agrees with the trace's final adapter.
pub fn check_final_state(trace: &LoraTrace, loss: &dyn SmoothLoss) -> Result<CheckReport> {
    check_recorded_state("final_state", trace.last(), &trace.final_point, loss)
}
