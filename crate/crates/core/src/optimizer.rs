//! LoRA gradient descent with the norm-adaptive step size, and a full-rank
//! gradient descent baseline.
//!
//! Both factors move together: one step on the stacked adapter is
//! `V <- V - eta_t * grad J(V)` where `J(V) = L(BA)`, which updates `B` by
//! `eta_t * dL/dB` and `A` by `eta_t * dL/dA` at the same time.

use serde::{Deserialize, Serialize};

use crate::adapter::StackedAdapter;
use crate::error::{Error, Result};
use crate::losses::SmoothLoss;
use crate::matrix::Matrix;

/// Gradient norms below this are treated as a numerically stationary point.
pub const STATIONARY_GRAD_NORM: f64 = 1e-14;

/// Per-step quantities. For the full-rank baseline `v_norm` is `||W_t||` and
/// `grad_j_norm` equals `grad_l_norm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub t: usize,
    pub eta: f64,
    pub j_value: f64,
    pub v_norm: f64,
    #[serde(rename = "gradJ_norm")]
    pub grad_j_norm: f64,
    #[serde(rename = "gradL_norm")]
    pub grad_l_norm: f64,
}

/// Records for `t = 0..=T` plus the point reached after the last update.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace<P> {
    pub config_digest: String,
    pub records: Vec<IterateRecord>,
    pub final_point: P,
    /// First step whose gradient norm fell below [`STATIONARY_GRAD_NORM`].
    pub stationary_at: Option<usize>,
}

pub type LoraTrace = Trace<StackedAdapter>;
pub type FullRankTrace = Trace<Matrix>;

impl<P> Trace<P> {
    pub fn with_digest(mut self, digest: impl Into<String>) -> Self {
        self.config_digest = digest.into();
        self
    }

    /// Number of updates, `T`.
    pub fn steps(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn last(&self) -> &IterateRecord {
        self.records.last().expect("a trace always holds record 0")
    }
}

/// Gradient of `J` at `V` together with the loss gradient it was built from.
#[derive(Debug, Clone)]
pub struct JGradient {
    pub gradient: StackedAdapter,
    pub grad_l: Matrix,
    pub grad_l_norm: f64,
}

fn check_shape(v: &StackedAdapter, loss: &dyn SmoothLoss) -> Result<()> {
    if loss.shape() != (v.m(), v.n()) {
        let (m, n) = loss.shape();
        return Err(Error::Dimension(format!(
            "loss {} is {m}x{n} but the adapter product is {}x{}",
            loss.name(),
            v.m(),
            v.n()
        )));
    }
    Ok(())
}

/// One loss-gradient evaluation at `BA`, embedded back onto `V`.
pub fn grad_j(v: &StackedAdapter, loss: &dyn SmoothLoss) -> Result<JGradient> {
    check_shape(v, loss)?;
    let grad_l = loss.grad(&v.product_block())?;
    let gradient = v.embed_gradient(&grad_l)?;
    Ok(JGradient {
        grad_l_norm: grad_l.frob_norm(),
        gradient,
        grad_l,
    })
}

/// `min{ 1 / (5 sqrt(2) L (||V||^2 + ||grad L||)), 1 }`; `1` when the
/// denominator vanishes.
pub fn step_size(v_norm: f64, grad_l_norm: f64, lipschitz: f64) -> f64 {
    let denom = 5.0 * std::f64::consts::SQRT_2 * lipschitz * (v_norm * v_norm + grad_l_norm);
    if denom > 0.0 {
        (1.0 / denom).min(1.0)
    } else {
        1.0
    }
}

fn non_finite(t: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("step {t}: {msg}")),
        other => other,
    }
}

fn finite_record(rec: IterateRecord) -> Result<IterateRecord> {
    let fields = [rec.eta, rec.j_value, rec.v_norm, rec.grad_j_norm, rec.grad_l_norm];
    if fields.iter().all(|x| x.is_finite()) {
        Ok(rec)
    } else {
        Err(Error::NonFinite(format!("step {}: record {rec:?}", rec.t)))
    }
}

/// Runs `steps` LoRA updates from `v0`.
///
/// Each record costs exactly one `loss.eval` and one `loss.grad`; the step
/// size reuses the gradient norm from the same evaluation.
pub fn run_lora_gd(loss: &dyn SmoothLoss, v0: StackedAdapter, steps: usize) -> Result<LoraTrace> {
    if steps == 0 {
        return Err(Error::Config("number of steps T must be at least 1".into()));
    }
    check_shape(&v0, loss)?;
    let lip = loss.lipschitz();
    let mut v = v0;
    let mut records = Vec::with_capacity(steps + 1);
    let mut stationary_at = None;
    for t in 0..=steps {
        let product = v.product_block();
        let j_value = loss.eval(&product).map_err(|e| non_finite(t, e))?;
        let grad_l = loss.grad(&product).map_err(|e| non_finite(t, e))?;
        let grad_l_norm = grad_l.frob_norm();
        let gradient = v.embed_gradient(&grad_l).map_err(|e| non_finite(t, e))?;
        let v_norm = v.norm();
        let grad_j_norm = gradient.norm();
        let eta = step_size(v_norm, grad_l_norm, lip);
        records.push(finite_record(IterateRecord {
            t,
            eta,
            j_value,
            v_norm,
            grad_j_norm,
            grad_l_norm,
        })?);
        if stationary_at.is_none() && grad_j_norm < STATIONARY_GRAD_NORM {
            stationary_at = Some(t);
        }
        if t < steps {
            v = v.axpy(-eta, &gradient).map_err(|e| non_finite(t, e))?;
        }
    }
    Ok(Trace {
        config_digest: String::new(),
        records,
        final_point: v,
        stationary_at,
    })
}

/// Classic gradient descent `W <- W - (1/L) grad L(W)` on the full matrix.
pub fn run_full_rank_gd(loss: &dyn SmoothLoss, w0: Matrix, steps: usize) -> Result<FullRankTrace> {
    if steps == 0 {
        return Err(Error::Config("number of steps T must be at least 1".into()));
    }
    if w0.shape() != loss.shape() {
        return Err(Error::Dimension(format!(
            "initial point is {}x{}, loss expects {:?}",
            w0.rows(),
            w0.cols(),
            loss.shape()
        )));
    }
    let eta = 1.0 / loss.lipschitz();
    let mut w = w0;
    let mut records = Vec::with_capacity(steps + 1);
    let mut stationary_at = None;
    for t in 0..=steps {
        let j_value = loss.eval(&w).map_err(|e| non_finite(t, e))?;
        let g = loss.grad(&w).map_err(|e| non_finite(t, e))?;
        let g_norm = g.frob_norm();
        records.push(finite_record(IterateRecord {
            t,
            eta,
            j_value,
            v_norm: w.frob_norm(),
            grad_j_norm: g_norm,
            grad_l_norm: g_norm,
        })?);
        if stationary_at.is_none() && g_norm < STATIONARY_GRAD_NORM {
            stationary_at = Some(t);
        }
        if t < steps {
            w = w.axpy(-eta, &g).map_err(|e| non_finite(t, e))?;
        }
    }
    Ok(Trace {
        config_digest: String::new(),
        records,
        final_point: w,
        stationary_at,
    })
}
