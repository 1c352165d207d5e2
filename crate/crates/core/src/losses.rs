//! Smooth losses on `m x n` matrices with known smoothness constant `L >= 1`
//! and lower bound `L*`.
//!
//! Any frozen base weight is folded into the loss itself, so every loss here
//! is a function of the adapter product `W = BA` alone.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde_json::json;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::SeededRng;

pub trait SmoothLoss: Send + Sync {
    fn name(&self) -> &str;

    /// `(m, n)` shape of the argument.
    fn shape(&self) -> (usize, usize);

    fn eval(&self, w: &Matrix) -> Result<f64>;

    fn grad(&self, w: &Matrix) -> Result<Matrix>;

    /// Smoothness constant of the gradient, always `>= 1`.
    fn lipschitz(&self) -> f64;

    /// A value no evaluation can go below.
    fn lower_bound(&self) -> f64;
}

fn check_arg(loss: &dyn SmoothLoss, w: &Matrix) -> Result<()> {
    if w.shape() != loss.shape() {
        let (m, n) = loss.shape();
        return Err(Error::Dimension(format!(
            "{} expects a {m}x{n} argument, got {}x{}",
            loss.name(),
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

/// `(scale / 2) ||W - target||^2`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    name: String,
    target: Matrix,
    scale: f64,
}

impl Quadratic {
    pub fn new(target: Matrix, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 1.0) {
            return Err(Error::Config(format!(
                "quadratic scale must be >= 1 so that L >= 1, got {scale}"
            )));
        }
        Ok(Self {
            name: "quadratic".into(),
            target,
            scale,
        })
    }

    pub fn target(&self) -> &Matrix {
        &self.target
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl SmoothLoss for Quadratic {
    fn name(&self) -> &str {
        &self.name
    }

    fn shape(&self) -> (usize, usize) {
        self.target.shape()
    }

    fn eval(&self, w: &Matrix) -> Result<f64> {
        check_arg(self, w)?;
        Ok(0.5 * self.scale * w.sub(&self.target)?.frob_norm_sq())
    }

    fn grad(&self, w: &Matrix) -> Result<Matrix> {
        check_arg(self, w)?;
        w.sub(&self.target)?.scale(self.scale)
    }

    fn lipschitz(&self) -> f64 {
        self.scale
    }

    fn lower_bound(&self) -> f64 {
        0.0
    }
}

pub fn make_quadratic(m: usize, n: usize, target: Matrix, scale: f64) -> Result<Quadratic> {
    if target.shape() != (m, n) {
        return Err(Error::Dimension(format!(
            "target is {}x{}, expected {m}x{n}",
            target.rows(),
            target.cols()
        )));
    }
    Quadratic::new(target, scale)
}

/// Orthonormalizes the columns of `x` (modified Gram-Schmidt).
fn orthonormal_columns(x: &Matrix) -> Result<Matrix> {
    let (rows, cols) = x.shape();
    let mut q: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| x[(i, j)]).collect())
        .collect();
    for j in 0..cols {
        for k in 0..j {
            let (done, rest) = q.split_at_mut(j);
            let proj: f64 = done[k].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
            for (v, u) in rest[0].iter_mut().zip(&done[k]) {
                *v -= proj * u;
            }
        }
        let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::Config("gaussian factor was numerically rank deficient".into()));
        }
        q[j].iter_mut().for_each(|v| *v /= norm);
    }
    Matrix::from_fn(rows, cols, |i, j| q[j][i])
}

/// Unit-scale quadratic whose target has exact rank `r_star` and singular
/// values `r_star - i + u_i / 2` (`u_i` uniform), so the smallest is at least
/// one and consecutive values differ by at least one half.
///
/// Paired with a LoRA rank `r < r_star`, the best reachable product leaves a
/// residual of norm `>= 1`: the adapters stall at a stationary point of the
/// factored problem that is not a minimizer of the loss.
pub fn make_rank_gap_quadratic(m: usize, n: usize, r_star: usize, seed: u64) -> Result<Quadratic> {
    if r_star == 0 || r_star > m.min(n) {
        return Err(Error::Config(format!(
            "r_star must lie in 1..=min(m,n), got {r_star} for {m}x{n}"
        )));
    }
    let mut rng = SeededRng::new(seed, crate::rng::STREAM_LOSS);
    let u = orthonormal_columns(&rng.gaussian_matrix(m, r_star, 1.0))?;
    let v = orthonormal_columns(&rng.gaussian_matrix(n, r_star, 1.0))?;
    let sigma: Vec<f64> = (0..r_star)
        .map(|i| (r_star - i) as f64 + 0.5 * rng.uniform())
        .collect();
    let target = Matrix::from_fn(m, n, |i, j| {
        (0..r_star).map(|k| u[(i, k)] * sigma[k] * v[(j, k)]).sum()
    })?;
    let mut loss = Quadratic::new(target, 1.0)?;
    loss.name = "rank_gap".into();
    Ok(loss)
}

/// Mean logistic loss `(1/N) sum log(1 + exp(-y_i <X_i, W>))` over seeded
/// Gaussian features and random `+-1` labels.
#[derive(Debug, Clone)]
pub struct Logistic {
    features: Vec<Matrix>,
    labels: Vec<f64>,
    lipschitz: f64,
    shape: (usize, usize),
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Logistic {
    pub fn features(&self) -> &[Matrix] {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    fn margins(&self, w: &Matrix) -> Result<Vec<f64>> {
        self.features
            .iter()
            .zip(&self.labels)
            .map(|(x, y)| Ok(y * x.frob_inner(w)?))
            .collect()
    }
}

pub fn make_logistic(m: usize, n: usize, num_samples: usize, seed: u64) -> Result<Logistic> {
    if num_samples == 0 {
        return Err(Error::Config("logistic loss needs at least one sample".into()));
    }
    let mut rng = SeededRng::new(seed, crate::rng::STREAM_LOSS);
    let mut features = Vec::with_capacity(num_samples);
    let mut labels = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        features.push(rng.gaussian_matrix(m, n, 1.0));
        labels.push(rng.sign());
    }
    // Hessian is (1/N) sum s_i (1 - s_i) X_i X_i^T with s(1-s) <= 1/4.
    let bound = features.iter().map(Matrix::frob_norm_sq).sum::<f64>() / (4.0 * num_samples as f64);
    Ok(Logistic {
        features,
        labels,
        lipschitz: bound.max(1.0),
        shape: (m, n),
    })
}

impl SmoothLoss for Logistic {
    fn name(&self) -> &str {
        "logistic"
    }

    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn eval(&self, w: &Matrix) -> Result<f64> {
        check_arg(self, w)?;
        let total: f64 = self.margins(w)?.into_iter().map(|z| softplus(-z)).sum();
        Ok(total / self.labels.len() as f64)
    }

    fn grad(&self, w: &Matrix) -> Result<Matrix> {
        check_arg(self, w)?;
        let (m, n) = self.shape;
        let mut acc = vec![0.0; m * n];
        for ((x, y), z) in self.features.iter().zip(&self.labels).zip(self.margins(w)?) {
            let c = -y * sigmoid(-z);
            for (a, xv) in acc.iter_mut().zip(x.as_slice()) {
                *a += c * xv;
            }
        }
        let inv = 1.0 / self.labels.len() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Matrix::from_vec(m, n, acc)
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn lower_bound(&self) -> f64 {
        0.0
    }
}

/// Forwards to an inner loss while counting `eval` and `grad` calls.
pub struct CountingLoss<'a> {
    inner: &'a dyn SmoothLoss,
    evals: AtomicUsize,
    grads: AtomicUsize,
}

impl<'a> CountingLoss<'a> {
    pub fn new(inner: &'a dyn SmoothLoss) -> Self {
        Self {
            inner,
            evals: AtomicUsize::new(0),
            grads: AtomicUsize::new(0),
        }
    }

    pub fn eval_calls(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn grad_calls(&self) -> usize {
        self.grads.load(Ordering::Relaxed)
    }
}

impl SmoothLoss for CountingLoss<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    fn eval(&self, w: &Matrix) -> Result<f64> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.inner.eval(w)
    }

    fn grad(&self, w: &Matrix) -> Result<Matrix> {
        self.grads.fetch_add(1, Ordering::Relaxed);
        self.inner.grad(w)
    }

    fn lipschitz(&self) -> f64 {
        self.inner.lipschitz()
    }

    fn lower_bound(&self) -> f64 {
        self.inner.lower_bound()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessReport {
    pub pairs: usize,
    /// Largest `||grad(W) - grad(W')|| / ||W - W'||` seen.
    pub max_ratio: f64,
    /// Smallest scaled margin of the quadratic upper bound.
    pub worst_descent_slack: f64,
}

const RADII: [f64; 3] = [0.1, 1.0, 10.0];
const SLACK: f64 = 1e-9;

fn matrix_json(m: &Matrix) -> serde_json::Value {
    json!({ "rows": m.rows(), "cols": m.cols(), "data": m.as_slice() })
}

fn at_radius(rng: &mut SeededRng, m: usize, n: usize, radius: f64) -> Matrix {
    let g = rng.gaussian_matrix(m, n, 1.0);
    let norm = g.frob_norm();
    g.scale(radius / norm).expect("finite rescale")
}

/// Probes the declared smoothness constant on seeded pairs `(W, W')`.
///
/// Each trial pairs every radius for `W` with every radius for `W' - W`,
/// checking the Lipschitz gradient inequality and the quadratic upper bound
/// `L(W') <= L(W) + <grad L(W), W' - W> + (L/2)||W' - W||^2`.
pub fn validate_smoothness(loss: &dyn SmoothLoss, trials: usize, seed: u64) -> Result<SmoothnessReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let (m, n) = loss.shape();
    let lip = loss.lipschitz();
    let mut rng = SeededRng::new(seed, 0);
    let mut report = SmoothnessReport {
        pairs: 0,
        max_ratio: 0.0,
        worst_descent_slack: f64::INFINITY,
    };
    for _ in 0..trials {
        for &rw in &RADII {
            for &rd in &RADII {
                let w = at_radius(&mut rng, m, n, rw);
                let w2 = w.add(&at_radius(&mut rng, m, n, rd))?;
                let d = w2.sub(&w)?;
                let (g1, g2) = (loss.grad(&w)?, loss.grad(&w2)?);
                let gap = g1.sub(&g2)?.frob_norm();
                let dist = d.frob_norm();
                report.pairs += 1;
                report.max_ratio = report.max_ratio.max(gap / dist);

                let witness = || {
                    json!({ "loss": loss.name(), "w": matrix_json(&w), "w_prime": matrix_json(&w2) })
                        .to_string()
                };
                let lip_rhs = lip * dist;
                let lip_scale = 1.0 + lip_rhs + g1.frob_norm() + g2.frob_norm();
                if gap - lip_rhs > SLACK * lip_scale {
                    return Err(Error::SmoothnessViolation {
                        what: format!("gradient ratio {} exceeds L = {lip}", gap / dist),
                        witness: witness(),
                    });
                }

                let (f1, f2) = (loss.eval(&w)?, loss.eval(&w2)?);
                let lin = g1.frob_inner(&d)?;
                let quad = 0.5 * lip * dist * dist;
                let rhs = f1 + lin + quad;
                let scale = 1.0 + f1.abs() + f2.abs() + lin.abs() + quad;
                let slack = (rhs - f2) / scale;
                report.worst_descent_slack = report.worst_descent_slack.min(slack);
                if slack < -SLACK {
                    return Err(Error::SmoothnessViolation {
                        what: format!("quadratic upper bound fails by {}", f2 - rhs),
                        witness: witness(),
                    });
                }
            }
        }
    }
    Ok(report)
}
