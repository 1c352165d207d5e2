//! The stacked adapter `V = [B; A^T]`.
//!
//! `V V^T` carries `BA` in its top-right `m x n` block. Everything here works
//! on the two row blocks of `V` directly; the `(m+n) x (m+n)` outer product
//! and the extractor matrices are never formed.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// `(m+n) x r` matrix whose top `m` rows are `B` and bottom `n` rows are `A^T`.
#[derive(Clone, PartialEq, Debug)]
pub struct StackedAdapter {
    m: usize,
    n: usize,
    data: Matrix,
}

impl StackedAdapter {
    /// Stacks LoRA factors `B` (`m x r`) and `A` (`r x n`), requiring the
    /// low-rank regime `r < min(m, n)`.
    pub fn stack(b: &Matrix, a: &Matrix) -> Result<Self> {
        let (m, r) = b.shape();
        let n = a.cols();
        if r >= m.min(n) {
            return Err(Error::Config(format!(
                "r must satisfy r < min(m,n) (r = {r}, m = {m}, n = {n})"
            )));
        }
        Self::stack_any_rank(b, a)
    }

    /// Same as [`stack`](Self::stack) without the low-rank restriction, for
    /// the general symmetric factorization `V V^T` (any `r >= 1`).
    pub fn stack_any_rank(b: &Matrix, a: &Matrix) -> Result<Self> {
        let (m, r) = b.shape();
        let (ra, n) = a.shape();
        if ra != r {
            return Err(Error::Config(format!(
                "B is {m}x{r} but A is {ra}x{n}; inner dimensions differ"
            )));
        }
        if m == 0 || n == 0 || r == 0 {
            return Err(Error::Config("adapter dimensions must be positive".into()));
        }
        Ok(Self {
            m,
            n,
            data: Matrix::vstack(b, &a.transpose())?,
        })
    }

    /// Wraps an already stacked `(m+n) x r` matrix.
    pub fn from_stacked(m: usize, n: usize, data: Matrix) -> Result<Self> {
        if data.rows() != m + n || data.cols() == 0 || m == 0 || n == 0 {
            return Err(Error::dim(format!(
                "stacked data is {}x{}, expected (m+n) x r with m = {m}, n = {n}",
                data.rows(),
                data.cols()
            )));
        }
        Ok(Self { m, n, data })
    }

    pub fn zeros(m: usize, n: usize, r: usize) -> Self {
        Self {
            m,
            n,
            data: Matrix::zeros(m + n, r),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn into_data(self) -> Matrix {
        self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.frob_norm()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.frob_norm_sq()
    }

    /// `B`, the top `m x r` block.
    pub fn b(&self) -> Matrix {
        self.data.row_block(0, self.m)
    }

    /// `A`, recovered by transposing the bottom `n x r` block.
    pub fn a(&self) -> Matrix {
        self.data.row_block(self.m, self.m + self.n).transpose()
    }

    pub fn unstack(&self) -> (Matrix, Matrix) {
        (self.b(), self.a())
    }

    /// `BA = E1 V V^T E2`, computed as (top block) x (bottom block)^T.
    pub fn product_block(&self) -> Matrix {
        let (m, n, r) = (self.m, self.n, self.rank());
        let v = self.data.as_slice();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let bi = &v[i * r..(i + 1) * r];
            for j in 0..n {
                let aj = &v[(m + j) * r..(m + j + 1) * r];
                out[i * n + j] = bi.iter().zip(aj).map(|(x, y)| x * y).sum();
            }
        }
        Matrix::from_vec(m, n, out).expect("product of finite blocks overflowed")
    }

    /// Pulls a gradient `G` of the original loss (taken at `BA`) back to `V`:
    /// `2 Sym(E1^T G E2^T) V = [G A^T; G^T B]`.
    pub fn embed_gradient(&self, g: &Matrix) -> Result<StackedAdapter> {
        let (m, n, r) = (self.m, self.n, self.rank());
        if g.shape() != (m, n) {
            return Err(Error::dim(format!(
                "gradient is {}x{}, adapter expects {m}x{n}",
                g.rows(),
                g.cols()
            )));
        }
        let v = self.data.as_slice();
        let gs = g.as_slice();
        let mut out = vec![0.0; (m + n) * r];
        // top: G * (bottom block)
        for i in 0..m {
            let row = &mut out[i * r..(i + 1) * r];
            for j in 0..n {
                let gij = gs[i * n + j];
                for (o, a) in row.iter_mut().zip(&v[(m + j) * r..(m + j + 1) * r]) {
                    *o += gij * a;
                }
            }
        }
        // bottom: G^T * (top block)
        for i in 0..m {
            let bi = &v[i * r..(i + 1) * r];
            for j in 0..n {
                let gij = gs[i * n + j];
                let row = &mut out[(m + j) * r..(m + j + 1) * r];
                for (o, b) in row.iter_mut().zip(bi) {
                    *o += gij * b;
                }
            }
        }
        Ok(StackedAdapter {
            m,
            n,
            data: Matrix::from_vec(m + n, r, out)?,
        })
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &StackedAdapter) -> Result<StackedAdapter> {
        if (self.m, self.n) != (other.m, other.n) {
            return Err(Error::dim("adapters have different block splits"));
        }
        Ok(StackedAdapter {
            m: self.m,
            n: self.n,
            data: self.data.axpy(alpha, &other.data)?,
        })
    }

    pub fn inner(&self, other: &StackedAdapter) -> Result<f64> {
        self.data.frob_inner(&other.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn naive_product(b: &Matrix, a: &Matrix) -> Matrix {
        let mut out = vec![0.0; b.rows() * a.cols()];
        for i in 0..b.rows() {
            for j in 0..a.cols() {
                for k in 0..b.cols() {
                    out[i * a.cols() + j] += b[(i, k)] * a[(k, j)];
                }
            }
        }
        Matrix::from_vec(b.rows(), a.cols(), out).unwrap()
    }

    fn rel_err(x: &Matrix, y: &Matrix) -> f64 {
        x.sub(y).unwrap().frob_norm() / y.frob_norm().max(1e-300)
    }

    #[test]
    fn stack_zero_factors() {
        let v = StackedAdapter::stack(&Matrix::zeros(2, 1), &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(v.data(), &Matrix::zeros(4, 1));
    }

    #[test]
    fn stack_places_b_over_a_transpose() {
        let v = StackedAdapter::stack(&m(&[&[1.0], &[2.0]]), &m(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(v.data(), &m(&[&[1.0], &[2.0], &[3.0], &[4.0]]));
    }

    #[test]
    fn stack_rejects_rank_and_shape_violations() {
        let err = StackedAdapter::stack(&Matrix::zeros(2, 2), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("r < min(m,n)"), "{err}");
        assert!(StackedAdapter::stack(&Matrix::zeros(4, 1), &Matrix::zeros(2, 4)).is_err());
        // the unrestricted form still accepts r = m = n
        assert!(StackedAdapter::stack_any_rank(&Matrix::zeros(1, 1), &Matrix::zeros(1, 1)).is_ok());
    }

    #[test]
    fn unstack_round_trips_bit_exactly() {
        let mut rng = SeededRng::new(3, 0);
        for _ in 0..50 {
            let b = rng.gaussian_matrix(5, 2, 1.0);
            let a = rng.gaussian_matrix(2, 4, 1.0);
            let (b2, a2) = StackedAdapter::stack(&b, &a).unwrap().unstack();
            assert_eq!(b2.as_slice(), b.as_slice());
            assert_eq!(a2.as_slice(), a.as_slice());
        }
    }

    #[test]
    fn product_block_examples() {
        assert_eq!(StackedAdapter::zeros(3, 4, 2).product_block(), Matrix::zeros(3, 4));
        let v = StackedAdapter::stack(&m(&[&[1.0], &[2.0]]), &m(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(v.product_block(), m(&[&[3.0, 4.0], &[6.0, 8.0]]));
    }

    #[test]
    fn product_block_matches_naive_multiplication() {
        let mut rng = SeededRng::new(42, 0);
        for case in 0..1000 {
            let mm = 2 + case % 7;
            let nn = 2 + (case / 7) % 7;
            let r = 1 + case % (mm.min(nn) - 1);
            let b = rng.gaussian_matrix(mm, r, 1.0);
            let a = rng.gaussian_matrix(r, nn, 1.0);
            let v = StackedAdapter::stack(&b, &a).unwrap();
            let err = rel_err(&v.product_block(), &naive_product(&b, &a));
            assert!(err <= 1e-12, "case {case}: rel err {err}");
        }
    }

    #[test]
    fn embed_gradient_scalar_case() {
        let v = StackedAdapter::stack_any_rank(&m(&[&[1.0]]), &m(&[&[1.0]])).unwrap();
        let g = v.embed_gradient(&m(&[&[-1.0]])).unwrap();
        assert_eq!(g.data(), &m(&[&[-1.0], &[-1.0]]));
    }

    #[test]
    fn embed_gradient_vanishes_at_origin() {
        let mut rng = SeededRng::new(1, 0);
        let g = rng.gaussian_matrix(3, 5, 10.0);
        let out = StackedAdapter::zeros(3, 5, 2).embed_gradient(&g).unwrap();
        assert_eq!(out.data(), &Matrix::zeros(8, 2));
    }

    #[test]
    fn embed_gradient_equals_block_partials() {
        // d/dB L(BA) = G A^T and d/dA L(BA) = B^T G
        let mut rng = SeededRng::new(9, 0);
        let b = rng.gaussian_matrix(4, 2, 1.0);
        let a = rng.gaussian_matrix(2, 3, 1.0);
        let g = rng.gaussian_matrix(4, 3, 1.0);
        let v = StackedAdapter::stack(&b, &a).unwrap();
        let (gb, ga) = v.embed_gradient(&g).unwrap().unstack();
        assert!(rel_err(&gb, &naive_product(&g, &a.transpose())) < 1e-14);
        assert!(rel_err(&ga, &naive_product(&b.transpose(), &g)) < 1e-14);
    }

    #[test]
    fn embed_gradient_rejects_wrong_shape() {
        let v = StackedAdapter::zeros(3, 4, 1);
        assert!(matches!(
            v.embed_gradient(&Matrix::zeros(4, 3)),
            Err(Error::Dimension(_))
        ));
    }
}
