use lora_gd_core::losses::{make_logistic, make_quadratic, make_rank_gap_quadratic, SmoothLoss};
use lora_gd_core::optimizer::{grad_j, run_full_rank_gd, run_lora_gd};
use lora_gd_core::rng::SeededRng;
use lora_gd_core::verification::{check_gradj_consistency, dense_j, fd_grad, relative_error};
use lora_gd_core::{Matrix, StackedAdapter};
use nalgebra::DMatrix;

fn max_abs_err(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn assert_second_order(errors: [f64; 3]) {
    for w in errors.windows(2) {
        assert!(w[0] >= 3.0 * w[1], "error did not shrink quadratically: {errors:?}");
    }
}

#[test]
fn finite_differences_are_second_order_on_logistic_loss() {
    let loss = make_logistic(4, 5, 32, 9).unwrap();
    let w = SeededRng::new(7, 0).gaussian_matrix(4, 5, 0.5);
    let exact = loss.grad(&w).unwrap();
    let errors = [1e-3, 5e-4, 2.5e-4].map(|eps| max_abs_err(&fd_grad(|x| loss.eval(x), &w, eps).unwrap(), &exact));
    assert_second_order(errors);
}

#[test]
fn finite_differences_are_second_order_on_adapter_objective() {
    let loss = make_logistic(4, 5, 32, 10).unwrap();
    let mut rng = SeededRng::new(8, 0);
    let v = StackedAdapter::stack(&rng.gaussian_matrix(4, 2, 0.8), &rng.gaussian_matrix(2, 5, 0.8)).unwrap();
    let exact = grad_j(&v, &loss).unwrap().gradient.into_data();
    let j = |x: &Matrix| loss.eval(&StackedAdapter::from_stacked(4, 5, x.clone())?.product_block());
    let errors = [1e-3, 5e-4, 2.5e-4].map(|eps| max_abs_err(&fd_grad(j, v.data(), eps).unwrap(), &exact));
    assert_second_order(errors);
}

fn bundled_losses() -> Vec<Box<dyn SmoothLoss>> {
    let mut rng = SeededRng::new(3, 0);
    vec![
        Box::new(make_quadratic(4, 4, rng.gaussian_matrix(4, 4, 1.0), 1.0).unwrap()),
        Box::new(make_quadratic(4, 4, rng.gaussian_matrix(4, 4, 1.0), 3.0).unwrap()),
        Box::new(make_logistic(5, 4, 64, 3).unwrap()),
        Box::new(make_rank_gap_quadratic(6, 6, 3, 3).unwrap()),
    ]
}

#[test]
fn loss_invariants_hold_on_seeded_points() {
    for loss in bundled_losses() {
        let (m, n) = loss.shape();
        let mut rng = SeededRng::new(21, 0);
        for k in 0..100 {
            let w = rng.gaussian_matrix(m, n, [0.1, 1.0, 10.0][k % 3]);
            let value = loss.eval(&w).unwrap();
            let g = loss.grad(&w).unwrap();
            assert!(value >= loss.lower_bound(), "{}", loss.name());
            let excess = 2.0 * loss.lipschitz() * (value - loss.lower_bound());
            assert!(g.frob_norm_sq() <= excess + 1e-9 * (1.0 + excess), "{}", loss.name());
            let numeric = fd_grad(|x| loss.eval(x), &w, 1e-5).unwrap();
            assert!(relative_error(&numeric, &g).unwrap() <= 1e-5, "{}", loss.name());
        }
    }
}

#[test]
fn gradient_routes_agree_at_boundary_rank() {
    let mut rng = SeededRng::new(22, 0);
    for loss in bundled_losses() {
        let (m, n) = loss.shape();
        let r = m.min(n) - 1;
        for _ in 0..10 {
            let v = StackedAdapter::stack(&rng.gaussian_matrix(m, r, 1.0), &rng.gaussian_matrix(r, n, 1.0)).unwrap();
            let rep = check_gradj_consistency(&v, loss.as_ref()).unwrap();
            assert!(rep.passed, "{}: {rep:?}", loss.name());
        }
    }
}

#[test]
fn dense_objective_matches_product_block_route() {
    let loss = make_logistic(5, 4, 16, 1).unwrap();
    let mut rng = SeededRng::new(23, 0);
    let v = StackedAdapter::stack(&rng.gaussian_matrix(5, 2, 1.0), &rng.gaussian_matrix(2, 4, 1.0)).unwrap();
    let direct = loss.eval(&v.product_block()).unwrap();
    assert!((dense_j(&v, &loss).unwrap() - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
}

fn singular_values(m: &Matrix) -> Vec<f64> {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let mut s: Vec<f64> = dm.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

#[test]
fn rank_gap_target_has_the_advertised_spectrum() {
    let loss = make_rank_gap_quadratic(6, 6, 3, 5).unwrap();
    let s = singular_values(loss.target());
    for i in 0..3 {
        let base = (3 - i) as f64;
        assert!(s[i] >= base - 1e-12 && s[i] < base + 0.5 + 1e-12, "{s:?}");
    }
    assert!(s[3..].iter().all(|x| *x < 1e-12), "{s:?}");
}

#[test]
fn rank_one_adapter_stalls_at_the_truncated_svd_value() {
    // best rank-1 approximation leaves (s2^2 + s3^2)/2 of loss
    let loss = make_rank_gap_quadratic(6, 6, 3, 5).unwrap();
    let s = singular_values(loss.target());
    let floor = 0.5 * (s[1] * s[1] + s[2] * s[2]);
    let mut rng = SeededRng::new(5, 2);
    let v0 = StackedAdapter::stack(&Matrix::zeros(6, 1), &rng.gaussian_matrix(1, 6, 1.0)).unwrap();
    let lora = run_lora_gd(&loss, v0.clone(), 10_000).unwrap();
    let last = lora.last();
    assert!(last.grad_j_norm <= 1e-6, "{last:?}");
    assert!((last.j_value - floor).abs() <= 1e-8 * (1.0 + floor), "{} vs {floor}", last.j_value);
    assert!(last.grad_l_norm >= 1.0);

    let full = run_full_rank_gd(&loss, v0.product_block(), 10).unwrap();
    assert!(full.last().grad_l_norm <= 1e-8);
    assert!(full.last().j_value + 0.01 <= last.j_value);
}

#[test]
fn adapter_with_enough_rank_fits_the_rank_gap_target() {
    let loss = make_rank_gap_quadratic(6, 6, 2, 5).unwrap();
    let mut rng = SeededRng::new(5, 2);
    let v0 = StackedAdapter::stack(&Matrix::zeros(6, 3), &rng.gaussian_matrix(3, 6, 1.0 / 3f64.sqrt())).unwrap();
    let trace = run_lora_gd(&loss, v0, 10_000).unwrap();
    assert!(trace.last().grad_l_norm <= 1e-6, "{:?}", trace.last());
}

#[test]
fn logistic_full_rank_descent_never_increases() {
    let loss = make_logistic(5, 4, 64, 3).unwrap();
    let trace = run_full_rank_gd(&loss, Matrix::zeros(5, 4), 1000).unwrap();
    for w in trace.records.windows(2) {
        assert!(w[1].j_value <= w[0].j_value);
    }
}
