use nalgebra::{DMatrix, DVector};
use netcollapse::fit::{fit, FitOptions};
use netcollapse::models::{Dataset, ModelKind, Risk};
use netcollapse::rng::{stream, Lane};
use netcollapse::sandwich::{sandwich, sandwich_monte_carlo};
use netcollapse::make_model;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Central-difference error relative to the analytic value (floored at 1).
fn rel_err(fd: f64, exact: f64) -> f64 {
    (fd - exact).abs() / exact.abs().max(1.0)
}

fn random_point(kind: ModelKind, d: usize, rng: &mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>, f64) {
    let m = make_model(kind, d, 1.0).unwrap();
    let beta = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
    let x = m.draw_covariate(rng);
    let u = m.draw_noise(rng);
    let y = m.respond(&DVector::from_fn(d, |_, _| rng.gen_range(-0.8..0.8)), &x, u).unwrap();
    (beta, x, y)
}

#[test]
fn finite_differences_match_derivatives() {
    let h = 1e-5;
    for kind in ModelKind::ALL {
        let d = 3;
        let m = make_model(kind, d, 1.0).unwrap();
        let mut rng = stream(11, 0, 0, Lane::Oracle(kind as usize));
        for _ in 0..50 {
            let (beta, x, y) = random_point(kind, d, &mut rng);
            let g = m.grad(&beta, &x, y);
            let hm = m.hess(&beta, &x, y);
            for i in 0..d {
                let mut e = DVector::zeros(d);
                e[i] = h;
                let fd = (m.loss(&(&beta + &e), &x, y) - m.loss(&(&beta - &e), &x, y)) / (2.0 * h);
                assert!(rel_err(fd, g[i]) < 1e-5, "{kind:?} grad[{i}]: fd {fd} vs {}", g[i]);
                let gd = (m.grad(&(&beta + &e), &x, y) - m.grad(&(&beta - &e), &x, y)) / (2.0 * h);
                for j in 0..d {
                    assert!(rel_err(gd[j], hm[(j, i)]) < 1e-5, "{kind:?} hess[{j},{i}]: fd {} vs {}", gd[j], hm[(j, i)]);
                }
            }
        }
    }
}

#[test]
fn fisher_consistency() {
    let draws = 100_000;
    for kind in ModelKind::ALL {
        let d = 3;
        let m = make_model(kind, d, 1.0).unwrap();
        let mut rng = stream(12, 0, 0, Lane::Oracle(kind as usize));
        for _ in 0..3 {
            let beta = DVector::from_fn(d, |_, _| rng.gen_range(-0.7..0.7));
            let mut sum = DVector::zeros(d);
            let mut sq = DVector::zeros(d);
            for _ in 0..draws {
                let x = m.draw_covariate(&mut rng);
                let u = m.draw_noise(&mut rng);
                let y = m.respond(&beta, &x, u).unwrap();
                let g = m.grad(&beta, &x, y);
                sum += &g;
                sq += g.component_mul(&g);
            }
            let n = draws as f64;
            let mean = &sum / n;
            for i in 0..d {
                let se = ((sq[i] / n - mean[i] * mean[i]) / n).sqrt();
                assert!(mean[i].abs() <= 4.0 * se, "{kind:?} component {i}: mean {} se {se}", mean[i]);
            }
        }
    }
}

#[test]
fn linear_sandwich_monte_carlo_is_identity() {
    let m = make_model(ModelKind::Linear, 4, 1.0).unwrap();
    let b = DVector::from_vec(vec![0.5, -1.0, 0.2, 0.0]);
    let exact = sandwich(&m, &b, 1, 0).unwrap().v;
    assert!((&exact - DMatrix::identity(4, 4)).amax() <= 1e-12);
    let mc = sandwich_monte_carlo(&m, &b, 100_000, 3).unwrap().v;
    let rel = (&mc - DMatrix::identity(4, 4)).norm() / 2.0;
    assert!(rel <= 0.02, "relative Frobenius error {rel}");
}

/// Plain gradient descent with Armijo backtracking on the mean logistic
/// loss, written out independently of the crate.
fn gradient_descent_logistic(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    let obj = |b: &DVector<f64>| {
        let eta = x * b;
        eta.iter().zip(y.iter()).map(|(&e, &yi)| (1.0 + e.exp()).ln() - yi * e).sum::<f64>() / n
    };
    let grad = |b: &DVector<f64>| {
        let eta = x * b;
        let r = DVector::from_fn(eta.len(), |i, _| 1.0 / (1.0 + (-eta[i]).exp()) - y[i]);
        x.tr_mul(&r) / n
    };
    let mut b = DVector::zeros(x.ncols());
    for _ in 0..2000 {
        let g = grad(&b);
        if g.norm() < 1e-10 {
            break;
        }
        let f = obj(&b);
        let mut step = 4.0;
        while step > 1e-3 && obj(&(&b - &g * step)) > f - 0.5 * step * g.norm_squared() {
            step *= 0.5;
        }
        b -= g * step;
    }
    b
}

#[test]
fn logistic_fit_is_consistent_and_matches_independent_optimizer() {
    let m = make_model(ModelKind::Logistic, 3, 1.0).unwrap();
    let beta = DVector::from_vec(vec![0.8, -0.5, 0.3]);
    let mut rng = stream(21, 0, 0, Lane::Edge(0));
    let (data, _) = m.sample(&beta, 100_000, &mut rng).unwrap();
    let res = fit(&m, &data, &FitOptions::for_kind(ModelKind::Logistic), None).unwrap();
    assert!(res.converged);
    assert!((&res.beta_hat - &beta).norm() <= 0.05);
    let other = gradient_descent_logistic(&data.x, &data.y);
    assert!((&res.beta_hat - other).amax() <= 1e-6);
}

#[test]
fn logistic_at_symmetric_point_shrinks_with_n() {
    let m = make_model(ModelKind::Logistic, 2, 1.0).unwrap();
    let zero = DVector::zeros(2);
    let mut prev = f64::INFINITY;
    for (i, n) in [500usize, 5000, 50_000].into_iter().enumerate() {
        let mut err = 0.0;
        for trial in 0..20 {
            let (data, _) = m.sample(&zero, n, &mut stream(22, trial, i as u64, Lane::Oracle(0))).unwrap();
            err += fit(&m, &data, &FitOptions::for_kind(ModelKind::Logistic), None).unwrap().beta_hat.norm_squared();
        }
        assert!(err < prev);
        prev = err;
    }
    assert!(prev / 20.0 < 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn convex_fits_beat_truth(seed in any::<u64>(), kind_ix in 0usize..3, n in 30usize..200) {
        let kind = [ModelKind::Linear, ModelKind::Logistic, ModelKind::Poisson][kind_ix];
        let m = make_model(kind, 3, 1.0).unwrap();
        let beta = DVector::from_vec(vec![0.4, -0.3, 0.2]);
        let (data, _) = m.sample(&beta, n, &mut stream(seed, 0, 0, Lane::Edge(1))).unwrap();
        if let Ok(res) = fit(&m, &data, &FitOptions::for_kind(kind), None) {
            let risk = Risk { model: &m, data: &data };
            prop_assert!(risk.value(&res.beta_hat) <= risk.value(&beta) + 1e-12);
        }
    }

    #[test]
    fn single_index_loss_is_even(seed in any::<u64>()) {
        let m = make_model(ModelKind::SingleIndexQuadratic, 4, 1.0).unwrap();
        let mut rng = stream(seed, 0, 0, Lane::Init(0));
        let (b, x, y) = random_point(ModelKind::SingleIndexQuadratic, 4, &mut rng);
        prop_assert_eq!(m.loss(&b, &x, y), m.loss(&(-&b), &x, y));
    }

    #[test]
    fn sandwich_is_psd(seed in any::<u64>(), kind_ix in 0usize..4) {
        let kind = ModelKind::ALL[kind_ix];
        let m = make_model(kind, 3, 1.0).unwrap();
        let mut rng = stream(seed, 0, 0, Lane::BetaStar);
        let b = DVector::from_fn(3, |_, _| rng.gen_range(-0.5..0.5));
        let s = sandwich(&m, &b, 2000, seed).unwrap();
        prop_assert_eq!(&s.v, &s.v.transpose());
        prop_assert!(s.v.symmetric_eigenvalues().min() >= -1e-10);
    }
}

#[test]
fn dataset_concat_and_head() {
    let a = Dataset::new(DMatrix::from_row_slice(2, 1, &[1.0, 2.0]), DVector::from_vec(vec![3.0, 4.0]));
    let b = Dataset::new(DMatrix::from_row_slice(1, 1, &[5.0]), DVector::from_vec(vec![6.0]));
    let c = Dataset::concat(&[&a, &b]);
    assert_eq!(c.len(), 3);
    assert_eq!(c.y.as_slice(), &[3.0, 4.0, 6.0]);
    assert_eq!(c.head(2), a);
}
