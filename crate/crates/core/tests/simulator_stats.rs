//! Statistical properties of the synthetic generator and the ridge solver.

use nalgebra::DVector;
use ridgepoison::linalg;
use ridgepoison::resolvent::gram_resolvent;
use ridgepoison::simulator::{
    apply_poison, center, empirical_efficacy, generate_clean, run_trial, solve_ridge_dual, solve_ridge_primal,
    trigger_vector, Centering, RidgeSolution, TrialConfig, TriggerDirection,
};
use ridgepoison::theory::{normal_cdf, population_moments};
use ridgepoison::{ModelParams, SimShape, SpectralPoint};

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[test]
fn generator_moments() {
    let n = 100_000;
    let (x, y) = generate_clean(&SimShape::new(4, n, 17).unwrap());
    for i in 0..4 {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let (m, sd) = mean_sd(&row);
        assert!(m.abs() <= 4.0 / (n as f64).sqrt(), "row {i} mean {m}");
        assert!((sd * sd - 1.0).abs() <= 0.05, "row {i} var {}", sd * sd);
    }
    assert!(y.iter().all(|&l| l == 1.0 || l == -1.0));
    assert!(y.mean().abs() <= 4.0 / (n as f64).sqrt());
}

#[test]
fn poison_rate_binomial() {
    let n = 100_000;
    let theta = 0.1;
    let shape = SimShape::new(2, n, 23).unwrap();
    let (x, y) = generate_clean(&shape);
    let v = trigger_vector(2, 1.0, TriggerDirection::FirstAxis, 23);
    let data = apply_poison(x, y.clone(), theta, &v, 23).unwrap();
    let n_neg = y.iter().filter(|&&l| l < 0.0).count() as f64;
    let rate = data.poisoned_count() as f64 / n_neg;
    assert!((rate - theta).abs() <= 4.0 * (theta * (1.0 - theta) / n_neg).sqrt());
    for i in 0..n {
        if data.u[i] > 0.0 {
            assert_eq!(y[i], -1.0);
            assert_eq!(data.y[i], 1.0);
        }
    }
}

#[test]
fn empirical_mean_is_close_to_population() {
    let (p, n, theta) = (5, 100_000, 0.1);
    let shape = SimShape::new(p, n, 31).unwrap();
    let (x, y) = generate_clean(&shape);
    let v = trigger_vector(p, 2.0, TriggerDirection::RandomUnit, 31);
    let mut data = apply_poison(x, y, theta, &v, 31).unwrap();
    data.centering = Centering::Empirical;
    let c = center(&data, theta);
    assert!((&c.x_bar - &v * (theta / 2.0)).norm() <= 5.0 * (p as f64 / n as f64).sqrt());
}

#[test]
fn lln_moments_match_population_limits() {
    let n = 10_000;
    for theta in [0.05, 0.2] {
        let shape = SimShape::new(3, n, 41).unwrap();
        let (x, y) = generate_clean(&shape);
        let v = trigger_vector(3, 1.0, TriggerDirection::FirstAxis, 41);
        let data = apply_poison(x, y.clone(), theta, &v, 41).unwrap();
        let c = center(&data, theta);
        let r = data.u.map(|u| u - theta / 2.0);
        let nf = n as f64;
        let pm = population_moments(theta).unwrap();
        let tol = 5.0 / nf.sqrt();
        let s = r.norm_squared() / nf;
        let got = [
            ("s", s, pm.s),
            ("r.y", r.dot(&y) / nf, pm.r_dot_y),
            ("r.w", r.dot(&c.w_tilde) / nf, pm.r_dot_w),
            ("|w|^2", c.w_tilde.norm_squared() / nf, pm.w_norm_sq),
            ("(w.b)^2", r.dot(&c.w_tilde).powi(2) / (nf * r.norm_squared()), pm.w_dot_bhat_sq),
        ];
        for (name, emp, lim) in got {
            assert!((emp - lim).abs() <= tol, "θ={theta} {name}: {emp} vs {lim}");
        }
    }
}

#[test]
fn primal_dual_agree() {
    for (p, n) in [(50, 100), (50, 400), (200, 100), (200, 400)] {
        let shape = SimShape::new(p, n, (p * n) as u64).unwrap();
        let (x, y) = generate_clean(&shape);
        for lambda in [1e-3, 0.1, 2.0] {
            let bp = solve_ridge_primal(&x, &y, lambda).unwrap();
            let bd = solve_ridge_dual(&x, &y, lambda).unwrap();
            assert!((&bp - &bd).norm() <= 1e-8 * bp.norm(), "p={p} n={n} λ={lambda}");
            // normal equations
            let lhs = linalg::scaled_outer_gram(&x, lambda) * &bp;
            let rhs = (&x * &y) / n as f64;
            assert!((lhs - rhs).norm() <= 1e-8 * (1.0 + y.norm()));
        }
    }
}

#[test]
fn norm_identity_through_gram_resolvent() {
    let (p, n, lambda, theta) = (60, 100, 0.1, 0.2);
    let shape = SimShape::new(p, n, 5).unwrap();
    let (x, y) = generate_clean(&shape);
    let v = trigger_vector(p, 1.5, TriggerDirection::FirstAxis, 5);
    let data = apply_poison(x, y, theta, &v, 5).unwrap();
    let c = center(&data, theta);
    let beta = solve_ridge_primal(&c.x_tilde, &c.w_tilde, lambda).unwrap();
    let z = SpectralPoint::from_lambda(lambda).unwrap();
    let qt = gram_resolvent(&c.x_tilde, z).unwrap();
    let qw = &qt * &c.w_tilde;
    let via_resolvent = (z.get() * qw.norm_squared() + c.w_tilde.dot(&qw)) / n as f64;
    assert!((beta.norm_squared() - via_resolvent).abs() <= 1e-8);
}

#[test]
fn efficacy_matches_exact_gaussian_probability() {
    let p = 30;
    let beta = DVector::from_fn(p, |i, _| ((i as f64) * 0.7).sin());
    let v = trigger_vector(p, 1.0, TriggerDirection::RandomUnit, 2);
    let sol = RidgeSolution { beta: beta.clone(), b0: 0.3 };
    let m = 100_000;
    let exact = normal_cdf(beta.dot(&v) / beta.norm());
    let eta = empirical_efficacy(&sol, &v, m, 9, false).unwrap();
    assert!((eta - exact).abs() <= 4.0 * (exact * (1.0 - exact) / m as f64).sqrt());
    let with_b0 = empirical_efficacy(&sol, &v, m, 9, true).unwrap();
    let exact_b0 = normal_cdf((beta.dot(&v) + 0.3) / beta.norm());
    assert!((with_b0 - exact_b0).abs() <= 4.0 * (exact_b0 * (1.0 - exact_b0) / m as f64).sqrt());
}

fn trial_mus(params: &ModelParams, p: usize, trials: usize, cfg: &TrialConfig, offset: u64) -> Vec<f64> {
    (0..trials)
        .map(|t| {
            let shape = SimShape::from_ratio(p, params.c, offset + t as u64).unwrap();
            run_trial(params, &shape, cfg).unwrap().mu_emp
        })
        .collect()
}

#[test]
fn unpoisoned_mean_concentrates_at_zero() {
    let params = ModelParams::new(0.5, 0.1, 0.0, 1.0).unwrap();
    let cfg = TrialConfig { m_test: 0, ..TrialConfig::default() };
    let mus = trial_mus(&params, 100, 100, &cfg, 0);
    let (m, sd) = mean_sd(&mus);
    assert!(m.abs() <= 4.0 * sd / 10.0, "{m} ± {sd}");
}

#[test]
fn rotation_invariance_of_mu() {
    let params = ModelParams::new(0.5, 0.1, 0.1, 1.0).unwrap();
    let axis = TrialConfig { m_test: 0, ..TrialConfig::default() };
    let random = TrialConfig { direction: TriggerDirection::RandomUnit, ..axis };
    let a = trial_mus(&params, 100, 100, &axis, 0);
    let b = trial_mus(&params, 100, 100, &random, 1000);
    let (ma, sa) = mean_sd(&a);
    let (mb, sb) = mean_sd(&b);
    let pooled = ((sa * sa + sb * sb) / 100.0).sqrt();
    assert!((ma - mb).abs() <= 4.0 * pooled, "{ma} vs {mb}, se {pooled}");
}

#[test]
fn dual_path_used_when_wide() {
    // p > n takes the dual branch; result must still satisfy the primal normal equations
    let shape = SimShape::new(80, 40, 3).unwrap();
    let (x, y) = generate_clean(&shape);
    let sol = ridgepoison::simulator::solve_ridge(&x, &y, 0.05, &DVector::zeros(80), 0.0).unwrap();
    let resid = linalg::scaled_outer_gram(&x, 0.05) * &sol.beta - (&x * &y) / 40.0;
    assert!(resid.norm() <= 1e-8 * (1.0 + y.norm()));
}
