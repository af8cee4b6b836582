mod common;

use common::{bayes_posterior, brute_force_tables, moments, rel_err};
use maddpm::schedule::VarianceSchedule;
use maddpm::{make_linear_schedule, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Smallest σ_N reachable with a flat schedule at β_start = 1e-4.
fn floor_sigma(n: usize) -> f64 {
    ((1.0f64 - 1e-4).powi(-(n as i32)) - 1.0).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tables_match_running_products(n in 1usize..600, u in 0.0f64..1.0) {
        let lo = (floor_sigma(n) * 1.5).max(0.05);
        let sigma_max = lo * (40.0 / lo).powf(u);
        let s = make_linear_schedule(n, sigma_max).unwrap();
        let (abar, sigma) = brute_force_tables(s.betas());
        for t in 0..n {
            prop_assert!(rel_err(s.alpha_bars()[t], abar[t]) <= 1e-10);
            prop_assert!(rel_err(s.sigmas()[t], sigma[t]) <= 1e-10);
        }
        prop_assert!(rel_err(s.sigma_at(n), sigma_max) <= 1e-6);
        for w in s.betas().windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        for w in s.alpha_bars().windows(2) {
            prop_assert!(w[1] < w[0]);
        }
        for w in s.sigmas().windows(2) {
            prop_assert!(w[1] > w[0]);
        }
        prop_assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn posterior_variance_is_bounded_by_beta(n in 2usize..200, sigma_max in 0.5f64..10.0) {
        let s = make_linear_schedule(n, sigma_max).unwrap();
        prop_assert_eq!(s.posterior_coefficients(1).2, 0.0);
        for t in 1..=n {
            let v = s.posterior_coefficients(t).2;
            prop_assert!(v >= 0.0 && v <= s.beta_at(t));
        }
    }

    #[test]
    fn posterior_mean_is_linear(c in -5.0f64..5.0, xt in -3.0f64..3.0, x0 in -3.0f64..3.0, t in 1usize..=30) {
        let s = make_linear_schedule(30, 3.0).unwrap();
        let a = s.posterior_params(&Tensor::scalar(xt), &Tensor::scalar(x0), t).unwrap().mean;
        let b = s.posterior_params(&Tensor::scalar(c * xt), &Tensor::scalar(c * x0), t).unwrap().mean;
        prop_assert!((b.data()[0] - c * a.data()[0]).abs() <= 1e-12 * (1.0 + b.data()[0].abs()));
    }
}

#[test]
fn one_step_schedule_is_closed_form() {
    let s = make_linear_schedule(1, 1.0).unwrap();
    assert!((s.beta_at(1) - 0.5).abs() < 1e-15);
}

#[test]
fn thousand_step_schedule_hits_sigma_max() {
    let s = make_linear_schedule(1000, 8.0).unwrap();
    assert!((s.sigma_at(1000) - 8.0).abs() <= 8e-6);
    let s = make_linear_schedule(100, 2.0).unwrap();
    let (_, sigma) = brute_force_tables(s.betas());
    assert_eq!(s.sigmas(), &sigma[..]);
}

#[test]
fn posterior_matches_gaussian_product_on_the_reference_case() {
    let s = make_linear_schedule(10, 2.0).unwrap();
    let (abar, _) = brute_force_tables(s.betas());
    let post = s
        .posterior_params(&Tensor::scalar(0.8), &Tensor::scalar(0.3), 5)
        .unwrap();
    let (m, v) = bayes_posterior(0.3, 0.8, s.betas()[4], abar[3]);
    assert!(rel_err(post.mean.data()[0], m) <= 1e-12);
    assert!(rel_err(post.variance, v) <= 1e-12);
}

#[test]
fn posterior_matches_gaussian_product_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(1..=200);
        let sigma_max = rng.random_range(floor_sigma(n) * 1.5 + 0.05..12.0);
        let s = make_linear_schedule(n, sigma_max).unwrap();
        let (abar, _) = brute_force_tables(s.betas());
        let t = rng.random_range(1..=n);
        let (x0, xt) = (rng.random_range(-2.0..2.0), rng.random_range(-4.0..4.0));
        let abar_prev = if t == 1 { 1.0 } else { abar[t - 2] };
        let (m, v) = bayes_posterior(x0, xt, s.betas()[t - 1], abar_prev);
        let post = s.posterior_params(&Tensor::scalar(xt), &Tensor::scalar(x0), t).unwrap();
        assert!(rel_err(post.mean.data()[0], m) <= 1e-8, "mean at t={t}/{n}");
        assert!(rel_err(post.variance, v) <= 1e-8 || (post.variance - v).abs() < 1e-300);
    }
}

#[test]
fn first_posterior_step_drops_the_noise_component() {
    let s = make_linear_schedule(20, 2.0).unwrap();
    let x0 = Tensor::scalar(0.7);
    let xt = x0.scale(s.alpha_bar_at(1).sqrt());
    let p = s.posterior_params(&xt, &x0, 1).unwrap();
    assert_eq!(p.variance, 0.0);
    assert!((p.mean.data()[0] - 0.7).abs() < 1e-12);
}

fn gaussian(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::scalar(rng.sample(StandardNormal))
}

/// |estimate − target| within three standard errors.
fn within_3se(est: f64, target: f64, se: f64) -> bool {
    (est - target).abs() <= 3.0 * se
}

#[test]
fn forward_sample_moments() {
    let s = make_linear_schedule(100, 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    for &t in &[1usize, 40, 100] {
        let ab = s.alpha_bar_at(t);
        let draws: Vec<f64> = (0..n)
            .map(|_| s.forward_sample(&Tensor::scalar(0.0), t, &gaussian(&mut rng)).unwrap().data()[0])
            .collect();
        let (_, var) = moments(&draws);
        let target = 1.0 - ab;
        assert!(within_3se(var, target, target * (2.0 / (n as f64 - 1.0)).sqrt()));

        let x0 = 1.5;
        let draws: Vec<f64> = (0..n)
            .map(|_| s.forward_sample(&Tensor::scalar(x0), t, &gaussian(&mut rng)).unwrap().data()[0])
            .collect();
        let (mean, _) = moments(&draws);
        assert!(within_3se(mean, ab.sqrt() * x0, ((1.0 - ab) / n as f64).sqrt()));
    }
}

#[test]
fn chained_steps_match_the_closed_form_marginal() {
    let s = make_linear_schedule(50, 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    let x0 = 0.8;
    let t = 50;
    let chain: Vec<f64> = (0..n)
        .map(|_| {
            let mut x = Tensor::scalar(x0);
            for k in 1..=t {
                x = s.forward_step(&x, k, &gaussian(&mut rng)).unwrap();
            }
            x.data()[0]
        })
        .collect();
    let (mean, var) = moments(&chain);
    let ab = s.alpha_bar_at(t);
    let target_var = 1.0 - ab;
    assert!(within_3se(mean, ab.sqrt() * x0, (target_var / n as f64).sqrt()));
    assert!(within_3se(var, target_var, target_var * (2.0 / (n as f64 - 1.0)).sqrt()));
}

#[test]
fn degenerate_beta_is_near_identity() {
    let s = VarianceSchedule::from_betas(vec![1e-12]).unwrap();
    let y = s.forward_step(&Tensor::scalar(0.9), 1, &Tensor::scalar(0.0)).unwrap();
    assert!(rel_err(y.data()[0], 0.9) <= 1e-6);
}

#[test]
fn invalid_arguments_are_rejected() {
    assert!(make_linear_schedule(0, 1.0).is_err());
    assert!(make_linear_schedule(10, 0.0).is_err());
    assert!(make_linear_schedule(10, -1.0).is_err());
    let s = make_linear_schedule(10, 1.0).unwrap();
    let x = Tensor::scalar(0.0);
    assert!(s.forward_step(&x, 0, &x).is_err());
    assert!(s.posterior_params(&x, &x, 0).is_err());
    assert!(s.forward_sample(&x, 1, &Tensor::zeros(1, 1, 2)).is_err());
}
