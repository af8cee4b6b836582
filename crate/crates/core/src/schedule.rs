//! Noise schedule and forward-process arithmetic.
//!
//! Times are 1-based: `t = 1..=N` index the tables, and `t = 0` is the clean
//! sample with the conventions `ᾱ_0 = 1`, `σ_0 = 0`. The noise level attached
//! to step `t` is `σ_t = sqrt((1 − ᾱ_t) / ᾱ_t)`, i.e. the std of the noise in
//! `x_t / sqrt(ᾱ_t) = x_0 + σ_t·n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_NUM_STEPS: usize = 1000;

/// Relative tolerance on `σ_N` after calibration.
pub const CALIBRATION_RTOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub num_steps: usize,
    pub sigma_max: f64,
    pub beta_start: f64,
}

impl ScheduleParams {
    pub fn build(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::linear_with_start(self.num_steps, self.sigma_max, self.beta_start)
    }
}

#[derive(Clone, Debug)]
pub struct VarianceSchedule {
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    sigma_max: f64,
}

/// Posterior `q(x_{t−1} | x_t, x_0) = N(μ̃, β̃·I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mean: Tensor,
    pub variance: f64,
}

fn linear_betas(n: usize, start: f64, end: f64) -> Vec<f64> {
    if n == 1 {
        return vec![end];
    }
    let span = (n - 1) as f64;
    (0..n)
        .map(|i| start + (end - start) * i as f64 / span)
        .collect()
}

/// `σ_N` for a linear schedule, accumulated in log space.
fn terminal_sigma(n: usize, start: f64, end: f64) -> f64 {
    let log_alpha_bar: f64 = linear_betas(n, start, end)
        .iter()
        .map(|b| (-b).ln_1p())
        .sum();
    (-log_alpha_bar).exp_m1().sqrt()
}

pub fn make_linear_schedule(num_steps: usize, sigma_max: f64) -> Result<VarianceSchedule> {
    VarianceSchedule::linear_with_start(num_steps, sigma_max, DEFAULT_BETA_START)
}

impl VarianceSchedule {
    /// Linear `β_t` from `beta_start` to a `β_end` found by bisection so that
    /// `σ_N = sigma_max`.
    pub fn linear_with_start(num_steps: usize, sigma_max: f64, beta_start: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid("num_steps must be at least 1"));
        }
        if !(sigma_max > 0.0 && sigma_max.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma_max must be positive and finite, got {sigma_max}"
            )));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::invalid(format!(
                "beta_start must lie in (0, 1), got {beta_start}"
            )));
        }

        let beta_end = if num_steps == 1 {
            // σ² = β/(1−β)  ⇒  β = σ²/(1+σ²)
            let s2 = sigma_max * sigma_max;
            s2 / (1.0 + s2)
        } else {
            let mut lo = beta_start;
            let mut hi = 1.0 - 1e-15;
            let f_lo = terminal_sigma(num_steps, lo, lo) - sigma_max;
            let f_hi = terminal_sigma(num_steps, lo, hi) - sigma_max;
            if f_lo > 0.0 || !(f_hi >= 0.0) {
                return Err(Error::Calibration(format!(
                    "cannot bracket sigma_max={sigma_max} for N={num_steps}, beta_start={beta_start}: \
                     sigma_N ranges over [{:.6e}, {:.6e}]",
                    f_lo + sigma_max,
                    f_hi + sigma_max
                )));
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if terminal_sigma(num_steps, beta_start, mid) < sigma_max {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };

        let sched = Self::from_betas_inner(linear_betas(num_steps, beta_start, beta_end), sigma_max)?;
        let reached = sched.sigma_at(num_steps);
        if (reached - sigma_max).abs() > CALIBRATION_RTOL * sigma_max {
            return Err(Error::Calibration(format!(
                "bisection converged to beta_end={beta_end:.12e} but sigma_N={reached:.9e} \
                 misses target {sigma_max:.9e}"
            )));
        }
        Ok(Self {
            beta_start,
            beta_end,
            ..sched
        })
    }

    /// Builds the tables from explicit per-step variances. `sigma_max` is
    /// set to the resulting `σ_N`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        let n = beta.len();
        let mut sched = Self::from_betas_inner(beta, f64::NAN)?;
        sched.sigma_max = sched.sigma_at(n);
        Ok(sched)
    }

    fn from_betas_inner(beta: Vec<f64>, sigma_max: f64) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(i) = beta.iter().position(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid(format!(
                "beta[{}] = {} outside (0, 1)",
                i + 1,
                beta[i]
            )));
        }
        if let Some(i) = beta.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::invalid(format!(
                "beta must be non-decreasing (beta[{}] > beta[{}])",
                i + 1,
                i + 2
            )));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let sigma = alpha_bar
            .iter()
            .map(|&ab| ((1.0 - ab) / ab).sqrt())
            .collect();
        Ok(Self {
            beta_start: beta[0],
            beta_end: *beta.last().unwrap(),
            beta,
            alpha_bar,
            sigma,
            sigma_max,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            num_steps: self.num_steps(),
            sigma_max: self.sigma_max,
            beta_start: self.beta_start,
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// `β_t` for `1 ≤ t ≤ N`.
    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// `σ_t`, with `σ_0 = 0`.
    pub fn sigma_at(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.sigma[t - 1]
        }
    }

    /// Step whose `σ_t` is closest to `sigma` (lower index on ties).
    pub fn nearest_index(&self, sigma: f64) -> usize {
        let mut best = 1;
        let mut best_d = f64::INFINITY;
        for (i, &s) in self.sigma.iter().enumerate() {
            let d = (s - sigma).abs();
            if d < best_d {
                best_d = d;
                best = i + 1;
            }
        }
        best
    }

    fn check_step(&self, t: usize, op: &str) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::invalid(format!(
                "{op}: t = {t} outside 1..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// Closed-form marginal `x_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·noise`.
    pub fn forward_sample(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_step(t, "forward_sample")?;
        x0.ensure_same_shape(noise, "forward_sample noise")?;
        let ab = self.alpha_bar_at(t);
        Ok(x0.axpby(ab.sqrt(), noise, (1.0 - ab).sqrt()))
    }

    /// One Markov transition `x_t = sqrt(1 − β_t)·x_{t−1} + sqrt(β_t)·noise`.
    pub fn forward_step(&self, x_prev: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_step(t, "forward_step")?;
        x_prev.ensure_same_shape(noise, "forward_step noise")?;
        let b = self.beta_at(t);
        Ok(x_prev.axpby((1.0 - b).sqrt(), noise, b.sqrt()))
    }

    pub fn posterior_params(&self, x_t: &Tensor, x0: &Tensor, t: usize) -> Result<PosteriorParams> {
        self.check_step(t, "posterior_params")?;
        x_t.ensure_same_shape(x0, "posterior_params x0")?;
        let (c0, ct, variance) = self.posterior_coefficients(t);
        Ok(PosteriorParams {
            mean: x0.axpby(c0, x_t, ct),
            variance,
        })
    }

    /// `(weight on x0, weight on x_t, β̃_t)`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64, f64) {
        let b = self.beta_at(t);
        let ab = self.alpha_bar_at(t);
        let ab_prev = self.alpha_bar_at(t - 1);
        let denom = 1.0 - ab;
        let c0 = ab_prev.sqrt() * b / denom;
        let ct = (1.0 - b).sqrt() * (1.0 - ab_prev) / denom;
        let var = (1.0 - ab_prev) / denom * b;
        (c0, ct, var)
    }
}
