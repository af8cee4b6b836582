//! Independent reference computations shared by the integration tests and
//! the acceptance run. Nothing here calls into the code under test except to
//! read its inputs.

#![allow(dead_code)]

use maddpm::metrics::{Label, ScoreRecord};
use maddpm::{Denoiser, Result, Tensor};

/// `(ᾱ_t, σ_t)` for t = 1..=N by a plain running product over `betas`.
pub fn brute_force_tables(betas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut abar = Vec::with_capacity(betas.len());
    let mut sigma = Vec::with_capacity(betas.len());
    for t in 0..betas.len() {
        let mut prod = 1.0;
        for b in &betas[..=t] {
            prod *= 1.0 - b;
        }
        abar.push(prod);
        sigma.push(((1.0 - prod) / prod).sqrt());
    }
    (abar, sigma)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Posterior of `x_{t−1}` given `x_t` and `x_0` as the normalised product of
/// the transition likelihood `N(x_t; sqrt(1−β_t)·x_{t−1}, β_t)` and the
/// marginal prior `N(x_{t−1}; sqrt(ᾱ_{t−1})·x_0, 1−ᾱ_{t−1})`, by adding
/// precisions. Returns `(mean, variance)`.
pub fn bayes_posterior(x0: f64, xt: f64, beta_t: f64, abar_prev: f64) -> (f64, f64) {
    let prior_var = 1.0 - abar_prev;
    let prior_mean = abar_prev.sqrt() * x0;
    if prior_var == 0.0 {
        return (prior_mean, 0.0);
    }
    // Likelihood in x_{t−1}: mean x_t / a, variance β / a², with a = sqrt(1−β).
    let a = (1.0 - beta_t).sqrt();
    let lik_mean = xt / a;
    let lik_var = beta_t / (a * a);
    let precision = 1.0 / prior_var + 1.0 / lik_var;
    let mean = (prior_mean / prior_var + lik_mean / lik_var) / precision;
    (mean, 1.0 / precision)
}

/// AdamW by direct evaluation of the textbook formulas for one step.
pub struct AdamOracle {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl AdamOracle {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64, b1: f64, b2: f64, wd: f64, eps: f64) {
        self.t += 1;
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = self.m[i] / (1.0 - b1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - b2.powi(self.t));
            p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
        }
    }
}

/// EER by evaluating APCER/BPCER with explicit loops at every candidate
/// threshold: below all scores, at every distinct score, every midpoint and
/// above all scores. Returns `(eer, apcer, bpcer)` of the first candidate
/// (in increasing threshold order) minimising `|APCER − BPCER|`.
pub fn brute_force_eer(records: &[ScoreRecord]) -> (f64, f64, f64) {
    let mut scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    scores.dedup();
    let mut cands = vec![scores[0] - 1.0 - scores[0].abs()];
    for i in 0..scores.len() {
        if i > 0 {
            cands.push((scores[i - 1] + scores[i]) / 2.0);
        }
        cands.push(scores[i]);
    }
    cands.push(scores[scores.len() - 1] + 1.0 + scores[scores.len() - 1].abs());
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let n_att = records.iter().filter(|r| r.label == Label::Attack).count() as f64;
    let n_bona = records.iter().filter(|r| r.label == Label::Bonafide).count() as f64;
    let mut best: Option<(f64, f64, f64)> = None;
    for &tau in &cands {
        let mut missed = 0.0;
        let mut rejected = 0.0;
        for r in records {
            match r.label {
                Label::Attack if r.score < tau => missed += 1.0,
                Label::Bonafide if r.score >= tau => rejected += 1.0,
                _ => {}
            }
        }
        let (a, b) = (missed / n_att, rejected / n_bona);
        if best.is_none_or(|(_, ba, bb)| (a - b).abs() < (ba - bb).abs()) {
            best = Some(((a + b) / 2.0, a, b));
        }
    }
    best.unwrap()
}

/// Mann–Whitney U of attack over bona fide by pair counting (ties count ½).
pub fn brute_force_u(records: &[ScoreRecord]) -> f64 {
    let mut u = 0.0;
    for a in records.iter().filter(|r| r.label == Label::Attack) {
        for b in records.iter().filter(|r| r.label == Label::Bonafide) {
            if a.score > b.score {
                u += 1.0;
            } else if a.score == b.score {
                u += 0.5;
            }
        }
    }
    u
}

/// Bayes-optimal denoiser for zero-mean Gaussian data of variance `v`.
pub struct GaussianDenoiser {
    pub variance: f64,
    pub sigma_ceiling: f64,
}

impl Denoiser for GaussianDenoiser {
    fn denoise(&self, y: &Tensor, sigma: f64) -> Result<Tensor> {
        Ok(y.scale(self.variance / (self.variance + sigma * sigma)))
    }

    fn sigma_max(&self) -> f64 {
        self.sigma_ceiling
    }
}

/// Exact probability-flow solution for [`GaussianDenoiser`] data, carried from
/// `sigma_start` to `sigma_end` and then denoised at `sigma_end`, which is
/// what the solver's final jump computes.
pub fn gaussian_flow_terminal(y0: f64, v: f64, sigma_start: f64, sigma_end: f64) -> f64 {
    let y_end = y0 * ((v + sigma_end * sigma_end) / (v + sigma_start * sigma_start)).sqrt();
    y_end * v / (v + sigma_end * sigma_end)
}

/// Returns the input unchanged.
pub struct IdentityDenoiser(pub f64);

impl Denoiser for IdentityDenoiser {
    fn denoise(&self, y: &Tensor, _sigma: f64) -> Result<Tensor> {
        Ok(y.clone())
    }

    fn sigma_max(&self) -> f64 {
        self.0
    }
}

/// Least-squares slope of `ln err` against `ln steps`.
pub fn log_log_slope(steps: &[usize], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = steps.iter().map(|&s| (s as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Mean and unbiased variance.
pub fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

/// Largest per-coordinate relative disagreement between the analytic loss
/// gradient and central differences of `denoising_loss` with step `h`.
/// Coordinates where both are below `floor` in magnitude are compared
/// against `floor` instead.
pub fn gradient_check(
    model: &maddpm::DenoiserModel,
    batch: &[&Tensor],
    sigmas: &[f64],
    noises: &[Tensor],
    h: f64,
    floor: f64,
) -> f64 {
    let (_, grad) = model.loss_and_grad(batch, sigmas, noises).unwrap();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..grad.len() {
        let p = probe.params()[i];
        probe.params_mut()[i] = p + h;
        let up = maddpm::denoiser::denoising_loss(&probe, batch, sigmas, noises).unwrap();
        probe.params_mut()[i] = p - h;
        let down = maddpm::denoiser::denoising_loss(&probe, batch, sigmas, noises).unwrap();
        probe.params_mut()[i] = p;
        let fd = (up - down) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs()).max(floor);
        worst = worst.max((grad[i] - fd).abs() / scale);
    }
    worst
}

/// A ≤ 500-parameter model with every weight randomised (including the
/// otherwise zero output layer), plus a fixed batch.
pub fn gradient_check_setup(
    preconditioning: maddpm::denoiser::Preconditioning,
    seed: u64,
) -> (maddpm::DenoiserModel, Vec<Tensor>, Vec<f64>, Vec<Tensor>) {
    use rand::{Rng, SeedableRng};
    let arch = maddpm::UNetArch {
        in_channels: 2,
        height: 4,
        width: 4,
        base_width: 2,
        levels: 2,
        embed_dim: 4,
        preconditioning,
    };
    assert!(arch.param_count() <= 500);
    let schedule = maddpm::make_linear_schedule(20, 2.0).unwrap();
    let mut model = maddpm::DenoiserModel::new(arch, schedule, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        *p = rng.random_range(-0.6..0.6);
    }
    let tensor = |rng: &mut rand_chacha::ChaCha8Rng| {
        Tensor::from_vec(2, 4, 4, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let xs: Vec<Tensor> = (0..3).map(|_| tensor(&mut rng)).collect();
    let ns: Vec<Tensor> = (0..3).map(|_| tensor(&mut rng)).collect();
    (model, xs, vec![0.05, 0.7, 1.9], ns)
}
