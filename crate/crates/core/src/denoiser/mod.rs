//! The denoiser `D_θ(y; σ)`, its training objective and optimizer.
//!
//! `D` predicts the clean sample from `y = x + σ·n` as
//! `D = c_skip(σ)·y + c_out(σ)·F(c_in(σ)·y, σ)`, where `F` is the U-Net body
//! and the coefficients come from the architecture's [`Preconditioning`].
//! The output layer starts at zero, so a fresh model returns `c_skip·y`.

mod checkpoint;
mod optim;
mod train;
mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use optim::{adamw_step, OptimizerState, ADAM_EPS};
pub use train::{draw_training_batch, train, TrainConfig, TrainOutcome};
pub use unet::{Preconditioning, UNetArch};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::schedule::{ScheduleParams, VarianceSchedule};
use crate::tensor::Tensor;
use unet::Layout;

/// Anything that maps a noisy sample at level σ to a clean-sample estimate.
pub trait Denoiser {
    fn denoise(&self, y: &Tensor, sigma: f64) -> Result<Tensor>;

    /// Largest σ the denoiser is meant to be queried at.
    fn sigma_max(&self) -> f64;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, y: &Tensor, sigma: f64) -> Result<Tensor> {
        (**self).denoise(y, sigma)
    }

    fn sigma_max(&self) -> f64 {
        (**self).sigma_max()
    }
}

/// Slack on the σ ceiling so that the calibrated `σ_N` (accurate to 1e-6
/// relative) is always admissible.
const SIGMA_SLACK: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    arch: UNetArch,
    layout: Layout,
    params: Vec<f64>,
    schedule: VarianceSchedule,
}

impl DenoiserModel {
    /// Fresh model with seeded fan-in-scaled initialisation.
    pub fn new(arch: UNetArch, schedule: VarianceSchedule, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout.init(&mut rng);
        Ok(Self {
            arch,
            layout,
            params,
            schedule,
        })
    }

    pub fn from_params(arch: UNetArch, schedule: VarianceSchedule, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return Err(Error::invalid(format!(
                "architecture needs {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("model parameters", format!("parameter {i} is not finite")));
        }
        Ok(Self {
            arch,
            layout,
            params,
            schedule,
        })
    }

    pub fn arch(&self) -> &UNetArch {
        &self.arch
    }

    pub fn schedule(&self) -> &VarianceSchedule {
        &self.schedule
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        self.schedule.params()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Zeroes the output convolution, reducing `D` to `c_skip·y` (the
    /// identity under [`Preconditioning::Epsilon`]).
    pub fn zero_output_layer(&mut self) {
        let c = *self.layout.conv_out();
        self.params[c.offset..c.offset + c.param_count()].fill(0.0);
    }

    fn check_input(&self, y: &Tensor, sigma: f64) -> Result<()> {
        if y.shape() != self.arch.input_shape() {
            return Err(Error::invalid(format!(
                "denoiser expects input {:?}, got {:?}",
                self.arch.input_shape(),
                y.shape()
            )));
        }
        if !(sigma > 0.0 && sigma <= self.sigma_max() * (1.0 + SIGMA_SLACK)) {
            return Err(Error::invalid(format!(
                "sigma {sigma} outside (0, {}]",
                self.sigma_max()
            )));
        }
        Ok(())
    }


    /// Batch loss and its gradient with respect to the parameters.
    ///
    /// Per-sample terms are accumulated in batch order so the result does not
    /// depend on anything but the inputs.
    pub fn loss_and_grad(
        &self,
        batch: &[&Tensor],
        sigmas: &[f64],
        noises: &[Tensor],
    ) -> Result<(f64, Vec<f64>)> {
        check_batch(batch, sigmas, noises)?;
        let b = batch.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for ((x, &sigma), n) in batch.iter().zip(sigmas).zip(noises) {
            self.check_input(x, sigma)?;
            let y = x.axpby(1.0, n, sigma);
            let (c_skip, c_out, c_in) = self.arch.preconditioning.coefficients(sigma);
            let (out, cache) =
                self.layout
                    .forward(&self.params, &y.scale(c_in), sigma, self.arch.embed_dim, true);
            let numel = x.len() as f64;
            let r = y.axpby(c_skip, &out, c_out).axpby(1.0, x, -1.0);
            total += r.data().iter().map(|v| v * v).sum::<f64>() / numel;
            let dout = r.scale(2.0 * c_out / (numel * b));
            self.layout
                .backward(&self.params, cache.as_ref().expect("cache"), &dout, &mut grad);
        }
        Ok((total / b, grad))
    }
}

impl Denoiser for DenoiserModel {
    fn denoise(&self, y: &Tensor, sigma: f64) -> Result<Tensor> {
        self.check_input(y, sigma)?;
        let (c_skip, c_out, c_in) = self.arch.preconditioning.coefficients(sigma);
        let (out, _) = self
            .layout
            .forward(&self.params, &y.scale(c_in), sigma, self.arch.embed_dim, false);
        let d = y.axpby(c_skip, &out, c_out);
        if let Some(i) = d.first_non_finite() {
            return Err(Error::numeric(
                "denoise",
                format!("non-finite activation at element {i} (sigma = {sigma})"),
            ));
        }
        Ok(d)
    }

    fn sigma_max(&self) -> f64 {
        self.schedule.sigma_max()
    }
}

fn check_batch(batch: &[&Tensor], sigmas: &[f64], noises: &[Tensor]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if sigmas.len() != batch.len() || noises.len() != batch.len() {
        return Err(Error::invalid(format!(
            "batch of {} needs one sigma and one noise tensor each (got {} and {})",
            batch.len(),
            sigmas.len(),
            noises.len()
        )));
    }
    for (x, n) in batch.iter().zip(noises) {
        x.ensure_same_shape(n, "noise draw")?;
    }
    Ok(())
}

/// Mean over the batch of the per-element mean of `(D(x + σn; σ) − x)²`.
pub fn denoising_loss<D: Denoiser + ?Sized>(
    model: &D,
    batch: &[&Tensor],
    sigmas: &[f64],
    noises: &[Tensor],
) -> Result<f64> {
    check_batch(batch, sigmas, noises)?;
    if let Some(s) = sigmas.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::invalid(format!("sigma draws must be positive, got {s}")));
    }
    let mut total = 0.0;
    for ((x, &sigma), n) in batch.iter().zip(sigmas).zip(noises) {
        let y = x.axpby(1.0, n, sigma);
        let d = model.denoise(&y, sigma)?;
        total += d.mean_sq_diff(x);
    }
    Ok(total / batch.len() as f64)
}
