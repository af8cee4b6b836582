//! One-class anomaly detection by diffusion reconstruction.
//!
//! A denoiser trained on normal ("bona fide") images only is used to
//! reconstruct a partially noised input, once in pixel space and once in the
//! space of a frozen convolutional feature extractor. The sum of the two
//! reconstruction errors is the attack score; [`metrics`] turns a set of
//! scores into APCER/BPCER/EER figures.
//!
//! The main entry points:
//!
//! - [`schedule`]: linear β schedule calibrated to a terminal σ, closed-form
//!   noising and the Gaussian posterior.
//! - [`denoiser`]: the U-Net denoiser, its loss, AdamW and the training loop.
//! - [`sampler`]: second-order probability-flow ODE solver, ancestral sampling
//!   and the noise-then-reconstruct round trip.
//! - [`features`]: two-scale feature extraction and fusion.
//! - [`scoring`]: per-branch errors and their sum.
//! - [`metrics`]: DET curve, EER and a rank test.
//! - [`dataio`]: preprocessing and the synthetic face/morph generator.
//! - [`cli`]: the `synth`/`train`/`score`/`eval` commands.

mod binio;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod denoiser;
pub mod error;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod scoring;
pub mod tensor;

pub use denoiser::{Denoiser, DenoiserModel, TrainConfig, UNetArch};
pub use error::{Error, LoadError, Result};
pub use schedule::{make_linear_schedule, VarianceSchedule};
pub use scoring::{AttackScore, BranchConfig};
pub use tensor::Tensor;
