//! Times one training epoch and one reconstruction per branch at desk scale.
//!
//! ```text
//! cargo run --release --example throughput -- [base_width] [n_images]
//! ```

use std::time::Instant;

use maddpm::dataio::synth_dataset;
use maddpm::features::{ExtractorDescriptor, FeatureExtractor};
use maddpm::sampler::gaussian_like;
use maddpm::scoring::BranchConfig;
use maddpm::{make_linear_schedule, sampler, DenoiserModel, TrainConfig, UNetArch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> maddpm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let width: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);

    let images: Vec<_> = synth_dataset(n, 0, 32, 1)?.into_iter().map(|s| s.image).collect();
    let extractor = FeatureExtractor::reference(&ExtractorDescriptor::default())?;
    let features = images
        .iter()
        .map(|x| Ok(extractor.extract_fused(x)?.data))
        .collect::<maddpm::Result<Vec<_>>>()?;

    for (name, data, sigma) in [("pixel", &images, 8.0), ("feature", &features, 2.0)] {
        let [c, h, w] = data[0].shape();
        let arch = UNetArch {
            in_channels: c,
            height: h,
            width: w,
            base_width: width,
            levels: 2,
            embed_dim: 16,
            preconditioning: Default::default(),
        };
        let model = DenoiserModel::new(arch.clone(), make_linear_schedule(1000, sigma)?, 0)?;
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let t = Instant::now();
        let trained = maddpm::denoiser::train(model, data, &cfg)?.model;
        let per_image = t.elapsed().as_secs_f64() / data.len() as f64;

        let bc = BranchConfig {
            sigma_max: sigma,
            ..BranchConfig::pixel()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = gaussian_like(&data[0], &mut rng);
        let t = Instant::now();
        sampler::reconstruct(&trained, trained.schedule(), &data[0], &bc, &noise)?;
        let recon = t.elapsed().as_secs_f64();
        println!(
            "{name}: {} params, train {:.2} ms/image, reconstruction {:.1} ms/image",
            arch.param_count(),
            per_image * 1e3,
            recon * 1e3
        );
    }
    Ok(())
}
