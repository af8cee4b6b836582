//! Trains a small pixel-space denoiser on synthetic bona fide faces and
//! round-trips it through a checkpoint file.
//!
//! ```text
//! cargo run --release --example train_denoiser -- [n_images] [epochs]
//! ```

use maddpm::dataio::synth_dataset;
use maddpm::denoiser::{load_checkpoint, save_checkpoint, train, Checkpoint};
use maddpm::{make_linear_schedule, Denoiser, DenoiserModel, TrainConfig, UNetArch};

fn main() -> maddpm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(128);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);

    let images: Vec<_> = synth_dataset(n, 0, 16, 7)?.into_iter().map(|s| s.image).collect();
    let arch = UNetArch {
        in_channels: 3,
        height: 16,
        width: 16,
        base_width: 8,
        levels: 2,
        embed_dim: 8,
        preconditioning: Default::default(),
    };
    let model = DenoiserModel::new(arch, make_linear_schedule(1000, 1.0)?, 0)?;
    println!("{} parameters", model.param_count());

    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs,
        ..TrainConfig::default()
    };
    let out = train(model, &images, &cfg)?;
    for (e, loss) in out.loss_history.iter().enumerate() {
        println!("epoch {:2}: loss {loss:.5}", e + 1);
    }

    let dir = tempfile::tempdir().map_err(|e| maddpm::Error::io(std::env::temp_dir(), e))?;
    let path = dir.path().join("pixel.ckpt");
    save_checkpoint(
        &path,
        &Checkpoint {
            model: out.model,
            metadata: serde_json::json!({ "branch": "pixel" }),
        },
    )?;
    let back = load_checkpoint(&path)?;
    println!(
        "checkpoint: {} bytes, σ_max = {}, metadata {}",
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
        back.model.sigma_max(),
        back.metadata
    );
    Ok(())
}
