//! Trains both branches briefly on 16×16 bona fide faces, then scores bona
//! fide faces and morphs and shows how each total splits into branch terms.
//!
//! ```text
//! cargo run --release --example scoring
//! ```

use maddpm::dataio::synth_dataset;
use maddpm::denoiser::train;
use maddpm::features::{ChannelStats, ExtractorDescriptor, FeatureExtractor};
use maddpm::metrics::{eer, ScoreRecord};
use maddpm::scoring::{Branch, FeatureBranch, ScoringPipeline};
use maddpm::{make_linear_schedule, BranchConfig, DenoiserModel, TrainConfig, UNetArch};

fn arch(shape: [usize; 3]) -> UNetArch {
    UNetArch {
        in_channels: shape[0],
        height: shape[1],
        width: shape[2],
        base_width: 8,
        levels: 2,
        embed_dim: 8,
        preconditioning: Default::default(),
    }
}

fn main() -> maddpm::Result<()> {
    let size = 16;
    let bona: Vec<_> = synth_dataset(500, 0, size, 1)?.into_iter().map(|s| s.image).collect();
    let desc = ExtractorDescriptor {
        input_size: size,
        ..ExtractorDescriptor::default()
    };
    let extractor = FeatureExtractor::reference(&desc)?;
    let feats = bona
        .iter()
        .map(|x| Ok(extractor.extract_fused(x)?.data))
        .collect::<maddpm::Result<Vec<_>>>()?;
    let stats = ChannelStats::fit(&feats)?;
    let feats = feats.iter().map(|f| stats.normalize(f)).collect::<maddpm::Result<Vec<_>>>()?;

    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 8,
        ..TrainConfig::default()
    };
    let pixel = train(DenoiserModel::new(arch(bona[0].shape()), make_linear_schedule(1000, 1.0)?, 0)?, &bona, &cfg)?.model;
    let feature = train(DenoiserModel::new(arch(feats[0].shape()), make_linear_schedule(1000, 2.0)?, 0)?, &feats, &cfg)?.model;

    let pcfg = BranchConfig {
        sigma_max: 0.4,
        ..BranchConfig::pixel()
    };
    let fcfg = BranchConfig::feature();
    let pipeline = ScoringPipeline {
        pixel: Some(Branch {
            denoiser: &pixel,
            schedule: pixel.schedule(),
            cfg: &pcfg,
        }),
        feature: Some(FeatureBranch {
            extractor: &extractor,
            stats: Some(&stats),
            branch: Branch {
                denoiser: &feature,
                schedule: feature.schedule(),
                cfg: &fcfg,
            },
        }),
        znorm: None,
    };

    let mut records = Vec::new();
    for s in synth_dataset(20, 20, size, 2)? {
        let score = pipeline.score(&s.id, &s.image)?;
        if records.len() % 10 == 0 {
            println!(
                "{:12} {:9} total {:.4} = pixel {:.4} + feature {:.4}",
                s.id,
                s.label,
                score.total,
                score.pixel_term.unwrap_or(0.0),
                score.feature_term.unwrap_or(0.0)
            );
        }
        records.push(ScoreRecord::new(s.id, s.label, score.total));
    }
    println!("EER on 20 + 20 images: {:.3}", eer(&records)?.0);
    Ok(())
}
