//! The `synth`, `train`, `score` and `eval` commands.
//!
//! Every command reads the optional TOML config, applies flag overrides and
//! records the effective config in whatever it writes. Logs go to standard
//! error; results go to files only.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::ToolkitConfig;
use crate::dataio::{self, BBox, LABELS_FILE};
use crate::denoiser::{load_checkpoint, train, Checkpoint, DenoiserModel};
use crate::error::{Error, Result};
use crate::features::{ChannelStats, ExtractorDescriptor, FeatureExtractor};
use crate::metrics::{self, DetReport, Label, ScoreRecord};
use crate::scoring::{AttackScore, Branch, BranchKind, FeatureBranch, ScoringPipeline};
use crate::tensor::Tensor;

#[derive(Debug, Parser)]
#[command(name = "maddpm", version, about = "One-class morph detection by diffusion reconstruction")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML config file; defaults apply to anything it omits.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the seed the command uses (data, training or scoring noise).
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic bona fide / morph dataset.
    Synth {
        #[arg(long, default_value_t = 500)]
        bona: usize,
        #[arg(long, default_value_t = 500)]
        morph: usize,
        /// Image side length; defaults to `data.image_size`.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train one branch on the bona fide images of a directory.
    Train {
        #[arg(long, value_enum)]
        branch: BranchArg,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Optional `sample_id,x,y,w,h` face-box manifest.
        #[arg(long, value_name = "CSV")]
        manifest: Option<PathBuf>,
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
        /// Per-epoch loss CSV; defaults to `<out>.loss.csv`.
        #[arg(long, value_name = "CSV")]
        loss_out: Option<PathBuf>,
    },
    /// Score every image of a directory.
    Score {
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "CKPT")]
        pixel_ckpt: Option<PathBuf>,
        #[arg(long, value_name = "CKPT")]
        feature_ckpt: Option<PathBuf>,
        /// `pixel,feature`, `pixel` or `feature`.
        #[arg(long, default_value = "pixel,feature", value_parser = parse_branches)]
        branches: BranchSet,
        /// Labels CSV; defaults to `<input>/labels.csv`.
        #[arg(long, value_name = "CSV")]
        labels: Option<PathBuf>,
        #[arg(long, value_name = "CSV")]
        manifest: Option<PathBuf>,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
    /// Compute EER, DET points and a rank test from a score CSV.
    Eval {
        #[arg(long, value_name = "CSV")]
        scores: PathBuf,
        #[arg(long, value_name = "JSON")]
        out: PathBuf,
        #[arg(long, value_name = "SVG")]
        svg: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BranchArg {
    Pixel,
    Feature,
}

impl From<BranchArg> for BranchKind {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Pixel => BranchKind::Pixel,
            BranchArg::Feature => BranchKind::Feature,
        }
    }
}

/// Which branches contribute to the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSet {
    pub pixel: bool,
    pub feature: bool,
}

fn parse_branches(s: &str) -> std::result::Result<BranchSet, String> {
    let mut set = BranchSet {
        pixel: false,
        feature: false,
    };
    for part in s.split(',').map(str::trim) {
        match part {
            "pixel" => set.pixel = true,
            "feature" => set.feature = true,
            other => return Err(format!("unknown branch `{other}`")),
        }
    }
    Ok(set)
}

/// Process exit status for each error family.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const DATA: u8 = 4;
    pub const LOAD: u8 = 5;
    pub const NUMERIC: u8 = 6;
    pub const ONE_CLASS: u8 = 7;
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => exit::USAGE,
        Error::Config(_) => exit::CONFIG,
        Error::Data(_) | Error::Io { .. } => exit::DATA,
        Error::Load(_) => exit::LOAD,
        Error::Calibration(_) | Error::Numeric { .. } | Error::Training { .. } => exit::NUMERIC,
        Error::OneClassViolation(_) => exit::ONE_CLASS,
    }
}

/// Config file (or defaults) with the `--seed` override applied where the
/// command uses a seed.
pub fn effective_config(common: &CommonArgs, command: &Command) -> Result<ToolkitConfig> {
    let mut cfg = match &common.config {
        Some(p) => ToolkitConfig::load(p)?,
        None => ToolkitConfig::default(),
    };
    if let Some(seed) = common.seed {
        match command {
            Command::Synth { .. } => cfg.data.seed = seed,
            Command::Train { branch, .. } => match branch {
                BranchArg::Pixel => cfg.pixel.train.seed = Some(seed),
                BranchArg::Feature => cfg.feature.train.seed = Some(seed),
            },
            Command::Score { .. } => {
                cfg.pixel.reconstruction.noise_seed = seed;
                cfg.feature.reconstruction.noise_seed = seed;
            }
            Command::Eval { .. } => {}
        }
    }
    if let Command::Synth { size: Some(s), .. } = command {
        cfg.data.image_size = *s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(&cli.common, &cli.command)?;
    match &cli.command {
        Command::Synth { bona, morph, out, .. } => cmd_synth(&cfg, *bona, *morph, out),
        Command::Train {
            branch,
            data,
            manifest,
            out,
            loss_out,
        } => {
            let loss_out = loss_out.clone().unwrap_or_else(|| with_suffix(out, ".loss.csv"));
            cmd_train(&cfg, (*branch).into(), data, manifest.as_deref(), out, &loss_out)
        }
        Command::Score {
            input,
            pixel_ckpt,
            feature_ckpt,
            branches,
            labels,
            manifest,
            out,
        } => cmd_score(
            &cfg,
            &ScoreInputs {
                input,
                pixel_ckpt: pixel_ckpt.as_deref(),
                feature_ckpt: feature_ckpt.as_deref(),
                branches: *branches,
                labels: labels.as_deref(),
                manifest: manifest.as_deref(),
            },
            out,
        ),
        Command::Eval { scores, out, svg } => cmd_eval(&cfg, scores, out, svg.as_deref()),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(cfg: &ToolkitConfig, n_bona: usize, n_morph: usize, out: &Path) -> Result<()> {
    let samples = dataio::synth_dataset(n_bona, n_morph, cfg.data.image_size, cfg.data.seed)?;
    dataio::write_dataset(out, &samples)?;
    log::info!(
        "wrote {n_bona} bona fide + {n_morph} morph images ({0}x{0}) to {1}",
        cfg.data.image_size,
        out.display()
    );
    Ok(())
}

fn read_manifest(path: Option<&Path>) -> Result<Option<HashMap<String, BBox>>> {
    path.map(dataio::read_bbox_manifest).transpose()
}

/// Loads and preprocesses every readable image of `dir`, in sample-id order.
fn load_inputs(dir: &Path, manifest: Option<&Path>, size: usize) -> Result<Vec<(String, Tensor)>> {
    let manifest = read_manifest(manifest)?;
    let scan = dataio::load_image_dir(dir, manifest.as_ref())?;
    for (path, why) in &scan.failures {
        log::warn!("skipping unreadable image {}: {why}", path.display());
    }
    if scan.images.is_empty() {
        return Err(Error::Data(format!("no readable images in {}", dir.display())));
    }
    scan.images
        .iter()
        .map(|img| Ok((img.sample_id.clone(), dataio::preprocess(&img.raster, &img.bbox, size)?)))
        .collect()
}

pub fn cmd_train(
    cfg: &ToolkitConfig,
    kind: BranchKind,
    data: &Path,
    manifest: Option<&Path>,
    out: &Path,
    loss_out: &Path,
) -> Result<()> {
    let inputs = load_inputs(data, manifest, cfg.data.image_size)?;
    let labels_path = data.join(LABELS_FILE);
    if labels_path.is_file() {
        let labels = dataio::read_labels(&labels_path)?;
        let attacks = inputs
            .iter()
            .filter(|(id, _)| labels.get(id) == Some(&Label::Attack))
            .count();
        if attacks > 0 {
            return Err(Error::OneClassViolation(attacks));
        }
    } else {
        log::warn!("no {LABELS_FILE} in {}; treating every image as bona fide", data.display());
    }
    let images: Vec<Tensor> = inputs.into_iter().map(|(_, t)| t).collect();
    let schedule = cfg.schedule_for(kind).build()?;
    let mut metadata = json!({
        "branch": kind.as_str(),
        "train_count": images.len(),
        "config": cfg.to_json(),
    });

    let (arch, train_cfg, dataset) = match kind {
        BranchKind::Pixel => (cfg.pixel_arch(), cfg.pixel_train(), images),
        BranchKind::Feature => {
            let extractor = FeatureExtractor::from_descriptor(&cfg.extractor())?;
            let maps = images
                .iter()
                .map(|x| Ok(extractor.extract_fused(x)?.data))
                .collect::<Result<Vec<_>>>()?;
            let stats = ChannelStats::fit(&maps)?;
            let normalized = maps.iter().map(|m| stats.normalize(m)).collect::<Result<Vec<_>>>()?;
            metadata["extractor"] = serde_json::to_value(extractor.descriptor()).expect("serializable");
            metadata["extractor_checksum"] = json!(extractor.checksum());
            metadata["feature_stats"] = serde_json::to_value(&stats).expect("serializable");
            (cfg.feature_arch(extractor.descriptor()), cfg.feature_train(), normalized)
        }
    };
    log::info!(
        "training {} branch: {} samples, {} parameters, {} epochs",
        kind.as_str(),
        dataset.len(),
        arch.param_count(),
        train_cfg.epochs
    );
    let model = DenoiserModel::new(arch, schedule, train_cfg.seed)?;
    let outcome = train(model, &dataset, &train_cfg)?;

    let mut csv = String::from("epoch,loss\n");
    for (i, l) in outcome.loss_history.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write_file(loss_out, csv)?;
    let ckpt = Checkpoint {
        model: outcome.model,
        metadata,
    };
    write_file(out, ckpt.to_bytes())?;
    log::info!("wrote {} and {}", out.display(), loss_out.display());
    Ok(())
}

/// Flag inputs of [`cmd_score`].
pub struct ScoreInputs<'a> {
    pub input: &'a Path,
    pub pixel_ckpt: Option<&'a Path>,
    pub feature_ckpt: Option<&'a Path>,
    pub branches: BranchSet,
    pub labels: Option<&'a Path>,
    pub manifest: Option<&'a Path>,
}

fn checkpoint_branch(ckpt: &Checkpoint, path: &Path, want: BranchKind) -> Result<()> {
    match ckpt.metadata.get("branch").and_then(|b| b.as_str()) {
        Some(b) if b == want.as_str() => Ok(()),
        found => Err(crate::error::LoadError::Malformed(format!(
            "{} is a {} checkpoint, expected {}",
            path.display(),
            found.unwrap_or("unlabelled"),
            want.as_str()
        ))
        .into()),
    }
}

fn shape_mismatch(what: &str, expected: [usize; 3], found: [usize; 3]) -> Error {
    crate::error::LoadError::ShapeMismatch {
        tensor: what.into(),
        expected: expected.to_vec(),
        found: found.to_vec(),
    }
    .into()
}

/// Everything the feature branch needs, rebuilt from its checkpoint.
struct FeatureParts {
    ckpt: Checkpoint,
    extractor: FeatureExtractor,
    stats: ChannelStats,
}

fn load_feature_parts(path: &Path, image_size: usize) -> Result<FeatureParts> {
    let ckpt = load_checkpoint(path)?;
    checkpoint_branch(&ckpt, path, BranchKind::Feature)?;
    let malformed = |what: &str| crate::error::LoadError::Malformed(format!("{}: {what}", path.display()));
    let desc: ExtractorDescriptor = serde_json::from_value(ckpt.metadata["extractor"].clone())
        .map_err(|e| malformed(&format!("extractor descriptor: {e}")))?;
    let stats: ChannelStats = serde_json::from_value(ckpt.metadata["feature_stats"].clone())
        .map_err(|e| malformed(&format!("feature statistics: {e}")))?;
    if desc.input_size != image_size {
        return Err(shape_mismatch(
            "extractor input",
            [desc.in_channels, image_size, image_size],
            [desc.in_channels, desc.input_size, desc.input_size],
        ));
    }
    let extractor = FeatureExtractor::from_descriptor(&desc)?;
    let recorded = ckpt.metadata["extractor_checksum"].as_str().unwrap_or_default();
    if extractor.checksum() != recorded {
        return Err(malformed(&format!(
            "extractor weights checksum {} does not match the recorded {recorded}",
            extractor.checksum()
        ))
        .into());
    }
    let fused = desc.fused_shape();
    let arch = ckpt.model.arch().input_shape();
    if arch != fused {
        return Err(shape_mismatch("feature denoiser input", fused, arch));
    }
    Ok(FeatureParts {
        ckpt,
        extractor,
        stats,
    })
}

fn load_pixel_ckpt(path: &Path, image_size: usize) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    checkpoint_branch(&ckpt, path, BranchKind::Pixel)?;
    let expected = [3, image_size, image_size];
    let found = ckpt.model.arch().input_shape();
    if found != expected {
        return Err(shape_mismatch("pixel denoiser input", expected, found));
    }
    Ok(ckpt)
}

fn require<'a>(p: Option<&'a Path>, flag: &str) -> Result<&'a Path> {
    p.ok_or_else(|| Error::invalid(format!("{flag} is required for the selected branches")))
}

pub fn cmd_score(cfg: &ToolkitConfig, inp: &ScoreInputs<'_>, out: &Path) -> Result<()> {
    let BranchSet { pixel, feature } = inp.branches;
    if !pixel && !feature {
        return Err(Error::invalid("--branches selects no branch"));
    }
    let size = cfg.data.image_size;
    let pixel_ckpt = pixel
        .then(|| load_pixel_ckpt(require(inp.pixel_ckpt, "--pixel-ckpt")?, size))
        .transpose()?;
    let feature_parts = feature
        .then(|| load_feature_parts(require(inp.feature_ckpt, "--feature-ckpt")?, size))
        .transpose()?;

    let labels_path = inp
        .labels
        .map(Path::to_path_buf)
        .unwrap_or_else(|| inp.input.join(LABELS_FILE));
    let labels = dataio::read_labels(&labels_path)?;
    let inputs = load_inputs(inp.input, inp.manifest, size)?;

    let pipeline = ScoringPipeline {
        pixel: pixel_ckpt.as_ref().map(|c| Branch {
            denoiser: &c.model,
            schedule: c.model.schedule(),
            cfg: &cfg.pixel.reconstruction,
        }),
        feature: feature_parts.as_ref().map(|f| FeatureBranch {
            extractor: &f.extractor,
            stats: Some(&f.stats),
            branch: Branch {
                denoiser: &f.ckpt.model,
                schedule: f.ckpt.model.schedule(),
                cfg: &cfg.feature.reconstruction,
            },
        }),
        znorm: cfg.scoring.znorm.clone(),
    };

    let mut header = vec!["sample_id", "label", "score"];
    if pixel {
        header.push("pixel");
    }
    if feature {
        header.push("feature");
    }
    let mut csv = header.join(",");
    csv.push('\n');
    for (i, (id, x)) in inputs.iter().enumerate() {
        let label = labels
            .get(id)
            .ok_or_else(|| Error::Data(format!("no label for `{id}` in {}", labels_path.display())))?;
        let s: AttackScore = pipeline.score(id, x)?;
        csv.push_str(&format!("{id},{label},{}", s.total));
        for term in [s.pixel_term, s.feature_term].into_iter().flatten() {
            csv.push_str(&format!(",{term}"));
        }
        csv.push('\n');
        if (i + 1) % 50 == 0 {
            log::info!("scored {}/{}", i + 1, inputs.len());
        }
    }
    write_file(out, csv)?;
    log::info!("wrote {} scores to {}", inputs.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct RankTest {
    u_statistic: f64,
    p_value: f64,
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    scores_sha256: String,
    #[serde(flatten)]
    det: &'a DetReport,
    rank_test: RankTest,
    config: serde_json::Value,
}

pub fn cmd_eval(cfg: &ToolkitConfig, scores: &Path, out: &Path, svg: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(scores).map_err(|e| Error::io(scores, e))?;
    let records: Vec<ScoreRecord> = metrics::parse_score_csv(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", scores.display())))?;
    let det = metrics::det_curve(&records)?;
    let (u, p) = metrics::rank_test_attack_greater(&records)?;
    let report = EvalReport {
        scores_sha256: Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect(),
        det: &det,
        rank_test: RankTest {
            u_statistic: u,
            p_value: p,
        },
        config: cfg.to_json(),
    };
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_file(out, json)?;
    if let Some(svg) = svg {
        write_file(svg, metrics::det_svg(&det))?;
    }
    log::info!("EER {:.4} at threshold {}; rank test p = {p:.3e}", det.eer, det.eer_threshold);
    Ok(())
}
