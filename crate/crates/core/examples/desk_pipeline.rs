//! The four CLI commands driven from library code: synthesise, train both
//! branches, score and evaluate, with a reduced desk configuration.
//!
//! ```text
//! cargo run --release --example desk_pipeline -- [work_dir] [n_train]
//! ```

use clap::Parser;
use maddpm::cli::{run, Cli};

fn main() -> maddpm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let work = args.get(1).cloned().unwrap_or_else(|| "desk_run".into());
    let n_train = args.get(2).cloned().unwrap_or_else(|| "300".into());
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
    let p = |name: &str| format!("{work}/{name}");

    let steps: Vec<Vec<String>> = vec![
        vec!["synth", "--bona", &n_train, "--morph", "0", "--seed", "1", "--out", &p("train")],
        vec!["synth", "--bona", "50", "--morph", "50", "--seed", "2", "--out", &p("test")],
        vec!["train", "--branch", "pixel", "--data", &p("train"), "--out", &p("pixel.ckpt")],
        vec!["train", "--branch", "feature", "--data", &p("train"), "--out", &p("feature.ckpt")],
        vec![
            "score", "--input", &p("test"), "--pixel-ckpt", &p("pixel.ckpt"), "--feature-ckpt",
            &p("feature.ckpt"), "--out", &p("scores.csv"),
        ],
        vec!["eval", "--scores", &p("scores.csv"), "--out", &p("report.json"), "--svg", &p("det.svg")],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();

    for step in steps {
        println!("maddpm {}", step.join(" "));
        let cli = Cli::parse_from(["maddpm", "--config", config].into_iter().map(String::from).chain(step));
        run(&cli)?;
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("report.json")).unwrap_or_default())
        .unwrap_or_default();
    println!("EER {} (rank-test p {})", report["eer"], report["rank_test"]["p_value"]);
    Ok(())
}
