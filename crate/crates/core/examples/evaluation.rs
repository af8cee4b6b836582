//! DET curve, EER and the rank test on a score file.
//!
//! ```text
//! cargo run --release --example evaluation -- [scores.csv]
//! ```
//!
//! Without an argument, two overlapping Gaussian score populations are used.

use maddpm::metrics::{det_curve, det_svg, rank_test_attack_greater, read_score_csv, Label, ScoreRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> maddpm::Result<()> {
    let records = match std::env::args().nth(1) {
        Some(path) => read_score_csv(path.as_ref())?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            (0..400)
                .map(|i| {
                    let (label, shift) = if i % 2 == 0 { (Label::Bonafide, 0.0) } else { (Label::Attack, 1.5) };
                    let z: f64 = rng.sample(StandardNormal);
                    ScoreRecord::new(format!("s{i:03}"), label, z + shift)
                })
                .collect()
        }
    };
    let report = det_curve(&records)?;
    let (u, p) = rank_test_attack_greater(&records)?;
    println!(
        "{} bona fide, {} attacks: EER {:.4} at τ = {:.4}",
        report.n_bonafide, report.n_attack, report.eer, report.eer_threshold
    );
    println!("rank test: U = {u}, one-sided p = {p:.3e}");
    for pt in report.det_points.iter().step_by((report.det_points.len() / 8).max(1)) {
        println!("  τ {:8.4}  APCER {:.3}  BPCER {:.3}", pt.threshold, pt.apcer, pt.bpcer);
    }
    let svg = std::env::temp_dir().join("det.svg");
    std::fs::write(&svg, det_svg(&report)).map_err(|e| maddpm::Error::io(&svg, e))?;
    println!("DET plot written to {}", svg.display());
    Ok(())
}
