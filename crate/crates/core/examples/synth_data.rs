//! Generates the synthetic bona fide / morph set and writes it to disk.
//!
//! ```text
//! cargo run --release --example synth_data -- [out_dir] [n_per_class] [size]
//! ```

use std::path::PathBuf;

use maddpm::dataio::{edge_density, synth_dataset, write_dataset, EDGE_THRESHOLD};
use maddpm::metrics::Label;

fn main() -> maddpm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "synth_out".into()));
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let size: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);

    let samples = synth_dataset(n, n, size, 0)?;
    write_dataset(&out, &samples)?;
    for label in [Label::Bonafide, Label::Attack] {
        let d: Vec<f64> = samples
            .iter()
            .filter(|s| s.label == label)
            .map(|s| edge_density(&s.image, EDGE_THRESHOLD))
            .collect();
        println!("{label:9}: {} images, mean edge density {:.3}", d.len(), d.iter().sum::<f64>() / d.len() as f64);
    }
    println!("wrote {} images and labels.csv to {}", samples.len(), out.display());
    Ok(())
}
