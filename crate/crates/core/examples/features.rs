//! Two-scale feature extraction and the named-tensor weight file.
//!
//! ```text
//! cargo run --release --example features
//! ```

use maddpm::dataio::synth_dataset;
use maddpm::features::{
    load_extractor_weights, read_tensor_file, save_extractor_weights, ChannelStats, ExtractorDescriptor,
    FeatureExtractor,
};

fn main() -> maddpm::Result<()> {
    let desc = ExtractorDescriptor::default();
    let extractor = FeatureExtractor::reference(&desc)?;
    let image = &synth_dataset(1, 0, desc.input_size, 3)?[0].image;

    let s1 = extractor.extract_scale1(image)?;
    let s2 = extractor.extract_scale2(image)?;
    let fused = extractor.extract_fused(image)?;
    println!("input {:?}", image.shape());
    println!("scale 1 {:?}, scale 2 {:?}, fused {:?}", s1.data.shape(), s2.data.shape(), fused.data.shape());

    let dir = tempfile::tempdir().map_err(|e| maddpm::Error::io(std::env::temp_dir(), e))?;
    let path = dir.path().join("extractor.mdtf");
    save_extractor_weights(&path, &extractor)?;
    for t in read_tensor_file(&path)? {
        println!("  {:12} {:?}", t.name, t.dims);
    }
    let reloaded = load_extractor_weights(&path, &desc)?;
    println!("checksum {} (reload matches: {})", extractor.checksum(), reloaded.checksum() == extractor.checksum());

    let maps = synth_dataset(16, 0, desc.input_size, 4)?
        .iter()
        .map(|s| Ok(extractor.extract_fused(&s.image)?.data))
        .collect::<maddpm::Result<Vec<_>>>()?;
    let stats = ChannelStats::fit(&maps)?;
    let z = stats.normalize(&fused.data)?;
    let mean = z.data().iter().sum::<f64>() / z.len() as f64;
    println!("normalised map mean {mean:.3} over {} channels", stats.mean.len());
    Ok(())
}
