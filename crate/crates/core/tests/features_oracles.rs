use maddpm::features::{
    decode_tensors, encode_tensors, fuse_features, load_extractor_weights, save_extractor_weights,
    ChannelStats, ExtractorDescriptor, FeatureExtractor, ScaleTag, TENSOR_FILE_VERSION,
};
use maddpm::{Error, LoadError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(c: usize, s: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(c, s, s, (0..c * s * s).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn extractor(desc: &ExtractorDescriptor) -> FeatureExtractor {
    FeatureExtractor::reference(desc).unwrap()
}

#[test]
fn desk_shapes() {
    let desc = ExtractorDescriptor::default();
    let ex = extractor(&desc);
    let x = random_image(3, 32, 1);
    assert_eq!(ex.extract_scale1(&x).unwrap().data.shape(), [16, 8, 8]);
    assert_eq!(ex.extract_scale2(&x).unwrap().data.shape(), [16, 16, 16]);
    let fused = ex.extract_fused(&x).unwrap();
    assert_eq!(fused.scale, ScaleTag::Fused);
    assert_eq!(fused.data.shape(), [32, 16, 16]);
    assert_eq!(fused.data.shape(), desc.fused_shape());
}

#[test]
fn large_backbone_shapes() {
    let desc = ExtractorDescriptor {
        input_size: 224,
        out_channels: 1024,
        hidden_channels: 4,
        reduction: 16,
        ..ExtractorDescriptor::default()
    };
    let ex = extractor(&desc);
    let x = random_image(3, 224, 2);
    assert_eq!(ex.extract_scale1(&x).unwrap().data.shape(), [1024, 14, 14]);
    assert_eq!(ex.extract_fused(&x).unwrap().data.shape(), [2048, 28, 28]);
}

#[test]
fn stitched_quadrants_are_independent_extractions() {
    let desc = ExtractorDescriptor::default();
    let ex = extractor(&desc);
    let s = desc.input_size;
    let h = desc.output_size();
    let big = random_image(3, 2 * s, 3);
    let stitched = ex.extract_patches(&big).unwrap().data;
    for (qy, qx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let own = ex.extract_scale1(&big.crop(qy * s, qx * s, s, s)).unwrap().data;
        assert_eq!(stitched.crop(qy * h, qx * h, h, h), own);
    }

    // A change inside one quadrant leaves the other three blocks untouched.
    let mut poked = big.clone();
    *poked.at_mut(1, s + 3, 5) += 2.0;
    let after = ex.extract_patches(&poked).unwrap().data;
    for (qy, qx) in [(0, 0), (0, 1), (1, 1)] {
        assert_eq!(after.crop(qy * h, qx * h, h, h), stitched.crop(qy * h, qx * h, h, h));
    }
    assert_ne!(after.crop(h, 0, h, h), stitched.crop(h, 0, h, h));
}

#[test]
fn tiled_input_gives_tiled_features() {
    let desc = ExtractorDescriptor::default();
    let ex = extractor(&desc);
    let s = desc.input_size;
    let h = desc.output_size();
    let x = random_image(3, s, 4);
    let mut big = Tensor::zeros(3, 2 * s, 2 * s);
    for (qy, qx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        big.paste(&x, qy * s, qx * s);
    }
    let one = ex.extract_scale1(&x).unwrap().data;
    let four = ex.extract_patches(&big).unwrap().data;
    for (qy, qx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        assert_eq!(four.crop(qy * h, qx * h, h, h), one);
    }
}

#[test]
fn fusion_stacks_upsampled_scale1_over_scale2() {
    let ex = extractor(&ExtractorDescriptor::default());
    let x = random_image(3, 32, 5);
    let s1 = ex.extract_scale1(&x).unwrap();
    let s2 = ex.extract_scale2(&x).unwrap();
    let f = fuse_features(&s1, &s2).unwrap().data;
    let c = s1.data.channels();
    for ch in 0..c {
        for y in 0..16 {
            for xx in 0..16 {
                assert_eq!(f.at(ch, y, xx), s1.data.at(ch, y / 2, xx / 2));
                assert_eq!(f.at(c + ch, y, xx), s2.data.at(ch, y, xx));
            }
        }
    }
    assert!(fuse_features(&s2, &s1).is_err());
}

#[test]
fn wrong_input_shape_is_rejected() {
    let ex = extractor(&ExtractorDescriptor::default());
    assert!(ex.extract_scale1(&random_image(3, 16, 0)).is_err());
    assert!(ex.extract_patches(&random_image(3, 32, 0)).is_err());
    let bad = ExtractorDescriptor {
        reduction: 3,
        ..ExtractorDescriptor::default()
    };
    assert!(FeatureExtractor::reference(&bad).is_err());
}

#[test]
fn reference_weights_are_seeded() {
    let a = ExtractorDescriptor::default();
    let b = ExtractorDescriptor { seed: a.seed + 1, ..a.clone() };
    assert_eq!(extractor(&a).checksum(), extractor(&a).checksum());
    assert_ne!(extractor(&a).checksum(), extractor(&b).checksum());
}

#[test]
fn weight_file_round_trip_is_bit_identical() {
    let desc = ExtractorDescriptor::default();
    let ex = extractor(&desc);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.mdtf");
    save_extractor_weights(&path, &ex).unwrap();
    let back = load_extractor_weights(&path, &desc).unwrap();
    assert_eq!(back.checksum(), ex.checksum());
    let x = random_image(3, 32, 6);
    assert_eq!(back.extract_fused(&x).unwrap(), ex.extract_fused(&x).unwrap());
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(encode_tensors(&decode_tensors(&bytes).unwrap()), bytes);
}

#[test]
fn weight_file_errors_are_specific() {
    let desc = ExtractorDescriptor::default();
    let ex = extractor(&desc);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.mdtf");
    save_extractor_weights(&path, &ex).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(
        load_extractor_weights(&path, &desc),
        Err(Error::Load(LoadError::Truncated { .. }))
    ));

    let mut v = bytes.clone();
    v[4..8].copy_from_slice(&(TENSOR_FILE_VERSION + 1).to_le_bytes());
    std::fs::write(&path, &v).unwrap();
    assert!(matches!(
        load_extractor_weights(&path, &desc),
        Err(Error::Load(LoadError::VersionMismatch { .. }))
    ));

    let mut v = bytes.clone();
    v[0] = b'X';
    std::fs::write(&path, &v).unwrap();
    assert!(matches!(
        load_extractor_weights(&path, &desc),
        Err(Error::Load(LoadError::BadMagic { .. }))
    ));

    std::fs::write(&path, &bytes).unwrap();
    let wider = ExtractorDescriptor {
        hidden_channels: 8,
        ..desc.clone()
    };
    match load_extractor_weights(&path, &wider) {
        Err(Error::Load(LoadError::ShapeMismatch { tensor, .. })) => assert_eq!(tensor, "conv0.weight"),
        other => panic!("expected a shape mismatch, got {other:?}"),
    }
}

#[test]
fn channel_stats_standardise_the_fit_set() {
    let maps: Vec<Tensor> = (0..5).map(|k| random_image(4, 3, k).scale(1.0 + k as f64)).collect();
    let stats = ChannelStats::fit(&maps).unwrap();
    let normed: Vec<Tensor> = maps.iter().map(|m| stats.normalize(m).unwrap()).collect();
    for ch in 0..4 {
        let vals: Vec<f64> = normed.iter().flat_map(|t| t.channel(ch).to_vec()).collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
    }
    assert!(ChannelStats::fit(&[]).is_err());
    assert!(stats.normalize(&Tensor::zeros(2, 3, 3)).is_err());
}
