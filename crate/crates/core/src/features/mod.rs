//! Frozen feature extractor and the two-scale feature pipeline.
//!
//! Scale 1 runs the extractor on the `S×S` image. Scale 2 resizes the image
//! to `2S×2S`, extracts each of the four `S×S` quadrants separately and
//! stitches the four `h×h` maps back into one `2h×2h` map. The fused map
//! upsamples scale 1 to `2h×2h` and stacks it on top of scale 2.

mod tensorfile;

pub use tensorfile::{
    decode_tensors, encode_tensors, payload_checksum, read_tensor_file, write_tensor_file,
    NamedTensor, TENSOR_FILE_MAGIC, TENSOR_FILE_VERSION,
};

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::resize_bilinear;
use crate::error::{Error, LoadError, Result};
use crate::nn::{self, Conv2d};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleTag {
    Scale1,
    Scale2,
    Fused,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub scale: ScaleTag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    ReferenceConv,
    ExternalWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorDescriptor {
    pub kind: ExtractorKind,
    /// Side length `S` of the square input.
    pub input_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden_channels: usize,
    /// `S / h`; a power of two.
    pub reduction: usize,
    pub seed: u64,
    pub weights: Option<PathBuf>,
}

impl Default for ExtractorDescriptor {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::ReferenceConv,
            input_size: 32,
            in_channels: 3,
            out_channels: 16,
            hidden_channels: 16,
            reduction: 4,
            seed: 0x5eed,
            weights: None,
        }
    }
}

impl ExtractorDescriptor {
    pub fn validate(&self) -> Result<()> {
        if !self.reduction.is_power_of_two() {
            return Err(Error::invalid(format!(
                "reduction factor {} is not a power of two",
                self.reduction
            )));
        }
        if self.out_channels == 0 || self.in_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::invalid("extractor channel counts must be positive"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.reduction) {
            return Err(Error::invalid(format!(
                "input size {} not divisible by reduction {}",
                self.input_size, self.reduction
            )));
        }
        Ok(())
    }

    pub fn output_size(&self) -> usize {
        self.input_size / self.reduction
    }

    /// `(C, h, w)` of a scale-1 map.
    pub fn scale1_shape(&self) -> [usize; 3] {
        let h = self.output_size();
        [self.out_channels, h, h]
    }

    pub fn fused_shape(&self) -> [usize; 3] {
        let h = 2 * self.output_size();
        [2 * self.out_channels, h, h]
    }

    fn layers(&self) -> Vec<Conv2d> {
        let n_down = self.reduction.trailing_zeros() as usize;
        let mut layers = Vec::with_capacity(n_down + 1);
        let mut off = 0;
        let mut ch = self.in_channels;
        for _ in 0..n_down {
            let c = Conv2d::new(ch, self.hidden_channels, 3, 2, off);
            off += c.param_count();
            ch = self.hidden_channels;
            layers.push(c);
        }
        layers.push(Conv2d::new(ch, self.out_channels, 3, 1, off));
        layers
    }
}

/// A fixed stack of 3×3 convolutions: `log2(reduction)` stride-2 layers with
/// ReLU, then one stride-1 linear read-out layer.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    descriptor: ExtractorDescriptor,
    layers: Vec<Conv2d>,
    params: Vec<f64>,
    checksum: String,
}

impl FeatureExtractor {
    /// Builds the extractor the descriptor names, reading weights from disk
    /// for [`ExtractorKind::ExternalWeights`].
    pub fn from_descriptor(desc: &ExtractorDescriptor) -> Result<Self> {
        match desc.kind {
            ExtractorKind::ReferenceConv => Self::reference(desc),
            ExtractorKind::ExternalWeights => {
                let path = desc.weights.as_ref().ok_or_else(|| {
                    Error::Config("external-weights extractor needs a `weights` path".into())
                })?;
                load_extractor_weights(path, desc)
            }
        }
    }

    /// Frozen random weights, He-uniform from a fixed seed, zero biases.
    /// Weights are rounded to `f32` so a saved copy reloads bit-identically.
    pub fn reference(desc: &ExtractorDescriptor) -> Result<Self> {
        desc.validate()?;
        let layers = desc.layers();
        let total: usize = layers.iter().map(|l| l.param_count()).sum();
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(desc.seed);
        for l in &layers {
            let bound = (6.0 / l.fan_in() as f64).sqrt();
            for v in &mut params[l.offset..l.offset + l.weight_len()] {
                *v = f64::from(rng.random_range(-bound..bound) as f32);
            }
        }
        let mut ex = Self {
            descriptor: ExtractorDescriptor {
                kind: ExtractorKind::ReferenceConv,
                weights: None,
                ..desc.clone()
            },
            layers,
            params,
            checksum: String::new(),
        };
        ex.checksum = payload_checksum(&ex.to_tensors());
        Ok(ex)
    }

    pub fn descriptor(&self) -> &ExtractorDescriptor {
        &self.descriptor
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Weights as named tensors: `conv{i}.weight` `[out, in, 3, 3]` and
    /// `conv{i}.bias` `[out]`.
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("conv{i}.weight"),
                dims: vec![l.out_ch, l.in_ch, l.kernel, l.kernel],
                data: l.weights(&self.params).iter().map(|&v| v as f32).collect(),
            });
            out.push(NamedTensor {
                name: format!("conv{i}.bias"),
                dims: vec![l.out_ch],
                data: l.bias(&self.params).iter().map(|&v| v as f32).collect(),
            });
        }
        out
    }

    fn run(&self, x: &Tensor) -> Tensor {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward_only(&self.params, &h);
            h = if i < last { nn::relu_tensor(&z) } else { z };
        }
        h
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let s = self.descriptor.input_size;
        let want = [self.descriptor.in_channels, s, s];
        if image.shape() != want {
            return Err(Error::invalid(format!(
                "extractor expects {want:?}, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    pub fn extract_scale1(&self, image: &Tensor) -> Result<FeatureMap> {
        self.check_input(image)?;
        Ok(FeatureMap {
            data: self.run(image),
            scale: ScaleTag::Scale1,
        })
    }

    /// Extracts the four quadrants of an already-enlarged `2S×2S` image and
    /// stitches the maps in row-major quadrant order.
    pub fn extract_patches(&self, enlarged: &Tensor) -> Result<FeatureMap> {
        let s = self.descriptor.input_size;
        let want = [self.descriptor.in_channels, 2 * s, 2 * s];
        if enlarged.shape() != want {
            return Err(Error::invalid(format!(
                "patch extraction expects {want:?}, got {:?}",
                enlarged.shape()
            )));
        }
        let [c, h, _] = self.descriptor.scale1_shape();
        let mut out = Tensor::zeros(c, 2 * h, 2 * h);
        for (qy, qx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let patch = enlarged.crop(qy * s, qx * s, s, s);
            out.paste(&self.run(&patch), qy * h, qx * h);
        }
        Ok(FeatureMap {
            data: out,
            scale: ScaleTag::Scale2,
        })
    }

    pub fn extract_scale2(&self, image: &Tensor) -> Result<FeatureMap> {
        self.check_input(image)?;
        let s = self.descriptor.input_size;
        if !s.is_multiple_of(2) {
            return Err(Error::invalid(format!("image size {s} is not even")));
        }
        self.extract_patches(&resize_bilinear(image, 2 * s, 2 * s))
    }

    /// Scale-1 and scale-2 maps fused into one `2C×2h×2h` map.
    pub fn extract_fused(&self, image: &Tensor) -> Result<FeatureMap> {
        let s1 = self.extract_scale1(image)?;
        let s2 = self.extract_scale2(image)?;
        fuse_features(&s1, &s2)
    }
}

/// Nearest-neighbour upsamples `s1` to the size of `s2` and concatenates
/// channels as `[s1 ; s2]`.
pub fn fuse_features(s1: &FeatureMap, s2: &FeatureMap) -> Result<FeatureMap> {
    let [c1, h1, w1] = s1.data.shape();
    let [c2, h2, w2] = s2.data.shape();
    if c1 != c2 || h2 != 2 * h1 || w2 != 2 * w1 {
        return Err(Error::invalid(format!(
            "cannot fuse {c1}x{h1}x{w1} with {c2}x{h2}x{w2}: need equal channels and a 2x larger second map"
        )));
    }
    let up = nn::upsample_nearest(&s1.data, 2);
    Ok(FeatureMap {
        data: nn::concat_channels(&up, &s2.data),
        scale: ScaleTag::Fused,
    })
}

/// Loads extractor weights from a tensor file and checks them against the
/// layer stack `expected` describes.
pub fn load_extractor_weights(path: &Path, expected: &ExtractorDescriptor) -> Result<FeatureExtractor> {
    expected.validate()?;
    let tensors = read_tensor_file(path)?;
    extractor_from_tensors(&tensors, expected, Some(path))
}

pub fn save_extractor_weights(path: &Path, extractor: &FeatureExtractor) -> Result<()> {
    write_tensor_file(path, &extractor.to_tensors())
}

pub fn extractor_from_tensors(
    tensors: &[NamedTensor],
    expected: &ExtractorDescriptor,
    source: Option<&Path>,
) -> Result<FeatureExtractor> {
    let layers = expected.layers();
    let total: usize = layers.iter().map(|l| l.param_count()).sum();
    let mut params = vec![0.0; total];
    for (i, l) in layers.iter().enumerate() {
        for (suffix, dims, off) in [
            ("weight", vec![l.out_ch, l.in_ch, l.kernel, l.kernel], l.offset),
            ("bias", vec![l.out_ch], l.offset + l.weight_len()),
        ] {
            let name = format!("conv{i}.{suffix}");
            let t = tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| LoadError::MissingTensor(name.clone()))?;
            if t.dims != dims {
                return Err(LoadError::ShapeMismatch {
                    tensor: name,
                    expected: dims,
                    found: t.dims.clone(),
                }
                .into());
            }
            for (dst, &v) in params[off..off + t.data.len()].iter_mut().zip(&t.data) {
                *dst = f64::from(v);
            }
        }
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(LoadError::Malformed("non-finite extractor weight".into()).into());
    }
    let mut ex = FeatureExtractor {
        descriptor: ExtractorDescriptor {
            kind: ExtractorKind::ExternalWeights,
            weights: source.map(Path::to_path_buf),
            ..expected.clone()
        },
        layers,
        params,
        checksum: String::new(),
    };
    ex.checksum = payload_checksum(&ex.to_tensors());
    Ok(ex)
}

/// Per-channel mean and standard deviation of a feature population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-6;

impl ChannelStats {
    pub fn fit(maps: &[Tensor]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::invalid("cannot fit channel statistics on an empty set"))?;
        let [c, h, w] = first.shape();
        if let Some(i) = maps.iter().position(|m| m.shape() != first.shape()) {
            return Err(Error::invalid(format!("feature map {i} has a different shape")));
        }
        let n = (maps.len() * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let m: f64 = maps.iter().map(|t| t.channel(ch).iter().sum::<f64>()).sum::<f64>() / n;
            let v: f64 = maps
                .iter()
                .map(|t| t.channel(ch).iter().map(|x| (x - m) * (x - m)).sum::<f64>())
                .sum::<f64>()
                / n;
            mean[ch] = m;
            std[ch] = v.sqrt();
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        if x.channels() != self.mean.len() {
            return Err(Error::invalid(format!(
                "statistics cover {} channels, map has {}",
                self.mean.len(),
                x.channels()
            )));
        }
        let mut out = x.clone();
        let n = x.height() * x.width();
        for ch in 0..x.channels() {
            let (m, s) = (self.mean[ch], self.std[ch].max(STD_FLOOR));
            for v in &mut out.data_mut()[ch * n..(ch + 1) * n] {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}
