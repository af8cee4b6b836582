//! Image ingestion, crop-and-resize preprocessing, and the synthetic
//! bona fide / morph generator.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Label;
use crate::tensor::Tensor;

/// Fraction of the box height added on every side before cropping.
pub const CROP_MARGIN: f64 = 0.05;

/// Face box in pixels: top-left corner plus size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn full_frame(width: u32, height: u32) -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            w: width as f64,
            h: height as f64,
        }
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)` after margin expansion and
/// clamping to the image.
pub fn crop_region(img_w: u32, img_h: u32, bbox: &BBox) -> Result<(u32, u32, u32, u32)> {
    let m = CROP_MARGIN * bbox.h;
    let x0 = (bbox.x - m).round().max(0.0);
    let y0 = (bbox.y - m).round().max(0.0);
    let x1 = (bbox.x + bbox.w + m).round().min(img_w as f64);
    let y1 = (bbox.y + bbox.h + m).round().min(img_h as f64);
    if !(x1 > x0 && y1 > y0) || !bbox.w.is_finite() || !bbox.h.is_finite() {
        return Err(Error::invalid(format!(
            "box {bbox:?} does not intersect the {img_w}x{img_h} image"
        )));
    }
    Ok((x0 as u32, y0 as u32, x1 as u32, y1 as u32))
}

/// Bilinear resampling with half-pixel centres (`align_corners = false`),
/// clamping at the borders.
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [c, h, w] = src.shape();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let taps = |o: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = Tensor::zeros(c, out_h, out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = taps(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = taps(ox, sx, w);
            for ch in 0..c {
                let top = src.at(ch, y0, x0) * (1.0 - fx) + src.at(ch, y0, x1) * fx;
                let bot = src.at(ch, y1, x0) * (1.0 - fx) + src.at(ch, y1, x1) * fx;
                *out.at_mut(ch, oy, ox) = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// `3×H×W` tensor in `[−1, 1]` from 8-bit RGB.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            *t.at_mut(ch, y as usize, x as usize) = px.0[ch] as f64 / 127.5 - 1.0;
        }
    }
    t
}

pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    if t.channels() != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {}", t.channels())));
    }
    let mut img = RgbImage::new(t.width() as u32, t.height() as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let mut v = [0u8; 3];
        for (ch, out) in v.iter_mut().enumerate() {
            let s = (t.at(ch, y as usize, x as usize) + 1.0) * 127.5;
            *out = s.round().clamp(0.0, 255.0) as u8;
        }
        *px = Rgb(v);
    }
    Ok(img)
}

/// Crop with margin, bilinear resize to `target_size²`, scale to `[−1, 1]`.
pub fn preprocess(img: &RgbImage, bbox: &BBox, target_size: usize) -> Result<Tensor> {
    if target_size == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let (x0, y0, x1, y1) = crop_region(img.width(), img.height(), bbox)?;
    let (cw, ch) = ((x1 - x0) as usize, (y1 - y0) as usize);
    let mut crop = Tensor::zeros(3, ch, cw);
    for y in 0..ch {
        for x in 0..cw {
            let px = img.get_pixel(x0 + x as u32, y0 + y as u32);
            for c in 0..3 {
                *crop.at_mut(c, y, x) = px.0[c] as f64;
            }
        }
    }
    let resized = resize_bilinear(&crop, target_size, target_size);
    Ok(resized.map(|v| (v / 127.5 - 1.0).clamp(-1.0, 1.0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: Label,
    pub image: Tensor,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for sample `index` of family `stream`.
fn sub_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ stream.rotate_left(32)) ^ index))
}

const BONA_STREAM: u64 = 1;
const MORPH_STREAM: u64 = 2;

/// Soft ellipse coverage with a ~1 px anti-aliased rim.
fn ellipse_alpha(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let q = (((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2)).sqrt();
    let dist = (q - 1.0) * rx.min(ry);
    (0.5 - dist).clamp(0.0, 1.0)
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
}

/// One synthetic "face": a tilted background gradient, a face ellipse and
/// 2–4 dark features (eyes always, then mouth, then nose) at fixed anchors
/// with jittered position, size and intensity.
pub fn synth_face<R: Rng>(rng: &mut R, size: usize) -> Tensor {
    let s = size as f64;
    let mut j = |a: f64| rng.random_range(-a..=a);

    let base = -0.4 + j(0.1);
    let (gx, gy) = (j(0.1), j(0.1));
    let tint = [j(0.02), j(0.02), j(0.02)];

    let skin = 0.25 + j(0.05);
    let face = Ellipse {
        cx: s * (0.5 + j(0.01)),
        cy: s * (0.52 + j(0.01)),
        rx: s * (0.30 + j(0.01)),
        ry: s * (0.38 + j(0.01)),
        color: [skin + 0.15, skin, skin - 0.1],
    };

    let n_features = 2 + (j(1.0) + 1.0).round().clamp(0.0, 2.0) as usize;
    let anchors: [(f64, f64, f64, f64); 4] = [
        (0.36, 0.42, 0.075, 0.06),
        (0.64, 0.42, 0.075, 0.06),
        (0.50, 0.72, 0.14, 0.05),
        (0.50, 0.58, 0.05, 0.07),
    ];
    let dark = -0.6 + j(0.05);
    let mut parts = vec![face];
    for &(ax, ay, rx, ry) in anchors.iter().take(n_features) {
        let v = dark + j(0.03);
        parts.push(Ellipse {
            cx: s * (ax + j(0.01)),
            cy: s * (ay + j(0.01)),
            rx: s * rx * (1.0 + j(0.05)),
            ry: s * ry * (1.0 + j(0.05)),
            color: [v + 0.05, v, v - 0.05],
        });
    }

    let mut t = Tensor::zeros(3, size, size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let bg = base + gx * (px / s - 0.5) + gy * (py / s - 0.5);
            let mut rgb = [bg + tint[0], bg + tint[1], bg + tint[2]];
            for e in &parts {
                let a = ellipse_alpha(px, py, e.cx, e.cy, e.rx, e.ry);
                if a > 0.0 {
                    for c in 0..3 {
                        rgb[c] = rgb[c] * (1.0 - a) + e.color[c] * a;
                    }
                }
            }
            for c in 0..3 {
                *t.at_mut(c, y, x) = rgb[c].clamp(-1.0, 1.0);
            }
        }
    }
    t
}

/// Integer translation with edge replication.
pub fn translate(t: &Tensor, dx: i64, dy: i64) -> Tensor {
    let [c, h, w] = t.shape();
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
            for x in 0..w {
                let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
                *out.at_mut(ch, y, x) = t.at(ch, sy, sx);
            }
        }
    }
    out
}

/// Equal-weight blend of two parents after translating the second one.
pub fn blend_morph(a: &Tensor, b: &Tensor, dx: i64, dy: i64) -> Tensor {
    a.axpby(0.5, &translate(b, dx, dy), 0.5)
}

fn morph_offset<R: Rng>(rng: &mut R) -> (i64, i64) {
    loop {
        let dx = rng.random_range(-3..=3i64);
        let dy = rng.random_range(-3..=3i64);
        if dx.abs().max(dy.abs()) >= 1 {
            return (dx, dy);
        }
    }
}

/// Deterministic labelled set: `n_bona` faces followed by `n_morph` blends.
///
/// Every sample draws from its own stream derived from `(seed, index)`, so a
/// sample does not depend on how many others are generated.
pub fn synth_dataset(n_bona: usize, n_morph: usize, image_size: usize, seed: u64) -> Result<Vec<Sample>> {
    if image_size < 8 {
        return Err(Error::invalid(format!("image size {image_size} is too small (min 8)")));
    }
    let mut out = Vec::with_capacity(n_bona + n_morph);
    for i in 0..n_bona {
        let mut rng = sub_rng(seed, BONA_STREAM, i as u64);
        out.push(Sample {
            id: format!("bona_{i:05}"),
            label: Label::Bonafide,
            image: synth_face(&mut rng, image_size),
        });
    }
    for i in 0..n_morph {
        let mut rng = sub_rng(seed, MORPH_STREAM, i as u64);
        let a = synth_face(&mut rng, image_size);
        let b = synth_face(&mut rng, image_size);
        let (dx, dy) = morph_offset(&mut rng);
        out.push(Sample {
            id: format!("morph_{i:05}"),
            label: Label::Attack,
            image: blend_morph(&a, &b, dx, dy),
        });
    }
    Ok(out)
}

/// Gradient magnitude above which a pixel counts as an edge in
/// [`edge_density`].
pub const EDGE_THRESHOLD: f64 = 0.05;

/// Fraction of pixels whose forward-difference gradient of the channel mean
/// exceeds `threshold`.
///
/// Blending two misaligned faces doubles every contour at reduced contrast,
/// so morphs have more edge pixels than bona fide faces even though their
/// summed gradient magnitude is not larger.
pub fn edge_density(t: &Tensor, threshold: f64) -> f64 {
    let [c, h, w] = t.shape();
    if h < 2 || w < 2 {
        return 0.0;
    }
    let mean = |y: usize, x: usize| (0..c).map(|ch| t.at(ch, y, x)).sum::<f64>() / c as f64;
    let mut edges = 0usize;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let m = mean(y, x);
            let (gx, gy) = (mean(y, x + 1) - m, mean(y + 1, x) - m);
            if gx.hypot(gy) > threshold {
                edges += 1;
            }
        }
    }
    edges as f64 / ((h - 1) * (w - 1)) as f64
}

pub const LABELS_FILE: &str = "labels.csv";

/// Writes `<id>.png` per sample and `labels.csv` (`sample_id,label`).
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        let path = dir.join(format!("{}.png", s.id));
        tensor_to_image(&s.image)?
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
    }
    let path = dir.join(LABELS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["sample_id", "label"])
        .and_then(|_| {
            for s in samples {
                w.write_record([s.id.as_str(), s.label.as_str()])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<HashMap<String, Label>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("{} row {}: {e}", path.display(), i + 2)))?;
        if row.len() != 2 {
            return Err(Error::Data(format!(
                "{} line {}: expected `sample_id,label`",
                path.display(),
                i + 2
            )));
        }
        let label: Label = row[1]
            .parse()
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 2)))?;
        out.insert(row[0].to_owned(), label);
    }
    Ok(out)
}

pub fn read_bbox_manifest(path: &Path) -> Result<HashMap<String, BBox>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (i, row) in r.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Data(format!("{} line {line}: {e}", path.display())))?;
        if row.len() != 5 {
            return Err(Error::Data(format!(
                "{} line {line}: expected `sample_id,x,y,w,h`",
                path.display()
            )));
        }
        let num = |k: usize| -> Result<f64> {
            row[k]
                .trim()
                .parse()
                .map_err(|e| Error::Data(format!("{} line {line}: {e}", path.display())))
        };
        out.insert(
            row[0].to_owned(),
            BBox {
                x: num(1)?,
                y: num(2)?,
                w: num(3)?,
                h: num(4)?,
            },
        );
    }
    Ok(out)
}

#[derive(Debug)]
pub struct LoadedImage {
    pub sample_id: String,
    pub raster: RgbImage,
    pub bbox: BBox,
}

/// Result of scanning a directory: readable images in lexicographic order,
/// plus the files that could not be decoded.
#[derive(Debug, Default)]
pub struct ImageDirScan {
    pub images: Vec<LoadedImage>,
    pub failures: Vec<(PathBuf, String)>,
}

fn is_supported(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pnm")
    )
}

/// Loads every PNG/PPM file in `dir` (non-recursive). Boxes come from the
/// manifest when it lists the sample, otherwise the whole frame is used.
pub fn load_image_dir(dir: &Path, manifest: Option<&HashMap<String, BBox>>) -> Result<ImageDirScan> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_supported(p))
        .collect();
    paths.sort();
    let mut scan = ImageDirScan::default();
    for p in paths {
        let id = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_owned();
        match image::open(&p) {
            Ok(img) => {
                let raster = img.to_rgb8();
                let bbox = manifest
                    .and_then(|m| m.get(&id).copied())
                    .unwrap_or_else(|| BBox::full_frame(raster.width(), raster.height()));
                scan.images.push(LoadedImage {
                    sample_id: id,
                    raster,
                    bbox,
                });
            }
            Err(e) => scan.failures.push((p, e.to_string())),
        }
    }
    Ok(scan)
}
