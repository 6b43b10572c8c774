//! Paired-image ingestion, the 8-bit PNG boundary, patch sampling, and a
//! synthetic degrader for tests and demos.
//!
//! Dataset layout: a root directory with `rain/` and `clean/` subdirectories
//! holding 8-bit RGB PNGs, paired by identical file stem.
//!
//! The degrader is deliberately non-physical. It plants smooth luminance
//! bumps (blended with a blurred copy of Y) and leaks only a small fraction
//! of that change into chrominance, which makes luminance dominance of the
//! residual a construction guarantee rather than an empirical observation.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{codecs::png::PngEncoder, DynamicImage, ExtendedColorType, ImageEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::colorspace::{rgb_to_yuv, yuv_to_rgb, RgbImage, YuvImage};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing directory {0}")]
    MissingDir(PathBuf),
    #[error("stem `{stem}` present only under {side}/")]
    UnmatchedStem { stem: String, side: &'static str },
    #[error("pair `{stem}`: extents differ, rain {rain_w}x{rain_h} vs clean {clean_w}x{clean_h}")]
    PairExtentMismatch {
        stem: String,
        rain_w: u32,
        rain_h: u32,
        clean_w: u32,
        clean_h: u32,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("{path}: unsupported pixel format {got}, need 8-bit RGB")]
    UnsupportedFormat { path: PathBuf, got: String },
    #[error("{path}: image {width}x{height} is smaller than the {patch}px patch")]
    ImageTooSmall {
        path: PathBuf,
        width: usize,
        height: usize,
        patch: usize,
    },
    #[error("patch spec: {reason}")]
    BadPatchSpec { reason: String },
    #[error("synth params: {reason}")]
    BadSynthParams { reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Stem-matched (degraded, clean) path pairs with validated extents.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub root: PathBuf,
    pub split: String,
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

/// Scans `root/rain` and `root/clean` for stem-matched PNG pairs. `split`
/// is a bookkeeping label stored on the dataset. Extents are validated from
/// the PNG headers without decoding pixel data.
pub fn load_pairs(root: &Path, split: &str) -> Result<PairedDataset> {
    let rain_dir = root.join("rain");
    let clean_dir = root.join("clean");
    for dir in [&rain_dir, &clean_dir] {
        if !dir.is_dir() {
            return Err(DataError::MissingDir(dir.clone()));
        }
    }
    let rain = png_stems(&rain_dir)?;
    let clean = png_stems(&clean_dir)?;

    let mut ri = rain.iter().peekable();
    let mut ci = clean.iter().peekable();
    let mut pairs = Vec::new();
    loop {
        match (ri.peek(), ci.peek()) {
            (None, None) => break,
            (Some((stem, _)), None) => {
                return Err(DataError::UnmatchedStem {
                    stem: stem.clone(),
                    side: "rain",
                })
            }
            (None, Some((stem, _))) => {
                return Err(DataError::UnmatchedStem {
                    stem: stem.clone(),
                    side: "clean",
                })
            }
            (Some((rs, rp)), Some((cs, cp))) => match rs.cmp(cs) {
                std::cmp::Ordering::Less => {
                    return Err(DataError::UnmatchedStem {
                        stem: rs.clone(),
                        side: "rain",
                    })
                }
                std::cmp::Ordering::Greater => {
                    return Err(DataError::UnmatchedStem {
                        stem: cs.clone(),
                        side: "clean",
                    })
                }
                std::cmp::Ordering::Equal => {
                    let (rw, rh) = image::image_dimensions(rp).map_err(|e| DataError::Image {
                        path: rp.clone(),
                        reason: e.to_string(),
                    })?;
                    let (cw, ch) = image::image_dimensions(cp).map_err(|e| DataError::Image {
                        path: cp.clone(),
                        reason: e.to_string(),
                    })?;
                    if (rw, rh) != (cw, ch) {
                        return Err(DataError::PairExtentMismatch {
                            stem: rs.clone(),
                            rain_w: rw,
                            rain_h: rh,
                            clean_w: cw,
                            clean_h: ch,
                        });
                    }
                    pairs.push((rp.clone(), cp.clone()));
                    ri.next();
                    ci.next();
                }
            },
        }
    }
    Ok(PairedDataset {
        root: root.to_path_buf(),
        split: split.to_string(),
        pairs,
    })
}

/// Decodes an 8-bit RGB PNG into [0, 1] planes.
pub fn decode_image(path: &Path) -> Result<RgbImage> {
    let dynamic = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let buf = match dynamic {
        DynamicImage::ImageRgb8(buf) => buf,
        other => {
            return Err(DataError::UnsupportedFormat {
                path: path.to_path_buf(),
                got: format!("{:?}", other.color()),
            })
        }
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut planes = [
        Vec::with_capacity(w * h),
        Vec::with_capacity(w * h),
        Vec::with_capacity(w * h),
    ];
    for px in buf.pixels() {
        for c in 0..3 {
            planes[c].push(px.0[c] as f32 / 255.0);
        }
    }
    Ok(RgbImage::from_planes(w, h, planes).expect("decoded bytes are in range"))
}

/// Writes an image as 8-bit RGB PNG, rounding half away from zero.
pub fn encode_image(img: &RgbImage, path: &Path) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let mut bytes = Vec::with_capacity(3 * w * h);
    for i in 0..w * h {
        for c in 0..3 {
            bytes.push((img.plane(c)[i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    PngEncoder::new(BufWriter::new(file))
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Axis-aligned crop; the window must lie inside the image.
pub fn crop(img: &RgbImage, x: usize, y: usize, w: usize, h: usize) -> RgbImage {
    assert!(x + w <= img.width() && y + h <= img.height(), "crop window out of bounds");
    let planes = [0, 1, 2].map(|c| {
        let src = img.plane(c);
        let mut out = Vec::with_capacity(w * h);
        for row in y..y + h {
            out.extend_from_slice(&src[row * img.width() + x..row * img.width() + x + w]);
        }
        out
    });
    RgbImage::from_planes(w, h, planes).expect("crop preserves value range")
}

/// Grows an image to `target_w` x `target_h` by reflecting edge content
/// (no target may more than double the source extent minus one).
pub fn pad_reflect(img: &RgbImage, target_w: usize, target_h: usize) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    assert!(target_w >= w && target_h >= h, "padding cannot shrink");
    assert!(
        target_w < 2 * w && target_h < 2 * h,
        "reflection supports less than doubling"
    );
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
    let planes = [0, 1, 2].map(|c| {
        let src = img.plane(c);
        let mut out = Vec::with_capacity(target_w * target_h);
        for y in 0..target_h {
            let sy = reflect(y, h);
            for x in 0..target_w {
                out.push(src[sy * w + reflect(x, w)]);
            }
        }
        out
    });
    RgbImage::from_planes(target_w, target_h, planes).expect("padding preserves value range")
}

/// Random-crop schedule for training patches.
#[derive(Clone, Copy, Debug)]
pub struct PatchSpec {
    pub size: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            size: 256,
            count: 1,
            seed: 0,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.size % 8 != 0 {
            return Err(DataError::BadPatchSpec {
                reason: format!("size {} must be >= 16 and divisible by 8", self.size),
            });
        }
        if self.count == 0 {
            return Err(DataError::BadPatchSpec {
                reason: "count must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Draws `spec.count` aligned (degraded, clean) patch pairs from uniformly
/// random pairs and positions; deterministic under `spec.seed`.
pub fn sample_patches(dataset: &PairedDataset, spec: &PatchSpec) -> Result<Vec<(RgbImage, RgbImage)>> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut decoded = Vec::with_capacity(dataset.len());
    for (rain_path, clean_path) in &dataset.pairs {
        let rain = decode_image(rain_path)?;
        if rain.width() < spec.size || rain.height() < spec.size {
            return Err(DataError::ImageTooSmall {
                path: rain_path.clone(),
                width: rain.width(),
                height: rain.height(),
                patch: spec.size,
            });
        }
        decoded.push((rain, decode_image(clean_path)?));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let (rain, clean) = &decoded[rng.gen_range(0..decoded.len())];
        let x = rng.gen_range(0..=rain.width() - spec.size);
        let y = rng.gen_range(0..=rain.height() - spec.size);
        out.push((
            crop(rain, x, y, spec.size, spec.size),
            crop(clean, x, y, spec.size, spec.size),
        ));
    }
    Ok(out)
}

/// Knobs of the synthetic luminance-bump degrader. Ranges are inclusive.
#[derive(Clone, Copy, Debug)]
pub struct SynthParams {
    pub blob_count: (usize, usize),
    pub blob_radius: (f32, f32),
    pub gain: (f32, f32),
    pub blur_radius: usize,
    pub chroma_leak: f32,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            blob_count: (6, 12),
            blob_radius: (4.0, 12.0),
            gain: (0.3, 0.7),
            blur_radius: 2,
            chroma_leak: 0.04,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(DataError::BadSynthParams { reason });
        if self.blob_count.0 > self.blob_count.1 {
            return bad(format!("blob count range {:?} is empty", self.blob_count));
        }
        if !(self.blob_radius.0 <= self.blob_radius.1 && self.blob_radius.0 > 0.0) {
            return bad(format!("blob radius range {:?} must be positive and ordered", self.blob_radius));
        }
        if !(self.gain.0 <= self.gain.1 && self.gain.0 >= 0.0) {
            return bad(format!("gain range {:?} must be non-negative and ordered", self.gain));
        }
        // The leak is what keeps chrominance residuals small relative to
        // luminance; 1/3 is the documented dominance bound.
        if !(0.0..1.0 / 3.0).contains(&self.chroma_leak) || self.chroma_leak >= self.gain.0.max(f32::MIN_POSITIVE) {
            return bad(format!(
                "chroma leak {} must sit in [0, 1/3) and below the minimum gain {}",
                self.chroma_leak, self.gain.0
            ));
        }
        Ok(())
    }
}

/// Luminance ceiling after degradation; keeps every degraded pixel (and any
/// Y/UV swap composite of a degraded and a tame clean image) inside the RGB
/// gamut, so no information is lost to clamping.
const DEGRADED_Y_CAP: f32 = 0.8;

fn box_blur(plane: &[f32], w: usize, h: usize, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return plane.to_vec();
    }
    let r = radius as isize;
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = (x as isize - r).max(0) as usize;
            let hi = (x as isize + r).min(w as isize - 1) as usize;
            let sum: f32 = plane[y * w + lo..=y * w + hi].iter().sum();
            tmp[y * w + x] = sum / (hi - lo + 1) as f32;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        let lo = (y as isize - r).max(0) as usize;
        let hi = (y as isize + r).min(h as isize - 1) as usize;
        for x in 0..w {
            let mut sum = 0.0;
            for row in lo..=hi {
                sum += tmp[row * w + x];
            }
            out[y * w + x] = sum / (hi - lo + 1) as f32;
        }
    }
    out
}

/// Plants Gaussian-profile luminance bumps blended with a blurred copy of
/// the luminance plane, leaking `chroma_leak` of the change into U and V.
/// Zero drawn blobs returns the input bit-for-bit.
pub fn synth_degrade(clean: &RgbImage, params: &SynthParams) -> Result<RgbImage> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let blobs = rng.gen_range(params.blob_count.0..=params.blob_count.1);
    if blobs == 0 {
        return Ok(clean.clone());
    }
    let (w, h) = (clean.width(), clean.height());
    let yuv = rgb_to_yuv(clean);

    // Accumulated bump brightness and blend weight fields.
    let mut bump = vec![0.0f32; w * h];
    let mut weight = vec![0.0f32; w * h];
    for _ in 0..blobs {
        let cx = rng.gen_range(0.0..w as f32);
        let cy = rng.gen_range(0.0..h as f32);
        let sigma = rng.gen_range(params.blob_radius.0..=params.blob_radius.1) / 2.0;
        let gain = rng.gen_range(params.gain.0..=params.gain.1);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                let g = (-d2 * inv).exp();
                bump[y * w + x] += gain * g;
                weight[y * w + x] += g;
            }
        }
    }

    let blurred = box_blur(yuv.y(), w, h, params.blur_radius);
    let n = w * h;
    let (mut y2, mut u2, mut v2) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let wgt = weight[i].min(1.0);
        let lum = (blurred[i] + bump[i]).min(DEGRADED_Y_CAP);
        let y_new = (1.0 - wgt) * yuv.y()[i] + wgt * lum;
        let dy = y_new - yuv.y()[i];
        y2.push(y_new.clamp(0.0, 1.0));
        u2.push((yuv.u()[i] + params.chroma_leak * dy).clamp(-0.5, 0.5));
        v2.push((yuv.v()[i] + params.chroma_leak * dy).clamp(-0.5, 0.5));
    }
    let degraded = YuvImage::from_planes(w, h, y2, u2, v2).expect("fields are clamped into range");
    Ok(yuv_to_rgb(&degraded))
}

/// Smooth random clean image with restrained luminance ([0.15, 0.7]) and
/// chrominance (|U|, |V| <= 0.05), so degradation and channel swapping stay
/// inside the RGB gamut.
pub fn generate_clean(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Field in [-1, 1]: three random sinusoidal plaids, amplitude-normalized.
    let field = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        let waves: Vec<(f32, f32, f32, f32)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.3f32..=2.5),
                    rng.gen_range(0.3f32..=2.5),
                    rng.gen_range(0.0f32..std::f32::consts::TAU),
                    rng.gen_range(0.4f32..=1.0),
                )
            })
            .collect();
        let norm: f32 = waves.iter().map(|w| w.3).sum();
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let mut v = 0.0;
                for (fx, fy, phase, amp) in &waves {
                    let t = std::f32::consts::TAU
                        * (fx * x as f32 / width as f32 + fy * y as f32 / height as f32);
                    v += amp * (t + phase).sin();
                }
                out.push(v / norm);
            }
        }
        out
    };
    let yf = field(&mut rng);
    let uf = field(&mut rng);
    let vf = field(&mut rng);
    let n = width * height;
    let mut y = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        y.push(0.425 + 0.275 * yf[i]);
        u.push(0.05 * uf[i]);
        v.push(0.05 * vf[i]);
    }
    let yuv = YuvImage::from_planes(width, height, y, u, v).expect("amplitudes bound the ranges");
    yuv_to_rgb(&yuv)
}

/// Writes `cleans` and their degradations as a loadable paired dataset
/// under `root/{rain,clean}/pair_NNNN.png`. Each pair derives its degrader
/// seed from `params.seed` and the pair index.
pub fn materialize_synthetic(root: &Path, cleans: &[RgbImage], params: &SynthParams) -> Result<PairedDataset> {
    params.validate()?;
    let rain_dir = root.join("rain");
    let clean_dir = root.join("clean");
    for dir in [&rain_dir, &clean_dir] {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    for (i, clean) in cleans.iter().enumerate() {
        let pair_params = SynthParams {
            seed: params.seed.wrapping_add(i as u64),
            ..*params
        };
        let degraded = synth_degrade(clean, &pair_params)?;
        let name = format!("pair_{i:04}.png");
        encode_image(clean, &clean_dir.join(&name))?;
        encode_image(&degraded, &rain_dir.join(&name))?;
    }
    load_pairs(root, "synthetic")
}
