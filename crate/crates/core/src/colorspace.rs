//! BT.601 luminance/chrominance analysis: image containers, RGB <-> YUV
//! conversion, channel swapping, and residual statistics.

use thiserror::Error;

use crate::autodiff::{Shape, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum ColorError {
    #[error("{op}: plane length {got} does not match {width}x{height}")]
    PlaneLength {
        op: &'static str,
        width: usize,
        height: usize,
        got: usize,
    },
    #[error("{op}: value {value} outside [{lo}, {hi}]")]
    ValueRange {
        op: &'static str,
        value: f32,
        lo: f32,
        hi: f32,
    },
    #[error("{op}: image extents differ: {left_width}x{left_height} vs {right_width}x{right_height}")]
    ExtentMismatch {
        op: &'static str,
        left_width: usize,
        left_height: usize,
        right_width: usize,
        right_height: usize,
    },
    #[error("{op}: tensor shape {shape:?} is not a single {channels}-channel image")]
    TensorShape {
        op: &'static str,
        shape: Shape,
        channels: usize,
    },
    #[error("residual_histogram: no image pairs supplied")]
    EmptyInput,
    #[error("residual_histogram: {got} bins requested, at least 2 required")]
    TooFewBins { got: usize },
}

pub type Result<T> = std::result::Result<T, ColorError>;

const KR: f32 = 0.299;
const KG: f32 = 0.587;
const KB: f32 = 0.114;
const KU: f32 = 0.564;
const KV: f32 = 0.713;

fn check_plane(op: &'static str, width: usize, height: usize, plane: &[f32], lo: f32, hi: f32) -> Result<()> {
    if plane.len() != width * height {
        return Err(ColorError::PlaneLength {
            op,
            width,
            height,
            got: plane.len(),
        });
    }
    for &v in plane {
        if !(lo..=hi).contains(&v) {
            return Err(ColorError::ValueRange { op, value: v, lo, hi });
        }
    }
    Ok(())
}

/// Planar RGB image; every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    planes: [Vec<f32>; 3],
}

impl RgbImage {
    pub fn from_planes(width: usize, height: usize, planes: [Vec<f32>; 3]) -> Result<RgbImage> {
        for plane in &planes {
            check_plane("rgb_image", width, height, plane, 0.0, 1.0)?;
        }
        Ok(RgbImage { width, height, planes })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        &self.planes[channel]
    }

    /// Single-image BCHW tensor in R, G, B channel order.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(3 * self.width * self.height);
        for plane in &self.planes {
            data.extend_from_slice(plane);
        }
        Tensor::leaf(Shape::new(1, 3, self.height, self.width), data, false)
            .expect("plane lengths validated at construction")
    }

    /// Rebuild from a `1x3xHxW` tensor, absorbing float dust via clamping.
    pub fn from_tensor(t: &Tensor) -> Result<RgbImage> {
        let s = t.shape();
        if s.batch != 1 || s.channels != 3 {
            return Err(ColorError::TensorShape {
                op: "rgb_from_tensor",
                shape: s,
                channels: 3,
            });
        }
        let plane = s.plane();
        let planes = [0, 1, 2].map(|c| {
            t.data()[c * plane..(c + 1) * plane]
                .iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect()
        });
        Ok(RgbImage {
            width: s.width,
            height: s.height,
            planes,
        })
    }
}

/// Planar YUV image; `y` in `[0, 1]`, `u`/`v` in `[-0.5, 0.5]`.
#[derive(Clone, Debug, PartialEq)]
pub struct YuvImage {
    width: usize,
    height: usize,
    y: Vec<f32>,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl YuvImage {
    pub fn from_planes(width: usize, height: usize, y: Vec<f32>, u: Vec<f32>, v: Vec<f32>) -> Result<YuvImage> {
        check_plane("yuv_image", width, height, &y, 0.0, 1.0)?;
        check_plane("yuv_image", width, height, &u, -0.5, 0.5)?;
        check_plane("yuv_image", width, height, &v, -0.5, 0.5)?;
        Ok(YuvImage { width, height, y, u, v })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn y(&self) -> &[f32] {
        &self.y
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    /// Single-image BCHW tensor in Y, U, V channel order.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(3 * self.width * self.height);
        data.extend_from_slice(&self.y);
        data.extend_from_slice(&self.u);
        data.extend_from_slice(&self.v);
        Tensor::leaf(Shape::new(1, 3, self.height, self.width), data, false)
            .expect("plane lengths validated at construction")
    }

    /// Rebuild from a `1x3xHxW` tensor, absorbing float dust via clamping.
    pub fn from_tensor(t: &Tensor) -> Result<YuvImage> {
        let s = t.shape();
        if s.batch != 1 || s.channels != 3 {
            return Err(ColorError::TensorShape {
                op: "yuv_from_tensor",
                shape: s,
                channels: 3,
            });
        }
        let plane = s.plane();
        let grab = |c: usize, lo: f32, hi: f32| -> Vec<f32> {
            t.data()[c * plane..(c + 1) * plane]
                .iter()
                .map(|v| v.clamp(lo, hi))
                .collect()
        };
        Ok(YuvImage {
            width: s.width,
            height: s.height,
            y: grab(0, 0.0, 1.0),
            u: grab(1, -0.5, 0.5),
            v: grab(2, -0.5, 0.5),
        })
    }
}

/// Three unconstrained planes, used for residuals.
#[derive(Clone, Debug)]
pub struct ChannelPlanes {
    pub width: usize,
    pub height: usize,
    pub planes: [Vec<f32>; 3],
}

fn check_extents(
    op: &'static str,
    (lw, lh): (usize, usize),
    (rw, rh): (usize, usize),
) -> Result<()> {
    if (lw, lh) != (rw, rh) {
        return Err(ColorError::ExtentMismatch {
            op,
            left_width: lw,
            left_height: lh,
            right_width: rw,
            right_height: rh,
        });
    }
    Ok(())
}

/// BT.601 forward transform. Outputs are mathematically inside the type
/// ranges; clamping only trims sub-1e-6 rounding.
pub fn rgb_to_yuv(image: &RgbImage) -> YuvImage {
    let n = image.width * image.height;
    let (mut y, mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let [rp, gp, bp] = &image.planes;
    for i in 0..n {
        let (r, g, b) = (rp[i], gp[i], bp[i]);
        let luma = KR * r + KG * g + KB * b;
        y.push(luma.clamp(0.0, 1.0));
        u.push((KU * (b - luma)).clamp(-0.5, 0.5));
        v.push((KV * (r - luma)).clamp(-0.5, 0.5));
    }
    YuvImage {
        width: image.width,
        height: image.height,
        y,
        u,
        v,
    }
}

/// Exact algebraic inverse of [`rgb_to_yuv`], then clamped to `[0, 1]`.
pub fn yuv_to_rgb(image: &YuvImage) -> RgbImage {
    let n = image.width * image.height;
    let mut planes = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for i in 0..n {
        let (y, u, v) = (image.y[i], image.u[i], image.v[i]);
        let r = y + v / KV;
        let b = y + u / KU;
        let g = (y - KR * r - KB * b) / KG;
        planes[0].push(r.clamp(0.0, 1.0));
        planes[1].push(g.clamp(0.0, 1.0));
        planes[2].push(b.clamp(0.0, 1.0));
    }
    RgbImage {
        width: image.width,
        height: image.height,
        planes,
    }
}

/// Per-channel RGB difference `a - b`.
pub fn residual_rgb(a: &RgbImage, b: &RgbImage) -> Result<ChannelPlanes> {
    check_extents("residual_rgb", (a.width, a.height), (b.width, b.height))?;
    let planes = [0, 1, 2].map(|c| {
        a.planes[c]
            .iter()
            .zip(&b.planes[c])
            .map(|(x, y)| x - y)
            .collect()
    });
    Ok(ChannelPlanes {
        width: a.width,
        height: a.height,
        planes,
    })
}

/// Per-channel YUV difference `yuv(a) - yuv(b)`.
pub fn residual_yuv(a: &RgbImage, b: &RgbImage) -> Result<ChannelPlanes> {
    check_extents("residual_yuv", (a.width, a.height), (b.width, b.height))?;
    let (ya, yb) = (rgb_to_yuv(a), rgb_to_yuv(b));
    let diff = |p: &[f32], q: &[f32]| p.iter().zip(q).map(|(x, y)| x - y).collect();
    Ok(ChannelPlanes {
        width: a.width,
        height: a.height,
        planes: [
            diff(&ya.y, &yb.y),
            diff(&ya.u, &yb.u),
            diff(&ya.v, &yb.v),
        ],
    })
}

/// Which component to take from the clean image when compositing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwapMode {
    /// Luminance from clean, chrominance from degraded.
    YFromClean,
    /// Chrominance from clean, luminance from degraded.
    UvFromClean,
}

/// Composite of one image's luminance with the other's chrominance.
pub fn swap_channels(degraded: &RgbImage, clean: &RgbImage, mode: SwapMode) -> Result<RgbImage> {
    check_extents(
        "swap_channels",
        (degraded.width, degraded.height),
        (clean.width, clean.height),
    )?;
    let d = rgb_to_yuv(degraded);
    let c = rgb_to_yuv(clean);
    let mixed = match mode {
        SwapMode::YFromClean => YuvImage {
            width: d.width,
            height: d.height,
            y: c.y,
            u: d.u,
            v: d.v,
        },
        SwapMode::UvFromClean => YuvImage {
            width: d.width,
            height: d.height,
            y: d.y,
            u: c.u,
            v: c.v,
        },
    };
    Ok(yuv_to_rgb(&mixed))
}

/// Which space residual statistics are computed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalysisSpace {
    Rgb,
    Yuv,
}

impl AnalysisSpace {
    pub fn channel_labels(&self) -> [&'static str; 3] {
        match self {
            AnalysisSpace::Rgb => ["R", "G", "B"],
            AnalysisSpace::Yuv => ["Y", "U", "V"],
        }
    }
}

/// Binned distribution of degraded-minus-clean residuals, with per-channel
/// moments. Bins uniformly span `[-1, 1]`, which covers any difference of
/// in-range channels.
#[derive(Clone, Debug)]
pub struct ResidualHistogram {
    pub space: AnalysisSpace,
    pub edges: Vec<f32>,
    pub counts: [Vec<u64>; 3],
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub fn residual_histogram(
    pairs: &[(RgbImage, RgbImage)],
    space: AnalysisSpace,
    bins: usize,
) -> Result<ResidualHistogram> {
    if pairs.is_empty() {
        return Err(ColorError::EmptyInput);
    }
    if bins < 2 {
        return Err(ColorError::TooFewBins { got: bins });
    }
    let edges: Vec<f32> = (0..=bins)
        .map(|i| -1.0 + 2.0 * i as f32 / bins as f32)
        .collect();
    let mut counts = [vec![0u64; bins], vec![0u64; bins], vec![0u64; bins]];
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    let mut total = 0u64;
    for (degraded, clean) in pairs {
        let residual = match space {
            AnalysisSpace::Rgb => residual_rgb(degraded, clean)?,
            AnalysisSpace::Yuv => residual_yuv(degraded, clean)?,
        };
        total += (residual.width * residual.height) as u64;
        for c in 0..3 {
            for &value in &residual.planes[c] {
                let slot = (((value + 1.0) * 0.5 * bins as f32) as usize).min(bins - 1);
                counts[c][slot] += 1;
                sum[c] += value as f64;
                sum_sq[c] += (value as f64) * (value as f64);
            }
        }
    }
    let n = total as f64;
    let mut mean = [0.0f64; 3];
    let mut std = [0.0f64; 3];
    for c in 0..3 {
        mean[c] = sum[c] / n;
        std[c] = (sum_sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
    }
    Ok(ResidualHistogram {
        space,
        edges,
        counts,
        mean,
        std,
    })
}

impl ResidualHistogram {
    /// `channel,bin_left,bin_right,count` rows, channels in native order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("channel,bin_left,bin_right,count\n");
        let labels = self.space.channel_labels();
        for (c, label) in labels.iter().enumerate() {
            for (i, count) in self.counts[c].iter().enumerate() {
                out.push_str(&format!(
                    "{label},{},{},{count}\n",
                    self.edges[i],
                    self.edges[i + 1]
                ));
            }
        }
        out
    }
}
