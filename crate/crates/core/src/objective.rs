//! Training objectives (MSE + SSIM composites) and evaluation metrics
//! (PSNR, SSIM).
//!
//! Loss functions build autodiff graphs; metrics are plain numbers computed
//! on images. Both share the same SSIM definition: 11x11 Gaussian window,
//! sigma 1.5, stability constants 0.01^2 and 0.03^2, dynamic range 1, valid
//! (unpadded) windows only.

use thiserror::Error;

use crate::autodiff::{
    self, add, add_scalar, conv2d, mean_all, mul, no_grad, scale, slice_channels, sub, ConvSpec,
    Shape, Tensor, TensorError,
};
use crate::colorspace::RgbImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f32 = 0.01 * 0.01;
pub const SSIM_C2: f32 = 0.03 * 0.03;
/// MSE below this reports the PSNR cap instead of a diverging logarithm.
pub const PSNR_MSE_FLOOR: f64 = 1e-10;
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("ssim: spatial extents {height}x{width} are smaller than the {window}x{window} window")]
    WindowTooLarge {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("{op}: image extents differ: {left_width}x{left_height} vs {right_width}x{right_height}")]
    ExtentMismatch {
        op: &'static str,
        left_width: usize,
        left_height: usize,
        right_width: usize,
        right_height: usize,
    },
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

/// Balance between the luminance and chrominance losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.6 }
    }
}

/// Which terms enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Mse,
    Ssim,
    MseSsim,
}

/// Scalar summary of one loss evaluation. Fields come straight from the
/// loss graph's own f32 scalars, so `l_y == mse_y + ssim_y` and
/// `l_total == l_y + alpha * l_uv` hold bitwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_total: f32,
    pub l_y: f32,
    pub l_uv: f32,
    pub mse_y: f32,
    pub ssim_y: f32,
    pub mse_uv: f32,
    pub ssim_uv: f32,
}

/// PSNR and SSIM of one image pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean squared difference over all elements.
pub fn mse_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = sub(a, b)?;
    Ok(mean_all(&mul(&d, &d)?))
}

fn gaussian_window() -> Tensor {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut total = 0.0f64;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let g = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            total += g;
            w.push(g);
        }
    }
    let data: Vec<f32> = w.into_iter().map(|g| (g / total) as f32).collect();
    Tensor::leaf(Shape::new(1, 1, SSIM_WINDOW, SSIM_WINDOW), data, false)
        .expect("window dimensions are static")
}

/// Mean SSIM index of one single-channel pair as a graph node.
///
/// The numerator and denominator are arranged so that on bitwise-identical
/// inputs they are bitwise equal (`2x` vs `x + x`), making the index exactly
/// 1 and its gradient exactly zero there; training on a perfectly predicted
/// batch then provably leaves parameters untouched.
fn ssim_plane(a: &Tensor, b: &Tensor, window: &Tensor) -> Result<Tensor> {
    let spec = ConvSpec::new(1, 1, (SSIM_WINDOW, SSIM_WINDOW), 1, 0)?;
    let zero_bias = Tensor::zeros(Shape::new(1, 1, 1, 1));
    let w = |t: &Tensor| conv2d(t, window, &zero_bias, &spec);

    let mu1 = w(a)?;
    let mu2 = w(b)?;
    let mu1_sq = mul(&mu1, &mu1)?;
    let mu2_sq = mul(&mu2, &mu2)?;
    let mu12 = mul(&mu1, &mu2)?;

    let sigma1_sq = sub(&w(&mul(a, a)?)?, &mu1_sq)?;
    let sigma2_sq = sub(&w(&mul(b, b)?)?, &mu2_sq)?;
    let sigma12 = sub(&w(&mul(a, b)?)?, &mu12)?;

    let num = mul(
        &add_scalar(&scale(&mu12, 2.0), SSIM_C1),
        &add_scalar(&scale(&sigma12, 2.0), SSIM_C2),
    )?;
    let den = mul(
        &add_scalar(&add(&mu1_sq, &mu2_sq)?, SSIM_C1),
        &add_scalar(&add(&sigma1_sq, &sigma2_sq)?, SSIM_C2),
    )?;
    Ok(mean_all(&autodiff::div(&num, &den)?))
}

/// Mean SSIM index over all windows, channels averaged. Inputs must lie in
/// [0, 1] (shift chroma by +0.5 before calling).
pub fn ssim_index(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "ssim",
            left: s,
            right: b.shape(),
        }
        .into());
    }
    if s.height < SSIM_WINDOW || s.width < SSIM_WINDOW {
        return Err(ObjectiveError::WindowTooLarge {
            height: s.height,
            width: s.width,
            window: SSIM_WINDOW,
        });
    }
    let window = gaussian_window();
    let mut acc: Option<Tensor> = None;
    for c in 0..s.channels {
        let pc = ssim_plane(
            &slice_channels(a, c, 1)?,
            &slice_channels(b, c, 1)?,
            &window,
        )?;
        acc = Some(match acc {
            None => pc,
            Some(t) => add(&t, &pc)?,
        });
    }
    Ok(scale(
        &acc.expect("channels >= 1 by Shape construction"),
        1.0 / s.channels as f32,
    ))
}

/// `1 - ssim_index`, the structural dissimilarity loss.
pub fn ssim_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(sub(&Tensor::scalar(1.0), &ssim_index(a, b)?)?)
}

/// One component's loss graph plus its term values.
pub struct ComponentLoss {
    pub total: Tensor,
    pub mse: f32,
    pub ssim: f32,
}

/// MSE and/or structural-dissimilarity terms for one prediction/target pair,
/// already in [0, 1] (`shift` moves symmetric chroma there first).
pub fn component_loss(pred: &Tensor, target: &Tensor, mode: LossMode, shift: f32) -> Result<ComponentLoss> {
    let mse_t = match mode {
        LossMode::Ssim => None,
        _ => Some(mse_loss(pred, target)?),
    };
    let ssim_t = match mode {
        LossMode::Mse => None,
        _ => Some(ssim_loss(
            &add_scalar(pred, shift),
            &add_scalar(target, shift),
        )?),
    };
    let (total, mse, ssim) = match (mse_t, ssim_t) {
        (Some(m), Some(s)) => {
            let (mv, sv) = (m.item(), s.item());
            (add(&m, &s)?, mv, sv)
        }
        (Some(m), None) => {
            let mv = m.item();
            (m, mv, 0.0)
        }
        (None, Some(s)) => {
            let sv = s.item();
            (s, 0.0, sv)
        }
        (None, None) => unreachable!("every mode keeps at least one term"),
    };
    Ok(ComponentLoss { total, mse, ssim })
}

/// Combined dual-decoder objective: `L = L_Y + alpha * L_UV`, with the
/// chrominance loss shifted into [0, 1] for its SSIM term.
pub fn dual_loss(
    out_y: &Tensor,
    target_y: &Tensor,
    out_uv: &Tensor,
    target_uv: &Tensor,
    weights: LossWeights,
    mode: LossMode,
) -> Result<(Tensor, LossReport)> {
    let y = component_loss(out_y, target_y, mode, 0.0)?;
    let uv = component_loss(out_uv, target_uv, mode, 0.5)?;
    let total = add(&y.total, &scale(&uv.total, weights.alpha))?;
    let report = LossReport {
        l_total: total.item(),
        l_y: y.total.item(),
        l_uv: uv.total.item(),
        mse_y: y.mse,
        ssim_y: y.ssim,
        mse_uv: uv.mse,
        ssim_uv: uv.ssim,
    };
    Ok((total, report))
}

/// Whole-image objective for single-decoder variants; reported in the
/// luminance slots with `l_uv = 0`.
pub fn single_loss(out: &Tensor, target: &Tensor, mode: LossMode, shift: f32) -> Result<(Tensor, LossReport)> {
    let c = component_loss(out, target, mode, shift)?;
    let report = LossReport {
        l_total: c.total.item(),
        l_y: c.total.item(),
        l_uv: 0.0,
        mse_y: c.mse,
        ssim_y: c.ssim,
        mse_uv: 0.0,
        ssim_uv: 0.0,
    };
    Ok((c.total, report))
}

fn check_extents(op: &'static str, a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(ObjectiveError::ExtentMismatch {
            op,
            left_width: a.width(),
            left_height: a.height(),
            right_width: b.width(),
            right_height: b.height(),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all three channels, dynamic range
/// 1, capped at 100 dB for (near-)identical inputs.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_extents("psnr", a, b)?;
    let mut sum = 0.0f64;
    for c in 0..3 {
        for (x, y) in a.plane(c).iter().zip(b.plane(c)) {
            let d = *x as f64 - *y as f64;
            sum += d * d;
        }
    }
    let mse = sum / (3 * a.width() * a.height()) as f64;
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean SSIM of an RGB pair; evaluation-only twin of [`ssim_loss`].
pub fn ssim_metric(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_extents("ssim", a, b)?;
    let (ta, tb) = (a.to_tensor(), b.to_tensor());
    let index = no_grad(|| ssim_index(&ta, &tb))?;
    Ok(index.item() as f64)
}

/// PSNR and SSIM in one report.
pub fn evaluate_pair(restored: &RgbImage, clean: &RgbImage) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(restored, clean)?,
        ssim: ssim_metric(restored, clean)?,
    })
}
