//! Double-precision reference implementations and deterministic input
//! generators backing the integration tests. Everything here is written as
//! plain nested loops over f64 so it shares no code path (and no rounding
//! behaviour) with the production graph it checks.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use a2net_core::autodiff::{Shape, Tensor};
use a2net_core::colorspace::RgbImage;
use a2net_core::net::{Model, NetworkConfig};
use a2net_core::objective::{
    LossMode, LossWeights, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};
use a2net_core::training::evaluate_loss;

/// Single-image CHW plane stack in f64.
#[derive(Clone, Debug)]
pub struct PlanarF64 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PlanarF64 {
    pub fn new(channels: usize, height: usize, width: usize) -> PlanarF64 {
        PlanarF64 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_tensor(t: &Tensor) -> PlanarF64 {
        let s = t.shape();
        assert_eq!(s.batch, 1, "reference path handles single images");
        PlanarF64 {
            channels: s.channels,
            height: s.height,
            width: s.width,
            data: t.data().iter().map(|v| *v as f64).collect(),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    fn map(mut self, f: impl Fn(f64) -> f64) -> PlanarF64 {
        for v in &mut self.data {
            *v = f(*v);
        }
        self
    }

    fn slice_channels(&self, start: usize, count: usize) -> PlanarF64 {
        let plane = self.height * self.width;
        PlanarF64 {
            channels: count,
            height: self.height,
            width: self.width,
            data: self.data[start * plane..(start + count) * plane].to_vec(),
        }
    }
}

/// One parameter tensor widened to f64.
#[derive(Clone, Debug)]
pub struct ParamF64 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

pub type ParamsF64 = IndexMap<String, ParamF64>;

/// Copies every model parameter into f64 so finite differences can probe
/// the loss far below f32 resolution.
pub fn params_f64(model: &Model) -> ParamsF64 {
    model
        .params()
        .iter()
        .map(|(name, t)| {
            let s = t.shape();
            (
                name.clone(),
                ParamF64 {
                    dims: [s.batch, s.channels, s.height, s.width],
                    data: t.data().iter().map(|v| *v as f64).collect(),
                },
            )
        })
        .collect()
}

pub fn conv_f64(x: &PlanarF64, w: &ParamF64, b: &ParamF64, stride: usize, pad: usize) -> PlanarF64 {
    let [co, ci, kh, kw] = w.dims;
    assert_eq!(ci, x.channels, "weight/input channel mismatch");
    let oh = (x.height + 2 * pad - kh) / stride + 1;
    let ow = (x.width + 2 * pad - kw) / stride + 1;
    let mut out = PlanarF64::new(co, oh, ow);
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data[o];
                for i in 0..ci {
                    for ky in 0..kh {
                        let sy = (oy * stride + ky) as isize - pad as isize;
                        if sy < 0 || sy >= x.height as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let sx = (ox * stride + kx) as isize - pad as isize;
                            if sx < 0 || sx >= x.width as isize {
                                continue;
                            }
                            acc += x.at(i, sy as usize, sx as usize)
                                * w.data[((o * ci + i) * kh + ky) * kw + kx];
                        }
                    }
                }
                *out.at_mut(o, oy, ox) = acc;
            }
        }
    }
    out
}

pub fn deconv_f64(x: &PlanarF64, w: &ParamF64, b: &ParamF64, stride: usize) -> PlanarF64 {
    let [ci, co, kh, kw] = w.dims;
    assert_eq!(ci, x.channels, "weight/input channel mismatch");
    let oh = (x.height - 1) * stride + kh;
    let ow = (x.width - 1) * stride + kw;
    let mut out = PlanarF64::new(co, oh, ow);
    for o in 0..co {
        for v in 0..oh * ow {
            out.data[o * oh * ow + v] = b.data[o];
        }
    }
    for i in 0..ci {
        for y in 0..x.height {
            for xx in 0..x.width {
                let v = x.at(i, y, xx);
                for o in 0..co {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            *out.at_mut(o, y * stride + ky, xx * stride + kx) +=
                                v * w.data[((i * co + o) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn concat_f64(parts: &[&PlanarF64]) -> PlanarF64 {
    let (h, w) = (parts[0].height, parts[0].width);
    let mut data = Vec::new();
    let mut channels = 0;
    for p in parts {
        assert_eq!((p.height, p.width), (h, w), "concat extent mismatch");
        channels += p.channels;
        data.extend_from_slice(&p.data);
    }
    PlanarF64 {
        channels,
        height: h,
        width: w,
        data,
    }
}

/// Branch decisions (relu and clamp pass/block) recorded during one forward
/// pass, in evaluation order.
///
/// The production graph differentiates the piecewise-linear branch selected
/// at the evaluation point, while a finite difference on the raw function
/// also measures branch switches inside the probe interval; near a kink the
/// two legitimately disagree at any step size. Replaying a frozen tape
/// removes the switches, so the probe measures exactly the derivative the
/// graph reports.
#[derive(Clone, Debug, Default)]
pub struct ActivationTape {
    masks: Vec<Vec<bool>>,
}

enum TapeState<'t> {
    Off,
    Record(&'t mut ActivationTape),
    Replay { tape: &'t ActivationTape, cursor: usize },
}

struct RefNet<'a, 't> {
    config: NetworkConfig,
    params: &'a ParamsF64,
    tape: std::cell::RefCell<TapeState<'t>>,
}

impl RefNet<'_, '_> {
    fn p(&self, name: &str) -> &ParamF64 {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("reference net: missing parameter {name}"))
    }

    /// Applies a two-branch activation: `keep(v)` selects the pass branch
    /// (identity), anything else maps through `blocked(v)`.
    fn gated(
        &self,
        mut x: PlanarF64,
        keep: impl Fn(f64) -> bool,
        blocked: impl Fn(f64) -> f64,
    ) -> PlanarF64 {
        match &mut *self.tape.borrow_mut() {
            TapeState::Off => {
                for v in &mut x.data {
                    if !keep(*v) {
                        *v = blocked(*v);
                    }
                }
            }
            TapeState::Record(tape) => {
                let mask: Vec<bool> = x.data.iter().map(|v| keep(*v)).collect();
                for (v, pass) in x.data.iter_mut().zip(&mask) {
                    if !pass {
                        *v = blocked(*v);
                    }
                }
                tape.masks.push(mask);
            }
            TapeState::Replay { tape, cursor } => {
                let mask = tape
                    .masks
                    .get(*cursor)
                    .expect("replayed forward diverged from the recorded one");
                *cursor += 1;
                assert_eq!(mask.len(), x.data.len(), "tape entry size mismatch");
                for (v, pass) in x.data.iter_mut().zip(mask) {
                    if !pass {
                        *v = blocked(*v);
                    }
                }
            }
        }
        x
    }

    fn relu(&self, x: PlanarF64) -> PlanarF64 {
        self.gated(x, |v| v > 0.0, |_| 0.0)
    }

    fn clamp(&self, x: PlanarF64, lo: f64, hi: f64) -> PlanarF64 {
        self.gated(x, move |v| (lo..=hi).contains(&v), move |v| v.clamp(lo, hi))
    }

    fn conv_block(&self, x: &PlanarF64, name: &str, stride: usize, pad: usize) -> PlanarF64 {
        self.relu(conv_f64(
            x,
            self.p(&format!("{name}.weight")),
            self.p(&format!("{name}.bias")),
            stride,
            pad,
        ))
    }

    fn fuse(&self, name: &str, inputs: &[&PlanarF64]) -> PlanarF64 {
        let cat = concat_f64(inputs);
        self.conv_block(&cat, name, 1, 1)
    }

    fn encode(&self, x: &PlanarF64) -> Vec<PlanarF64> {
        let mut f = self.conv_block(x, "encoder.stem", 1, 1);
        let mut laterals = vec![f.clone()];
        for l in 1..=self.config.levels {
            let name = format!("encoder.l{l}");
            let a = self.conv_block(&f, &format!("{name}.down"), 2, 1);
            let b1 = self.conv_block(&a, &format!("{name}.adj1"), 1, 1);
            let b2 = self.conv_block(&b1, &format!("{name}.adj2"), 1, 1);
            f = if self.config.variant.aggregates() {
                self.fuse(&format!("{name}.fuse"), &[&b1, &b2])
            } else {
                self.fuse(&format!("{name}.fuse"), &[&b2])
            };
            laterals.push(f.clone());
        }
        laterals
    }

    fn decode(&self, prefix: &str, laterals: &[PlanarF64]) -> PlanarF64 {
        let mut g = laterals[self.config.levels].clone();
        for l in (1..=self.config.levels).rev() {
            let name = format!("{prefix}.l{l}");
            let u = self.relu(deconv_f64(
                &g,
                self.p(&format!("{name}.up.weight")),
                self.p(&format!("{name}.up.bias")),
                2,
            ));
            let u1 = self.conv_block(&u, &format!("{name}.adj1"), 1, 1);
            let u2 = self.conv_block(&u1, &format!("{name}.adj2"), 1, 1);
            let lateral = &laterals[l - 1];
            g = if self.config.variant.aggregates() {
                self.fuse(&format!("{name}.fuse"), &[&u1, &u2, lateral])
            } else {
                self.fuse(&format!("{name}.fuse"), &[&u2, lateral])
            };
        }
        conv_f64(
            &g,
            self.p(&format!("{prefix}.head.weight")),
            self.p(&format!("{prefix}.head.bias")),
            1,
            1,
        )
        .map(f64::tanh)
    }

    fn forward(&self, input: &PlanarF64) -> PlanarF64 {
        let laterals = self.encode(input);
        if self.config.variant.is_dual() {
            let r_y = self.decode("decoder_y", &laterals);
            let r_uv = self.decode("decoder_uv", &laterals);
            let y = input.slice_channels(0, 1);
            let uv = input.slice_channels(1, 2);
            let sum_y = PlanarF64 {
                data: y.data.iter().zip(&r_y.data).map(|(a, b)| a + b).collect(),
                ..y
            };
            let sum_uv = PlanarF64 {
                data: uv.data.iter().zip(&r_uv.data).map(|(a, b)| a + b).collect(),
                ..uv
            };
            let out_y = self.clamp(sum_y, 0.0, 1.0);
            let out_uv = self.clamp(sum_uv, -0.5, 0.5);
            concat_f64(&[&out_y, &out_uv])
        } else {
            let r = self.decode("decoder", &laterals);
            let plane = input.height * input.width;
            let mut sum = PlanarF64::new(3, input.height, input.width);
            for i in 0..3 * plane {
                sum.data[i] = input.data[i] + r.data[i];
            }
            if self.config.variant.expects_yuv() {
                let y = self.clamp(sum.slice_channels(0, 1), 0.0, 1.0);
                let uv = self.clamp(sum.slice_channels(1, 2), -0.5, 0.5);
                concat_f64(&[&y, &uv])
            } else {
                self.clamp(sum, 0.0, 1.0)
            }
        }
    }
}

/// Reference forward pass of a model described by `(config, params)`.
pub fn forward_f64(config: NetworkConfig, params: &ParamsF64, input: &PlanarF64) -> PlanarF64 {
    RefNet {
        config,
        params,
        tape: std::cell::RefCell::new(TapeState::Off),
    }
    .forward(input)
}

fn gaussian_window_f64() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut total = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let g = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            total += g;
            w.push(g);
        }
    }
    w.into_iter().map(|g| g / total).collect()
}

/// Direct sliding-window SSIM of two planes, optionally shifted first.
/// Valid windows only; Gaussian weights, the standard stabilizers.
pub fn ssim_plane_f64(a: &[f64], b: &[f64], height: usize, width: usize, shift: f64) -> f64 {
    assert!(height >= SSIM_WINDOW && width >= SSIM_WINDOW, "plane too small");
    let win = gaussian_window_f64();
    let (c1, c2) = (SSIM_C1 as f64, SSIM_C2 as f64);
    let mut total = 0.0;
    let mut count = 0usize;
    for wy in 0..=height - SSIM_WINDOW {
        for wx in 0..=width - SSIM_WINDOW {
            let (mut mu1, mut mu2) = (0.0, 0.0);
            let (mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0);
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let g = win[ky * SSIM_WINDOW + kx];
                    let va = a[(wy + ky) * width + wx + kx] + shift;
                    let vb = b[(wy + ky) * width + wx + kx] + shift;
                    mu1 += g * va;
                    mu2 += g * vb;
                    s11 += g * va * va;
                    s22 += g * vb * vb;
                    s12 += g * va * vb;
                }
            }
            let sigma1 = s11 - mu1 * mu1;
            let sigma2 = s22 - mu2 * mu2;
            let sigma12 = s12 - mu1 * mu2;
            total += ((2.0 * mu1 * mu2 + c1) * (2.0 * sigma12 + c2))
                / ((mu1 * mu1 + mu2 * mu2 + c1) * (sigma1 + sigma2 + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Direct SSIM of two RGB images (channel-averaged), for checking the
/// production metric.
pub fn ssim_reference(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!((a.width(), a.height()), (b.width(), b.height()));
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.plane(c).iter().map(|v| *v as f64).collect();
        let pb: Vec<f64> = b.plane(c).iter().map(|v| *v as f64).collect();
        total += ssim_plane_f64(&pa, &pb, a.height(), a.width(), 0.0);
    }
    total / 3.0
}

fn mse_f64(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

fn component_f64(pred: &PlanarF64, target: &PlanarF64, mode: LossMode, shift: f64) -> f64 {
    let mse = match mode {
        LossMode::Ssim => 0.0,
        _ => mse_f64(&pred.data, &target.data),
    };
    let ssim = match mode {
        LossMode::Mse => 0.0,
        _ => {
            let mut total = 0.0;
            let plane = pred.height * pred.width;
            for c in 0..pred.channels {
                total += ssim_plane_f64(
                    &pred.data[c * plane..(c + 1) * plane],
                    &target.data[c * plane..(c + 1) * plane],
                    pred.height,
                    pred.width,
                    shift,
                );
            }
            1.0 - total / pred.channels as f64
        }
    };
    mse + ssim
}

/// Reference objective matching the production loss routing: YUV-space
/// models score Y and shifted UV separately with the alpha balance, RGB
/// models score the whole stack.
pub fn loss_f64(
    config: NetworkConfig,
    output: &PlanarF64,
    target: &PlanarF64,
    weights: LossWeights,
    mode: LossMode,
) -> f64 {
    if config.variant.expects_yuv() {
        let l_y = component_f64(
            &output.slice_channels(0, 1),
            &target.slice_channels(0, 1),
            mode,
            0.0,
        );
        let l_uv = component_f64(
            &output.slice_channels(1, 2),
            &target.slice_channels(1, 2),
            mode,
            0.5,
        );
        l_y + weights.alpha as f64 * l_uv
    } else {
        component_f64(output, target, mode, 0.0)
    }
}

/// Reference end-to-end loss of the model `(config, params)` on one input.
pub fn forward_loss_f64(
    config: NetworkConfig,
    params: &ParamsF64,
    input: &PlanarF64,
    target: &PlanarF64,
    weights: LossWeights,
    mode: LossMode,
) -> f64 {
    let out = forward_f64(config, params, input);
    loss_f64(config, &out, target, weights, mode)
}

/// Runs the reference forward once, recording every relu and clamp branch
/// decision. The returned tape freezes those branches for later probes.
pub fn record_tape(config: NetworkConfig, params: &ParamsF64, input: &PlanarF64) -> ActivationTape {
    let mut tape = ActivationTape::default();
    RefNet {
        config,
        params,
        tape: std::cell::RefCell::new(TapeState::Record(&mut tape)),
    }
    .forward(input);
    tape
}

/// Reference loss with activation branches pinned to a recorded tape. At the
/// recording point this equals `forward_loss_f64`; nearby it evaluates the
/// smooth branch the graph's backward pass differentiates. The loss terms
/// themselves have no branches, so only the forward needs the tape.
pub fn forward_loss_frozen(
    config: NetworkConfig,
    params: &ParamsF64,
    input: &PlanarF64,
    target: &PlanarF64,
    weights: LossWeights,
    mode: LossMode,
    tape: &ActivationTape,
) -> f64 {
    let net = RefNet {
        config,
        params,
        tape: std::cell::RefCell::new(TapeState::Replay { tape, cursor: 0 }),
    };
    let out = net.forward(input);
    if let TapeState::Replay { cursor, .. } = &*net.tape.borrow() {
        assert_eq!(*cursor, tape.masks.len(), "forward consumed a partial tape");
    }
    loss_f64(config, &out, target, weights, mode)
}

/// Uniform random tensor on `[lo, hi]`, deterministic under `seed`.
pub fn tensor_uniform(shape: Shape, lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..=hi)).collect();
    Tensor::leaf(shape, data, false).expect("length matches shape")
}

/// Random single-image input valid for a model in the given color space,
/// kept away from the clamp boundaries so small residuals stay interior.
pub fn interior_model_input(height: usize, width: usize, yuv: bool, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = height * width;
    let mut data = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        let (lo, hi) = if yuv && c > 0 {
            (-0.3, 0.3)
        } else {
            (0.2, 0.8)
        };
        for _ in 0..plane {
            data.push(rng.gen_range(lo..=hi));
        }
    }
    Tensor::leaf(Shape::new(1, 3, height, width), data, false).expect("length matches shape")
}

/// Uniform random RGB image, full [0, 1] range.
pub fn rgb_uniform(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planes = [0, 1, 2].map(|_| (0..width * height).map(|_| rng.gen_range(0.0..=1.0)).collect());
    RgbImage::from_planes(width, height, planes).expect("values drawn in range")
}

/// Moves every residual head off its zero initialization with small
/// deterministic values, so gradients reach the whole trunk.
pub fn nudge_heads(model: &mut Model, scale: f32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads: Vec<(String, usize)> = model
        .params()
        .iter()
        .filter(|(name, _)| name.contains(".head."))
        .map(|(name, t)| (name.clone(), t.numel()))
        .collect();
    for (name, numel) in heads {
        let data = (0..numel).map(|_| rng.gen_range(-scale..=scale)).collect();
        model.set_param(&name, data).expect("head exists");
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub skipped_small: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Central-difference check of every parameter tensor against the autodiff
/// gradient, probing `samples_per_tensor` elements of each. Differences are
/// evaluated on the f64 reference model so the probe resolution is far
/// below f32 rounding, with relu and clamp branches frozen at the base
/// point; that makes the probed function smooth, and its derivative is the
/// one the graph reports. Gradients with magnitude at most `gate` are
/// skipped. A probe missing `tol` is retried once at `step / 8` to shed
/// truncation error before it may stand as a failure.
pub fn check_gradients(
    model: &Model,
    input: &Tensor,
    target: &Tensor,
    weights: LossWeights,
    mode: LossMode,
    samples_per_tensor: usize,
    step: f64,
    gate: f64,
    tol: f64,
    seed: u64,
) -> GradReport {
    let output = model.forward(input).expect("forward");
    let (loss, _) = evaluate_loss(model, &output, target, weights, mode).expect("loss");
    loss.backward().expect("backward");

    let mut params = params_f64(model);
    let config = *model.config();
    let input_f = PlanarF64::from_tensor(input);
    let target_f = PlanarF64::from_tensor(target);
    let tape = record_tape(config, &params, &input_f);

    // The reference model must agree with the production graph before its
    // finite differences mean anything.
    let ref_loss = forward_loss_f64(config, &params, &input_f, &target_f, weights, mode);
    let graph_loss = loss.item() as f64;
    assert!(
        (ref_loss - graph_loss).abs() <= 1e-4 * graph_loss.abs().max(1e-3),
        "reference loss {ref_loss} disagrees with graph loss {graph_loss}"
    );

    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        checked: 0,
        skipped_small: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    let probe = |params: &mut ParamsF64, name: &str, idx: usize, h: f64| -> f64 {
        let original = params.get(name).unwrap().data[idx];
        params.get_mut(name).unwrap().data[idx] = original + h;
        let up = forward_loss_frozen(config, params, &input_f, &target_f, weights, mode, &tape);
        params.get_mut(name).unwrap().data[idx] = original - h;
        let down = forward_loss_frozen(config, params, &input_f, &target_f, weights, mode, &tape);
        params.get_mut(name).unwrap().data[idx] = original;
        (up - down) / (2.0 * h)
    };
    for name in names {
        let grad = model
            .params()
            .get(&name)
            .unwrap()
            .grad()
            .expect("backward populated every trainable leaf");
        let numel = grad.len();
        let mut indices: Vec<usize> = (0..numel).collect();
        if numel > samples_per_tensor {
            for i in 0..samples_per_tensor {
                let j = rng.gen_range(i..numel);
                indices.swap(i, j);
            }
            indices.truncate(samples_per_tensor);
        }
        for idx in indices {
            let analytic = grad[idx] as f64;
            if analytic.abs() <= gate {
                report.skipped_small += 1;
                continue;
            }
            let fd = probe(&mut params, &name, idx, step);
            let rel_of = |fd: f64| (analytic - fd).abs() / analytic.abs().max(fd.abs());
            let mut rel = rel_of(fd);
            if rel > tol {
                rel = rel.min(rel_of(probe(&mut params, &name, idx, step / 8.0)));
            }
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{idx}]: analytic {analytic}, fd {fd}");
            }
        }
    }
    report
}
