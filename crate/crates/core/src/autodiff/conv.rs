use super::par;
use super::tensor::{Shape, Tensor, TensorError, Vjp};
use super::Result;

/// Geometry of a convolution layer. `padding` is symmetric zero padding for
/// the forward convolution; the transposed form interprets it as the amount
/// trimmed from the produced borders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<ConvSpec> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        };
        if in_channels == 0 || out_channels == 0 {
            return Err(TensorError::InvalidSpec {
                op: "conv_spec",
                reason: format!("channel counts must be positive, got {in_channels}->{out_channels}"),
            });
        }
        if kernel.0 == 0 || kernel.1 == 0 {
            return Err(TensorError::InvalidSpec {
                op: "conv_spec",
                reason: format!("kernel extents must be positive, got {kernel:?}"),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidSpec {
                op: "conv_spec",
                reason: "stride must be at least 1".to_string(),
            });
        }
        Ok(spec)
    }
}

fn conv_extent(
    op: &'static str,
    axis: &'static str,
    n: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = n + 2 * padding;
    if padded < kernel {
        return Err(TensorError::NonPositiveExtent {
            op,
            axis,
            got: n,
            kernel,
            stride,
            padding,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

fn deconv_extent(
    op: &'static str,
    axis: &'static str,
    n: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let grown = (n - 1) * stride + kernel;
    if grown <= 2 * padding {
        return Err(TensorError::NonPositiveExtent {
            op,
            axis,
            got: n,
            kernel,
            stride,
            padding,
        });
    }
    Ok(grown - 2 * padding)
}

// ── dense kernels ────────────────────────────────────────────────────────────
//
// All heavy math funnels through two accumulating matrix kernels plus the
// im2col/col2im reshapes. Summation order inside each output element is fixed
// (lane-split dot products, sequential k loop), so results do not depend on
// the thread count.

const TILE_N: usize = 512;
const BLOCK_M: usize = 8;

#[inline]
fn saxpy(acc: &mut [f32], k: f32, x: &[f32]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += k * *v;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])))
        + tail
}

/// `out[m, n] += a[m, kd] * b[kd, n]`, parallel over disjoint row blocks.
pub(crate) fn matmul_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, kd: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * kd);
    debug_assert_eq!(b.len(), kd * n);
    par::for_each_chunk(out, BLOCK_M * n, |blk, out_block| {
        let m0 = blk * BLOCK_M;
        let mw = out_block.len() / n;
        let mut n0 = 0;
        while n0 < n {
            let nw = (n - n0).min(TILE_N);
            let mut acc = [[0.0f32; TILE_N]; BLOCK_M];
            for kk in 0..kd {
                let brow = &b[kk * n + n0..kk * n + n0 + nw];
                for (j, lane) in acc.iter_mut().enumerate().take(mw) {
                    saxpy(&mut lane[..nw], a[(m0 + j) * kd + kk], brow);
                }
            }
            for (j, lane) in acc.iter().enumerate().take(mw) {
                let dst = &mut out_block[j * n + n0..j * n + n0 + nw];
                for (d, s) in dst.iter_mut().zip(&lane[..nw]) {
                    *d += *s;
                }
            }
            n0 += nw;
        }
    });
}

/// `out[m, kd] += a[m, n] * b[kd, n]^T`, parallel over disjoint row blocks.
pub(crate) fn matmul_nt(out: &mut [f32], a: &[f32], b: &[f32], m: usize, kd: usize, n: usize) {
    debug_assert_eq!(out.len(), m * kd);
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), kd * n);
    par::for_each_chunk(out, BLOCK_M * kd, |blk, out_block| {
        let m0 = blk * BLOCK_M;
        let mw = out_block.len() / kd;
        let mut n0 = 0;
        while n0 < n {
            let nw = (n - n0).min(TILE_N);
            for kk in 0..kd {
                let brow = &b[kk * n + n0..kk * n + n0 + nw];
                for j in 0..mw {
                    out_block[j * kd + kk] += dot(&a[(m0 + j) * n + n0..(m0 + j) * n + n0 + nw], brow);
                }
            }
            n0 += nw;
        }
    });
}

struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold `src` ([channels, height, width]) into `dst` ([rows, cols]); every
/// slot is written, out-of-image taps as zero.
fn im2col(src: &[f32], g: &Geometry, dst: &mut [f32]) {
    let n = g.cols();
    let (kh, kw) = g.kernel;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for dy in 0..kh {
            for dx in 0..kw {
                let dst_row = &mut dst[row * n..(row + 1) * n];
                for y_out in 0..g.out_h {
                    let iy = (y_out * g.stride + dy) as isize - g.padding as isize;
                    let seg = &mut dst_row[y_out * g.out_w..(y_out + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let base = dx as isize - g.padding as isize;
                        let lo = ((-base).max(0) as usize).min(g.out_w);
                        let hi = ((g.width as isize - base).max(0) as usize).min(g.out_w);
                        seg[..lo].fill(0.0);
                        if lo < hi {
                            seg[lo..hi]
                                .copy_from_slice(&src_row[(base + lo as isize) as usize..(base + hi as isize) as usize]);
                        }
                        seg[hi.max(lo)..].fill(0.0);
                    } else {
                        for (x_out, slot) in seg.iter_mut().enumerate() {
                            let ix = (x_out * g.stride + dx) as isize - g.padding as isize;
                            *slot = if ix >= 0 && ix < g.width as isize {
                                src_row[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold `cols` ([rows, cols]) back into `dst` ([channels, height, width]) by
/// accumulation; the adjoint of `im2col`. Parallel over channel planes.
fn col2im(cols: &[f32], g: &Geometry, dst: &mut [f32]) {
    let n = g.cols();
    let (kh, kw) = g.kernel;
    let taps = kh * kw;
    par::for_each_chunk(dst, g.height * g.width, |c, plane| {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = &cols[(c * taps + dy * kw + dx) * n..(c * taps + dy * kw + dx + 1) * n];
                for y_out in 0..g.out_h {
                    let iy = (y_out * g.stride + dy) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let seg = &row[y_out * g.out_w..(y_out + 1) * g.out_w];
                    let dst_row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let base = dx as isize - g.padding as isize;
                        let lo = (-base).max(0) as usize;
                        let hi = ((g.width as isize - base).max(0) as usize).min(g.out_w);
                        if lo < hi {
                            let dst_seg = &mut dst_row[(base + lo as isize) as usize..(base + hi as isize) as usize];
                            for (d, s) in dst_seg.iter_mut().zip(&seg[lo..hi]) {
                                *d += *s;
                            }
                        }
                    } else {
                        for (x_out, s) in seg.iter().enumerate() {
                            let ix = (x_out * g.stride + dx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    });
}

fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn bias_sums(grad: &[f32], batch: usize, channels: usize, plane: usize) -> Vec<f32> {
    let mut sums = vec![0.0f64; channels];
    for b in 0..batch {
        for (c, sum) in sums.iter_mut().enumerate() {
            let seg = &grad[(b * channels + c) * plane..(b * channels + c + 1) * plane];
            for v in seg {
                *sum += *v as f64;
            }
        }
    }
    sums.into_iter().map(|v| v as f32).collect()
}

// ── conv2d ───────────────────────────────────────────────────────────────────

fn check_conv_args(
    op: &'static str,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
    weight_rows: usize,
    weight_cols: usize,
) -> Result<()> {
    if input.shape().channels != spec.in_channels {
        return Err(TensorError::ChannelMismatch {
            op,
            expected: spec.in_channels,
            got: input.shape().channels,
        });
    }
    let expected_weight = Shape::new(weight_rows, weight_cols, spec.kernel.0, spec.kernel.1);
    if weight.shape() != expected_weight {
        return Err(TensorError::ShapeMismatch {
            op,
            left: weight.shape(),
            right: expected_weight,
        });
    }
    let expected_bias = Shape::new(1, spec.out_channels, 1, 1);
    if bias.shape() != expected_bias {
        return Err(TensorError::ShapeMismatch {
            op,
            left: bias.shape(),
            right: expected_bias,
        });
    }
    Ok(())
}

struct Conv2dVjp {
    spec: ConvSpec,
}

impl Vjp for Conv2dVjp {
    fn vjp(&self, parents: &[Tensor], _: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (input, weight) = (&parents[0], &parents[1]);
        let s = input.shape();
        let geom = Geometry {
            channels: s.channels,
            height: s.height,
            width: s.width,
            kernel: self.spec.kernel,
            stride: self.spec.stride,
            padding: self.spec.padding,
            out_h: conv_extent("conv2d", "height", s.height, self.spec.kernel.0, self.spec.stride, self.spec.padding)
                .expect("validated in forward"),
            out_w: conv_extent("conv2d", "width", s.width, self.spec.kernel.1, self.spec.stride, self.spec.padding)
                .expect("validated in forward"),
        };
        let (rows, n) = (geom.rows(), geom.cols());
        let co = self.spec.out_channels;
        let image = s.channels * s.plane();

        let grad_input = needs[0].then(|| {
            let wt = transpose(weight.data(), co, rows);
            let mut gi = vec![0.0f32; input.numel()];
            let mut cols = vec![0.0f32; rows * n];
            for b in 0..s.batch {
                cols.fill(0.0);
                matmul_acc(&mut cols, &wt, &g[b * co * n..(b + 1) * co * n], rows, co, n);
                col2im(&cols, &geom, &mut gi[b * image..(b + 1) * image]);
            }
            gi
        });

        let grad_weight = needs[1].then(|| {
            let mut gw = vec![0.0f32; weight.numel()];
            let mut unfolded = vec![0.0f32; rows * n];
            for b in 0..s.batch {
                im2col(&input.data()[b * image..(b + 1) * image], &geom, &mut unfolded);
                matmul_nt(&mut gw, &g[b * co * n..(b + 1) * co * n], &unfolded, co, rows, n);
            }
            gw
        });

        let grad_bias = needs[2].then(|| bias_sums(g, s.batch, co, n));

        vec![grad_input, grad_weight, grad_bias]
    }
}

/// 2-D cross-correlation over zero-padded input. `weight` is laid out
/// `[out_channels, in_channels, kh, kw]`, `bias` `[1, out_channels, 1, 1]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    check_conv_args("conv2d", input, weight, bias, spec, spec.out_channels, spec.in_channels)?;
    let s = input.shape();
    let out_h = conv_extent("conv2d", "height", s.height, spec.kernel.0, spec.stride, spec.padding)?;
    let out_w = conv_extent("conv2d", "width", s.width, spec.kernel.1, spec.stride, spec.padding)?;
    let geom = Geometry {
        channels: s.channels,
        height: s.height,
        width: s.width,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        out_h,
        out_w,
    };
    let (rows, n) = (geom.rows(), geom.cols());
    let co = spec.out_channels;
    let image = s.channels * s.plane();
    let out_shape = Shape::new(s.batch, co, out_h, out_w);

    let mut out = vec![0.0f32; out_shape.numel()];
    let mut unfolded = vec![0.0f32; rows * n];
    for b in 0..s.batch {
        im2col(&input.data()[b * image..(b + 1) * image], &geom, &mut unfolded);
        let out_b = &mut out[b * co * n..(b + 1) * co * n];
        for (c, chunk) in out_b.chunks_mut(n).enumerate() {
            chunk.fill(bias.data()[c]);
        }
        matmul_acc(out_b, weight.data(), &unfolded, co, rows, n);
    }
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(Conv2dVjp { spec: *spec }),
    ))
}

// ── conv_transpose2d ─────────────────────────────────────────────────────────

struct ConvTranspose2dVjp {
    spec: ConvSpec,
}

impl Vjp for ConvTranspose2dVjp {
    fn vjp(&self, parents: &[Tensor], _: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (input, weight) = (&parents[0], &parents[1]);
        let s = input.shape();
        let co = self.spec.out_channels;
        let out_h = deconv_extent("conv_transpose2d", "height", s.height, self.spec.kernel.0, self.spec.stride, self.spec.padding)
            .expect("validated in forward");
        let out_w = deconv_extent("conv_transpose2d", "width", s.width, self.spec.kernel.1, self.spec.stride, self.spec.padding)
            .expect("validated in forward");
        // Gradients flow through the adjoint: a forward convolution from the
        // produced extents back to the input extents.
        let geom = Geometry {
            channels: co,
            height: out_h,
            width: out_w,
            kernel: self.spec.kernel,
            stride: self.spec.stride,
            padding: self.spec.padding,
            out_h: s.height,
            out_w: s.width,
        };
        let (rows, n) = (geom.rows(), geom.cols());
        let ci = self.spec.in_channels;
        let g_image = co * out_h * out_w;

        let needs_unfolded = needs[0] || needs[1];
        let mut unfolded = vec![0.0f32; if needs_unfolded { rows * n } else { 0 }];

        let mut grad_input = needs[0].then(|| vec![0.0f32; input.numel()]);
        let mut grad_weight = needs[1].then(|| vec![0.0f32; weight.numel()]);
        for b in 0..s.batch {
            if needs_unfolded {
                im2col(&g[b * g_image..(b + 1) * g_image], &geom, &mut unfolded);
            }
            if let Some(gi) = grad_input.as_mut() {
                matmul_acc(
                    &mut gi[b * ci * n..(b + 1) * ci * n],
                    weight.data(),
                    &unfolded,
                    ci,
                    rows,
                    n,
                );
            }
            if let Some(gw) = grad_weight.as_mut() {
                matmul_nt(
                    gw,
                    &input.data()[b * ci * n..(b + 1) * ci * n],
                    &unfolded,
                    ci,
                    rows,
                    n,
                );
            }
        }

        let grad_bias = needs[2].then(|| bias_sums(g, s.batch, co, out_h * out_w));

        vec![grad_input, grad_weight, grad_bias]
    }
}

/// Transposed convolution (the adjoint of `conv2d` with the same spec).
/// `weight` is laid out `[in_channels, out_channels, kh, kw]`; a weight used
/// by `conv2d` as `[co, ci, kh, kw]` is therefore directly reusable here to
/// map a `co`-channel tensor back to `ci` channels.
pub fn conv_transpose2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
) -> Result<Tensor> {
    check_conv_args(
        "conv_transpose2d",
        input,
        weight,
        bias,
        spec,
        spec.in_channels,
        spec.out_channels,
    )?;
    let s = input.shape();
    let out_h = deconv_extent("conv_transpose2d", "height", s.height, spec.kernel.0, spec.stride, spec.padding)?;
    let out_w = deconv_extent("conv_transpose2d", "width", s.width, spec.kernel.1, spec.stride, spec.padding)?;
    let co = spec.out_channels;
    let ci = spec.in_channels;
    let geom = Geometry {
        channels: co,
        height: out_h,
        width: out_w,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        out_h: s.height,
        out_w: s.width,
    };
    let (rows, n) = (geom.rows(), geom.cols());
    let out_shape = Shape::new(s.batch, co, out_h, out_w);
    let out_plane = out_h * out_w;

    // Scatter form: out = fold(W^T x), where fold is the adjoint of im2col.
    let wt = transpose(weight.data(), ci, rows);
    let mut out = vec![0.0f32; out_shape.numel()];
    let mut cols = vec![0.0f32; rows * n];
    for b in 0..s.batch {
        cols.fill(0.0);
        matmul_acc(
            &mut cols,
            &wt,
            &input.data()[b * ci * n..(b + 1) * ci * n],
            rows,
            ci,
            n,
        );
        let out_b = &mut out[b * co * out_plane..(b + 1) * co * out_plane];
        col2im(&cols, &geom, out_b);
        for (c, chunk) in out_b.chunks_mut(out_plane).enumerate() {
            let bv = bias.data()[c];
            for v in chunk {
                *v += bv;
            }
        }
    }
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(ConvTranspose2dVjp { spec: *spec }),
    ))
}
