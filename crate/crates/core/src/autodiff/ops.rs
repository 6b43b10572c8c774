use super::tensor::{Shape, Tensor, TensorError, Vjp};
use super::Result;

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Shape> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(a.shape())
}

// ── add / sub ────────────────────────────────────────────────────────────────

struct AddVjp;

impl Vjp for AddVjp {
    fn vjp(&self, _: &[Tensor], _: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.to_vec()),
        ]
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = check_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(shape, data, vec![a.clone(), b.clone()], Box::new(AddVjp)))
}

struct SubVjp;

impl Vjp for SubVjp {
    fn vjp(&self, _: &[Tensor], _: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.iter().map(|v| -v).collect()),
        ]
    }
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = check_same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(shape, data, vec![a.clone(), b.clone()], Box::new(SubVjp)))
}

// ── mul / div ────────────────────────────────────────────────────────────────

struct MulVjp;

impl Vjp for MulVjp {
    fn vjp(&self, parents: &[Tensor], _: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let (a, b) = (parents[0].data(), parents[1].data());
        vec![
            needs[0].then(|| g.iter().zip(b).map(|(gv, bv)| gv * bv).collect()),
            needs[1].then(|| g.iter().zip(a).map(|(gv, av)| gv * av).collect()),
        ]
    }
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = check_same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(shape, data, vec![a.clone(), b.clone()], Box::new(MulVjp)))
}

struct DivVjp;

impl Vjp for DivVjp {
    fn vjp(&self, parents: &[Tensor], out: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let b = parents[1].data();
        // d(a/b)/da = 1/b; d(a/b)/db = -out/b. Computing the second factor
        // from `out` keeps the two flows bit-symmetric when a == b.
        vec![
            needs[0].then(|| g.iter().zip(b).map(|(gv, bv)| gv / bv).collect()),
            needs[1].then(|| {
                g.iter()
                    .zip(out)
                    .zip(b)
                    .map(|((gv, ov), bv)| -(gv * ov / bv))
                    .collect()
            }),
        ]
    }
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = check_same_shape("div", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
    Ok(Tensor::from_op(shape, data, vec![a.clone(), b.clone()], Box::new(DivVjp)))
}

// ── scalar forms ─────────────────────────────────────────────────────────────

struct ScaleVjp {
    factor: f32,
}

impl Vjp for ScaleVjp {
    fn vjp(&self, _: &[Tensor], _: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| g.iter().map(|v| v * self.factor).collect())]
    }
}

pub fn scale(a: &Tensor, factor: f32) -> Tensor {
    let data = a.data().iter().map(|v| v * factor).collect();
    Tensor::from_op(a.shape(), data, vec![a.clone()], Box::new(ScaleVjp { factor }))
}

struct AddScalarVjp;

impl Vjp for AddScalarVjp {
    fn vjp(&self, _: &[Tensor], _: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| g.to_vec())]
    }
}

pub fn add_scalar(a: &Tensor, value: f32) -> Tensor {
    let data = a.data().iter().map(|v| v + value).collect();
    Tensor::from_op(a.shape(), data, vec![a.clone()], Box::new(AddScalarVjp))
}

// ── activations ──────────────────────────────────────────────────────────────

struct ReluVjp;

impl Vjp for ReluVjp {
    fn vjp(&self, _: &[Tensor], out: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            g.iter()
                .zip(out)
                .map(|(gv, ov)| if *ov > 0.0 { *gv } else { 0.0 })
                .collect()
        })]
    }
}

pub fn relu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::from_op(a.shape(), data, vec![a.clone()], Box::new(ReluVjp))
}

struct TanhVjp;

impl Vjp for TanhVjp {
    fn vjp(&self, _: &[Tensor], out: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            g.iter()
                .zip(out)
                .map(|(gv, ov)| gv * (1.0 - ov * ov))
                .collect()
        })]
    }
}

pub fn tanh_act(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|v| v.tanh()).collect();
    Tensor::from_op(a.shape(), data, vec![a.clone()], Box::new(TanhVjp))
}

struct ClampVjp {
    lo: f32,
    hi: f32,
}

impl Vjp for ClampVjp {
    fn vjp(&self, parents: &[Tensor], _: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let input = parents[0].data();
        vec![needs[0].then(|| {
            g.iter()
                .zip(input)
                .map(|(gv, iv)| {
                    if *iv >= self.lo && *iv <= self.hi {
                        *gv
                    } else {
                        0.0
                    }
                })
                .collect()
        })]
    }
}

/// Clamp to `[lo, hi]`; in-range values pass through bit-exactly.
pub fn clamp(a: &Tensor, lo: f32, hi: f32) -> Tensor {
    let data = a.data().iter().map(|v| v.max(lo).min(hi)).collect();
    Tensor::from_op(a.shape(), data, vec![a.clone()], Box::new(ClampVjp { lo, hi }))
}

// ── channel concat / slice ───────────────────────────────────────────────────

struct ConcatVjp {
    channel_counts: Vec<usize>,
}

impl Vjp for ConcatVjp {
    fn vjp(&self, parents: &[Tensor], _: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let total: usize = self.channel_counts.iter().sum();
        let batch = parents[0].shape().batch;
        let plane = parents[0].shape().plane();
        let mut grads: Vec<Option<Vec<f32>>> = parents
            .iter()
            .zip(needs)
            .map(|(p, need)| need.then(|| vec![0.0f32; p.numel()]))
            .collect();
        for b in 0..batch {
            let mut channel_base = 0;
            for (i, count) in self.channel_counts.iter().enumerate() {
                if let Some(pg) = grads[i].as_mut() {
                    let src = (b * total + channel_base) * plane;
                    let dst = b * count * plane;
                    pg[dst..dst + count * plane]
                        .copy_from_slice(&g[src..src + count * plane]);
                }
                channel_base += count;
            }
        }
        grads
    }
}

/// Stack inputs along the channel axis; all other extents must match.
pub fn concat_channels(inputs: &[Tensor]) -> Result<Tensor> {
    let Some(first) = inputs.first() else {
        return Err(TensorError::InvalidSpec {
            op: "concat_channels",
            reason: "no inputs".to_string(),
        });
    };
    let base = first.shape();
    for t in inputs {
        let s = t.shape();
        if s.batch != base.batch || s.height != base.height || s.width != base.width {
            return Err(TensorError::ExtentMismatch {
                op: "concat_channels",
                left: base,
                right: s,
            });
        }
    }
    let channel_counts: Vec<usize> = inputs.iter().map(|t| t.shape().channels).collect();
    let total: usize = channel_counts.iter().sum();
    let shape = Shape::new(base.batch, total, base.height, base.width);
    let plane = base.plane();
    let mut data = vec![0.0f32; shape.numel()];
    for b in 0..base.batch {
        let mut channel_base = 0;
        for (t, count) in inputs.iter().zip(&channel_counts) {
            let src = b * count * plane;
            let dst = (b * total + channel_base) * plane;
            data[dst..dst + count * plane]
                .copy_from_slice(&t.data()[src..src + count * plane]);
            channel_base += count;
        }
    }
    Ok(Tensor::from_op(
        shape,
        data,
        inputs.to_vec(),
        Box::new(ConcatVjp { channel_counts }),
    ))
}

struct SliceVjp {
    start: usize,
}

impl Vjp for SliceVjp {
    fn vjp(&self, parents: &[Tensor], _: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let full = parents[0].shape();
        let plane = full.plane();
        let len = g.len() / (full.batch * plane);
        vec![needs[0].then(|| {
            let mut pg = vec![0.0f32; full.numel()];
            for b in 0..full.batch {
                let dst = (b * full.channels + self.start) * plane;
                let src = b * len * plane;
                pg[dst..dst + len * plane].copy_from_slice(&g[src..src + len * plane]);
            }
            pg
        })]
    }
}

/// Copy of channels `start..start + len`.
pub fn slice_channels(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let full = a.shape();
    if len == 0 || start + len > full.channels {
        return Err(TensorError::SliceOutOfRange {
            op: "slice_channels",
            start,
            len,
            channels: full.channels,
        });
    }
    let shape = Shape::new(full.batch, len, full.height, full.width);
    let plane = full.plane();
    let mut data = vec![0.0f32; shape.numel()];
    for b in 0..full.batch {
        let src = (b * full.channels + start) * plane;
        let dst = b * len * plane;
        data[dst..dst + len * plane].copy_from_slice(&a.data()[src..src + len * plane]);
    }
    Ok(Tensor::from_op(shape, data, vec![a.clone()], Box::new(SliceVjp { start })))
}

// ── reduction ────────────────────────────────────────────────────────────────

struct MeanVjp;

impl Vjp for MeanVjp {
    fn vjp(&self, parents: &[Tensor], _: &[f32], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let n = parents[0].numel();
        let per_element = g[0] / n as f32;
        vec![needs[0].then(|| vec![per_element; n])]
    }
}

/// Mean over every element, as a 1x1x1x1 tensor. Accumulates in f64 so the
/// scalar is stable regardless of operand size.
pub fn mean_all(a: &Tensor) -> Tensor {
    let sum: f64 = a.data().iter().map(|v| *v as f64).sum();
    let mean = (sum / a.numel() as f64) as f32;
    Tensor::from_op(
        Shape::new(1, 1, 1, 1),
        vec![mean],
        vec![a.clone()],
        Box::new(MeanVjp),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: &[f32]) -> Tensor {
        Tensor::leaf(Shape::new(1, 1, 1, values.len()), values.to_vec(), true).unwrap()
    }

    fn assert_close(actual: &[f32], expected: &[f32], tol: f32) {
        assert_eq!(actual.len(), expected.len());
        for (a, e) in actual.iter().zip(expected) {
            assert!((a - e).abs() <= tol, "{actual:?} vs {expected:?}");
        }
    }

    #[test]
    fn elementwise_forward_values() {
        let a = t(&[1.0, -2.0, 3.0]);
        let b = t(&[0.5, 4.0, -1.0]);
        assert_close(add(&a, &b).unwrap().data(), &[1.5, 2.0, 2.0], 1e-6);
        assert_close(sub(&a, &b).unwrap().data(), &[0.5, -6.0, 4.0], 1e-6);
        assert_close(mul(&a, &b).unwrap().data(), &[0.5, -8.0, -3.0], 1e-6);
        assert_close(div(&a, &b).unwrap().data(), &[2.0, -0.5, -3.0], 1e-6);
        assert_close(scale(&a, -2.0).data(), &[-2.0, 4.0, -6.0], 1e-6);
        assert_close(add_scalar(&a, 1.0).data(), &[2.0, -1.0, 4.0], 1e-6);
        assert_close(relu(&a).data(), &[1.0, 0.0, 3.0], 1e-6);
        assert_close(clamp(&a, -1.0, 1.0).data(), &[1.0, -1.0, 1.0], 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = t(&[1.0, 2.0]);
        let b = t(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            add(&a, &b),
            Err(TensorError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let a = t(&[1.0, 2.0, 3.0, 4.0]);
        let m = mean_all(&a);
        assert!((m.item() - 2.5).abs() < 1e-7);
        m.backward().unwrap();
        assert_close(&a.grad().unwrap(), &[0.25; 4], 1e-7);
    }

    #[test]
    fn sub_gradient_signs() {
        let a = t(&[1.0, 2.0]);
        let b = t(&[5.0, -3.0]);
        mean_all(&sub(&a, &b).unwrap()).backward().unwrap();
        assert_close(&a.grad().unwrap(), &[0.5, 0.5], 1e-7);
        assert_close(&b.grad().unwrap(), &[-0.5, -0.5], 1e-7);
    }

    #[test]
    fn div_gradient_matches_quotient_rule() {
        let a = t(&[1.0, -2.0]);
        let b = t(&[2.0, 4.0]);
        mean_all(&div(&a, &b).unwrap()).backward().unwrap();
        assert_close(&a.grad().unwrap(), &[0.25, 0.125], 1e-7);
        // d/db (a/b) / 2 = -a / (2 b^2)
        assert_close(&b.grad().unwrap(), &[-0.125, 0.0625], 1e-7);
    }

    #[test]
    fn tanh_gradient_matches_finite_differences() {
        // Points kept inside [-2, 2] so the derivative is well above the
        // f32 finite-difference noise floor.
        let points = [-1.9f32, -1.2, -0.3, 0.0, 0.7, 1.5];
        let x = t(&points);
        let loss = mean_all(&tanh_act(&x));
        loss.backward().unwrap();
        let grad = x.grad().unwrap();
        let step = 1e-3f32;
        for (i, p) in points.iter().enumerate() {
            let mut plus = points;
            let mut minus = points;
            plus[i] = p + step;
            minus[i] = p - step;
            let lp = mean_all(&tanh_act(&t(&plus))).item();
            let lm = mean_all(&tanh_act(&t(&minus))).item();
            let numeric = (lp - lm) / (2.0 * step);
            let relative = (grad[i] - numeric).abs() / numeric.abs().max(1e-12);
            assert!(relative < 1e-3, "point {p}: {} vs {numeric}", grad[i]);
        }
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let x = t(&[-2.0, 0.5, 2.0]);
        mean_all(&clamp(&x, 0.0, 1.0)).backward().unwrap();
        assert_close(&x.grad().unwrap(), &[0.0, 1.0 / 3.0, 0.0], 1e-7);
    }

    #[test]
    fn concat_orders_channels_and_splits_gradient() {
        let a = Tensor::leaf(Shape::new(1, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
        let b = Tensor::leaf(
            Shape::new(1, 3, 1, 2),
            vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0],
            true,
        )
        .unwrap();
        let cat = concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.shape(), Shape::new(1, 5, 1, 2));
        assert_close(
            cat.data(),
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0],
            0.0,
        );
        // sum(concat(a, b)) sends an all-ones gradient to both inputs.
        scale(&mean_all(&cat), 10.0).backward().unwrap();
        assert_close(&a.grad().unwrap(), &[1.0; 4], 1e-7);
        assert_close(&b.grad().unwrap(), &[1.0; 6], 1e-7);
    }

    #[test]
    fn concat_rejects_extent_mismatch() {
        let a = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 1, 3, 2));
        assert!(matches!(
            concat_channels(&[a, b]),
            Err(TensorError::ExtentMismatch { op: "concat_channels", .. })
        ));
    }

    #[test]
    fn slice_inverts_concat_and_embeds_gradient() {
        let a = Tensor::leaf(Shape::new(2, 3, 1, 1), (0..6).map(|v| v as f32).collect(), true)
            .unwrap();
        let mid = slice_channels(&a, 1, 1).unwrap();
        assert_close(mid.data(), &[1.0, 4.0], 0.0);
        mean_all(&mid).backward().unwrap();
        assert_close(&a.grad().unwrap(), &[0.0, 0.5, 0.0, 0.0, 0.5, 0.0], 1e-7);
        assert!(matches!(
            slice_channels(&a, 2, 2),
            Err(TensorError::SliceOutOfRange { .. })
        ));
    }

    #[test]
    fn slices_reassemble_to_original() {
        let shape = Shape::new(2, 4, 3, 3);
        let a = Tensor::leaf(shape, (0..shape.numel()).map(|v| v as f32).collect(), false)
            .unwrap();
        let parts: Vec<Tensor> = (0..4).map(|c| slice_channels(&a, c, 1).unwrap()).collect();
        let restored = concat_channels(&parts).unwrap();
        assert_eq!(restored.data(), a.data());
    }
}
