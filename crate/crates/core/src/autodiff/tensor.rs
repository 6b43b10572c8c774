use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: value length {got} does not match shape {shape:?} ({expected} elements)")]
    LengthMismatch {
        op: &'static str,
        shape: Shape,
        expected: usize,
        got: usize,
    },
    #[error("{op}: operand shapes differ: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: input has {got} channels, expected {expected}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: non-batch extents differ: {left:?} vs {right:?}")]
    ExtentMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: channel range {start}..{} out of 0..{channels}", start + len)]
    SliceOutOfRange {
        op: &'static str,
        start: usize,
        len: usize,
        channels: usize,
    },
    #[error("{op}: {axis} extent {got} with kernel {kernel}, stride {stride}, padding {padding} yields a non-positive output extent")]
    NonPositiveExtent {
        op: &'static str,
        axis: &'static str,
        got: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("{op}: invalid spec: {reason}")]
    InvalidSpec { op: &'static str, reason: String },
    #[error("backward: loss tensor has {numel} elements, expected a scalar")]
    NotScalar { numel: usize },
    #[error("backward: loss is not the result of a recorded computation")]
    Detached,
}

/// Dense 4-D extent in batch, channel, height, width order.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Shape {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Elements in one spatial plane.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Flat offset of `(b, c, 0, 0)`.
    pub fn offset(&self, b: usize, c: usize) -> usize {
        (b * self.channels + c) * self.plane()
    }
}

/// Per-op reverse rule. `needs[i]` tells the rule whether parent `i`'s
/// gradient will actually be consumed, so rules may skip dead branches.
pub(crate) trait Vjp: Send + Sync {
    fn vjp(
        &self,
        parents: &[Tensor],
        out: &[f32],
        grad: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>>;
}

struct Inner {
    id: u64,
    shape: Shape,
    data: Vec<f32>,
    requires_grad: bool,
    /// Populated on leaves by `backward`; interior nodes only relay flow.
    grad: Mutex<Option<Vec<f32>>>,
    parents: Vec<Tensor>,
    vjp: Option<Box<dyn Vjp>>,
}

/// Handle to an immutable node of a recorded computation.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` without recording graph edges; results inside are detached.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let previous = NO_GRAD.with(|flag| flag.replace(true));
    let out = f();
    NO_GRAD.with(|flag| flag.set(previous));
    out
}

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Tensor {
    /// Leaf node holding `data`; `trainable` marks it as a gradient sink.
    pub fn leaf(
        shape: Shape,
        data: Vec<f32>,
        trainable: bool,
    ) -> Result<Tensor, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                op: "leaf",
                shape,
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad: trainable && !NO_GRAD.with(|flag| flag.get()),
                grad: Mutex::new(None),
                parents: Vec::new(),
                vjp: None,
            }),
        })
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::leaf(shape, vec![0.0; shape.numel()], false).expect("zeros: length matches")
    }

    pub fn full(shape: Shape, value: f32) -> Tensor {
        Tensor::leaf(shape, vec![value; shape.numel()], false).expect("full: length matches")
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::full(Shape::new(1, 1, 1, 1), value)
    }

    /// Result node of an op. Records parents and the reverse rule unless
    /// grads are globally off or no parent participates.
    pub(crate) fn from_op(
        shape: Shape,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        vjp: Box<dyn Vjp>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), shape.numel());
        let recording = !NO_GRAD.with(|flag| flag.get())
            && parents.iter().any(|p| p.inner.requires_grad);
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad: recording,
                grad: Mutex::new(None),
                parents: if recording { parents } else { Vec::new() },
                vjp: if recording { Some(vjp) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    /// Scalar payload. Panics when the tensor is not 1x1x1x1.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.vjp.is_none()
    }

    /// Copy of the accumulated gradient, if any backward pass deposited one.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    fn accumulate_grad(&self, update: &[f32]) {
        let mut slot = self.inner.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(existing) => {
                for (acc, u) in existing.iter_mut().zip(update) {
                    *acc += *u;
                }
            }
            None => *slot = Some(update.to_vec()),
        }
    }

    fn id(&self) -> u64 {
        self.inner.id
    }

    /// Reverse pass from a scalar loss. Deposits gradients on every
    /// participating trainable leaf; repeated calls accumulate.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                numel: self.numel(),
            });
        }
        if self.inner.vjp.is_none() {
            return Err(TensorError::Detached);
        }

        // Iterative post-order over the sub-DAG that can reach a trainable leaf.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for parent in &node.inner.parents {
                if parent.inner.requires_grad && !visited.contains(&parent.id()) {
                    stack.push((parent.clone(), false));
                }
            }
        }

        // Flow gradients in reverse topological order. Interior flow lives in
        // a transient map keyed by node id; only leaves persist their grad.
        let mut flows: HashMap<u64, Vec<f32>> = HashMap::new();
        flows.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(grad) = flows.remove(&node.id()) else {
                continue;
            };
            match &node.inner.vjp {
                None => node.accumulate_grad(&grad),
                Some(rule) => {
                    let needs: Vec<bool> = node
                        .inner
                        .parents
                        .iter()
                        .map(|p| p.inner.requires_grad)
                        .collect();
                    let parent_grads =
                        rule.vjp(&node.inner.parents, &node.inner.data, &grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
                    for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.inner.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match flows.get_mut(&parent.id()) {
                            Some(acc) => {
                                for (a, u) in acc.iter_mut().zip(&pg) {
                                    *a += *u;
                                }
                            }
                            None => {
                                flows.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("leaf", &self.is_leaf())
            .finish()
    }
}
