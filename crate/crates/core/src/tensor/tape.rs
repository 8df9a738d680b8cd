use std::cell::{Cell, Ref, RefCell};
use std::sync::Arc;

use super::{Buffer, Element, Tensor};
use crate::error::{bail, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a fused multi-head attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub n_seq: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    pub causal: bool,
}

#[derive(Debug)]
pub(crate) enum Op<T: Element> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Sum { a: Var },
    Reshape { a: Var },
    Gather { src: Var, rows: Arc<[usize]> },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Buffer<T> },
    Gelu { x: Var },
    LogSoftmax { x: Var },
    PickSum { x: Var, cols: Vec<usize>, weights: Vec<T> },
    GatherDot { a: Var, a_rows: Arc<[usize]>, b: Var, b_rows: Arc<[usize]> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Buffer<T> },
}

#[derive(Debug)]
pub(crate) struct Node<T: Element> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Recorded computation. Ops append nodes; [`Tape::backward`] replays them
/// in reverse. A tape supports exactly one backward pass.
#[derive(Debug)]
pub struct Tape<T: Element> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    /// Record a trainable leaf. The tensor buffer is shared, not copied.
    pub fn param(&self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Record a leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.len() {
            bail!(Contract, "variable {} is not on this tape", v.0);
        }
        Ok(())
    }

    /// Reverse pass from a scalar root. Returns the gradients of every
    /// trainable leaf reachable from `root`; unreachable leaves read as zero.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.check(root)?;
        if self.consumed.get() {
            bail!(Contract, "backward already ran on this tape; rebuild the forward pass");
        }
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.numel() != 1 {
            bail!(Contract, "backward needs a scalar root, got shape {:?}", nodes[root.0].value.shape());
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Grad<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.0].requires_grad {
            grads[root.0] = Some(Grad::Dense(Buffer::from_vec(vec![T::ONE], &[])));
        }
        let mut leaves: Vec<Option<Grad<T>>> = (0..nodes.len()).map(|_| None).collect();

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                leaves[id] = Some(g);
                continue;
            }
            super::backward::propagate(&nodes, id, g, &mut grads)?;
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads: leaves, shapes })
    }
}

/// Gradient of one node: dense, or a set of (possibly repeated) rows.
#[derive(Debug)]
pub enum Grad<T: Element> {
    Dense(Buffer<T>),
    Rows { rows: Vec<usize>, values: Buffer<T>, width: usize },
}

impl<T: Element> Grad<T> {
    /// Add into a dense buffer holding the full gradient, scaled by `scale`.
    pub fn add_to(&self, dst: &mut [T], scale: T) {
        match self {
            Grad::Dense(b) => {
                for (d, &g) in dst.iter_mut().zip(b.iter()) {
                    *d += scale * g;
                }
            }
            Grad::Rows { rows, values, width } => {
                for (i, &r) in rows.iter().enumerate() {
                    let src = &values[i * width..(i + 1) * width];
                    let out = &mut dst[r * width..(r + 1) * width];
                    for (d, &g) in out.iter_mut().zip(src) {
                        *d += scale * g;
                    }
                }
            }
        }
    }

    pub(crate) fn into_dense(self, shape: &[usize]) -> Buffer<T> {
        match self {
            Grad::Dense(b) => b,
            rows @ Grad::Rows { .. } => {
                let mut out = Buffer::zeros(shape);
                rows.add_to(&mut out, T::ONE);
                out
            }
        }
    }

    pub(crate) fn accumulate(self, other: Grad<T>, shape: &[usize]) -> Grad<T> {
        match (self, other) {
            (Grad::Dense(mut a), b) | (b @ Grad::Rows { .. }, Grad::Dense(mut a)) => {
                b.add_to(&mut a, T::ONE);
                Grad::Dense(a)
            }
            (
                Grad::Rows { rows: mut ra, values: va, width },
                Grad::Rows { rows: rb, values: vb, .. },
            ) => {
                // Keep sparse while the row count stays below the full height.
                let height = shape.iter().product::<usize>() / width.max(1);
                if ra.len() + rb.len() > height {
                    let mut out = Buffer::zeros(shape);
                    Grad::Rows { rows: ra, values: va, width }.add_to(&mut out, T::ONE);
                    Grad::Rows { rows: rb, values: vb, width }.add_to(&mut out, T::ONE);
                    return Grad::Dense(out);
                }
                ra.extend_from_slice(&rb);
                let mut values = va.into_vec();
                values.extend_from_slice(&vb);
                let n = values.len();
                Grad::Rows { rows: ra, values: Buffer::from_vec(values, &[n / width.max(1), width]), width }
            }
        }
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Grad<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Raw gradient of `v`, if it was reached.
    pub fn raw(&self, v: Var) -> Option<&Grad<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Dense gradient of `v` (zeros when `v` was not reached).
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        let mut out = Buffer::zeros(shape);
        if let Some(g) = self.raw(v) {
            g.add_to(&mut out, T::ONE);
        }
        Tensor::from_buffer(shape.clone(), out)
    }

    /// `dst += scale * grad(v)`, without densifying sparse gradients.
    pub fn accumulate_into(&self, v: Var, dst: &mut [T], scale: T) {
        if let Some(g) = self.raw(v) {
            g.add_to(dst, scale);
        }
    }
}
