//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The design is a single-writer operation tape: every forward operation
//! appends one node (shape + data + optional gradient buffer) and one op
//! record describing how to push gradients back to its inputs. Nodes are
//! addressed by [`TensorId`], which is an index into the tape, so an op's
//! inputs always precede it and a single reverse sweep visits the graph in
//! valid topological order.
//!
//! Only the operations the network actually needs are provided: elementwise
//! arithmetic and activations, an affine map over the last axis, softmax over
//! arbitrary axis sets, the 3-d spatial ops (convolution, max-pooling,
//! nearest-neighbor upsampling, group normalization, slice pooling), and the
//! coordinate-integration ops used by the localization head. There is no
//! broadcasting beyond bias addition and the per-channel affine inside group
//! normalization; all other shapes must match exactly.

mod spatial;

pub mod gradcheck;

use std::fmt;

use thiserror::Error;

/// Scalar element type of a tape. `f64` is the default everywhere; `f32` is
/// an opt-in for large training runs and is too imprecise for the
/// finite-difference gradient checks.
pub trait Element:
    Copy
    + PartialEq
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Identifies the storage precision, e.g. for checkpoint headers.
    const DTYPE: Dtype;
    /// Number of bytes in the little-endian encoding.
    const BYTES: usize;

    /// Converts an `f64` literal into this element type.
    fn lit(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
    fn is_nan(self) -> bool;
    fn is_finite(self) -> bool;
    fn write_le_bytes(self, out: &mut Vec<u8>);
    fn from_le_bytes(bytes: &[u8]) -> Self;
}

/// Storage precision tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 0,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F64),
            1 => Some(Dtype::F32),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

macro_rules! impl_element {
    ($ty:ty, $dtype:expr, $bytes:expr) => {
        impl Element for $ty {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: Dtype = $dtype;
            const BYTES: usize = $bytes;

            #[inline]
            fn lit(v: f64) -> Self {
                v as $ty
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn min(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn is_nan(self) -> bool {
                <$ty>::is_nan(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$ty>::is_finite(self)
            }
            #[inline]
            fn write_le_bytes(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            #[inline]
            fn from_le_bytes(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(bytes);
                <$ty>::from_le_bytes(buf)
            }
        }
    };
}

impl_element!(f64, Dtype::F64, 8);
impl_element!(f32, Dtype::F32, 4);

/// Errors raised by tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar output, got {numel} elements")]
    NonScalarBackward { numel: usize },
    #[error("hard_argmax is not differentiable: gradient flow reached its output")]
    NonDifferentiable,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn arg_err(op: &'static str, detail: String) -> TensorError {
    TensorError::InvalidArgument { op, detail }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// One node of the tape: the tensor value plus its gradient buffer.
#[derive(Debug, Clone)]
pub struct Tensor<E: Element> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    /// True for gradient-enabled leaves and for every node derived from one.
    pub requires_grad: bool,
    pub(crate) grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }
}

/// Operation records. Each variant stores its input ids plus whatever the
/// backward rule needs (e.g. pooling argmax indices, normalization stats).
#[derive(Debug, Clone)]
pub(crate) enum Op<E: Element> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, E),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Ln(usize),
    Clamp { input: usize, lo: E, hi: E },
    SmoothL1(usize),
    Sum(usize),
    Reshape(usize),
    Row { input: usize, index: usize },
    Concat(usize, usize),
    Stack(Vec<usize>),
    Linear { input: usize, weight: usize, bias: Option<usize> },
    Softmax { input: usize, axes: Vec<usize> },
    Conv3d { input: usize, weight: usize, bias: usize, stride: [usize; 3], padding: [usize; 3] },
    MaxPool3d { input: usize, argmax: Vec<usize> },
    Upsample3d { input: usize, factor: [usize; 3] },
    GroupNorm { input: usize, gamma: usize, beta: usize, groups: usize, stats: Vec<(E, E)> },
    DepthSequenceMean(usize),
    GlobalAvgPool(usize),
    IntegrateCoords(usize),
    HardArgmax,
}

/// Reverse-mode autodiff tape. Create one per forward pass, build the graph
/// through its methods, then call [`Tape::backward`] on a scalar output.
pub struct Tape<E: Element = f64> {
    nodes: Vec<Tensor<E>>,
    ops: Vec<Op<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn checked_numel(op: &'static str, shape: &[usize]) -> Result<usize, TensorError> {
    let mut n: usize = 1;
    for &d in shape {
        n = n
            .checked_mul(d)
            .ok_or_else(|| arg_err(op, format!("shape {shape:?} overflows element count")))?;
    }
    Ok(n)
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf tensor. Only leaves can be marked `requires_grad`
    /// directly; derived nodes inherit the flag from their inputs.
    pub fn leaf(
        &mut self,
        data: Vec<E>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        let numel = checked_numel("leaf", &shape)?;
        if numel != data.len() {
            return Err(shape_err(
                "leaf",
                format!("shape {:?} implies {} elements, data has {}", shape, numel, data.len()),
            ));
        }
        Ok(self.push(Tensor { shape, data, requires_grad, grad: None }, Op::Leaf))
    }

    /// Records a gradient-free constant.
    pub fn constant(&mut self, data: Vec<E>, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        self.leaf(data, shape, false)
    }

    /// Records a gradient-free scalar of shape `[1]`.
    pub fn scalar(&mut self, value: E) -> TensorId {
        self.push(
            Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None },
            Op::Leaf,
        )
    }

    pub fn node(&self, id: TensorId) -> &Tensor<E> {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].data
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> E {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, node: Tensor<E>, op: Op<E>) -> TensorId {
        debug_assert_eq!(self.nodes.len(), self.ops.len());
        self.nodes.push(node);
        self.ops.push(op);
        TensorId(self.nodes.len() - 1)
    }

    pub(crate) fn derive(
        &mut self,
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
        op: Op<E>,
    ) -> TensorId {
        debug_assert_eq!(checked_numel("derive", &shape).unwrap(), data.len());
        self.push(Tensor { shape, data, requires_grad, grad: None }, op)
    }

    pub(crate) fn requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        Ok(())
    }

    // ----- elementwise arithmetic -------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(&[a, b]);
        Ok(self.derive(shape, data, rg, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(&[a, b]);
        Ok(self.derive(shape, data, rg, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(&[a, b]);
        Ok(self.derive(shape, data, rg, Op::Mul(a.0, b.0)))
    }

    /// Multiplies by a compile-time-known scalar constant.
    pub fn scale(&mut self, a: TensorId, c: E) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.derive(shape, data, rg, Op::Scale(a.0, c))
    }

    /// Adds a scalar constant to every element.
    pub fn add_scalar(&mut self, a: TensorId, c: E) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.derive(shape, data, rg, Op::AddScalar(a.0))
    }

    // ----- activations ------------------------------------------------------------

    /// Rectified linear unit. The subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x.max(E::ZERO)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.derive(shape, data, rg, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data = self
            .nodes[a.0]
            .data
            .iter()
            .map(|&x| E::ONE / (E::ONE + (-x).exp()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.derive(shape, data, rg, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.derive(shape, data, rg, Op::Tanh(a.0))
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.derive(shape, data, rg, Op::Ln(a.0))
    }

    /// Clamps into `[lo, hi]`. Gradient passes through wherever the input
    /// lies inside the closed interval and is zero outside it.
    pub fn clamp(&mut self, a: TensorId, lo: E, hi: E) -> Result<TensorId, TensorError> {
        if !(lo <= hi) {
            return Err(arg_err("clamp", format!("lo {lo} must not exceed hi {hi}")));
        }
        let data = self.nodes[a.0].data.iter().map(|&x| x.max(lo).min(hi)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.derive(shape, data, rg, Op::Clamp { input: a.0, lo, hi }))
    }

    /// Elementwise smooth-L1: `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
    pub fn smooth_l1(&mut self, a: TensorId) -> TensorId {
        let half = E::lit(0.5);
        let data = self
            .nodes[a.0]
            .data
            .iter()
            .map(|&x| if x.abs() < E::ONE { half * x * x } else { x.abs() - half })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.derive(shape, data, rg, Op::SmoothL1(a.0))
    }

    // ----- reductions and structure -----------------------------------------------

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut acc = E::ZERO;
        for &x in &self.nodes[a.0].data {
            acc += x;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.derive(vec![1], vec![acc], rg, Op::Sum(a.0))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let numel = checked_numel("reshape", &shape)?;
        if numel != self.nodes[a.0].data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.nodes[a.0].shape, shape),
            ));
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.derive(shape, data, rg, Op::Reshape(a.0)))
    }

    /// Extracts row `index` of a `[T, F]` tensor as a `[F]` tensor.
    pub fn row(&mut self, a: TensorId, index: usize) -> Result<TensorId, TensorError> {
        let shape = &self.nodes[a.0].shape;
        if shape.len() != 2 {
            return Err(shape_err("row", format!("expected a 2-d tensor, got {shape:?}")));
        }
        let (t, f) = (shape[0], shape[1]);
        if index >= t {
            return Err(arg_err("row", format!("row {index} out of range for {t} rows")));
        }
        let data = self.nodes[a.0].data[index * f..(index + 1) * f].to_vec();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.derive(vec![f], data, rg, Op::Row { input: a.0, index }))
    }

    /// Concatenates two 1-d tensors.
    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.nodes[a.0].shape.len() != 1 || self.nodes[b.0].shape.len() != 1 {
            return Err(shape_err(
                "concat",
                format!(
                    "expected 1-d tensors, got {:?} and {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            ));
        }
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        let len = data.len();
        let rg = self.requires(&[a, b]);
        Ok(self.derive(vec![len], data, rg, Op::Concat(a.0, b.0)))
    }

    /// Stacks equal-length 1-d tensors into a `[T, F]` tensor.
    pub fn stack(&mut self, rows: &[TensorId]) -> Result<TensorId, TensorError> {
        if rows.is_empty() {
            return Err(arg_err("stack", "needs at least one row".into()));
        }
        let f = self.nodes[rows[0].0].data.len();
        for id in rows {
            let n = &self.nodes[id.0];
            if n.shape.len() != 1 || n.data.len() != f {
                return Err(shape_err(
                    "stack",
                    format!("every row must be 1-d of length {f}, got {:?}", n.shape),
                ));
            }
        }
        let mut data = Vec::with_capacity(rows.len() * f);
        for id in rows {
            data.extend_from_slice(&self.nodes[id.0].data);
        }
        let rg = self.requires(rows);
        let ids = rows.iter().map(|id| id.0).collect();
        Ok(self.derive(vec![rows.len(), f], data, rg, Op::Stack(ids)))
    }

    // ----- affine map over the last axis --------------------------------------------

    /// Affine map over the last axis: `out[..., o] = bias[o] + sum_i w[o, i] * x[..., i]`.
    pub fn linear(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
    ) -> Result<TensorId, TensorError> {
        let xshape = self.nodes[input.0].shape.clone();
        let wshape = self.nodes[weight.0].shape.clone();
        if wshape.len() != 2 {
            return Err(shape_err("linear", format!("weight must be 2-d, got {wshape:?}")));
        }
        let (f_out, f_in) = (wshape[0], wshape[1]);
        let last = *xshape.last().ok_or_else(|| {
            shape_err("linear", "input must have at least one axis".into())
        })?;
        if last != f_in {
            return Err(shape_err(
                "linear",
                format!("input last axis {last} does not match weight inner axis {f_in}"),
            ));
        }
        if let Some(b) = bias {
            if self.nodes[b.0].shape != [f_out] {
                return Err(shape_err(
                    "linear",
                    format!("bias must be [{f_out}], got {:?}", self.nodes[b.0].shape),
                ));
            }
        }
        let rows = self.nodes[input.0].data.len() / f_in.max(1);
        let x = &self.nodes[input.0].data;
        let w = &self.nodes[weight.0].data;
        let mut data = vec![E::ZERO; rows * f_out];
        for r in 0..rows {
            let xr = &x[r * f_in..(r + 1) * f_in];
            let or = &mut data[r * f_out..(r + 1) * f_out];
            for o in 0..f_out {
                let wr = &w[o * f_in..(o + 1) * f_in];
                let mut acc = E::ZERO;
                for i in 0..f_in {
                    acc += wr[i] * xr[i];
                }
                or[o] = acc;
            }
        }
        if let Some(b) = bias {
            let bd = &self.nodes[b.0].data;
            for r in 0..rows {
                for o in 0..f_out {
                    data[r * f_out + o] += bd[o];
                }
            }
        }
        let mut shape = xshape;
        *shape.last_mut().unwrap() = f_out;
        let mut ids = vec![input, weight];
        if let Some(b) = bias {
            ids.push(b);
        }
        let rg = self.requires(&ids);
        Ok(self.derive(
            shape,
            data,
            rg,
            Op::Linear { input: input.0, weight: weight.0, bias: bias.map(|b| b.0) },
        ))
    }

    // ----- softmax ------------------------------------------------------------------

    /// Softmax over the given set of axes, with max-subtraction for overflow
    /// safety. Elements that share coordinates on all non-reduced axes form
    /// one normalization group.
    pub fn softmax(&mut self, input: TensorId, axes: &[usize]) -> Result<TensorId, TensorError> {
        let shape = self.nodes[input.0].shape.clone();
        validate_axes("softmax", &shape, axes)?;
        let x = &self.nodes[input.0].data;
        let groups = group_count(&shape, axes);
        let mut max = vec![E::lit(f64::NEG_INFINITY); groups];
        for_each_group(&shape, axes, |idx, g| {
            max[g] = max[g].max(x[idx]);
        });
        let mut data = vec![E::ZERO; x.len()];
        let mut sums = vec![E::ZERO; groups];
        for_each_group(&shape, axes, |idx, g| {
            let e = (x[idx] - max[g]).exp();
            data[idx] = e;
            sums[g] += e;
        });
        for_each_group(&shape, axes, |idx, g| {
            data[idx] = data[idx] / sums[g];
        });
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.derive(shape, data, rg, Op::Softmax { input: input.0, axes: axes.to_vec() }))
    }

    // ----- backward -----------------------------------------------------------------

    /// Reverse sweep from a scalar output. Gradients accumulate (`+=`) at
    /// fan-out, and leaves keep their gradient buffers for inspection after
    /// the call. Repeated calls keep accumulating.
    pub fn backward(&mut self, output: TensorId) -> Result<(), TensorError> {
        let numel = self.nodes[output.0].data.len();
        if numel != 1 {
            return Err(TensorError::NonScalarBackward { numel });
        }
        {
            let node = &mut self.nodes[output.0];
            let g = node.grad.get_or_insert_with(|| vec![E::ZERO; 1]);
            g[0] += E::ONE;
        }
        for i in (0..=output.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            let result = self.propagate(i, &op);
            self.ops[i] = op;
            result?;
        }
        Ok(())
    }

    /// Pushes the gradient of node `i` into the gradients of its inputs.
    fn propagate(&mut self, i: usize, op: &Op<E>) -> Result<(), TensorError> {
        let (head, tail) = self.nodes.split_at_mut(i);
        let out = &tail[0];
        let g: &[E] = out.grad.as_deref().expect("propagate called without gradient");
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(head, *a, |buf| {
                    for (k, gv) in g.iter().enumerate() {
                        buf[k] += *gv;
                    }
                });
                accumulate(head, *b, |buf| {
                    for (k, gv) in g.iter().enumerate() {
                        buf[k] += *gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                accumulate(head, *a, |buf| {
                    for (k, gv) in g.iter().enumerate() {
                        buf[k] += *gv;
                    }
                });
                accumulate(head, *b, |buf| {
                    for (k, gv) in g.iter().enumerate() {
                        buf[k] -= *gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                if head[*a].requires_grad {
                    let other: Vec<E> = head[*b].data.clone();
                    accumulate(head, *a, |buf| {
                        for k in 0..buf.len() {
                            buf[k] += g[k] * other[k];
                        }
                    });
                }
                if head[*b].requires_grad {
                    let other: Vec<E> = head[*a].data.clone();
                    accumulate(head, *b, |buf| {
                        for k in 0..buf.len() {
                            buf[k] += g[k] * other[k];
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(head, *a, |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * c;
                    }
                });
            }
            Op::AddScalar(a) => {
                accumulate(head, *a, |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k];
                    }
                });
            }
            Op::Relu(a) => {
                if head[*a].requires_grad {
                    let mut buf = take_grad(&mut head[*a]);
                    for k in 0..buf.len() {
                        if head[*a].data[k] > E::ZERO {
                            buf[k] += g[k];
                        }
                    }
                    head[*a].grad = Some(buf);
                }
            }
            Op::Sigmoid(a) => {
                if head[*a].requires_grad {
                    let s = &out.data;
                    let mut buf = take_grad(&mut head[*a]);
                    for k in 0..buf.len() {
                        buf[k] += g[k] * s[k] * (E::ONE - s[k]);
                    }
                    head[*a].grad = Some(buf);
                }
            }
            Op::Tanh(a) => {
                if head[*a].requires_grad {
                    let t = &out.data;
                    let mut buf = take_grad(&mut head[*a]);
                    for k in 0..buf.len() {
                        buf[k] += g[k] * (E::ONE - t[k] * t[k]);
                    }
                    head[*a].grad = Some(buf);
                }
            }
            Op::Ln(a) => {
                if head[*a].requires_grad {
                    let mut buf = take_grad(&mut head[*a]);
                    for k in 0..buf.len() {
                        buf[k] += g[k] / head[*a].data[k];
                    }
                    head[*a].grad = Some(buf);
                }
            }
            Op::Clamp { input, lo, hi } => {
                if head[*input].requires_grad {
                    let (lo, hi) = (*lo, *hi);
                    let mut buf = take_grad(&mut head[*input]);
                    for k in 0..buf.len() {
                        let x = head[*input].data[k];
                        if x >= lo && x <= hi {
                            buf[k] += g[k];
                        }
                    }
                    head[*input].grad = Some(buf);
                }
            }
            Op::SmoothL1(a) => {
                if head[*a].requires_grad {
                    let mut buf = take_grad(&mut head[*a]);
                    for k in 0..buf.len() {
                        let x = head[*a].data[k];
                        let d = if x.abs() < E::ONE {
                            x
                        } else if x > E::ZERO {
                            E::ONE
                        } else {
                            -E::ONE
                        };
                        buf[k] += g[k] * d;
                    }
                    head[*a].grad = Some(buf);
                }
            }
            Op::Sum(a) => {
                let gv = g[0];
                accumulate(head, *a, |buf| {
                    for v in buf.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::Reshape(a) => {
                accumulate(head, *a, |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k];
                    }
                });
            }
            Op::Row { input, index } => {
                let f = g.len();
                let start = index * f;
                accumulate(head, *input, |buf| {
                    for k in 0..f {
                        buf[start + k] += g[k];
                    }
                });
            }
            Op::Concat(a, b) => {
                let na = head[*a].data.len();
                accumulate(head, *a, |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k];
                    }
                });
                accumulate(head, *b, |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[na + k];
                    }
                });
            }
            Op::Stack(ids) => {
                for (r, id) in ids.iter().enumerate() {
                    let f = head[*id].data.len();
                    accumulate(head, *id, |buf| {
                        for k in 0..f {
                            buf[k] += g[r * f + k];
                        }
                    });
                }
            }
            Op::Linear { input, weight, bias } => {
                let f_in = head[*weight].shape[1];
                let f_out = head[*weight].shape[0];
                let rows = head[*input].data.len() / f_in.max(1);
                if head[*input].requires_grad {
                    let w: Vec<E> = head[*weight].data.clone();
                    accumulate(head, *input, |buf| {
                        for r in 0..rows {
                            for o in 0..f_out {
                                let gv = g[r * f_out + o];
                                let wr = &w[o * f_in..(o + 1) * f_in];
                                let br = &mut buf[r * f_in..(r + 1) * f_in];
                                for k in 0..f_in {
                                    br[k] += gv * wr[k];
                                }
                            }
                        }
                    });
                }
                if head[*weight].requires_grad {
                    let x: Vec<E> = head[*input].data.clone();
                    accumulate(head, *weight, |buf| {
                        for r in 0..rows {
                            let xr = &x[r * f_in..(r + 1) * f_in];
                            for o in 0..f_out {
                                let gv = g[r * f_out + o];
                                let br = &mut buf[o * f_in..(o + 1) * f_in];
                                for k in 0..f_in {
                                    br[k] += gv * xr[k];
                                }
                            }
                        }
                    });
                }
                if let Some(b) = bias {
                    accumulate(head, *b, |buf| {
                        for r in 0..rows {
                            for o in 0..f_out {
                                buf[o] += g[r * f_out + o];
                            }
                        }
                    });
                }
            }
            Op::Softmax { input, axes } => {
                if head[*input].requires_grad {
                    let p = &out.data;
                    let shape = out.shape.clone();
                    let groups = group_count(&shape, axes);
                    let mut dots = vec![E::ZERO; groups];
                    for_each_group(&shape, axes, |idx, grp| {
                        dots[grp] += g[idx] * p[idx];
                    });
                    let mut buf = take_grad(&mut head[*input]);
                    for_each_group(&shape, axes, |idx, grp| {
                        buf[idx] += p[idx] * (g[idx] - dots[grp]);
                    });
                    head[*input].grad = Some(buf);
                }
            }
            Op::Conv3d { input, weight, bias, stride, padding } => {
                spatial::conv3d_backward(head, g, &out.shape, *input, *weight, *bias, *stride, *padding);
            }
            Op::MaxPool3d { input, argmax } => {
                accumulate(head, *input, |buf| {
                    for (k, &src) in argmax.iter().enumerate() {
                        buf[src] += g[k];
                    }
                });
            }
            Op::Upsample3d { input, factor } => {
                spatial::upsample_backward(head, g, &out.shape, *input, *factor);
            }
            Op::GroupNorm { input, gamma, beta, groups, stats } => {
                spatial::group_norm_backward(head, g, *input, *gamma, *beta, *groups, stats);
            }
            Op::DepthSequenceMean(a) => {
                spatial::depth_sequence_mean_backward(head, g, *a);
            }
            Op::GlobalAvgPool(a) => {
                spatial::global_avg_pool_backward(head, g, *a);
            }
            Op::IntegrateCoords(a) => {
                spatial::integrate_coords_backward(head, g, *a);
            }
            Op::HardArgmax => {
                return Err(TensorError::NonDifferentiable);
            }
        }
        Ok(())
    }
}

/// Takes a node's gradient buffer, creating a zeroed one if absent. The
/// caller mutates the owned buffer and stores it back, which keeps borrows of
/// other nodes' data legal in between.
pub(crate) fn take_grad<E: Element>(node: &mut Tensor<E>) -> Vec<E> {
    node.grad.take().unwrap_or_else(|| vec![E::ZERO; node.data.len()])
}

pub(crate) fn accumulate<E: Element>(
    nodes: &mut [Tensor<E>],
    idx: usize,
    f: impl FnOnce(&mut Vec<E>),
) {
    if !nodes[idx].requires_grad {
        return;
    }
    let mut buf = take_grad(&mut nodes[idx]);
    f(&mut buf);
    nodes[idx].grad = Some(buf);
}

fn validate_axes(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<(), TensorError> {
    if axes.is_empty() {
        return Err(arg_err(op, "axis set must not be empty".into()));
    }
    let mut seen = vec![false; shape.len()];
    for &ax in axes {
        if ax >= shape.len() {
            return Err(arg_err(op, format!("axis {ax} out of range for {shape:?}")));
        }
        if seen[ax] {
            return Err(arg_err(op, format!("axis {ax} repeated")));
        }
        seen[ax] = true;
    }
    Ok(())
}

/// Number of normalization groups: the product of extents over non-reduced axes.
fn group_count(shape: &[usize], axes: &[usize]) -> usize {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .product::<usize>()
        .max(1)
}

/// Calls `f(flat_index, group_index)` for every element, where elements that
/// agree on all non-reduced axes share a group index.
fn for_each_group(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let ndim = shape.len();
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    // Strides of the "outer" (non-reduced) index space.
    let mut outer_stride = vec![0usize; ndim];
    let mut acc = 1;
    for d in (0..ndim).rev() {
        if !axes.contains(&d) {
            outer_stride[d] = acc;
            acc *= shape[d];
        }
    }
    let mut coords = vec![0usize; ndim];
    for idx in 0..numel {
        let mut grp = 0;
        for d in 0..ndim {
            grp += coords[d] * outer_stride[d];
        }
        f(idx, grp);
        for d in (0..ndim).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
}
