use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{compensated_sum, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Relu(Var),
    Abs(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        /// `None` when the patches are the input itself (1×1, stride 1).
        cols: Option<Vec<T>>,
    },
    AvgPool2(Var),
    Upsample { x: Var, factor: usize },
    /// `out[i] = x[index[i]]` over flat buffers.
    Gather { x: Var, index: Vec<usize> },
    BceWithLogits { logits: Var, target: Vec<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias(a, b) | Op::ScaleBy(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Softmax(x)
            | Op::AvgPool2(x) => vec![*x],
            Op::MeanAxis { x, .. } | Op::Upsample { x, .. } | Op::Gather { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gain, offset, .. } => vec![*x, *gain, *offset],
            Op::Conv2d { x, weight, bias, .. } => {
                let mut v = vec![*x, *weight];
                v.extend(bias);
                v
            }
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    requires_grad: bool,
}

/// An append-only record of primitive operations.
///
/// Nodes are stored in creation order, which is a topological order since
/// every op refers only to existing nodes. One tape serves one model
/// evaluation; [`Tape::backward`] may be called any number of times.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    scope: &'static str,
    op_counts: BTreeMap<&'static str, usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`. Always `Some` for leaves created with
    /// `requires_grad`; zero when the loss does not depend on them.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scope: "default",
            op_counts: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the label under which subsequent ops are counted; returns the
    /// previous label so callers can restore it.
    pub fn enter_scope(&mut self, scope: &'static str) -> &'static str {
        std::mem::replace(&mut self.scope, scope)
    }

    pub fn exit_scope(&mut self, previous: &'static str) {
        self.scope = previous;
    }

    /// Number of non-leaf ops recorded under `scope`.
    pub fn op_count(&self, scope: &str) -> usize {
        self.op_counts.get(scope).copied().unwrap_or(0)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        *self.op_counts.entry(self.scope).or_insert(0) += 1;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} × {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.value(a).data,
            false,
            &self.value(b).data,
            false,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a `[n]` vector to every trailing-axis slice of `x: [..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data.clone();
        let mut v = self.value(x).clone();
        for row in v.data.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        Ok(self.push(v, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    /// Multiplies `x` by a single-element tensor `s`; both receive gradients.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim(
                "scale_by",
                format!("scale must have one element, got {:?}", self.shape(s)),
            ));
        }
        let c = self.value(s).data[0];
        let v = self.value(x).map(|e| e * c);
        Ok(self.push(v, Op::ScaleBy(x, s)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        self.push(v, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(T::abs);
        self.push(v, Op::Abs(x))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} vs {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Collapses all leading axes: `[a, b, ..., c] → [a·b·…, c]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let c = *s.last().ok_or_else(|| Error::dim("flatten", "rank 0"))?;
        let rows = self.value(x).numel() / c.max(1);
        self.reshape(x, &[rows, c])
    }

    /// Inverse of [`Tape::flatten`] for image-shaped tensors.
    pub fn unflatten(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (rows, c) = self.matrix_dims("unflatten", x)?;
        if rows != h * w {
            return Err(Error::dim(
                "unflatten",
                format!("{rows} rows cannot form a {h}×{w} grid"),
            ));
        }
        self.reshape(x, &[h, w, c])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("mean_axis", format!("axis {axis} for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let inv = T::one() / T::from_count(n);
        let src = &self.value(x).data;
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..][..inner];
                for (d, &s) in data[o * inner..][..inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        for d in &mut data {
            *d *= inv;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::MeanAxis { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_count(self.value(x).numel());
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let index = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(x, &[c, r], index)
    }

    /// Selects rows of `x` viewed as `[rows, rest]`; rows may repeat, which
    /// makes this an embedding lookup as well.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .first()
            .ok_or_else(|| Error::dim("select_rows", "rank 0"))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim(
                "select_rows",
                format!("row {bad} out of range for {shape:?}"),
            ));
        }
        let width = self.value(x).numel() / n.max(1);
        let index = rows
            .iter()
            .flat_map(|&r| (r * width)..((r + 1) * width))
            .collect();
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        self.gather(x, &out_shape, index)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if start >= end || end > c {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{end} of a {r}×{c} matrix"),
            ));
        }
        let index = (0..r)
            .flat_map(|i| (start..end).map(move |j| i * c + j))
            .collect();
        self.gather(x, &[r, end - start], index)
    }

    /// Rearranges `[H, W, f·f·C]` into `[H·f, W·f, C]`.
    pub fn depth_to_space(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, cin) = self.image_dims("depth_to_space", x)?;
        if factor == 0 || cin % (factor * factor) != 0 {
            return Err(Error::dim(
                "depth_to_space",
                format!("{cin} channels do not split into {factor}×{factor} blocks"),
            ));
        }
        let c = cin / (factor * factor);
        let index = kernels::depth_to_space_index(h, w, c, factor);
        self.gather(x, &[h * factor, w * factor, c], index)
    }

    fn gather(&mut self, x: Var, shape: &[usize], index: Vec<usize>) -> Result<Var> {
        let src = &self.value(x).data;
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather { x, index }))
    }

    /// Numerically stable softmax over the last axis.
    ///
    /// `valid` marks the entries that participate (`true`) and may have the
    /// length of the last axis (shared by all rows) or of the whole tensor.
    /// Excluded entries come out as exactly zero.
    pub fn softmax_lastdim(&mut self, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let value = self.value(x);
        let n = *value
            .shape
            .last()
            .ok_or_else(|| Error::dim("softmax", "rank 0"))?;
        if let Some(m) = valid {
            if m.len() != n && m.len() != value.numel() {
                return Err(Error::dim(
                    "softmax",
                    format!("mask of length {} for {:?}", m.len(), value.shape),
                ));
            }
        }
        let mut out = value.clone();
        for (r, row) in out.data.chunks_mut(n).enumerate() {
            let keep = |j: usize| match valid {
                None => true,
                Some(m) if m.len() == n => m[j],
                Some(m) => m[r * n + j],
            };
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::DegenerateRow { op: "softmax", row: r });
            }
            let mut total = T::zero();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if keep(j) { (*v - max).exp() } else { T::zero() };
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Normalizes each trailing-axis slice to zero mean and unit variance,
    /// then applies `gain` and `offset` (both `[C]`).
    pub fn layernorm(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if c < 2 {
            return Err(Error::dim("layernorm", format!("needs at least 2 channels, got {c}")));
        }
        if self.shape(gain) != [c] || self.shape(offset) != [c] {
            return Err(Error::dim(
                "layernorm",
                format!(
                    "affine {:?}/{:?} for width {c}",
                    self.shape(gain),
                    self.shape(offset)
                ),
            ));
        }
        let eps = T::from_f64_lossy(eps);
        let inv_c = T::one() / T::from_count(c);
        let (g, b) = (&self.value(gain).data, &self.value(offset).data);
        let value = self.value(x);
        let rows = value.numel() / c;
        let mut xhat = Vec::with_capacity(value.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(value.numel());
        for row in value.data.chunks(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let out = Tensor::new(&value.shape.clone(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            },
        ))
    }

    fn image_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [h, w, c] => Ok((h, w, c)),
            ref s => Err(Error::dim(op, format!("expected [H, W, C], got {s:?}"))),
        }
    }

    /// Cross-correlation of `x: [H, W, Cin]` with `weight: [k, k, Cin, Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (h, w, cin) = self.image_dims("conv2d", x)?;
        let (k, cout) = match *self.shape(weight) {
            [k1, k2, ci, co] if k1 == k2 && ci == cin => (k1, co),
            ref s => {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernel {s:?} for input {:?}", self.shape(x)),
                ))
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} for {cout} output channels", self.shape(b)),
                ));
            }
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(
                "conv2d",
                format!("{k}×{k} kernel, stride {stride}, pad {pad} on {h}×{w}"),
            ));
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            k,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let direct = k == 1 && stride == 1 && pad == 0;
        let cols = if direct {
            None
        } else {
            Some(kernels::im2col(&self.value(x).data, geom))
        };
        let mut out = vec![T::zero(); oh * ow * cout];
        {
            let patches = cols.as_deref().unwrap_or(&self.value(x).data);
            T::gemm(
                oh * ow,
                geom.patch(),
                cout,
                patches,
                false,
                &self.value(weight).data,
                false,
                &mut out,
                false,
            );
        }
        if let Some(b) = bias {
            let bv = &self.value(b).data;
            for row in out.chunks_mut(cout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let out = Tensor::new(&[oh, ow, cout], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Non-overlapping 2×2 mean pooling of `[H, W, C]`.
    pub fn avgpool2x2(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.image_dims("avgpool2x2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("avgpool2x2", format!("odd extents {h}×{w}")));
        }
        let data = kernels::avgpool2x2(&self.value(x).data, h, w, c);
        let out = Tensor::new(&[h / 2, w / 2, c], data)?;
        Ok(self.push(out, Op::AvgPool2(x)))
    }

    /// Nearest-neighbour upsampling of `[H, W, C]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = self.image_dims("upsample", x)?;
        if factor == 0 {
            return Err(Error::dim("upsample", "factor 0"));
        }
        let data = kernels::upsample_nearest(&self.value(x).data, h, w, c, factor);
        let out = Tensor::new(&[h * factor, w * factor, c], data)?;
        Ok(self.push(out, Op::Upsample { x, factor }))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.upsample_nearest(x, 2)
    }

    /// Mean binary cross-entropy between `logits` and 0/1 `target`, in the
    /// overflow-free form `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::dim(
                "bce_with_logits",
                format!("logits {:?} vs target {:?}", self.shape(logits), target.shape()),
            ));
        }
        let z = &self.value(logits).data;
        let n = T::from_count(z.len());
        let total = compensated_sum(
            z.iter()
                .zip(&target.data)
                .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()),
        );
        let out = Tensor::scalar(total / n);
        Ok(self.push(
            out,
            Op::BceWithLogits {
                logits,
                target: target.data.clone(),
            },
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match g {
                Some(g) if node.needs_grad => Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: g,
                }),
                _ if node.requires_grad => Some(Tensor::zeros(&node.value.shape)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<T>>],
        v: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backward_op(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                self.accumulate(grads, *a, |ga| {
                    T::gemm(m, n, k, g, false, val(*b), true, ga, true)
                });
                self.accumulate(grads, *b, |gb| {
                    T::gemm(k, m, n, val(*a), true, g, false, gb, true)
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *d += s * o;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *d += s * o;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                let n = self.shape(*b)[0];
                self.accumulate(grads, *b, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |gx| {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += s * *c;
                    }
                });
            }
            Op::ScaleBy(x, s) => {
                let c = val(*s)[0];
                self.accumulate(grads, *x, |gx| {
                    for (d, &e) in gx.iter_mut().zip(g) {
                        *d += e * c;
                    }
                });
                self.accumulate(grads, *s, |gs| {
                    gs[0] += g.iter().zip(val(*x)).map(|(&a, &b)| a * b).sum::<T>();
                });
            }
            Op::Relu(x) => {
                self.accumulate(grads, *x, |gx| {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if v > T::zero() {
                            *d += s;
                        }
                    }
                });
            }
            Op::Abs(x) => {
                self.accumulate(grads, *x, |gx| {
                    // signum convention: +1 at +0, −1 at −0
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(val(*x)) {
                        *d += s * v.signum();
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.value.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    self.accumulate(grads, v, |gv| {
                        for o in 0..outer {
                            add_into(
                                &mut gv[o * chunk..(o + 1) * chunk],
                                &g[o * total + offset..o * total + offset + chunk],
                            );
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |gx| add_into(gx, g)),
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let inv = T::one() / T::from_count(n);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for j in 0..n {
                            for (d, &s) in gx[(o * n + j) * inner..][..inner]
                                .iter_mut()
                                .zip(&g[o * inner..][..inner])
                            {
                                *d += s * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Softmax(x) => {
                let y = &node.value.data;
                let n = *node.value.shape.last().unwrap();
                self.accumulate(grads, *x, |gx| {
                    for ((dx, dy), yy) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = dy.iter().zip(yy).map(|(&a, &b)| a * b).sum();
                        for ((d, &s), &p) in dx.iter_mut().zip(dy).zip(yy) {
                            *d += p * (s - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            } => {
                let c = self.shape(*gain)[0];
                let gv = val(*gain);
                self.accumulate(grads, *gain, |gg| {
                    for (dy, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, &a), &b) in gg.iter_mut().zip(dy).zip(xh) {
                            *d += a * b;
                        }
                    }
                });
                self.accumulate(grads, *offset, |gb| {
                    for dy in g.chunks(c) {
                        add_into(gb, dy);
                    }
                });
                let inv_c = T::one() / T::from_count(c);
                self.accumulate(grads, *x, |gx| {
                    for (r, ((dx, dy), xh)) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let dxh = dy[j] * gv[j];
                            mean_d += dxh;
                            mean_dx += dxh * xh[j];
                        }
                        mean_d *= inv_c;
                        mean_dx *= inv_c;
                        for j in 0..c {
                            let dxh = dy[j] * gv[j];
                            dx[j] += inv_std[r] * (dxh - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                cols,
            } => {
                let rows = geom.out_h() * geom.out_w();
                let cout = *node.value.shape.last().unwrap();
                let patch = geom.patch();
                let patches = cols.as_deref().unwrap_or(val(*x));
                self.accumulate(grads, *weight, |gw| {
                    T::gemm(patch, rows, cout, patches, true, g, false, gw, true)
                });
                if let Some(b) = bias {
                    self.accumulate(grads, *b, |gb| {
                        for row in g.chunks(cout) {
                            add_into(gb, row);
                        }
                    });
                }
                let wv = val(*weight);
                self.accumulate(grads, *x, |gx| {
                    if cols.is_none() {
                        T::gemm(rows, cout, patch, g, false, wv, true, gx, true);
                    } else {
                        let mut dcols = vec![T::zero(); rows * patch];
                        T::gemm(rows, cout, patch, g, false, wv, true, &mut dcols, false);
                        kernels::col2im(&dcols, *geom, gx);
                    }
                });
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (h, w, c) = (s[0], s[1], s[2]);
                self.accumulate(grads, *x, |gx| kernels::avgpool2x2_backward(g, h, w, c, gx));
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let (h, w, c) = (s[0], s[1], s[2]);
                self.accumulate(grads, *x, |gx| {
                    kernels::upsample_nearest_backward(g, h, w, c, *factor, gx)
                });
            }
            Op::Gather { x, index } => {
                self.accumulate(grads, *x, |gx| {
                    for (&j, &s) in index.iter().zip(g) {
                        gx[j] += s;
                    }
                });
            }
            Op::BceWithLogits { logits, target } => {
                let z = val(*logits);
                let scale = g[0] / T::from_count(z.len());
                self.accumulate(grads, *logits, |gz| {
                    for ((d, &zz), &y) in gz.iter_mut().zip(z).zip(target) {
                        let p = T::one() / (T::one() + (-zz).exp());
                        *d += (p - y) * scale;
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
