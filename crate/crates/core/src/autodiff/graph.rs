use std::sync::Arc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::image::bilinear_taps;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Fixed sparse linear map over rows: output row `o` is
/// `sum_j w_j * input[src_j]`. Used for positional-table interpolation and
/// for bilinear upsampling of patch logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    pub in_rows: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl Resampler {
    /// Bilinear (align-corners = false) resampling of a row-major
    /// `in_h × in_w` grid of rows onto an `out_h × out_w` grid.
    pub fn bilinear_grid(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let rows = bilinear_taps(in_h, out_h);
        let cols = bilinear_taps(in_w, out_w);
        let mut taps = Vec::with_capacity(out_h * out_w);
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let (fy, fx) = (fy as f64, fx as f64);
                let mut t: Vec<(usize, f64)> = Vec::with_capacity(4);
                for (src, w) in [
                    (y0 * in_w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * in_w + x1, (1.0 - fy) * fx),
                    (y1 * in_w + x0, fy * (1.0 - fx)),
                    (y1 * in_w + x1, fy * fx),
                ] {
                    if w == 0.0 {
                        continue;
                    }
                    match t.iter_mut().find(|(s, _)| *s == src) {
                        Some(e) => e.1 += w,
                        None => t.push((src, w)),
                    }
                }
                taps.push(t);
            }
        }
        Resampler {
            in_rows: in_h * in_w,
            taps,
        }
    }

    pub fn out_rows(&self) -> usize {
        self.taps.len()
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Reshape(Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    GatherRows { table: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Resample { x: Var, map: Arc<Resampler> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::GatherRows { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Resample { .. } => "resample",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanRows(x) => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. } => vec![*input],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::L2Normalize { x, .. } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Resample { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const L2_NORM_EPS: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Operation tape. Build with the op methods, then call [`Graph::backward`]
/// on a scalar node.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `(outer, axis_len, inner)` view of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn last_dim(shape: &[usize]) -> Result<usize> {
    shape
        .last()
        .copied()
        .ok_or_else(|| Error::Shape("op needs at least one axis".into()))
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, value: Vec<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        assert_eq!(numel(&shape), value.len(), "leaf shape {shape:?}");
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape.clone(), t.values.clone(), t.requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, shape: &[usize], values: Vec<T>) -> Var {
        self.push_leaf(shape.to_vec(), values, true)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> Var {
        self.push_leaf(shape.to_vec(), values, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.value.clone(),
            requires_grad: n.requires_grad,
            grad: self.grad(v).map(<[T]>::to_vec),
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`; `None` when
    /// `v` does not require gradients or the loss does not depend on it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    // ---- forward ops -----------------------------------------------------

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!("matmul needs 2D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {sa:?} x {sb:?}{}",
                if trans_b { "^T" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            false,
            self.value(b),
            trans_b,
            T::zero(),
            &mut out,
        );
        Ok(self.push(Op::MatMul { a, b, trans_b }, vec![m, n], out))
    }

    /// `a [m, k] · b [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m, k] · bᵀ` for `b [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), self.shape(a).to_vec(), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), self.shape(a).to_vec(), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), self.shape(a).to_vec(), v))
    }

    /// Elementwise `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = self.zip_map(a, b, |x, y| x / y);
        Ok(self.push(Op::Div(a, b), self.shape(a).to_vec(), v))
    }

    /// Adds `bias [n]` to every trailing-axis row of `x [.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(x))?;
        if self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "add_bias: bias {:?} does not match trailing axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias);
        let v: Vec<T> = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(&r, &bb)| r + bb))
            .collect();
        Ok(self.push(Op::AddBias(x, bias), self.shape(x).to_vec(), v))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).iter().map(|&a| a * s).collect();
        self.push(Op::Scale(x, s), self.shape(x).to_vec(), v)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).iter().map(|&a| a + s).collect();
        self.push(Op::AddScalar(x), self.shape(x).to_vec(), v)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(x)
            )));
        }
        let v = self.value(x).to_vec();
        Ok(self.push(Op::Reshape(x), shape.to_vec(), v))
    }

    /// 2D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs 2D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x);
        let mut v = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose(x), vec![c, r], v))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} for {base:?}")));
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
                return Err(Error::Shape(format!("concat {s:?} onto {base:?} along {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
            out,
        ))
    }

    /// `len` entries of `axis` starting at `start` (the split primitive).
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) of axis {axis} in {s:?}",
                start + len
            )));
        }
        let (outer, alen, inner) = split_axis(&s, axis);
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(
            Op::Slice {
                input: x,
                axis,
                start,
            },
            shape,
            out,
        ))
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let v = self.slice(x, axis, start, len);
                start += len;
                v
            })
            .collect()
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = last_dim(self.shape(x))?;
        let mut v = self.value(x).to_vec();
        for row in v.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(Op::Softmax(x), self.shape(x).to_vec(), v))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = last_dim(self.shape(x))?;
        let mut v = self.value(x).to_vec();
        for row in v.chunks_exact_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|r| *r = *r - lse);
        }
        Ok(self.push(Op::LogSoftmax(x), self.shape(x).to_vec(), v))
    }

    /// Per-row normalisation over the last axis with learnable `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = last_dim(self.shape(x))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::Shape(format!(
                "layer_norm: gamma {:?} / beta {:?} vs {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            )));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let nf = T::from_usize(n).unwrap();
        let rows = self.value(x).len() / n;
        let mut xhat = Vec::with_capacity(rows * n);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.value(x).chunks_exact(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            xhat.extend(row.iter().map(|&r| (r - mean) * rs));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let out: Vec<T> = xhat
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&xh, &gg), &bb)| xh * gg + bb))
            .collect();
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            self.shape(x).to_vec(),
            out,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|&a| gelu(a)).collect();
        self.push(Op::Gelu(x), self.shape(x).to_vec(), v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(Op::Sum(x), vec![1], vec![s])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = self.value(x).iter().copied().sum::<T>() / n;
        self.push(Op::Mean(x), vec![1], vec![s])
    }

    /// Mean over the first axis of a 2D tensor: `[n, d] -> [d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::Shape(format!("mean_rows needs non-empty 2D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![T::zero(); c];
        for row in self.value(x).chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let rf = T::from_usize(r).unwrap();
        out.iter_mut().for_each(|o| *o = *o / rf);
        Ok(self.push(Op::MeanRows(x), vec![c], out))
    }

    /// `x / max(||x||, 1e-8)` per last-axis row.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let n = last_dim(self.shape(x))?;
        let eps = T::from_f64_lossy(L2_NORM_EPS);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks_exact(n) {
            let norm = row.iter().map(|&r| r * r).sum::<T>().sqrt().max(eps);
            norms.push(norm);
            out.extend(row.iter().map(|&r| r / norm));
        }
        Ok(self.push(Op::L2Normalize { x, norms }, self.shape(x).to_vec(), out))
    }

    /// Embedding gather: rows of `table [v, d]` at `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows needs 2D table, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Shape(format!("gather index {bad} >= {v}")));
        }
        let src = self.value(table);
        let out: Vec<T> = indices
            .iter()
            .flat_map(|&i| src[i * d..(i + 1) * d].iter().copied())
            .collect();
        Ok(self.push(
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            vec![indices.len(), d],
            out,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Shape(format!("target {bad} >= {c} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_exact_mut(c).zip(targets) {
            let lse = log_sum_exp(row);
            loss = loss + lse - row[t];
            softmax_in_place(row);
        }
        let loss = loss / T::from_usize(targets.len()).unwrap();
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
        ))
    }

    /// Applies a [`Resampler`] to the rows of `x [in_rows, d]`.
    pub fn resample(&mut self, x: Var, map: Arc<Resampler>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != map.in_rows {
            return Err(Error::Shape(format!(
                "resample expects [{}, d], got {s:?}",
                map.in_rows
            )));
        }
        let d = s[1];
        let src = self.value(x);
        let mut out = vec![T::zero(); map.out_rows() * d];
        for (o, taps) in map.taps.iter().enumerate() {
            let dst = &mut out[o * d..(o + 1) * d];
            for &(i, w) in taps {
                let w = T::from_f64_lossy(w);
                for (y, &v) in dst.iter_mut().zip(&src[i * d..(i + 1) * d]) {
                    *y = *y + w * v;
                }
            }
        }
        let rows = map.out_rows();
        Ok(self.push(Op::Resample { x, map }, vec![rows, d], out))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Gradients accumulate additively over
    /// fan-out and are read back with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(Error::NonScalarLoss(n.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        self.grads = Vec::new();
        if !n.requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            let node = &self.nodes[i];
            for input in node.op.inputs() {
                if let Some(g) = &grads[input.0] {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NaNGradient {
                            op: node.op.name(),
                            node: i,
                        });
                    }
                }
            }
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let y = &node.value;
        // accumulation buffer for an input, or None when it needs no gradient
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let len = nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = nodes[a.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = acc!(*a) {
                    // dA = dC · op(B)ᵀ
                    T::gemm(m, n, k, T::one(), gy, false, bv, !trans_b, T::one(), ga);
                }
                if let Some(gb) = acc!(*b) {
                    if *trans_b {
                        // B is [n, k]: dB = dCᵀ · A
                        T::gemm(n, m, k, T::one(), gy, true, av, false, T::one(), gb);
                    } else {
                        // dB = Aᵀ · dC
                        T::gemm(k, m, n, T::one(), av, true, gy, false, T::one(), gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = acc!(v) {
                        g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = acc!(*a) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
                }
                if let Some(g) = acc!(*b) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g - d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(g) = acc!(*a) {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(bv) {
                        *g = *g + d * o;
                    }
                }
                if let Some(g) = acc!(*b) {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(av) {
                        *g = *g + d * o;
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = &nodes[b.0].value;
                if let Some(g) = acc!(*a) {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(bv) {
                        *g = *g + d / o;
                    }
                }
                if let Some(g) = acc!(*b) {
                    for (((g, &d), &o), &q) in g.iter_mut().zip(gy).zip(bv).zip(y) {
                        *g = *g - d * q / o;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(g) = acc!(*x) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
                }
                if let Some(g) = acc!(*bias) {
                    let n = g.len();
                    for row in gy.chunks_exact(n) {
                        g.iter_mut().zip(row).for_each(|(g, &d)| *g = *g + d);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = acc!(*x) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d * *s);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(g) = acc!(*x) {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.shape[1], node.shape[0]);
                if let Some(g) = acc!(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] = g[i * c + j] + gy[j * r + i];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].shape[*axis];
                    if let Some(g) = acc!(v) {
                        for o in 0..outer {
                            let src = &gy[(o * total + offset) * inner..][..len * inner];
                            let dst = &mut g[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(g, &d)| *g = *g + d);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, alen, inner) = split_axis(&nodes[input.0].shape, *axis);
                let len = node.shape[*axis];
                if let Some(g) = acc!(*input) {
                    for o in 0..outer {
                        let dst = &mut g[(o * alen + start) * inner..][..len * inner];
                        let src = &gy[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(g, &d)| *g = *g + d);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = *node.shape.last().unwrap();
                if let Some(g) = acc!(*x) {
                    for ((g, yr), dr) in g.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(gy.chunks_exact(n)) {
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for ((g, &yy), &d) in g.iter_mut().zip(yr).zip(dr) {
                            *g = *g + yy * (d - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = *node.shape.last().unwrap();
                if let Some(g) = acc!(*x) {
                    for ((g, yr), dr) in g.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(gy.chunks_exact(n)) {
                        let total: T = dr.iter().copied().sum();
                        for ((g, &yy), &d) in g.iter_mut().zip(yr).zip(dr) {
                            *g = *g + d - yy.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = *node.shape.last().unwrap();
                let gv = &nodes[gamma.0].value;
                if let Some(g) = acc!(*beta) {
                    for dr in gy.chunks_exact(n) {
                        g.iter_mut().zip(dr).for_each(|(g, &d)| *g = *g + d);
                    }
                }
                if let Some(g) = acc!(*gamma) {
                    for (dr, xr) in gy.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((g, &d), &xh) in g.iter_mut().zip(dr).zip(xr) {
                            *g = *g + d * xh;
                        }
                    }
                }
                if let Some(g) = acc!(*x) {
                    let nf = T::from_usize(n).unwrap();
                    for (((g, dr), xr), &rs) in g
                        .chunks_exact_mut(n)
                        .zip(gy.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .zip(rstd)
                    {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for ((&d, &gg), &xh) in dr.iter().zip(gv).zip(xr) {
                            let dxh = d * gg;
                            sum_d = sum_d + dxh;
                            sum_dx = sum_dx + dxh * xh;
                        }
                        for (((g, &d), &gg), &xh) in g.iter_mut().zip(dr).zip(gv).zip(xr) {
                            let dxh = d * gg;
                            *g = *g + rs / nf * (nf * dxh - sum_d - xh * sum_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(g) = acc!(*x) {
                    for ((g, &d), &xv) in g.iter_mut().zip(gy).zip(&nodes[x.0].value) {
                        *g = *g + d * gelu_grad(xv);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = acc!(*x) {
                    g.iter_mut().for_each(|g| *g = *g + gy[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(g) = acc!(*x) {
                    let d = gy[0] / T::from_usize(g.len()).unwrap();
                    g.iter_mut().for_each(|g| *g = *g + d);
                }
            }
            Op::MeanRows(x) => {
                let r = nodes[x.0].shape[0];
                let rf = T::from_usize(r).unwrap();
                if let Some(g) = acc!(*x) {
                    for row in g.chunks_exact_mut(gy.len()) {
                        row.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d / rf);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let n = *node.shape.last().unwrap();
                let eps = T::from_f64_lossy(L2_NORM_EPS);
                if let Some(g) = acc!(*x) {
                    for (((g, yr), dr), &norm) in g
                        .chunks_exact_mut(n)
                        .zip(y.chunks_exact(n))
                        .zip(gy.chunks_exact(n))
                        .zip(norms)
                    {
                        // below the clamp the map is linear: x / eps
                        let clamped = norm <= eps;
                        let dot: T = if clamped {
                            T::zero()
                        } else {
                            yr.iter().zip(dr).map(|(&a, &b)| a * b).sum()
                        };
                        for ((g, &yy), &d) in g.iter_mut().zip(yr).zip(dr) {
                            *g = *g + (d - yy * dot) / norm;
                        }
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                let d = node.shape[1];
                if let Some(g) = acc!(*table) {
                    for (r, &i) in indices.iter().enumerate() {
                        let dst = &mut g[i * d..(i + 1) * d];
                        dst.iter_mut()
                            .zip(&gy[r * d..(r + 1) * d])
                            .for_each(|(g, &v)| *g = *g + v);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = nodes[logits.0].shape[1];
                let scale = gy[0] / T::from_usize(targets.len()).unwrap();
                if let Some(g) = acc!(*logits) {
                    for ((g, p), &t) in g.chunks_exact_mut(c).zip(probs.chunks_exact(c)).zip(targets) {
                        for (j, (g, &pp)) in g.iter_mut().zip(p).enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *g = *g + scale * (pp - onehot);
                        }
                    }
                }
            }
            Op::Resample { x, map } => {
                let d = node.shape[1];
                if let Some(g) = acc!(*x) {
                    for (o, taps) in map.taps.iter().enumerate() {
                        let src = &gy[o * d..(o + 1) * d];
                        for &(i, w) in taps {
                            let w = T::from_f64_lossy(w);
                            let dst = &mut g[i * d..(i + 1) * d];
                            dst.iter_mut().zip(src).for_each(|(g, &v)| *g = *g + w * v);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&r| (r - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for r in row.iter_mut() {
        *r = (*r - max).exp();
        total = total + *r;
    }
    row.iter_mut().for_each(|r| *r = *r / total);
}
