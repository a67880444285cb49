//! Dynamic reverse-mode graph.
//!
//! Every op evaluates eagerly and appends a node holding its value and the
//! inputs its backward rule needs. Nodes are appended in execution order, so
//! walking the node list backwards is a valid topological order.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{bail, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    RowMix {
        x: Var,
        mix: Vec<Vec<(usize, f64)>>,
    },
    Take {
        x: Var,
        idx: Vec<usize>,
    },
    SegmentMax {
        x: Var,
        src: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Vec<usize>>,
    },
    Sum(Var),
    Mean(Var),
    Focal {
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        beta: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records executed ops for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], keyed by leaf.
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    /// Gradients of every bound parameter, in parameter-id order.
    pub fn into_params(mut self) -> Vec<(ParamId, Tensor)> {
        self.params.sort_by_key(|(p, _)| *p);
        self.params
    }
}

fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices hold at least m*k, k*n and m*n elements and the
    // strides above address them in row-major (or transposed) order.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major matrix product `a[m×k] · b[k×n]`.
pub(crate) fn matmul_slices(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm((m, k, n), a, false, b, false, &mut c, 0.0);
    c
}

fn log_sigmoid(x: f64) -> f64 {
    // log(1/(1+e^-x)) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter as a gradient leaf. Binding the same
    /// parameter twice returns the same leaf so gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bindings.get(&id) {
            return v;
        }
        let v = self.var(store.value(id).clone());
        self.bindings.insert(id, v);
        v
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => bail!(Dimension, "{what} expects a 2-d tensor, got shape {:?}", s),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            bail!(
                Dimension,
                "matmul inner extents differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            );
        }
        let c = matmul_slices(m, k, n, self.value(a).data(), self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], c), Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Dimension,
                "{what}: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`n` vector to every row of `a[..×n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(row).numel() != n {
            bail!(
                Dimension,
                "add_row: row {:?} does not match last axis of {:?}",
                self.shape(row),
                self.shape(a)
            );
        }
        let r = self.value(row).data();
        let va = self.value(a);
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            chunk.iter_mut().zip(r).for_each(|(x, y)| *x += y);
        }
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let t = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::Transpose(a), rg))
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let n = va.cols();
        if n == 0 || va.shape().is_empty() {
            bail!(Dimension, "softmax over an empty axis (shape {:?})", va.shape());
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            bail!(Argument, "layer_norm eps must be positive, got {eps}");
        }
        let n = self.value(x).cols();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            bail!(
                Dimension,
                "layer_norm affine params must have {} entries, got {:?} and {:?}",
                n,
                self.shape(gamma),
                self.shape(beta)
            );
        }
        let vx = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Concatenates 2-d tensors with equal row counts along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            bail!(Dimension, "concat of zero tensors");
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.dims2(p, "concat")?);
        }
        let rows = dims[0].0;
        if dims.iter().any(|d| d.0 != rows) {
            bail!(Dimension, "concat row counts differ: {:?}", dims);
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], data),
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..start + width` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if start + width > cols {
            bail!(
                Dimension,
                "slice {}..{} out of range for {} columns",
                start,
                start + width,
                cols
            );
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, width], data),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Selects (possibly repeated) rows of a 2-d tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            bail!(Argument, "gather_rows index {bad} out of range for {n} rows");
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(src.row(r));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), c], data),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Output row `i` is `Σ w · x[j]` over the `(j, w)` pairs of `mix[i]`.
    pub fn row_mix(&mut self, x: Var, mix: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let (n, c) = self.dims2(x, "row_mix")?;
        let src = self.value(x);
        let mut data = vec![0.0; mix.len() * c];
        for (i, terms) in mix.iter().enumerate() {
            let out = &mut data[i * c..(i + 1) * c];
            for &(j, w) in terms {
                if j >= n {
                    bail!(Argument, "row_mix index {j} out of range for {n} rows");
                }
                out.iter_mut().zip(src.row(j)).for_each(|(o, v)| *o += w * v);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![mix.len(), c], data),
            Op::RowMix { x, mix },
            rg,
        ))
    }

    /// Gathers flat elements into a tensor of `shape`.
    pub fn take(&mut self, x: Var, idx: &[usize], shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != idx.len() {
            bail!(Dimension, "take: {} indices for shape {:?}", idx.len(), shape);
        }
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            bail!(Argument, "take index {bad} out of range for {} elements", src.len());
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Take {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Column-wise max over each row segment. Ties resolve to the first row
    /// listed in the segment.
    pub fn segment_max(&mut self, x: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let (n, c) = self.dims2(x, "segment_max")?;
        let src = self.value(x);
        let mut data = Vec::with_capacity(segments.len() * c);
        let mut arg = Vec::with_capacity(segments.len() * c);
        for seg in segments {
            if seg.is_empty() {
                bail!(Argument, "segment_max over an empty segment");
            }
            for col in 0..c {
                let mut best = seg[0];
                for &r in &seg[1..] {
                    if r >= n {
                        bail!(Argument, "segment row {r} out of range for {n} rows");
                    }
                    if src.data()[r * c + col] > src.data()[best * c + col] {
                        best = r;
                    }
                }
                if best >= n {
                    bail!(Argument, "segment row {best} out of range for {n} rows");
                }
                data.push(src.data()[best * c + col]);
                arg.push(best * c + col);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![segments.len(), c], data),
            Op::SegmentMax { x, src: arg },
            rg,
        ))
    }

    /// Max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, _) = self.dims2(x, "group_max")?;
        if group == 0 || n % group != 0 {
            bail!(Dimension, "{n} rows do not split into groups of {group}");
        }
        let segments: Vec<Vec<usize>> = (0..n / group)
            .map(|g| (g * group..(g + 1) * group).collect())
            .collect();
        self.segment_max(x, &segments)
    }

    pub fn segment_mean(&mut self, x: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let (n, c) = self.dims2(x, "segment_mean")?;
        let src = self.value(x);
        let mut data = vec![0.0; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                bail!(Argument, "segment_mean over an empty segment");
            }
            let out = &mut data[s * c..(s + 1) * c];
            for &r in seg {
                if r >= n {
                    bail!(Argument, "segment row {r} out of range for {n} rows");
                }
                out.iter_mut().zip(src.row(r)).for_each(|(o, v)| *o += v);
            }
            let inv = 1.0 / seg.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![segments.len(), c], data),
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean binary focal loss over all elements of `logits`.
    pub fn focal_loss(&mut self, logits: Var, targets: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        let v = self.value(logits);
        if v.numel() != targets.len() {
            bail!(
                Dimension,
                "focal_loss: {} logits vs {} targets",
                v.numel(),
                targets.len()
            );
        }
        if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
            bail!(Argument, "focal_loss targets must be 0 or 1");
        }
        let n = targets.len().max(1) as f64;
        let total: f64 = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| {
                let (s, at) = if t == 1.0 { (1.0, alpha) } else { (-1.0, 1.0 - alpha) };
                let log_pt = log_sigmoid(s * x);
                let pt = log_pt.exp();
                -at * (1.0 - pt).powf(gamma) * log_pt
            })
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Focal {
                logits,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            rg,
        ))
    }

    /// Mean smooth-L1 distance to a constant target.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            bail!(Argument, "smooth_l1 beta must be positive, got {beta}");
        }
        let v = self.value(pred);
        if v.numel() != target.len() {
            bail!(
                Dimension,
                "smooth_l1: {} predictions vs {} targets",
                v.numel(),
                target.len()
            );
        }
        let n = target.len().max(1) as f64;
        let total: f64 = v
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let d = (p - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                beta,
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let c = v.cols();
        if v.rows() != targets.len() {
            bail!(
                Dimension,
                "cross_entropy: {} rows vs {} targets",
                v.rows(),
                targets.len()
            );
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            bail!(Argument, "cross_entropy target {bad} out of range for {c} classes");
        }
        let n = targets.len().max(1) as f64;
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = v.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Consumes the recorded graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Err(Error::Usage(
                "loss is not connected to any gradient leaf".into(),
            ));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let bindings = std::mem::take(&mut self.bindings);
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            backward_node(&nodes, node, &dy, &mut grads);
        }

        let mut leaves = HashMap::new();
        for (i, node) in nodes.iter().enumerate().take(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                leaves.insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        let params = bindings
            .into_iter()
            .map(|(p, v)| {
                let t = leaves
                    .get(&v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(nodes[v.0].value.shape().to_vec()));
                (p, t)
            })
            .collect();
        Ok(Gradients { leaves, params })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn backward_node(nodes: &[Node], node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = dC · Bᵀ
                gemm((m, n, k), dy, false, val(*b).data(), true, ga, 1.0);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB = Aᵀ · dC
                gemm((k, m, n), val(*a).data(), true, dy, false, gb, 1.0);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(g) = acc(grads, nodes, v) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(g) = acc(grads, nodes, *a) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            if let Some(g) = acc(grads, nodes, *b) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    g[i] += dy[i] * vb[i];
                }
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    g[i] += dy[i] * va[i];
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(g) = acc(grads, nodes, *a) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            let n = val(*a).cols().max(1);
            if let Some(g) = acc(grads, nodes, *row) {
                for chunk in dy.chunks(n) {
                    g.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(g) = acc(grads, nodes, *a) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * s);
            }
        }
        Op::Relu(a) => {
            let y = node.value.data();
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    if y[i] > 0.0 {
                        g[i] += dy[i];
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    g[i] += dy[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] += dy[j * m + i];
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let n = node.value.cols();
            if let Some(g) = acc(grads, nodes, *a) {
                for r in 0..y.len() / n {
                    let (yr, dr) = (&y[r * n..(r + 1) * n], &dy[r * n..(r + 1) * n]);
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        g[r * n + j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let n = node.value.cols();
            let rows = inv_std.len();
            let gm = val(*gamma).data();
            if let Some(g) = acc(grads, nodes, *gamma) {
                for r in 0..rows {
                    for j in 0..n {
                        g[j] += dy[r * n + j] * xhat[r * n + j];
                    }
                }
            }
            if let Some(g) = acc(grads, nodes, *beta) {
                for r in 0..rows {
                    for j in 0..n {
                        g[j] += dy[r * n + j];
                    }
                }
            }
            if let Some(g) = acc(grads, nodes, *x) {
                let nf = n as f64;
                for r in 0..rows {
                    let o = r * n;
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        let dh = dy[o + j] * gm[j];
                        s1 += dh;
                        s2 += dh * xhat[o + j];
                    }
                    for j in 0..n {
                        let dh = dy[o + j] * gm[j];
                        g[o + j] += inv_std[r] / nf * (nf * dh - s1 - xhat[o + j] * s2);
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut off = 0;
            for &p in parts {
                let w = val(p).cols();
                if let Some(g) = acc(grads, nodes, p) {
                    for r in 0..rows {
                        for j in 0..w {
                            g[r * w + j] += dy[r * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::SliceCols { x, start } => {
            let w = node.value.cols();
            let cols = val(*x).cols();
            if let Some(g) = acc(grads, nodes, *x) {
                for r in 0..node.value.rows() {
                    for j in 0..w {
                        g[r * cols + start + j] += dy[r * w + j];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(g) = acc(grads, nodes, *x) {
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
        }
        Op::GatherRows { x, rows } => {
            let c = node.value.cols();
            if let Some(g) = acc(grads, nodes, *x) {
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        g[r * c + j] += dy[i * c + j];
                    }
                }
            }
        }
        Op::RowMix { x, mix } => {
            let c = node.value.cols();
            if let Some(g) = acc(grads, nodes, *x) {
                for (i, terms) in mix.iter().enumerate() {
                    for &(r, w) in terms {
                        for j in 0..c {
                            g[r * c + j] += w * dy[i * c + j];
                        }
                    }
                }
            }
        }
        Op::Take { x, idx } => {
            if let Some(g) = acc(grads, nodes, *x) {
                for (o, &i) in idx.iter().enumerate() {
                    g[i] += dy[o];
                }
            }
        }
        Op::SegmentMax { x, src } => {
            if let Some(g) = acc(grads, nodes, *x) {
                for (o, &i) in src.iter().enumerate() {
                    g[i] += dy[o];
                }
            }
        }
        Op::SegmentMean { x, segments } => {
            let c = node.value.cols();
            if let Some(g) = acc(grads, nodes, *x) {
                for (s, seg) in segments.iter().enumerate() {
                    let inv = 1.0 / seg.len() as f64;
                    for &r in seg {
                        for j in 0..c {
                            g[r * c + j] += inv * dy[s * c + j];
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(g) = acc(grads, nodes, *x) {
                g.iter_mut().for_each(|g| *g += dy[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(g) = acc(grads, nodes, *x) {
                let s = dy[0] / g.len().max(1) as f64;
                g.iter_mut().for_each(|g| *g += s);
            }
        }
        Op::Focal {
            logits,
            targets,
            alpha,
            gamma,
        } => {
            let x = val(*logits).data();
            let n = targets.len().max(1) as f64;
            if let Some(g) = acc(grads, nodes, *logits) {
                for i in 0..g.len() {
                    let (s, at) = if targets[i] == 1.0 {
                        (1.0, *alpha)
                    } else {
                        (-1.0, 1.0 - alpha)
                    };
                    let log_pt = log_sigmoid(s * x[i]);
                    let pt = log_pt.exp();
                    let q = 1.0 - pt;
                    // d/dx of -a_t (1-p_t)^γ log p_t with p_t = σ(s x)
                    let d = s * at * q.powf(*gamma) * (gamma * pt * log_pt - q);
                    g[i] += dy[0] * d / n;
                }
            }
        }
        Op::SmoothL1 { pred, target, beta } => {
            let p = val(*pred).data();
            let n = target.len().max(1) as f64;
            if let Some(g) = acc(grads, nodes, *pred) {
                for i in 0..g.len() {
                    let d = p[i] - target[i];
                    let dd = if d.abs() < *beta { d / beta } else { d.signum() };
                    g[i] += dy[0] * dd / n;
                }
            }
        }
        Op::CrossEntropy { logits, targets } => {
            let v = val(*logits);
            let c = v.cols();
            let n = targets.len().max(1) as f64;
            if let Some(g) = acc(grads, nodes, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    let mut p = v.row(r).to_vec();
                    softmax_in_place(&mut p);
                    p[t] -= 1.0;
                    for j in 0..c {
                        g[r * c + j] += dy[0] * p[j] / n;
                    }
                }
            }
        }
    }
}
