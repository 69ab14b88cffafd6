//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a node
//! holding its output value and a record of its inputs; since a node can only
//! reference nodes created before it, the tape order is already a topological
//! order and [`Tape::backward`] is a single reverse sweep that visits each
//! node once. Gradients of a node consumed by several ops accumulate
//! additively.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    Log(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    KhatriRao(Var, Var),
    ContractLast(Var, Var),
    TrReconstruct(Var, Var, Var),
    MeanAxis0(Var),
    /// Saved per-row inverse standard deviations.
    LayerNorm(Var, Vec<f64>),
    /// Saved per-row denominators and whether the floor was active.
    NormalizeRows(Var, Vec<(f64, bool)>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    CrossEntropy(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a dynamic computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes ownership of a gradient, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of nodes processed by the reverse sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or probe variable).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v`'s value into a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn check_row_vector(&self, x: Var, v: Var) -> Result<usize> {
        let w = *self.shape(x).last().unwrap();
        if self.shape(v) != [w] {
            return Err(Error::shape(format!(
                "row vector {:?} does not broadcast over {:?}",
                self.shape(v),
                self.shape(x)
            )));
        }
        Ok(w)
    }

    /// Adds vector `b` (length = last extent of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let w = self.check_row_vector(x, b)?;
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bias[i % w];
        }
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    /// Multiplies every row of `x` element-wise by vector `g`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let w = self.check_row_vector(x, g)?;
        let gain = self.value(g).data();
        let mut out = self.value(x).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= gain[i % w];
        }
        Ok(self.push(out, Op::MulRow(x, g), &[x, g]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = tensor::softmax(x, x.ndim() - 1)?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / x.numel() as f64);
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn khatri_rao(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::khatri_rao_mode1(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::KhatriRao(a, b), &[a, b]))
    }

    pub fn contract_last(&mut self, x: Var, a: Var) -> Result<Var> {
        let out = tensor::contract_last(self.value(x), self.value(a))?;
        Ok(self.push(out, Op::ContractLast(x, a), &[x, a]))
    }

    pub fn tr_reconstruct(&mut self, g1: Var, g2: Var, g3: Var) -> Result<Var> {
        let ring = tensor::TensorRingCores {
            cores: vec![
                self.value(g1).clone(),
                self.value(g2).clone(),
                self.value(g3).clone(),
            ],
        };
        let out = tensor::tr_reconstruct(&ring)?;
        Ok(self.push(out, Op::TrReconstruct(g1, g2, g3), &[g1, g2, g3]))
    }

    /// Mean over the leading axis; the result drops that axis.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() < 2 {
            return Err(Error::shape("mean_axis0 needs at least two axes"));
        }
        let n = x.shape()[0];
        let rest = &x.shape()[1..];
        let stride: usize = rest.iter().product();
        let mut out = vec![0.0; stride];
        for chunk in x.data().chunks(stride) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let out = Tensor::new(rest.to_vec(), out)?;
        Ok(self.push(out, Op::MeanAxis0(a), &[a]))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let w = *x.shape().last().unwrap();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.numel() / w);
        for row in out.data_mut().chunks_mut(w) {
            let mu = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm(a, inv_std), &[a])
    }

    /// Divides each row of a matrix by `max(‖row‖₂, floor)`.
    ///
    /// Rows whose norm falls under the floor are logged.
    pub fn normalize_rows(&mut self, a: Var, floor: f64) -> Result<Var> {
        let x = self.value(a);
        let (_, c) = x.dims2()?;
        let mut out = x.clone();
        let mut saved = Vec::with_capacity(x.numel() / c);
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            // NaN norms pass through unfloored so divergence stays visible.
            let floored = norm <= floor;
            if floored {
                log::warn!("row {i} norm {norm:e} under floor {floor:e}; clamping");
            }
            let denom = if floored { floor } else { norm };
            row.iter_mut().for_each(|v| *v /= denom);
            saved.push((denom, floored));
        }
        Ok(self.push(out, Op::NormalizeRows(a, saved), &[a]))
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2()?;
        if start + width > c || width == 0 {
            return Err(Error::shape(format!(
                "column slice {start}..{} of {c} columns",
                start + width
            )));
        }
        let data = (0..r)
            .flat_map(|i| x.row(i)[start..start + width].iter().copied())
            .collect();
        let out = Tensor::new(vec![r, width], data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero parts"))?;
        let (r, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::shape("concat_cols row counts differ"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (n, c) = x.dims2()?;
        if labels.len() != n {
            return Err(Error::shape(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.push(out, Op::CrossEntropy(logits, labels.to_vec()), &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_seeded(loss, 1.0)
    }

    /// Reverse sweep with the loss gradient seeded to `seed` instead of 1.
    pub fn backward_seeded(&self, loss: Var, seed: f64) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), seed));
        let mut visited = 0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, tensor::matmul(g, &val(*b).transpose()?)?);
                acc(*b, tensor::matmul(&val(*a).transpose()?, g)?);
            }
            Op::Transpose(a) => acc(*a, g.transpose()?),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y)?);
                acc(*b, g.zip_map(val(*a), |x, y| x * y)?);
            }
            Op::AddBias(x, b) => {
                let w = val(*b).numel();
                let mut db = vec![0.0; w];
                for (i, &v) in g.data().iter().enumerate() {
                    db[i % w] += v;
                }
                acc(*x, g.clone());
                acc(*b, Tensor::new(vec![w], db)?);
            }
            Op::MulRow(x, gain) => {
                let gv = val(*gain).data();
                let xv = val(*x).data();
                let w = gv.len();
                let mut dx = g.clone();
                let mut dgain = vec![0.0; w];
                for (i, d) in dx.data_mut().iter_mut().enumerate() {
                    dgain[i % w] += *d * xv[i];
                    *d *= gv[i % w];
                }
                acc(*x, dx);
                acc(*gain, Tensor::new(vec![w], dgain)?);
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })?,
            ),
            Op::Abs(a) => acc(*a, g.zip_map(val(*a), |d, x| d * sign(x))?),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |d, x| d / x)?),
            Op::Softmax(a) => {
                let y = &node.value;
                let w = *y.shape().last().unwrap();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(w).zip(y.data().chunks(w)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(d, p)| d * p).sum();
                    for (d, p) in drow.iter_mut().zip(yrow) {
                        *d = p * (*d - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.data()[0])),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                acc(*a, Tensor::full(val(*a).shape(), g.data()[0] / n));
            }
            Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
            Op::KhatriRao(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, p) = av.dims2()?;
                let (_, q) = bv.dims2()?;
                let mut da = vec![0.0; n * p];
                let mut db = vec![0.0; n * q];
                for i in 0..n {
                    for j in 0..p {
                        for k in 0..q {
                            let d = g.data()[i * p * q + j * q + k];
                            da[i * p + j] += d * bv.data()[i * q + k];
                            db[i * q + k] += d * av.data()[i * p + j];
                        }
                    }
                }
                acc(*a, Tensor::new(vec![n, p], da)?);
                acc(*b, Tensor::new(vec![n, q], db)?);
            }
            Op::ContractLast(x, a) => {
                let (xv, av) = (val(*x), val(*a));
                let (d, q, r) = xv.dims3()?;
                let (_, s) = av.dims2()?;
                let gflat = g.reshape(&[d * q, s])?;
                let xflat = xv.reshape(&[d * q, r])?;
                let dx = tensor::matmul(&gflat, &av.transpose()?)?;
                acc(*x, dx.reshape(&[d, q, r])?);
                acc(*a, tensor::matmul(&xflat.transpose()?, &gflat)?);
            }
            Op::TrReconstruct(g1, g2, g3) => {
                let (d1, d2, d3) = tr_grads(val(*g1), val(*g2), val(*g3), g)?;
                acc(*g1, d1);
                acc(*g2, d2);
                acc(*g3, d3);
            }
            Op::MeanAxis0(a) => {
                let shape = val(*a).shape();
                let n = shape[0] as f64;
                let data: Vec<f64> = (0..shape[0])
                    .flat_map(|_| g.data().iter().map(|v| v / n))
                    .collect();
                acc(*a, Tensor::new(shape.to_vec(), data)?);
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let w = *y.shape().last().unwrap();
                let mut dx = g.clone();
                for ((drow, yrow), &inv) in dx
                    .data_mut()
                    .chunks_mut(w)
                    .zip(y.data().chunks(w))
                    .zip(inv_std)
                {
                    let mean_d = drow.iter().sum::<f64>() / w as f64;
                    let mean_dy = drow.iter().zip(yrow).map(|(d, y)| d * y).sum::<f64>() / w as f64;
                    for (d, yv) in drow.iter_mut().zip(yrow) {
                        *d = inv * (*d - mean_d - yv * mean_dy);
                    }
                }
                acc(*a, dx);
            }
            Op::NormalizeRows(a, saved) => {
                let y = &node.value;
                let (_, c) = y.dims2()?;
                let mut dx = g.clone();
                for ((drow, yrow), &(denom, floored)) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(saved)
                {
                    if floored {
                        drow.iter_mut().for_each(|d| *d /= denom);
                    } else {
                        let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for (d, yv) in drow.iter_mut().zip(yrow) {
                            *d = (*d - yv * dot) / denom;
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).dims2()?;
                let (_, w) = g.dims2()?;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                acc(*a, Tensor::new(vec![r, c], dx)?);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = val(p).dims2()?;
                    let data = (0..r)
                        .flat_map(|i| {
                            g.data()[i * total + offset..i * total + offset + w]
                                .iter()
                                .copied()
                        })
                        .collect();
                    acc(p, Tensor::new(vec![r, w], data)?);
                    offset += w;
                }
            }
            Op::CrossEntropy(logits, labels) => {
                let x = val(*logits);
                let (n, _) = x.dims2()?;
                let mut p = tensor::softmax(x, 1)?;
                let scale = g.data()[0] / n as f64;
                for (i, &y) in labels.iter().enumerate() {
                    let c = p.shape()[1];
                    p.data_mut()[i * c + y] -= 1.0;
                }
                acc(*logits, p.map(|v| v * scale));
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients of `T[i,j,k] = Σ_{a,b,c} G1[i,a,b]·G2[j,b,c]·G3[k,c,a]`.
fn tr_grads(
    g1: &Tensor,
    g2: &Tensor,
    g3: &Tensor,
    dt: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n1, r1, r2) = g1.dims3()?;
    let (n2, _, r3) = g2.dims3()?;
    let (n3, _, _) = g3.dims3()?;
    let mut d1 = Tensor::zeros(g1.shape());
    let mut d2 = Tensor::zeros(g2.shape());
    let mut d3 = Tensor::zeros(g3.shape());
    for i in 0..n1 {
        for j in 0..n2 {
            for k in 0..n3 {
                let d = dt.get(&[i, j, k]);
                if d == 0.0 {
                    continue;
                }
                for a in 0..r1 {
                    for b in 0..r2 {
                        for c in 0..r3 {
                            let x1 = g1.get(&[i, a, b]);
                            let x2 = g2.get(&[j, b, c]);
                            let x3 = g3.get(&[k, c, a]);
                            let o1 = (i * r1 + a) * r2 + b;
                            let o2 = (j * r2 + b) * r3 + c;
                            let o3 = (k * r3 + c) * r1 + a;
                            d1.data_mut()[o1] += d * x2 * x3;
                            d2.data_mut()[o2] += d * x1 * x3;
                            d3.data_mut()[o3] += d * x1 * x2;
                        }
                    }
                }
            }
        }
    }
    Ok((d1, d2, d3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-4;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::ones(&[2, 2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        let x = t.constant(Tensor::from_rows(&[vec![0.5], vec![-1.0], vec![2.0]]).unwrap());
        let y = t.matmul(w, x).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        let gw = g.get(w).unwrap();
        for i in 0..2 {
            assert_eq!(gw.row(i), &[0.5, -1.0, 2.0]);
        }
        assert!(g.get(x).is_none());
    }

    #[test]
    fn softmax_log_one_hot_gives_p_minus_y() {
        let logits = Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.1]]).unwrap();
        let onehot = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let mut t = Tape::new();
        let z = t.leaf(logits.clone());
        let p = t.softmax(z).unwrap();
        let lp = t.log(p);
        let y = t.constant(onehot.clone());
        let picked = t.mul(lp, y).unwrap();
        let s = t.sum(picked);
        let loss = t.scale(s, -1.0);
        let g = t.backward(loss).unwrap();
        let probs = tensor::softmax(&logits, 1).unwrap();
        for j in 0..4 {
            let want = probs.data()[j] - onehot.data()[j];
            assert!((g.get(z).unwrap().data()[j] - want).abs() < 1e-10);
        }

        let mut t2 = Tape::new();
        let z2 = t2.leaf(logits);
        let ce = t2.cross_entropy(z2, &[1]).unwrap();
        let g2 = t2.backward(ce).unwrap();
        for j in 0..4 {
            let want = probs.data()[j] - onehot.data()[j];
            assert!((g2.get(z2).unwrap().data()[j] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn reused_tensor_accumulates_both_paths() {
        // loss = sum(x ⊙ x) + sum(x·W): x feeds three consumers.
        let mut r = rng(7);
        let x0 = random_tensor(&[3, 4], &mut r);
        let w0 = random_tensor(&[4, 2], &mut r);
        check_gradients(&[x0, w0], TOL, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let a = t.sum(sq);
            let xw = t.matmul(v[0], v[1])?;
            let b = t.sum(xw);
            t.add(a, b)
        })
        .unwrap();
    }

    #[test]
    fn each_node_visited_once() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::ones(&[2, 2]));
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let w = t.add(z, y).unwrap();
        let loss = t.sum(w);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.visited(), t.len());
        // d/dx sum(2x² + x) = 4x + 1
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn gradcheck_elementwise_and_reductions() {
        let mut r = rng(11);
        let a = random_tensor(&[3, 4], &mut r);
        let b = random_tensor(&[3, 4], &mut r);
        let bias = random_tensor(&[4], &mut r);
        check_gradients(&[a, b, bias], TOL, |t, v| {
            let s = t.sub(v[0], v[1])?;
            let m = t.mul(s, v[0])?;
            let ab = t.abs(m);
            let rl = t.relu(v[1]);
            let q = t.add(ab, rl)?;
            let qb = t.add_bias(q, v[2])?;
            let qg = t.mul_row(qb, v[2])?;
            let sc = t.scale(qg, 0.7);
            let tr = t.transpose(sc)?;
            let sq = t.mul(tr, tr)?;
            Ok(t.mean(sq))
        })
        .unwrap();
    }

    #[test]
    fn gradcheck_softmax_log_and_ce() {
        let mut r = rng(12);
        let a = random_tensor(&[3, 5], &mut r);
        let wts = random_tensor(&[3, 5], &mut r);
        check_gradients(&[a.clone(), wts], TOL, |t, v| {
            let p = t.softmax(v[0])?;
            let lp = t.log(p);
            let m = t.mul(lp, v[1])?;
            Ok(t.sum(m))
        })
        .unwrap();
        check_gradients(&[a], TOL, |t, v| t.cross_entropy(v[0], &[0, 4, 2])).unwrap();
    }

    #[test]
    fn gradcheck_khatri_rao_contract_and_mean_axis0() {
        let mut r = rng(13);
        let a = random_tensor(&[4, 3], &mut r);
        let b = random_tensor(&[4, 2], &mut r);
        let m = random_tensor(&[2, 2], &mut r);
        let probe = random_tensor(&[4, 3, 2], &mut r);
        check_gradients(&[a, b, m, probe], TOL, |t, v| {
            let kr = t.khatri_rao(v[0], v[1])?;
            let cube = t.reshape(kr, &[4, 3, 2])?;
            let c = t.contract_last(cube, v[2])?;
            let w = t.mul(c, v[3])?;
            let pooled = t.mean_axis0(w)?;
            let sq = t.mul(pooled, pooled)?;
            Ok(t.sum(sq))
        })
        .unwrap();
    }

    #[test]
    fn gradcheck_tensor_ring() {
        let mut r = rng(14);
        let g1 = random_tensor(&[3, 2, 3], &mut r);
        let g2 = random_tensor(&[2, 3, 2], &mut r);
        let g3 = random_tensor(&[4, 2, 2], &mut r);
        let probe = random_tensor(&[3, 2, 4], &mut r);
        check_gradients(&[g1, g2, g3, probe], TOL, |t, v| {
            let full = t.tr_reconstruct(v[0], v[1], v[2])?;
            let m = t.mul(full, v[3])?;
            Ok(t.sum(m))
        })
        .unwrap();
    }

    #[test]
    fn gradcheck_layer_norm_normalize_slice_concat() {
        let mut r = rng(15);
        let x = random_tensor(&[3, 6], &mut r);
        let probe = random_tensor(&[3, 6], &mut r);
        check_gradients(&[x, probe], TOL, |t, v| {
            let ln = t.layer_norm(v[0], 1e-5);
            let nr = t.normalize_rows(v[0], 1e-12)?;
            let left = t.slice_cols(ln, 0, 2)?;
            let right = t.slice_cols(nr, 2, 4)?;
            let cat = t.concat_cols(&[left, right])?;
            let m = t.mul(cat, v[1])?;
            Ok(t.sum(m))
        })
        .unwrap();
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[2], 3.0));
        let d = t.detach(x);
        let y = t.mul(x, d).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn normalize_rows_floor_applies() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[1, 3]));
        let n = t.normalize_rows(x, 1e-12).unwrap();
        assert!(t.value(n).all_finite());
        let s = t.sum(n);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().all_finite());
    }
}
