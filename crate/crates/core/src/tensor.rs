//! Dense row-major `f64` tensors and the contraction kernels used by the
//! feature-weighting block.
//!
//! Everything here is value-level: no gradient bookkeeping. The
//! differentiable counterparts live in [`crate::autodiff`] and call back into
//! these kernels for their forward passes.
//!
//! Flattening order is row-major everywhere (last index fastest). The
//! Khatri-Rao product in particular lays out row `i` as
//! `[a[i,0]*b[i,0], a[i,0]*b[i,1], ..., a[i,p-1]*b[i,q-1]]`, so fixtures
//! written by one build read back identically in another.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense n-dimensional array of `f64` in row-major order.
///
/// Serializes as the portable fixture format `{"shape": [...], "data": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from nested rows. Rows must be equally long and nonempty.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected matrix, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape(format!(
                "expected order-3 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "element-wise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Frobenius (flat L2) norm.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Column L2 norms of a matrix.
    pub fn column_norms(&self) -> Result<Vec<f64>> {
        let (r, c) = self.dims2()?;
        Ok((0..c)
            .map(|j| {
                (0..r)
                    .map(|i| self.data[i * c + j].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }

    /// Row L2 norms of a matrix.
    pub fn row_norms(&self) -> Result<Vec<f64>> {
        let (r, _) = self.dims2()?;
        Ok((0..r)
            .map(|i| self.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect())
    }
}

/// Matrix product `a (n×k) · b (k×m)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} · {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// Mode-1 Khatri-Rao product: row `i` of the result is the row-major flattened
/// outer product of row `i` of `a` (N×p) with row `i` of `b` (N×q).
pub fn khatri_rao_mode1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, p) = a.dims2()?;
    let (n2, q) = b.dims2()?;
    if n != n2 {
        return Err(Error::shape(format!(
            "khatri-rao row counts differ: {n} vs {n2}"
        )));
    }
    let mut out = Vec::with_capacity(n * p * q);
    for i in 0..n {
        for &av in a.row(i) {
            out.extend(b.row(i).iter().map(|&bv| av * bv));
        }
    }
    Ok(Tensor {
        shape: vec![n, p * q],
        data: out,
    })
}

/// Applies `a` (r×s) along the last axis of every leading slice of `x`
/// (D×q×r): `out[d,i,k] = Σ_j x[d,i,j]·a[j,k]`.
pub fn contract_last(x: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (d, q, r) = x.dims3()?;
    let (r2, s) = a.dims2()?;
    if r != r2 {
        return Err(Error::shape(format!(
            "contraction rank mismatch: {:?} with {:?}",
            x.shape, a.shape
        )));
    }
    let flat = Tensor {
        shape: vec![d * q, r],
        data: x.data.clone(),
    };
    let mut out = matmul(&flat, a)?;
    out.shape = vec![d, q, s];
    Ok(out)
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        return Err(Error::shape(format!(
            "softmax axis {axis} out of range for {:?}",
            x.shape
        )));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len)
                .map(|j| x.data[idx(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (x.data[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Order-3 cores of a tensor ring. Core `j` has shape `(d_j, r_j, r_{j+1})`
/// and the last core closes the ring back to `r_1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRingCores {
    pub cores: Vec<Tensor>,
}

impl TensorRingCores {
    pub fn new(cores: Vec<Tensor>) -> Result<Self> {
        let ring = TensorRingCores { cores };
        ring.validate()?;
        Ok(ring)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cores.is_empty() {
            return Err(Error::shape("tensor ring needs at least one core"));
        }
        let dims = self
            .cores
            .iter()
            .map(Tensor::dims3)
            .collect::<Result<Vec<_>>>()?;
        for (j, &(_, _, right)) in dims.iter().enumerate() {
            let (_, next_left, _) = dims[(j + 1) % dims.len()];
            if right != next_left {
                return Err(Error::shape(format!(
                    "core {j} trailing rank {right} does not meet core {} leading rank {next_left}",
                    (j + 1) % dims.len()
                )));
            }
        }
        Ok(())
    }

    /// Mode sizes `d_j` of the represented tensor.
    pub fn mode_sizes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.shape[0]).collect()
    }
}

/// Reconstructs the full tensor from a three-core ring:
/// `T[i,j,k] = trace(G1[i] · G2[j] · G3[k])`.
pub fn tr_reconstruct(ring: &TensorRingCores) -> Result<Tensor> {
    ring.validate()?;
    let [g1, g2, g3] = match &ring.cores[..] {
        [a, b, c] => [a, b, c],
        other => {
            return Err(Error::shape(format!(
                "expected 3 cores, got {}",
                other.len()
            )))
        }
    };
    let (d1, r1, r2) = g1.dims3()?;
    let (d2, _, r3) = g2.dims3()?;
    let (d3, _, _) = g3.dims3()?;

    let mut out = vec![0.0; d1 * d2 * d3];
    for i in 0..d1 {
        let s1 = &g1.data[i * r1 * r2..(i + 1) * r1 * r2];
        for j in 0..d2 {
            let s2 = &g2.data[j * r2 * r3..(j + 1) * r2 * r3];
            // P = G1[i]·G2[j], r1×r3
            let mut p = vec![0.0; r1 * r3];
            for a in 0..r1 {
                for b in 0..r2 {
                    let v = s1[a * r2 + b];
                    for c in 0..r3 {
                        p[a * r3 + c] += v * s2[b * r3 + c];
                    }
                }
            }
            for k in 0..d3 {
                let s3 = &g3.data[k * r3 * r1..(k + 1) * r3 * r1];
                let mut tr = 0.0;
                for a in 0..r1 {
                    for c in 0..r3 {
                        tr += p[a * r3 + c] * s3[c * r1 + a];
                    }
                }
                out[(i * d2 + j) * d3 + k] = tr;
            }
        }
    }
    Ok(Tensor {
        shape: vec![d1, d2, d3],
        data: out,
    })
}
