use std::fmt;

use super::AutodiffError;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if data.len() != rows * cols {
            return Err(AutodiffError::Shape {
                op: "tensor",
                detail: format!("{} values for a {rows}x{cols} tensor", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::Numerical(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for values produced by the engine's own kernels.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(1, 1, vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AutodiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AutodiffError::Shape {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.shape() == (1, 1)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Rows below this norm cannot be normalized.
pub const EPS_NORM: f64 = 1e-12;

/// Row-wise L2 normalization. Returns the normalized tensor and row norms.
pub fn l2_normalize_rows(input: &Tensor) -> Result<(Tensor, Vec<f64>), AutodiffError> {
    let mut out = input.clone();
    let mut norms = Vec::with_capacity(input.rows);
    for r in 0..input.rows {
        let n = norm(input.row(r));
        if !(n > EPS_NORM) {
            return Err(AutodiffError::DegenerateRow { row: r, norm: n });
        }
        for v in &mut out.data[r * input.cols..(r + 1) * input.cols] {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// One output row per group: the mean of the input rows it indexes
/// (repeats count with multiplicity).
pub fn group_mean_rows(input: &Tensor, groups: &[Vec<usize>]) -> Result<Tensor, AutodiffError> {
    let cols = input.cols;
    let mut out = vec![0.0; groups.len() * cols];
    for (g, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(AutodiffError::Shape {
                op: "rowwise_mean",
                detail: format!("group {g} is empty"),
            });
        }
        let dst = &mut out[g * cols..(g + 1) * cols];
        for &m in members {
            if m >= input.rows {
                return Err(AutodiffError::Index {
                    op: "rowwise_mean",
                    index: m,
                    bound: input.rows,
                });
            }
            for (d, s) in dst.iter_mut().zip(input.row(m)) {
                *d += s;
            }
        }
        let inv = members.len() as f64;
        for d in dst.iter_mut() {
            *d /= inv;
        }
    }
    Ok(Tensor::from_parts(groups.len(), cols, out))
}

pub(crate) fn matmul_kernel(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b.data[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(n, m, out)
}

pub(crate) fn transpose_kernel(a: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.data.len()];
    for r in 0..a.rows {
        for c in 0..a.cols {
            out[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    Tensor::from_parts(a.cols, a.rows, out)
}
