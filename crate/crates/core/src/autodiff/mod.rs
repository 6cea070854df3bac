//! Minimal tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every primitive records itself on a [`Tape`] and returns a [`Var`] handle.
//! Leaves created with [`Tape::leaf`] receive gradients; constants do not.
//! [`Tape::backward`] consumes the tape and returns the gradient of a scalar
//! with respect to every leaf.

mod gradcheck;
mod tensor;

use thiserror::Error;

pub use gradcheck::{analytic_gradients, compare_gradients, grad_check, GradCheckReport};
pub use tensor::{group_mean_rows, l2_normalize_rows, Tensor, EPS_NORM};

pub(crate) use tensor::{dot, norm};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("row {row} has norm {norm:e}, below the normalization floor")]
    DegenerateRow { row: usize, norm: f64 },
    #[error("index {index} out of range 0..{bound} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Normalize { input: Var, norms: Vec<f64> },
    GroupMean { input: Var, groups: Vec<Vec<usize>> },
    RowDot(Var, Var),
    SumSquares(Var),
    Sum(Var),
    CrossEntropy {
        input: Var,
        candidates: Vec<Vec<usize>>,
        targets: Vec<usize>,
        scale: f64,
        probs: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> AutodiffError {
    AutodiffError::Shape {
        op,
        detail: format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1),
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.value(var).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let out = tensor::matmul_kernel(va, vb);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = tensor::transpose_kernel(self.value(a));
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Transpose(a), tracked)
    }

    /// Stacks tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(AutodiffError::Shape {
                op: "concat_rows",
                detail: "nothing to concatenate".into(),
            });
        };
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first).shape(), v.shape()));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let tracked = self.tracked(parts);
        Ok(self.push(Tensor::from_parts(rows, cols, data), Op::ConcatRows(parts.to_vec()), tracked))
    }

    fn elementwise(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(va.rows(), va.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "add", |x, y| x + y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "sub", |x, y| x - y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(va.rows(), va.cols(), va.data().iter().map(|x| x * c).collect());
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Scale(a, c), tracked)
    }

    /// Divides each row by its Euclidean norm.
    pub fn rowwise_l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (out, norms) = l2_normalize_rows(self.value(a))?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, Op::Normalize { input: a, norms }, tracked))
    }

    /// Output row `g` is the mean of input rows listed in `groups[g]`.
    /// A singleton group is a row gather.
    pub fn rowwise_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let out = group_mean_rows(self.value(a), &groups)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(out, Op::GroupMean { input: a, groups }, tracked))
    }

    /// Gathers rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.rowwise_mean(a, indices.iter().map(|&i| vec![i]).collect())
    }

    /// `n x 1` column of per-row dot products.
    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("rowwise_dot", va.shape(), vb.shape()));
        }
        let data = (0..va.rows()).map(|r| dot(va.row(r), vb.row(r))).collect();
        let out = Tensor::from_parts(va.rows(), 1, data);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, Op::RowDot(a, b), tracked))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::SumSquares(a), tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    /// `Q · Dᵀ` for row-normalized inputs, i.e. the cosine similarity matrix.
    /// Normalization is the caller's contract.
    pub fn cosine_similarity_matrix(&mut self, q: Var, d: Var) -> Result<Var> {
        let (vq, vd) = (self.value(q), self.value(d));
        if vq.cols() != vd.cols() {
            return Err(shape_err("cosine_similarity_matrix", vq.shape(), vd.shape()));
        }
        let dt = self.transpose(d);
        self.matmul(q, dt)
    }

    /// Mean over rows of `-log softmax(scale * S_i)[target_i]` over all columns.
    pub fn softmax_cross_entropy_rows(&mut self, s: Var, targets: &[usize], scale: f64) -> Result<Var> {
        let cols = self.value(s).cols();
        let candidates = vec![(0..cols).collect::<Vec<_>>(); targets.len()];
        self.softmax_cross_entropy_masked(s, candidates, targets, scale)
    }

    /// Like [`Tape::softmax_cross_entropy_rows`], restricting row `i`'s softmax to
    /// the columns in `candidates[i]`; `targets[i]` is a column index that must
    /// appear among them.
    pub fn softmax_cross_entropy_masked(
        &mut self,
        s: Var,
        candidates: Vec<Vec<usize>>,
        targets: &[usize],
        scale: f64,
    ) -> Result<Var> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(AutodiffError::InvalidArgument(format!("scale must be positive, got {scale}")));
        }
        let vs = self.value(s);
        if targets.len() != vs.rows() || candidates.len() != vs.rows() {
            return Err(AutodiffError::Shape {
                op: "softmax_cross_entropy",
                detail: format!("{} targets / {} candidate sets for {} rows", targets.len(), candidates.len(), vs.rows()),
            });
        }
        if vs.rows() == 0 {
            return Err(AutodiffError::Shape {
                op: "softmax_cross_entropy",
                detail: "no rows".into(),
            });
        }
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(vs.rows());
        for (i, (cands, &t)) in candidates.iter().zip(targets).enumerate() {
            if cands.is_empty() {
                return Err(AutodiffError::InvalidArgument(format!("row {i} has no candidates")));
            }
            if let Some(&bad) = cands.iter().find(|&&c| c >= vs.cols()) {
                return Err(AutodiffError::Index {
                    op: "softmax_cross_entropy",
                    index: bad,
                    bound: vs.cols(),
                });
            }
            let Some(tpos) = cands.iter().position(|&c| c == t) else {
                return Err(AutodiffError::Index {
                    op: "softmax_cross_entropy",
                    index: t,
                    bound: vs.cols(),
                });
            };
            let logits: Vec<f64> = cands.iter().map(|&c| scale * vs.get(i, c)).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            total += z.ln() + max - logits[tpos];
            probs.push(exps.iter().map(|e| e / z).collect());
        }
        let loss = total / vs.rows() as f64;
        let tracked = self.tracked(&[s]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                input: s,
                candidates,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            tracked,
        ))
    }

    /// Reverse pass from a scalar. Returns gradients for every leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(AutodiffError::Shape {
                op: "backward",
                detail: format!("loss is {}x{}, expected 1x1", lv.rows(), lv.cols()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let upstream = Tensor::from_parts(node.value.rows(), node.value.cols(), g);
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.nodes[a.0].tracked {
                        let ga = tensor::matmul_kernel(&upstream, &tensor::transpose_kernel(vb));
                        accumulate(&mut grads, *a, ga.data());
                    }
                    if self.nodes[b.0].tracked {
                        let gb = tensor::matmul_kernel(&tensor::transpose_kernel(va), &upstream);
                        accumulate(&mut grads, *b, gb.data());
                    }
                }
                Op::Transpose(a) => {
                    let upstream = Tensor::from_parts(node.value.rows(), node.value.cols(), g);
                    accumulate(&mut grads, *a, tensor::transpose_kernel(&upstream).data());
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.data().len();
                        accumulate(&mut grads, *p, &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Scale(a, c) => {
                    let scaled: Vec<f64> = g.iter().map(|x| x * c).collect();
                    accumulate(&mut grads, *a, &scaled);
                }
                Op::Normalize { input, norms } => {
                    // dx = (dy - y (y . dy)) / |x|
                    let y = &node.value;
                    let cols = y.cols();
                    let mut gx = vec![0.0; g.len()];
                    for (r, n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let proj = dot(yr, gr);
                        for c in 0..cols {
                            gx[r * cols + c] = (gr[c] - yr[c] * proj) / n;
                        }
                    }
                    accumulate(&mut grads, *input, &gx);
                }
                Op::GroupMean { input, groups } => {
                    let src = &self.nodes[input.0].value;
                    let cols = src.cols();
                    let mut gx = vec![0.0; src.rows() * cols];
                    for (gi, members) in groups.iter().enumerate() {
                        let w = 1.0 / members.len() as f64;
                        let gr = &g[gi * cols..(gi + 1) * cols];
                        for &m in members {
                            for (d, s) in gx[m * cols..(m + 1) * cols].iter_mut().zip(gr) {
                                *d += s * w;
                            }
                        }
                    }
                    accumulate(&mut grads, *input, &gx);
                }
                Op::RowDot(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let cols = va.cols();
                    let mut ga = vec![0.0; va.data().len()];
                    let mut gb = vec![0.0; vb.data().len()];
                    for r in 0..va.rows() {
                        for c in 0..cols {
                            ga[r * cols + c] = g[r] * vb.get(r, c);
                            gb[r * cols + c] = g[r] * va.get(r, c);
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::SumSquares(a) => {
                    let va = &self.nodes[a.0].value;
                    let gx: Vec<f64> = va.data().iter().map(|x| 2.0 * x * g[0]).collect();
                    accumulate(&mut grads, *a, &gx);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.data().len();
                    accumulate(&mut grads, *a, &vec![g[0]; n]);
                }
                Op::CrossEntropy {
                    input,
                    candidates,
                    targets,
                    scale,
                    probs,
                } => {
                    let vs = &self.nodes[input.0].value;
                    let cols = vs.cols();
                    let w = g[0] * scale / vs.rows() as f64;
                    let mut gx = vec![0.0; vs.data().len()];
                    for (i, (cands, p)) in candidates.iter().zip(probs).enumerate() {
                        for (&c, &pc) in cands.iter().zip(p) {
                            let indicator = if c == targets[i] { 1.0 } else { 0.0 };
                            gx[i * cols + c] += w * (pc - indicator);
                        }
                    }
                    accumulate(&mut grads, *input, &gx);
                }
            }
        }

        let mut leaves = Vec::new();
        for (id, node) in self.nodes.into_iter().enumerate() {
            if let Op::Leaf = node.op {
                let (rows, cols) = node.value.shape();
                let g = grads[id].take().unwrap_or_else(|| vec![0.0; rows * cols]);
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(AutodiffError::Numerical(format!("non-finite gradient for leaf {id} at {i}")));
                }
                leaves.push((Var(id), Tensor::from_parts(rows, cols, g)));
            }
        }
        Ok(Gradients { leaves })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, g: &[f64]) {
    match &mut grads[var.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Gradients of a scalar with respect to each leaf of the tape it came from.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(v, _)| *v == leaf).map(|(_, t)| t)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        let pos = self.leaves.iter().position(|(v, _)| *v == leaf)?;
        Some(self.leaves.swap_remove(pos).1)
    }
}
