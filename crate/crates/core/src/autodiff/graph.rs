use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{mm, mm_nt, mm_tn, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{cross3, DEGENERACY_EPS};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Blend { fuse: Var, goal: Var, weight: Var },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    Softmax(Var),
    LayerNorm(Var, f64),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    ColStd(Var),
    BceWithLogits(Var, Tensor),
    Rot6dToMatrix(Var),
    RelRotResidual(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so reverse
/// insertion order is a valid reverse topological order for `backward`.
#[derive(Debug)]
pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph<'static> {
    /// A tape without parameters; only constants can be used as leaves.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected rank 2, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<'p> Graph<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
        }
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

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::BadConfig("graph has no parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(Error::BadConfig(format!("unknown parameter {}", id.0)));
        }
        let value = store.get(id).value.clone();
        self.push(value, Op::Param(id), "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d("matmul", self.value(a))?;
        let (k2, n) = check_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = check_2d("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), "transpose")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (r, c) = check_2d(op, self.value(a))?;
        if self.shape(row) != [1, c] {
            return Err(Error::shape(
                op,
                format!("row {:?} for matrix {r}x{c}", self.shape(row)),
            ));
        }
        let rv = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, b)| f(*x, *b)))
            .collect();
        Tensor::matrix(r, c, data)
    }

    /// Adds a `1 x n` row (bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, bias, |x, b| x + b)?;
        self.push(out, Op::AddRow(a, bias), "add_row")
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row (gain).
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, gain, |x, g| x * g)?;
        self.push(out, Op::MulRow(a, gain), "mul_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| c * x);
        self.push(out, Op::Scale(a, c), "scale")
    }

    /// Multiplies `a` by a one-element node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let out = self.map(a, |x| sv * x);
        self.push(out, Op::MulScalar(a, s), "mul_scalar")
    }

    /// `(1 - w) * fuse + w * goal` with a one-element weight `w`.
    pub fn blend(&mut self, fuse: Var, goal: Var, weight: Var) -> Result<Var> {
        self.same_shape("blend", fuse, goal)?;
        let w = self.value(weight).item()?;
        let keep = 1.0 - w;
        let out = self.zip_map(fuse, goal, |f, g| keep * f + w * g);
        self.push(out, Op::Blend { fuse, goal, weight }, "blend")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (r, _) = check_2d("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = check_2d("concat_cols", self.value(p))?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("rows {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            Tensor::matrix(r, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, c) = check_2d("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = check_2d("concat_rows", self.value(p))?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("cols {pc} vs {c}")));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::matrix(rows, c, out)?,
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = check_2d("slice_cols", self.value(a))?;
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c}")));
        }
        let t = self.value(a);
        let out = (0..r).flat_map(|i| t.row(i)[start..end].to_vec()).collect();
        self.push(
            Tensor::matrix(r, end - start, out)?,
            Op::SliceCols(a, start, end),
            "slice_cols",
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = check_2d("slice_rows", self.value(a))?;
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r}")));
        }
        let out = self.value(a).data()[start * c..end * c].to_vec();
        self.push(
            Tensor::matrix(end - start, c, out)?,
            Op::SliceRows(a, start, end),
            "slice_rows",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().with_shape(shape.to_vec())?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Mean over the leading (time) axis: `T x d -> 1 x d`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = check_2d("mean_rows", self.value(a))?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.value(a).row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Tensor::matrix(1, c, out)?, Op::MeanRows(a), "mean_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = check_2d("softmax", self.value(a))?;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = self.value(a).row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut total = 0.0;
            for v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        self.push(Tensor::matrix(r, c, out)?, Op::Softmax(a), "softmax")
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = check_2d("layer_norm", self.value(a))?;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = self.value(a).row(i);
            let (mean, inv) = row_stats(row, eps);
            out.extend(row.iter().map(|v| (v - mean) * inv));
        }
        self.push(Tensor::matrix(r, c, out)?, Op::LayerNorm(a, eps), "layer_norm")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::abs);
        self.push(out, Op::Abs(a), "abs")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x * x);
        self.push(out, Op::Square(a), "square")
    }

    /// Population standard deviation of each column: `T x d -> 1 x d`.
    pub fn col_std(&mut self, a: Var) -> Result<Var> {
        let (r, c) = check_2d("col_std", self.value(a))?;
        let t = self.value(a);
        let out = (0..c)
            .map(|j| {
                let mean = (0..r).map(|i| t.get(i, j)).sum::<f64>() / r as f64;
                let var = (0..r).map(|i| (t.get(i, j) - mean).powi(2)).sum::<f64>() / r as f64;
                var.sqrt()
            })
            .collect();
        self.push(Tensor::matrix(1, c, out)?, Op::ColStd(a), "col_std")
    }

    /// Elementwise binary cross-entropy with logits against constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", self.shape(logits), targets.shape()),
            ));
        }
        let data = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(z, t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let out = Tensor::new(targets.shape().to_vec(), data)?;
        self.push(out, Op::BceWithLogits(logits, targets), "bce_with_logits")
    }

    /// Maps each `1 x 6` row to its row-major `3 x 3` Gram-Schmidt rotation (`T x 9`).
    pub fn rot6d_to_matrix(&mut self, a: Var) -> Result<Var> {
        let (r, c) = check_2d("rot6d_to_matrix", self.value(a))?;
        if c != 6 {
            return Err(Error::shape("rot6d_to_matrix", format!("{c} columns")));
        }
        let mut out = Vec::with_capacity(r * 9);
        for i in 0..r {
            let gs = GramSchmidt::forward(self.value(a).row(i))?;
            out.extend_from_slice(&gs.flat());
        }
        self.push(Tensor::matrix(r, 9, out)?, Op::Rot6dToMatrix(a), "rot6d_to_matrix")
    }

    /// Per row: `P^T G - I` flattened row-major, where `P` comes from `pred`
    /// (`T x 9`) and `G` from the constant `gt` (`T x 9`).
    pub fn rel_rot_residual(&mut self, pred: Var, gt: Tensor) -> Result<Var> {
        let (r, c) = check_2d("rel_rot_residual", self.value(pred))?;
        if c != 9 || gt.shape() != [r, 9] {
            return Err(Error::shape(
                "rel_rot_residual",
                format!("{:?} vs {:?}", self.shape(pred), gt.shape()),
            ));
        }
        let mut out = Vec::with_capacity(r * 9);
        for t in 0..r {
            let p = self.value(pred).row(t);
            let g = gt.row(t);
            for j in 0..3 {
                for k in 0..3 {
                    let v: f64 = (0..3).map(|i| p[3 * i + j] * g[3 * i + k]).sum();
                    out.push(if j == k { v - 1.0 } else { v });
                }
            }
        }
        self.push(
            Tensor::matrix(r, 9, out)?,
            Op::RelRotResidual(pred, gt),
            "rel_rot_residual",
        )
    }

    /// Reverse-mode sweep from a one-element `loss`. Parameters not reached
    /// from the loss get zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let mut out = match self.store {
            Some(store) => Gradients::zeros_like(store),
            None => Gradients { grads: Vec::new() },
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.grads[id.0].add_assign(&dy),
                Op::MatMul(a, b) => {
                    let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                    let n = self.value(*b).cols();
                    let da = mm_nt(dy.data(), self.value(*b).data(), m, n, k);
                    let db = mm_tn(self.value(*a).data(), dy.data(), m, k, n);
                    acc(&mut grads, *a, Tensor::matrix(m, k, da)?);
                    acc(&mut grads, *b, Tensor::matrix(k, n, db)?);
                }
                Op::Transpose(a) => {
                    let (r, c) = (dy.rows(), dy.cols());
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] = dy.data()[i * c + j];
                        }
                    }
                    acc(&mut grads, *a, Tensor::matrix(c, r, da)?);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    let neg = map_t(&dy, |v| -v);
                    acc(&mut grads, *a, dy);
                    acc(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let da = zip_t(&dy, self.value(*b), |g, v| g * v);
                    let db = zip_t(&dy, self.value(*a), |g, v| g * v);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let db = col_sums(&dy);
                    acc(&mut grads, *a, dy);
                    acc(&mut grads, *bias, db);
                }
                Op::MulRow(a, gain) => {
                    let c = dy.cols();
                    let g = self.value(*gain).data();
                    let x = self.value(*a);
                    let mut dg = vec![0.0; c];
                    let mut da = Vec::with_capacity(dy.len());
                    for (i, (dyv, xv)) in dy.data().iter().zip(x.data()).enumerate() {
                        da.push(dyv * g[i % c]);
                        dg[i % c] += dyv * xv;
                    }
                    acc(&mut grads, *a, Tensor::new(dy.shape().to_vec(), da)?);
                    acc(&mut grads, *gain, Tensor::matrix(1, c, dg)?);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, map_t(&dy, |v| c * v)),
                Op::MulScalar(a, s) => {
                    let sv = self.value(*s).data()[0];
                    let ds: f64 = dy
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .sum();
                    acc(&mut grads, *a, map_t(&dy, |v| sv * v));
                    acc(&mut grads, *s, Tensor::filled(self.shape(*s), ds));
                }
                Op::Blend { fuse, goal, weight } => {
                    let w = self.value(*weight).data()[0];
                    let f = self.value(*fuse);
                    let g = self.value(*goal);
                    let dw: f64 = dy
                        .data()
                        .iter()
                        .zip(f.data().iter().zip(g.data()))
                        .map(|(d, (fv, gv))| d * (gv - fv))
                        .sum();
                    acc(&mut grads, *fuse, map_t(&dy, |v| (1.0 - w) * v));
                    acc(&mut grads, *goal, map_t(&dy, |v| w * v));
                    acc(&mut grads, *weight, Tensor::filled(self.shape(*weight), dw));
                }
                Op::ConcatCols(parts) => {
                    let r = dy.rows();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let part = (0..r)
                            .flat_map(|i| dy.row(i)[offset..offset + w].to_vec())
                            .collect();
                        acc(&mut grads, *p, Tensor::matrix(r, w, part)?);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = dy.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pr = self.value(*p).rows();
                        let part = dy.data()[offset * c..(offset + pr) * c].to_vec();
                        acc(&mut grads, *p, Tensor::matrix(pr, c, part)?);
                        offset += pr;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let src = self.value(*a);
                    let (r, c) = (src.rows(), src.cols());
                    let mut da = vec![0.0; r * c];
                    let w = end - start;
                    for i in 0..r {
                        da[i * c + start..i * c + end].copy_from_slice(&dy.data()[i * w..(i + 1) * w]);
                    }
                    acc(&mut grads, *a, Tensor::matrix(r, c, da)?);
                }
                Op::SliceRows(a, start, end) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut da = vec![0.0; src.len()];
                    da[start * c..end * c].copy_from_slice(dy.data());
                    acc(&mut grads, *a, Tensor::new(src.shape().to_vec(), da)?);
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a).to_vec();
                    acc(&mut grads, *a, dy.with_shape(shape)?);
                }
                Op::MeanRows(a) => {
                    let r = self.value(*a).rows();
                    let inv = 1.0 / r as f64;
                    let row: Vec<f64> = dy.data().iter().map(|v| v * inv).collect();
                    let da = (0..r).flat_map(|_| row.iter().copied()).collect();
                    acc(&mut grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
                }
                Op::Sum(a) => {
                    let g = dy.data()[0];
                    acc(&mut grads, *a, Tensor::filled(self.shape(*a), g));
                }
                Op::Softmax(a) => {
                    let c = y.cols();
                    let mut da = Vec::with_capacity(y.len());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = dy.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        da.extend(yr.iter().zip(gr).map(|(p, g)| p * (g - dot)));
                    }
                    debug_assert_eq!(da.len(), y.rows() * c);
                    acc(&mut grads, *a, Tensor::new(y.shape().to_vec(), da)?);
                }
                Op::LayerNorm(a, eps) => {
                    let x = self.value(*a);
                    let c = x.cols();
                    let mut da = Vec::with_capacity(x.len());
                    for i in 0..x.rows() {
                        let (_, inv) = row_stats(x.row(i), *eps);
                        let xh = y.row(i);
                        let gr = dy.row(i);
                        let mean_g = gr.iter().sum::<f64>() / c as f64;
                        let mean_gx =
                            gr.iter().zip(xh).map(|(g, h)| g * h).sum::<f64>() / c as f64;
                        da.extend(
                            gr.iter()
                                .zip(xh)
                                .map(|(g, h)| inv * (g - mean_g - h * mean_gx)),
                        );
                    }
                    acc(&mut grads, *a, Tensor::new(x.shape().to_vec(), da)?);
                }
                Op::Gelu(a) => {
                    let da = zip_t(&dy, self.value(*a), |g, x| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    });
                    acc(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let da = zip_t(&dy, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => acc(&mut grads, *a, zip_t(&dy, y, |g, s| g * s * (1.0 - s))),
                Op::Abs(a) => {
                    let da = zip_t(&dy, self.value(*a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, da);
                }
                Op::Square(a) => acc(&mut grads, *a, zip_t(&dy, self.value(*a), |g, x| 2.0 * g * x)),
                Op::ColStd(a) => {
                    let x = self.value(*a);
                    let (r, c) = (x.rows(), x.cols());
                    let mut da = vec![0.0; r * c];
                    for j in 0..c {
                        let sd = y.data()[j];
                        if sd <= 0.0 {
                            continue;
                        }
                        let mean = (0..r).map(|i| x.get(i, j)).sum::<f64>() / r as f64;
                        for i in 0..r {
                            da[i * c + j] = dy.data()[j] * (x.get(i, j) - mean) / (r as f64 * sd);
                        }
                    }
                    acc(&mut grads, *a, Tensor::matrix(r, c, da)?);
                }
                Op::BceWithLogits(z, targets) => {
                    let dz = zip_t(self.value(*z), targets, |zv, t| sigmoid(zv) - t);
                    acc(&mut grads, *z, zip_t(&dz, &dy, |a, b| a * b));
                }
                Op::Rot6dToMatrix(a) => {
                    let x = self.value(*a);
                    let mut da = Vec::with_capacity(x.len());
                    for i in 0..x.rows() {
                        let gs = GramSchmidt::forward(x.row(i))?;
                        da.extend_from_slice(&gs.backward(dy.row(i)));
                    }
                    acc(&mut grads, *a, Tensor::new(x.shape().to_vec(), da)?);
                }
                Op::RelRotResidual(pred, gt) => {
                    let r = dy.rows();
                    let mut dp = vec![0.0; r * 9];
                    for t in 0..r {
                        let g = gt.row(t);
                        let d = dy.row(t);
                        for i in 0..3 {
                            for j in 0..3 {
                                dp[t * 9 + 3 * i + j] =
                                    (0..3).map(|k| d[3 * j + k] * g[3 * i + k]).sum();
                            }
                        }
                    }
                    acc(&mut grads, *pred, Tensor::matrix(r, 9, dp)?);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map_t(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|v| f(*v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip_t(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn col_sums(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for (i, v) in t.data().iter().enumerate() {
        out[i % c] += v;
    }
    Tensor::matrix(1, c, out).expect("c > 0")
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Intermediate values of the 6D -> matrix map for one row.
struct GramSchmidt {
    a2: [f64; 3],
    b1: [f64; 3],
    b2: [f64; 3],
    b3: [f64; 3],
    n1: f64,
    n2: f64,
    proj: f64,
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl GramSchmidt {
    fn forward(row: &[f64]) -> Result<Self> {
        let a1 = [row[0], row[1], row[2]];
        let a2 = [row[3], row[4], row[5]];
        let n1 = dot(&a1, &a1).sqrt();
        if n1 <= DEGENERACY_EPS {
            return Err(Error::DegenerateInput(format!("|a1| = {n1:e}")));
        }
        let b1 = a1.map(|v| v / n1);
        let proj = dot(&b1, &a2);
        let p = [
            a2[0] - proj * b1[0],
            a2[1] - proj * b1[1],
            a2[2] - proj * b1[2],
        ];
        let n2 = dot(&p, &p).sqrt();
        if n2 <= DEGENERACY_EPS {
            return Err(Error::DegenerateInput(format!("a2 residual = {n2:e}")));
        }
        let b2 = p.map(|v| v / n2);
        let b3 = cross3(&b1, &b2);
        Ok(GramSchmidt {
            a2,
            b1,
            b2,
            b3,
            n1,
            n2,
            proj,
        })
    }

    /// Row-major matrix with columns b1, b2, b3.
    fn flat(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for i in 0..3 {
            out[3 * i] = self.b1[i];
            out[3 * i + 1] = self.b2[i];
            out[3 * i + 2] = self.b3[i];
        }
        out
    }

    fn backward(&self, dy: &[f64]) -> [f64; 6] {
        let mut g1 = [dy[0], dy[3], dy[6]];
        let mut g2 = [dy[1], dy[4], dy[7]];
        let g3 = [dy[2], dy[5], dy[8]];
        // b3 = b1 x b2
        let from3_1 = cross3(&self.b2, &g3);
        let from3_2 = cross3(&g3, &self.b1);
        for i in 0..3 {
            g1[i] += from3_1[i];
            g2[i] += from3_2[i];
        }
        // b2 = p / |p|
        let b2g = dot(&self.b2, &g2);
        let gp: [f64; 3] = std::array::from_fn(|i| (g2[i] - self.b2[i] * b2g) / self.n2);
        // p = a2 - (b1 . a2) b1
        let b1gp = dot(&self.b1, &gp);
        let ga2: [f64; 3] = std::array::from_fn(|i| gp[i] - self.b1[i] * b1gp);
        for i in 0..3 {
            g1[i] -= self.proj * gp[i] + b1gp * self.a2[i];
        }
        // b1 = a1 / |a1|
        let b1g = dot(&self.b1, &g1);
        let ga1: [f64; 3] = std::array::from_fn(|i| (g1[i] - self.b1[i] * b1g) / self.n1);
        [ga1[0], ga1[1], ga1[2], ga2[0], ga2[1], ga2[2]]
    }
}
