use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kinematics;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named trainable tensor owned by a model.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    id: u64,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<[f64]>),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Concat {
        parts: Vec<Var>,
        rows: bool,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSigmoid(Var),
    SquaredDiffMean(Var, Var),
    RowNorm(Var),
    NormalizeRows(Var),
    Reshape(Var),
    QuatToRotMat(Var),
    WorldRotations {
        local: Var,
        parents: Rc<[Option<usize>]>,
    },
    FkPositions {
        world: Var,
        root: Var,
        offsets: Rc<Tensor>,
        parents: Rc<[Option<usize>]>,
    },
    Lbs {
        points: Var,
        weights: Var,
        rots: Var,
        pos: Var,
        tpose: Rc<Tensor>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::MatMul { .. } => "matmul",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::MaxRows { .. } => "max_rows",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::SquaredDiffMean(..) => "squared_diff_mean",
            Op::RowNorm(_) => "row_norm",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::Reshape(_) => "reshape",
            Op::QuatToRotMat(_) => "quat_to_rotmat",
            Op::WorldRotations { .. } => "world_rotations",
            Op::FkPositions { .. } => "fk_positions",
            Op::Lbs { .. } => "lbs",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::SquaredDiffMean(a, b) => {
                vec![*a, *b]
            }
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Scale(x, _)
            | Op::MulConst(x, _)
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumRows(x)
            | Op::MaxRows { x, .. }
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Softmax(x)
            | Op::LogSigmoid(x)
            | Op::RowNorm(x)
            | Op::NormalizeRows(x)
            | Op::Reshape(x)
            | Op::QuatToRotMat(x) => vec![*x],
            Op::WorldRotations { local, .. } => vec![*local],
            Op::FkPositions { world, root, .. } => vec![*world, *root],
            Op::Lbs {
                points,
                weights,
                rots,
                pos,
                ..
            } => vec![*points, *weights, *rots, *pos],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records one forward pass and replays it backwards.
///
/// Nodes are appended in evaluation order, so node indices are already a
/// topological order and `backward` is a single reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<u64, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
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

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Graph {
    /// Inference-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training-mode graph whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is retained after `backward`.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Binds a model parameter; repeated calls return the same node.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(v) = self.params.get(&p.id) {
            return *v;
        }
        let v = self.leaf(p.value.clone(), true);
        self.params.insert(p.id, v);
        v
    }

    pub fn param_grad(&self, p: &Param) -> Option<&Tensor> {
        self.params.get(&p.id).and_then(|v| self.grad(*v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
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

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(va.shape(), data).unwrap()
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape(), v.data().iter().map(|x| f(*x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    /// Adds a vector of length `cols(x)` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(row).numel() != c {
            return Err(Error::shape(
                "add_row",
                format!("row {:?} for {:?}", self.shape(row), self.shape(x)),
            ));
        }
        let b = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[i % c];
        }
        self.push(out, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.map(x, |v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).numel() {
            return Err(Error::shape("mul_const", "constant length differs"));
        }
        let v = self.value(x);
        let data = v.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let t = Tensor::new(v.shape(), data)?;
        self.push(t, Op::MulConst(x, c.into()))
    }

    /// `op(a) * op(b)` for rank-2 operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("{sa:?} x {sb:?} is not rank 2"),
            ));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            sa[0],
            sa[1],
            ta,
            self.value(b).data(),
            sb[0],
            sb[1],
            tb,
            &mut out,
            false,
        );
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Concatenates along the last axis; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat of nothing"));
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = self.shape(parts[0]).to_vec();
        if shape.is_empty() {
            shape.push(total);
        } else {
            *shape.last_mut().unwrap() = total;
        }
        self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                rows: false,
            },
        )
    }

    /// Concatenates along the first axis; trailing axes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat of nothing"));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.is_empty() {
            return Err(Error::shape("concat_rows", "scalar operand"));
        }
        let mut lead = 0;
        let mut out = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::shape("concat_rows", format!("{first:?} vs {s:?}")));
            }
            lead += s[0];
            out.extend_from_slice(self.value(*p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                rows: true,
            },
        )
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let mut out = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(Tensor::new(&shape, out)?, Op::SliceCols { x, start })
    }

    /// Entries `start..start+len` of the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape().to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}+{len} of {s:?}"),
            ));
        }
        let stride: usize = s[1..].iter().product();
        let data = v.data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = s;
        shape[0] = len;
        self.push(Tensor::new(&shape, data)?, Op::SliceRows { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Sum over all rows, giving a vector of length `cols`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        let mut out = vec![0.0; c];
        for r in 0..v.rows() {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        self.push(Tensor::vector(out), Op::SumRows(x))
    }

    /// Column-wise maximum over all rows. Ties resolve to the first row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rows() == 0 {
            return Err(Error::shape("max_rows", "no rows"));
        }
        let c = v.cols();
        let mut best = v.row(0).to_vec();
        let mut argmax = vec![0usize; c];
        for r in 1..v.rows() {
            for (j, x) in v.row(r).iter().enumerate() {
                if *x > best[j] {
                    best[j] = *x;
                    argmax[j] = r;
                }
            }
        }
        self.push(Tensor::vector(best), Op::MaxRows { x, argmax })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, log_sigmoid);
        self.push(t, Op::LogSigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    /// `mean((a - b)^2)` over all elements.
    pub fn squared_diff_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("squared_diff_mean", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let n = va.numel() as f64;
        self.push(Tensor::scalar(s / n), Op::SquaredDiffMean(a, b))
    }

    /// Euclidean norm of each row.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let mut shape = v.shape().to_vec();
        shape.pop();
        let data = (0..v.rows())
            .map(|r| v.row(r).iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        self.push(Tensor::new(&shape, data)?, Op::RowNorm(x))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::NonFinite("normalize_rows: zero-length row".into()));
            }
            row.iter_mut().for_each(|a| *a /= n);
        }
        self.push(out, Op::NormalizeRows(x))
    }

    /// Inverted dropout; the identity outside training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::arg(format!(
                "dropout probability {p} must be below 1"
            )));
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        self.mul_const(x, mask)
    }

    /// `[n, 4]` unit quaternions `(w, x, y, z)` to `[n, 9]` row-major rotation matrices.
    pub fn quat_to_rotmat(&mut self, q: Var) -> Result<Var> {
        let v = self.value(q);
        if v.cols() != 4 {
            return Err(Error::shape("quat_to_rotmat", format!("{:?}", v.shape())));
        }
        let t = kinematics::quat_to_rotmat_forward(v);
        self.push(t, Op::QuatToRotMat(q))
    }

    /// Chains local rotations `[F, J, 9]` down the tree into world rotations.
    pub fn world_rotations(&mut self, local: Var, parents: &[Option<usize>]) -> Result<Var> {
        let t = kinematics::world_rotations_forward(self.value(local), parents)?;
        self.push(
            t,
            Op::WorldRotations {
                local,
                parents: parents.into(),
            },
        )
    }

    /// World joint positions `[F, J, 3]` from world rotations `[F, J, 9]`,
    /// root positions `[F, 3]` and rest offsets (`[J, 3]` or `[F, J, 3]`).
    pub fn fk_positions(
        &mut self,
        world: Var,
        root: Var,
        offsets: Tensor,
        parents: &[Option<usize>],
    ) -> Result<Var> {
        let t = kinematics::fk_positions_forward(
            self.value(world),
            self.value(root),
            &offsets,
            parents,
        )?;
        self.push(
            t,
            Op::FkPositions {
                world,
                root,
                offsets: Rc::new(offsets),
                parents: parents.into(),
            },
        )
    }

    /// Linear blend skinning of `points [V, 3]` with `weights [V, J]` under
    /// world rotations `[J, 9]` and positions `[J, 3]`, relative to T-pose
    /// joints `tpose [J, 3]`.
    pub fn lbs(
        &mut self,
        points: Var,
        weights: Var,
        rots: Var,
        pos: Var,
        tpose: Tensor,
    ) -> Result<Var> {
        let t = kinematics::lbs_forward(
            self.value(points),
            self.value(weights),
            self.value(rots),
            self.value(pos),
            &tpose,
        )?;
        self.push(
            t,
            Op::Lbs {
                points,
                weights,
                rots,
                pos,
                tpose: Rc::new(tpose),
            },
        )
    }

    /// Reverse sweep from a scalar loss. Gradients of `requires_grad`
    /// leaves accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if node.requires_grad {
                let shape = node.value.shape().to_vec();
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(&shape, g.clone())?),
                }
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].needs_grad;
        let val = |v: &Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        macro_rules! acc {
            ($v:expr) => {
                grads[$v.0].get_or_insert_with(|| vec![0.0; nodes[$v.0].value.numel()])
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    acc!(a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if needs(b) {
                    acc!(b).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let vb = val(b).data();
                    acc!(a)
                        .iter_mut()
                        .zip(g)
                        .zip(vb)
                        .for_each(|((x, y), z)| *x += y * z);
                }
                if needs(b) {
                    let va = val(a).data();
                    acc!(b)
                        .iter_mut()
                        .zip(g)
                        .zip(va)
                        .for_each(|((x, y), z)| *x += y * z);
                }
            }
            Op::AddRow(x, row) => {
                if needs(x) {
                    acc!(x).iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if needs(row) {
                    let c = val(row).numel();
                    let gr = acc!(row);
                    for (k, gv) in g.iter().enumerate() {
                        gr[k % c] += gv;
                    }
                }
            }
            Op::Scale(x, c) => {
                if needs(x) {
                    acc!(x).iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::MulConst(x, c) => {
                if needs(x) {
                    acc!(x)
                        .iter_mut()
                        .zip(g)
                        .zip(c.iter())
                        .for_each(|((a, b), m)| *a += b * m);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (m, n) = (out.shape()[0], out.shape()[1]);
                if needs(a) {
                    let ga = acc!(a);
                    if *ta {
                        // dA = op(B) G^T, shape [k, m]
                        gemm(val(b).data(), sb[0], sb[1], *tb, g, m, n, true, ga, true);
                    } else {
                        // dA = G op(B)^T, shape [m, k]
                        gemm(g, m, n, false, val(b).data(), sb[0], sb[1], !*tb, ga, true);
                    }
                }
                if needs(b) {
                    let gb = acc!(b);
                    if *tb {
                        // dB = G^T op(A), shape [n, k]
                        gemm(g, m, n, true, val(a).data(), sa[0], sa[1], *ta, gb, true);
                    } else {
                        // dB = op(A)^T G, shape [k, n]
                        gemm(val(a).data(), sa[0], sa[1], !*ta, g, m, n, false, gb, true);
                    }
                }
            }
            Op::Concat { parts, rows } => {
                if *rows {
                    let mut off = 0;
                    for p in parts {
                        let len = val(p).numel();
                        if needs(p) {
                            acc!(p)
                                .iter_mut()
                                .zip(&g[off..off + len])
                                .for_each(|(a, b)| *a += b);
                        }
                        off += len;
                    }
                } else {
                    let total = out.cols();
                    let mut col = 0;
                    for p in parts {
                        let c = val(p).cols();
                        if needs(p) {
                            let gp = acc!(p);
                            for (r, chunk) in gp.chunks_mut(c).enumerate() {
                                let src = &g[r * total + col..r * total + col + c];
                                chunk.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                            }
                        }
                        col += c;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if needs(x) {
                    let c = val(x).cols();
                    let len = out.cols();
                    let gx = acc!(x);
                    for (r, src) in g.chunks(len).enumerate() {
                        gx[r * c + start..r * c + start + len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if needs(x) {
                    let stride: usize = val(x).shape()[1..].iter().product();
                    let gx = acc!(x);
                    gx[start * stride..start * stride + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::Reshape(x) => {
                if needs(x) {
                    acc!(x).iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Sum(x) => {
                if needs(x) {
                    acc!(x).iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if needs(x) {
                    let n = val(x).numel() as f64;
                    acc!(x).iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            Op::SumRows(x) => {
                if needs(x) {
                    let c = g.len();
                    for (k, a) in acc!(x).iter_mut().enumerate() {
                        *a += g[k % c];
                    }
                }
            }
            Op::MaxRows { x, argmax } => {
                if needs(x) {
                    let c = g.len();
                    let gx = acc!(x);
                    for (j, r) in argmax.iter().enumerate() {
                        gx[r * c + j] += g[j];
                    }
                }
            }
            Op::Relu(x) => {
                if needs(x) {
                    let vx = val(x).data();
                    acc!(x)
                        .iter_mut()
                        .zip(g)
                        .zip(vx)
                        .for_each(|((a, b), v)| *a += if *v > 0.0 { *b } else { 0.0 });
                }
            }
            Op::Sigmoid(x) => {
                if needs(x) {
                    let y = out.data();
                    acc!(x)
                        .iter_mut()
                        .zip(g)
                        .zip(y)
                        .for_each(|((a, b), y)| *a += b * y * (1.0 - y));
                }
            }
            Op::Tanh(x) => {
                if needs(x) {
                    let y = out.data();
                    acc!(x)
                        .iter_mut()
                        .zip(g)
                        .zip(y)
                        .for_each(|((a, b), y)| *a += b * (1.0 - y * y));
                }
            }
            Op::LogSigmoid(x) => {
                if needs(x) {
                    let vx = val(x).data();
                    acc!(x)
                        .iter_mut()
                        .zip(g)
                        .zip(vx)
                        .for_each(|((a, b), v)| *a += b * sigmoid(-v));
                }
            }
            Op::Softmax(x) => {
                if needs(x) {
                    let c = out.cols();
                    let y = out.data();
                    let gx = acc!(x);
                    for r in 0..y.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            gx[r * c + k] += yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::SquaredDiffMean(a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                let s = 2.0 * g[0] / va.len() as f64;
                if needs(a) {
                    acc!(a)
                        .iter_mut()
                        .zip(va.iter().zip(vb))
                        .for_each(|(d, (x, y))| *d += s * (x - y));
                }
                if needs(b) {
                    acc!(b)
                        .iter_mut()
                        .zip(va.iter().zip(vb))
                        .for_each(|(d, (x, y))| *d -= s * (x - y));
                }
            }
            Op::RowNorm(x) => {
                if needs(x) {
                    let vx = val(x);
                    let c = vx.cols();
                    let norms = out.data();
                    let gx = acc!(x);
                    for r in 0..vx.rows() {
                        if norms[r] > 0.0 {
                            let s = g[r] / norms[r];
                            for k in 0..c {
                                gx[r * c + k] += s * vx.data()[r * c + k];
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows(x) => {
                if needs(x) {
                    let vx = val(x);
                    let c = vx.cols();
                    let y = out.data();
                    let gx = acc!(x);
                    for r in 0..vx.rows() {
                        let xr = &vx.data()[r * c..(r + 1) * c];
                        let n = xr.iter().map(|a| a * a).sum::<f64>().sqrt();
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            gx[r * c + k] += (gr[k] - yr[k] * dot) / n;
                        }
                    }
                }
            }
            Op::QuatToRotMat(q) => {
                if needs(q) {
                    kinematics::quat_to_rotmat_backward(val(q).data(), g, acc!(q));
                }
            }
            Op::WorldRotations { local, parents } => {
                if needs(local) {
                    kinematics::world_rotations_backward(
                        val(local).data(),
                        out.data(),
                        parents,
                        g,
                        acc!(local),
                    );
                }
            }
            Op::FkPositions {
                world,
                root,
                offsets,
                parents,
            } => {
                let (gw, gr) =
                    kinematics::fk_positions_backward(val(world).data(), offsets, parents, g);
                if needs(world) {
                    acc!(world).iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
                }
                if needs(root) {
                    acc!(root).iter_mut().zip(&gr).for_each(|(a, b)| *a += b);
                }
            }
            Op::Lbs {
                points,
                weights,
                rots,
                pos,
                tpose,
            } => {
                let grads_out = kinematics::lbs_backward(
                    val(points).data(),
                    val(weights).data(),
                    val(rots).data(),
                    val(pos).data(),
                    tpose.data(),
                    g,
                );
                for (v, gv) in [points, weights, rots, pos].into_iter().zip(grads_out) {
                    if needs(v) {
                        acc!(v).iter_mut().zip(&gv).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
}
