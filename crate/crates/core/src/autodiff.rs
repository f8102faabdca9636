//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are appended to a [`Tape`] as they are evaluated, so node
//! order is already a topological order. [`Tape::backward`] walks the tape
//! once in reverse and accumulates gradients for the requested parameters.
//!
//! Two operations exist only to shape gradient flow:
//!
//! * [`Tape::stop_gradient`] passes its input through unchanged and sends no
//!   gradient back.
//! * [`Tape::straight_through`] outputs the quantized value `z_q` but routes
//!   the incoming gradient to `z` with an identity Jacobian.
//!
//! [`Tape::replay`] re-evaluates a recorded trace with some leaves replaced,
//! holding every stopped value at its recorded value. The gradient returned
//! by `backward` is exactly the derivative of that replayed function, which
//! is what finite-difference checks need when a loss contains stop-gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64, shift: f64 },
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Powf(Var, f64),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowNorm(Var),
    RowCosine(Var, Var),
    Transpose(Var),
    StopGradient(Var),
    StraightThrough { z: Var, z_q: Var },
    MaskRows { x: Var, fill: Var, rows: Vec<bool> },
    GatherRows { table: Var, indices: Vec<usize> },
    ConcatCols(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Ordered record of one forward evaluation.
///
/// A tape is single-threaded scratch state for one training step.
#[doc(alias = "ComputationRecord")]
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Leaf, value, true)
    }

    /// Registers a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Constant, value, false)
    }

    fn push_node(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, |v| &self.nodes[v.0].value)?;
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant | Op::StopGradient(_) => false,
            Op::StraightThrough { z, .. } => self.nodes[z.0].requires_grad,
            other => inputs(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        Ok(self.push_node(op, value, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.push(Op::Affine { x, scale, shift })
    }

    /// Adds a `[w]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddBias(x, bias))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid(x))
    }

    /// Natural log; inputs are floored at the smallest positive normal.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Ln(x))
    }

    /// `max(x, 0)^p`, elementwise.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.push(Op::Powf(x, p))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }

    /// Sum over the last axis, one value per row.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::RowSum(x))
    }

    /// Euclidean norm of each row.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        self.push(Op::RowNorm(x))
    }

    /// Cosine similarity of corresponding rows; 0 where either row is zero.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::RowCosine(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Transpose(x))
    }

    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        self.push(Op::StopGradient(x))
    }

    /// Forward value of `z_q`, gradient of the identity into `z`.
    pub fn straight_through(&mut self, z: Var, z_q: Var) -> Result<Var> {
        self.push(Op::StraightThrough { z, z_q })
    }

    /// Replaces the rows flagged in `rows` by the `[w]` vector `fill`.
    pub fn mask_rows(&mut self, x: Var, fill: Var, rows: Vec<bool>) -> Result<Var> {
        self.push(Op::MaskRows { x, fill, rows })
    }

    /// Selects rows of `table` (viewed as `rows × last_dim`).
    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows { table, indices })
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.push(Op::ConcatCols(parts))
    }

    /// Gradients of a one-element `loss` with respect to each of `params`.
    ///
    /// Parameters the loss does not depend on get a zero tensor.
    pub fn backward(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        Ok(params
            .iter()
            .map(|p| {
                let shape = self.value(*p).shape().to_vec();
                match grads.get(p.0).and_then(Option::as_ref) {
                    Some(g) => Tensor::from_parts(shape, g.clone()),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn local_grads(&self, node: &Node, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        let grads = match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let g = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                let ga = g.matmul(&val(*b).transpose()?)?;
                let gb = val(*a).transpose()?.matmul(&g)?;
                vec![(*a, ga.into_data()), (*b, gb.into_data())]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b).data()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(val(*a).data()).map(|(g, a)| g * a).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Affine { x, scale, .. } => vec![(*x, g.iter().map(|v| v * scale).collect())],
            Op::AddBias(x, bias) => {
                let w = out.last_dim();
                let mut gb = vec![0.0; w];
                for row in g.chunks(w) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                vec![(*x, gx)]
            }
            Op::Ln(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| if x > f64::MIN_POSITIVE { g / x } else { 0.0 })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Powf(x, p) => {
                let gx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| if x > 0.0 { g * p * x.powf(p - 1.0) } else { 0.0 })
                    .collect();
                vec![(*x, gx)]
            }
            Op::SoftmaxRows(x) => {
                let w = out.last_dim();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(w).zip(out.data().chunks(w)).zip(gx.chunks_mut(w)) {
                    let inner: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = y * (gv - inner);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Mean(x) => {
                let n = val(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::RowSum(x) => {
                let w = val(*x).last_dim();
                let gx = g.iter().flat_map(|&gi| std::iter::repeat_n(gi, w)).collect();
                vec![(*x, gx)]
            }
            Op::RowNorm(x) => {
                let xv = val(*x);
                let w = xv.last_dim();
                let mut gx = vec![0.0; xv.numel()];
                for (i, dst) in gx.chunks_mut(w).enumerate() {
                    let norm = out.data()[i];
                    if norm > 0.0 {
                        for (d, xi) in dst.iter_mut().zip(xv.row(i)) {
                            *d = g[i] * xi / norm;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::RowCosine(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let w = av.last_dim();
                let mut ga = vec![0.0; av.numel()];
                let mut gb = vec![0.0; bv.numel()];
                for i in 0..av.row_count() {
                    let (ar, br) = (av.row(i), bv.row(i));
                    let na2: f64 = ar.iter().map(|v| v * v).sum();
                    let nb2: f64 = br.iter().map(|v| v * v).sum();
                    let (na, nb) = (na2.sqrt(), nb2.sqrt());
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let c = out.data()[i];
                    for k in 0..w {
                        ga[i * w + k] = g[i] * (br[k] / (na * nb) - c * ar[k] / na2);
                        gb[i * w + k] = g[i] * (ar[k] / (na * nb) - c * br[k] / nb2);
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => {
                let g = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                vec![(*x, g.transpose()?.into_data())]
            }
            Op::StraightThrough { z, .. } => vec![(*z, g.to_vec())],
            Op::MaskRows { x, fill, rows } => {
                let w = out.last_dim();
                let mut gx = g.to_vec();
                let mut gf = vec![0.0; w];
                for (i, &masked) in rows.iter().enumerate() {
                    if masked {
                        let row = &mut gx[i * w..(i + 1) * w];
                        for (acc, v) in gf.iter_mut().zip(row.iter_mut()) {
                            *acc += *v;
                            *v = 0.0;
                        }
                    }
                }
                vec![(*x, gx), (*fill, gf)]
            }
            Op::GatherRows { table, indices } => {
                let t = val(*table);
                let w = t.last_dim();
                let mut gt = vec![0.0; t.numel()];
                for (i, &src) in indices.iter().enumerate() {
                    for k in 0..w {
                        gt[src * w + k] += g[i * w + k];
                    }
                }
                vec![(*table, gt)]
            }
            Op::ConcatCols(parts) => {
                let total = out.last_dim();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = val(*p);
                    let w = pv.last_dim();
                    let mut gp = Vec::with_capacity(pv.numel());
                    for row in g.chunks(total) {
                        gp.extend_from_slice(&row[offset..offset + w]);
                    }
                    offset += w;
                    res.push((*p, gp));
                }
                res
            }
        };
        Ok(grads)
    }

    /// Re-evaluates the trace up to `output` with the given leaves replaced.
    ///
    /// Stop-gradient nodes keep their recorded values, straight-through
    /// nodes add the recorded offset `z_q - z` to the new `z`, and gathers
    /// reuse their recorded indices.
    pub fn replay(&self, output: Var, overrides: &[(Var, &Tensor)]) -> Result<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(output.0 + 1);
        for idx in 0..=output.0 {
            let node = &self.nodes[idx];
            let v = match &node.op {
                Op::Leaf | Op::Constant => {
                    match overrides.iter().find(|(var, _)| var.0 == idx) {
                        Some((_, t)) => {
                            t.expect_same_shape(&node.value)?;
                            (*t).clone()
                        }
                        None => node.value.clone(),
                    }
                }
                Op::StopGradient(_) => node.value.clone(),
                Op::StraightThrough { z, z_q } => {
                    let offset = self.value(*z_q).sub(self.value(*z))?;
                    values[z.0].add(&offset)?
                }
                op => eval(op, |v| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values.pop().expect("replay evaluates at least one node"))
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddBias(a, b)
        | Op::RowCosine(a, b) => vec![*a, *b],
        Op::StraightThrough { z, z_q } => vec![*z, *z_q],
        Op::MaskRows { x, fill, .. } => vec![*x, *fill],
        Op::Affine { x, .. }
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Ln(x)
        | Op::Powf(x, _)
        | Op::SoftmaxRows(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::RowSum(x)
        | Op::RowNorm(x)
        | Op::Transpose(x)
        | Op::StopGradient(x) => vec![*x],
        Op::GatherRows { table, .. } => vec![*table],
        Op::ConcatCols(parts) => parts.clone(),
    }
}

fn eval<'a>(op: &Op, val: impl Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    let out = match op {
        Op::Leaf | Op::Constant => unreachable!("leaves are never re-evaluated"),
        Op::MatMul(a, b) => val(*a).matmul(val(*b))?,
        Op::Add(a, b) => val(*a).add(val(*b))?,
        Op::Sub(a, b) => val(*a).sub(val(*b))?,
        Op::Mul(a, b) => val(*a).zip_with(val(*b), |x, y| x * y)?,
        Op::Affine { x, scale, shift } => val(*x).map(|v| scale * v + shift),
        Op::AddBias(x, bias) => {
            let (x, b) = (val(*x), val(*bias));
            if b.numel() != x.last_dim() {
                return Err(Error::dim(format!(
                    "bias of {} values for rows of width {}",
                    b.numel(),
                    x.last_dim()
                )));
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(b.numel()) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        }
        Op::Relu(x) => val(*x).map(|v| v.max(0.0)),
        Op::Sigmoid(x) => val(*x).map(sigmoid),
        Op::Ln(x) => val(*x).map(|v| v.max(f64::MIN_POSITIVE).ln()),
        Op::Powf(x, p) => val(*x).map(|v| if v > 0.0 { v.powf(*p) } else { 0.0 }),
        Op::SoftmaxRows(x) => {
            let x = val(*x);
            let mut out = x.clone();
            let w = x.last_dim();
            for row in out.data_mut().chunks_mut(w) {
                let probs = crate::tensor::softmax(row);
                row.copy_from_slice(&probs);
            }
            out
        }
        Op::Sum(x) => Tensor::scalar(val(*x).sum()),
        Op::Mean(x) => {
            let x = val(*x);
            if x.numel() == 0 {
                return Err(Error::contract("mean of an empty tensor"));
            }
            Tensor::scalar(x.sum() / x.numel() as f64)
        }
        Op::RowSum(x) => {
            let x = val(*x);
            let sums: Vec<f64> = x.rows().map(|r| r.iter().sum()).collect();
            Tensor::from_parts(vec![sums.len()], sums)
        }
        Op::RowNorm(x) => {
            let x = val(*x);
            let norms: Vec<f64> = x.rows().map(crate::tensor::l2_norm).collect();
            Tensor::from_parts(vec![norms.len()], norms)
        }
        Op::RowCosine(a, b) => {
            let (a, b) = (val(*a), val(*b));
            a.expect_same_shape(b)?;
            let cos: Vec<f64> = a
                .rows()
                .zip(b.rows())
                .map(|(x, y)| crate::tensor::cosine(x, y))
                .collect();
            Tensor::from_parts(vec![cos.len()], cos)
        }
        Op::Transpose(x) => val(*x).transpose()?,
        Op::StopGradient(x) => val(*x).clone(),
        Op::StraightThrough { z, z_q } => {
            val(*z).expect_same_shape(val(*z_q))?;
            val(*z_q).clone()
        }
        Op::MaskRows { x, fill, rows } => {
            let (x, f) = (val(*x), val(*fill));
            if rows.len() != x.row_count() || f.numel() != x.last_dim() {
                return Err(Error::dim("row mask does not fit the input"));
            }
            let mut out = x.clone();
            for (i, &masked) in rows.iter().enumerate() {
                if masked {
                    out.row_mut(i).copy_from_slice(f.data());
                }
            }
            out
        }
        Op::GatherRows { table, indices } => {
            let t = val(*table);
            let w = t.last_dim();
            let mut data = Vec::with_capacity(indices.len() * w);
            for &i in indices {
                if i >= t.row_count() {
                    return Err(Error::dim(format!(
                        "gather index {i} out of {} rows",
                        t.row_count()
                    )));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::from_parts(vec![indices.len(), w], data)
        }
        Op::ConcatCols(parts) => {
            let first = parts
                .first()
                .ok_or_else(|| Error::contract("concat of zero tensors"))?;
            let rows = val(*first).row_count();
            if parts.iter().any(|p| val(*p).row_count() != rows) {
                return Err(Error::dim("concat parts have different row counts"));
            }
            let total: usize = parts.iter().map(|p| val(*p).last_dim()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for p in parts {
                    data.extend_from_slice(val(*p).row(i));
                }
            }
            Tensor::from_parts(vec![rows, total], data)
        }
    };
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
