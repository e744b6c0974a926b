//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! The tape supports exactly the primitives needed by the training
//! objectives in this crate: dense affine layers, ReLU, row normalization,
//! log-softmax, masked row log-sum-exp, elementwise arithmetic against
//! variables or constants, row concatenation, and full reduction. There is
//! no general expression compiler and no dynamic control flow; a forward
//! pass records nodes eagerly and `backward` replays them in reverse.
//!
//! Forward evaluation is a pure function of the recorded inputs, so repeated
//! runs over the same values are bit-identical.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { slot: usize },
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    // The row constant itself is not retained: its gradient is identity.
    AddConstRow(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    RowL2Normalize(Var),
    LogSoftmax(Var),
    MaskedRowLogSumExp(Var, Tensor),
    ConcatRows(Var, Var),
    Sum(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Wengert list recording a forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    num_leaves: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), num_leaves: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed for a node during the forward pass.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(CoreError::contract(format!(
                "expected scalar node, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.values()[0])
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Register a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let slot = self.num_leaves;
        self.num_leaves += 1;
        self.push(Op::Leaf { slot }, value, true)
    }

    /// Register a constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, ng))
    }

    /// Elementwise product of two variables.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let ng = self.needs(a);
        self.push(Op::Scale(a, k), value, ng)
    }

    /// Elementwise product with a fixed tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let value = self.value(a).mul(&weights)?;
        let ng = self.needs(a);
        Ok(self.push(Op::MulConst(a, weights), value, ng))
    }

    /// Add a fixed row vector to every row (per-column offsets).
    pub fn add_const_row(&mut self, a: Var, row: Tensor) -> Result<Var> {
        let value = self.value(a).add_row_broadcast(&row)?;
        let ng = self.needs(a);
        Ok(self.push(Op::AddConstRow(a), value, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, ng))
    }

    /// `a . b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulNT(a, b), value, ng))
    }

    /// Matrix plus a broadcast bias row (the bias is a variable).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row_broadcast(self.value(bias))?;
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddBias(a, bias), value, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        let ng = self.needs(a);
        self.push(Op::Relu(a), value, ng)
    }

    /// Row-wise l2 normalization. Zero rows pass through unchanged and
    /// contribute zero gradient.
    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let value = self.value(a).row_l2_normalized();
        let ng = self.needs(a);
        self.push(Op::RowL2Normalize(a), value, ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = self.value(a).log_softmax_rows();
        let ng = self.needs(a);
        self.push(Op::LogSoftmax(a), value, ng)
    }

    /// Per row `i`: `log sum_j mask[i][j] * exp(x[i][j])`, computed with max
    /// subtraction over the unmasked entries. Every row must keep at least
    /// one unmasked entry. Output is a column (`n x 1`).
    pub fn masked_row_logsumexp(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != mask.shape() {
            return Err(CoreError::shape(
                "masked_row_logsumexp",
                format!("{:?} vs mask {:?}", x.shape(), mask.shape()),
            ));
        }
        let n = x.rows();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let xr = x.row(i);
            let mr = mask.row(i);
            let mut max = f64::NEG_INFINITY;
            for (&v, &w) in xr.iter().zip(mr) {
                if w != 0.0 && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(CoreError::contract(format!(
                    "masked_row_logsumexp: row {} has no unmasked entries",
                    i
                )));
            }
            let mut acc = 0.0;
            for (&v, &w) in xr.iter().zip(mr) {
                if w != 0.0 {
                    acc += w * (v - max).exp();
                }
            }
            out.push(max + acc.ln());
        }
        let value = Tensor::matrix(n, 1, out)?;
        let ng = self.needs(a);
        Ok(self.push(Op::MaskedRowLogSumExp(a, mask), value, ng))
    }

    /// Stack `a` on top of `b` (column counts must match).
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(CoreError::shape(
                "concat_rows",
                format!("column counts {} vs {}", ta.cols(), tb.cols()),
            ));
        }
        let mut values = ta.values().to_vec();
        values.extend_from_slice(tb.values());
        let value = Tensor::matrix(ta.rows() + tb.rows(), ta.cols(), values)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatRows(a, b), value, ng))
    }

    /// Sum of all entries; produces a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(Op::Sum(a), value, ng)
    }

    /// Reverse pass from a scalar `loss` node. Returns one gradient tensor
    /// per registered leaf, in registration order; leaves the loss does not
    /// depend on get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Vec<Tensor>> {
        if self.value(loss).numel() != 1 {
            return Err(CoreError::contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.num_leaves).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf { slot } => {
                    accumulate_opt(&mut leaf_grads[*slot], &g)?;
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g)?;
                    self.accumulate(&mut grads, *b, &g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, &g)?;
                    self.accumulate(&mut grads, *b, &g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    let da = g.mul(self.value(*b))?;
                    let db = g.mul(self.value(*a))?;
                    self.accumulate(&mut grads, *a, &da)?;
                    self.accumulate(&mut grads, *b, &db)?;
                }
                Op::Scale(a, k) => {
                    self.accumulate(&mut grads, *a, &g.scale(*k))?;
                }
                Op::MulConst(a, w) => {
                    self.accumulate(&mut grads, *a, &g.mul(w)?)?;
                }
                Op::AddConstRow(a) => {
                    self.accumulate(&mut grads, *a, &g)?;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let da = g.matmul_nt(self.value(*b))?;
                        self.accumulate(&mut grads, *a, &da)?;
                    }
                    if self.needs(*b) {
                        let db = self.value(*a).matmul_tn(&g)?;
                        self.accumulate(&mut grads, *b, &db)?;
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.needs(*a) {
                        let da = g.matmul(self.value(*b))?;
                        self.accumulate(&mut grads, *a, &da)?;
                    }
                    if self.needs(*b) {
                        let db = g.matmul_tn(self.value(*a))?;
                        self.accumulate(&mut grads, *b, &db)?;
                    }
                }
                Op::AddBias(a, bias) => {
                    self.accumulate(&mut grads, *a, &g)?;
                    if self.needs(*bias) {
                        let m = g.cols();
                        let mut col_sums = vec![0.0; m];
                        for chunk in g.values().chunks(m) {
                            for (s, &v) in col_sums.iter_mut().zip(chunk) {
                                *s += v;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        let db = Tensor::new(shape, col_sums)?;
                        self.accumulate(&mut grads, *bias, &db)?;
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let da = Tensor::new(
                        x.shape().to_vec(),
                        g.values()
                            .iter()
                            .zip(x.values())
                            .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                            .collect(),
                    )?;
                    self.accumulate(&mut grads, *a, &da)?;
                }
                Op::RowL2Normalize(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let m = x.cols();
                    let mut da = vec![0.0; x.numel()];
                    for i in 0..x.rows() {
                        let xr = x.row(i);
                        let yr = y.row(i);
                        let gr = &g.values()[i * m..(i + 1) * m];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            let dot: f64 = gr.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum();
                            let dst = &mut da[i * m..(i + 1) * m];
                            for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                                *d = (gv - dot * yv) / norm;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, &Tensor::new(x.shape().to_vec(), da)?)?;
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let m = y.cols();
                    let mut da = vec![0.0; y.numel()];
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = &g.values()[i * m..(i + 1) * m];
                        let gsum: f64 = gr.iter().sum();
                        let dst = &mut da[i * m..(i + 1) * m];
                        for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = gv - yv.exp() * gsum;
                        }
                    }
                    self.accumulate(&mut grads, *a, &Tensor::new(y.shape().to_vec(), da)?)?;
                }
                Op::MaskedRowLogSumExp(a, mask) => {
                    let x = self.value(*a);
                    let t = &node.value;
                    let m = x.cols();
                    let mut da = vec![0.0; x.numel()];
                    for i in 0..x.rows() {
                        let gv = g.values()[i];
                        if gv == 0.0 {
                            continue;
                        }
                        let xr = x.row(i);
                        let mr = mask.row(i);
                        let ti = t.values()[i];
                        let dst = &mut da[i * m..(i + 1) * m];
                        for ((d, &xv), &w) in dst.iter_mut().zip(xr).zip(mr) {
                            if w != 0.0 {
                                *d = gv * w * (xv - ti).exp();
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, &Tensor::new(x.shape().to_vec(), da)?)?;
                }
                Op::ConcatRows(a, b) => {
                    let na = self.value(*a).rows();
                    let m = self.value(*a).cols();
                    let (top, bottom) = g.values().split_at(na * m);
                    if self.needs(*a) {
                        let da = Tensor::new(self.value(*a).shape().to_vec(), top.to_vec())?;
                        self.accumulate(&mut grads, *a, &da)?;
                    }
                    if self.needs(*b) {
                        let db = Tensor::new(self.value(*b).shape().to_vec(), bottom.to_vec())?;
                        self.accumulate(&mut grads, *b, &db)?;
                    }
                }
                Op::Sum(a) => {
                    let gv = g.values()[0];
                    let x = self.value(*a);
                    let da = Tensor::new(x.shape().to_vec(), vec![gv; x.numel()])?;
                    self.accumulate(&mut grads, *a, &da)?;
                }
            }
        }

        (0..self.num_leaves)
            .map(|slot| {
                leaf_grads[slot].take().map(Ok).unwrap_or_else(|| {
                    let shape = self
                        .nodes
                        .iter()
                        .find_map(|n| match n.op {
                            Op::Leaf { slot: s } if s == slot => Some(n.value.shape().to_vec()),
                            _ => None,
                        })
                        .expect("leaf slot exists");
                    Ok(Tensor::zeros(shape))
                })
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, delta: &Tensor) -> Result<()> {
        if !self.needs(target) {
            return Ok(());
        }
        accumulate_opt(&mut grads[target.0], delta)
    }
}

fn accumulate_opt(slot: &mut Option<Tensor>, delta: &Tensor) -> Result<()> {
    match slot {
        Some(existing) => {
            *existing = existing.add(delta)?;
        }
        None => *slot = Some(delta.clone()),
    }
    Ok(())
}

/// Evaluate a composed expression and return the scalar loss along with the
/// gradient of every leaf, in leaf registration order. The builder receives
/// one leaf per input parameter tensor.
pub fn evaluate_with_gradients<F>(params: &[Tensor], build: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &leaves)?;
    let value = tape.scalar_value(loss)?;
    if !value.is_finite() {
        return Err(CoreError::Numeric(format!("loss evaluated to {}", value)));
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// Forward-only evaluation of the same expression shape.
pub fn evaluate_value<F>(params: &[Tensor], build: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &leaves)?;
    tape.scalar_value(loss)
}

/// One entry that failed a gradient comparison.
#[derive(Debug, Clone)]
pub struct FdFailure {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub per_leaf_max_relative_error: Vec<f64>,
    pub failures: Vec<FdFailure>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn max_relative_error(&self) -> f64 {
        self.per_leaf_max_relative_error.iter().cloned().fold(0.0, f64::max)
    }

    /// Compare a provided gradient set against a numeric one. The relative
    /// error uses a unit floor in the denominator so near-zero gradients are
    /// held to an absolute standard.
    pub fn compare(analytic: &[Tensor], numeric: &[Tensor], tolerance: f64) -> Result<FdReport> {
        if analytic.len() != numeric.len() {
            return Err(CoreError::contract("gradient sets have different leaf counts"));
        }
        let mut per_leaf = Vec::with_capacity(analytic.len());
        let mut failures = Vec::new();
        for (leaf, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            if a.shape() != n.shape() {
                return Err(CoreError::shape(
                    "fd_compare",
                    format!("leaf {}: {:?} vs {:?}", leaf, a.shape(), n.shape()),
                ));
            }
            let mut max_rel = 0.0f64;
            for (index, (&av, &nv)) in a.values().iter().zip(n.values()).enumerate() {
                let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(1.0);
                if rel > max_rel {
                    max_rel = rel;
                }
                if rel > tolerance {
                    failures.push(FdFailure {
                        leaf,
                        index,
                        analytic: av,
                        numeric: nv,
                        relative_error: rel,
                    });
                }
            }
            per_leaf.push(max_rel);
        }
        Ok(FdReport { per_leaf_max_relative_error: per_leaf, failures, tolerance })
    }
}

/// Central-difference gradients of the expression, leaf by leaf.
pub fn numeric_gradients<F>(params: &[Tensor], build: F, step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(CoreError::contract("finite-difference step must be positive"));
    }
    let mut grads = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for leaf in 0..params.len() {
        let mut g = vec![0.0; params[leaf].numel()];
        for index in 0..params[leaf].numel() {
            let base = params[leaf].values()[index];
            work[leaf].values_mut()[index] = base + step;
            let up = evaluate_value(&work, &build)?;
            work[leaf].values_mut()[index] = base - step;
            let down = evaluate_value(&work, &build)?;
            work[leaf].values_mut()[index] = base;
            g[index] = (up - down) / (2.0 * step);
        }
        grads.push(Tensor::new(params[leaf].shape().to_vec(), g)?);
    }
    Ok(grads)
}

/// Evaluate the expression's analytic gradients and flag any leaf entry
/// whose central-difference counterpart disagrees beyond `tolerance`.
pub fn finite_difference_check<F>(
    params: &[Tensor],
    build: F,
    step: f64,
    tolerance: f64,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = evaluate_with_gradients(params, &build)?;
    let numeric = numeric_gradients(params, &build, step)?;
    FdReport::compare(&analytic, &numeric, tolerance)
}
