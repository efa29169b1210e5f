//! Wengert tape: reverse-mode differentiation by operation recording.
//!
//! Forward evaluation goes through [`Tape`] methods, each of which computes
//! the result eagerly (via the pure kernels in [`super::matrix`]), checks it
//! for NaN/Inf, and records the operation. [`Tape::backward`] replays the
//! recorded list in reverse; because consumers are always recorded after
//! producers, a node's gradient is complete before its producing op reads it.
//!
//! The tape also counts multiply-accumulates for the two matmul ops, which is
//! what the analytic attention-cost formulas are checked against.

use super::matrix::{self, Matrix};
use crate::error::{HierformError, Result};

/// Handle to a value stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf: an input or a parameter. No backward rule.
    Leaf,
    MatMul {
        a: ValueId,
        b: ValueId,
    },
    /// `a @ b^T`
    MatMulTB {
        a: ValueId,
        b: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    /// Row broadcast: bias (1 x cols) added to every row of x.
    AddBias {
        x: ValueId,
        bias: ValueId,
    },
    Scale {
        x: ValueId,
        factor: f64,
    },
    Hadamard {
        a: ValueId,
        b: ValueId,
    },
    /// Sum of all entries, producing a 1x1 scalar.
    Sum {
        x: ValueId,
    },
    Relu {
        x: ValueId,
    },
    MaskedSoftmax {
        x: ValueId,
        mask: Vec<bool>,
    },
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    },
    AvgPoolRows {
        x: ValueId,
        m: usize,
        valid: Vec<bool>,
    },
    MeanRows {
        x: ValueId,
        valid: Vec<bool>,
    },
    GatherRows {
        x: ValueId,
        slots: Vec<Option<usize>>,
    },
    ConcatRows {
        parts: Vec<ValueId>,
    },
    ConcatCols {
        parts: Vec<ValueId>,
    },
    /// Mean categorical cross-entropy in bits over row-stochastic probs.
    CceLoss {
        probs: ValueId,
        targets: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Matrix,
    grad: Option<Matrix>,
    is_param: bool,
}

/// Probability floor applied before taking the log in the loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// Recording tape. Single-writer; values are immutable once recorded.
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Multiply-accumulate count over all matmuls recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated for `id`, if any flowed to it.
    pub fn grad(&self, id: ValueId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient for `id`, zeros if the value did not participate in the loss.
    pub fn grad_or_zero(&self, id: ValueId) -> Matrix {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    /// Registers a non-parameter input value.
    pub fn input(&mut self, value: Matrix) -> ValueId {
        self.push_leaf(value, false)
    }

    /// Registers a parameter (snapshot; the tape owns its copy).
    pub fn param(&mut self, value: &Matrix) -> ValueId {
        self.push_leaf(value.clone(), true)
    }

    fn push_leaf(&mut self, value: Matrix, is_param: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            grad: None,
            is_param,
        });
        id
    }

    fn push(&mut self, op: Op, value: Matrix, opname: &'static str) -> Result<ValueId> {
        if !value.is_finite() {
            return Err(HierformError::NonFinite { op: opname });
        }
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            is_param: false,
        });
        Ok(id)
    }

    // ── Recorded operations ──────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = matrix::matmul(self.value(a), self.value(b))?;
        self.macs += (self.value(a).rows() * self.value(a).cols() * self.value(b).cols()) as u64;
        self.push(Op::MatMul { a, b }, out, "matmul")
    }

    pub fn matmul_tb(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = matrix::matmul_tb(self.value(a), self.value(b))?;
        self.macs += (self.value(a).rows() * self.value(a).cols() * self.value(b).rows()) as u64;
        self.push(Op::MatMulTB { a, b }, out, "matmul_tb")
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = matrix::add(self.value(a), self.value(b))?;
        self.push(Op::Add { a, b }, out, "add")
    }

    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let out = matrix::add_bias(self.value(x), self.value(bias))?;
        self.push(Op::AddBias { x, bias }, out, "add_bias")
    }

    pub fn scale(&mut self, x: ValueId, factor: f64) -> Result<ValueId> {
        let out = matrix::scale(self.value(x), factor);
        self.push(Op::Scale { x, factor }, out, "scale")
    }

    pub fn hadamard(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = matrix::hadamard(self.value(a), self.value(b))?;
        self.push(Op::Hadamard { a, b }, out, "hadamard")
    }

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let out = Matrix::new(1, 1, vec![matrix::sum_all(self.value(x))])?;
        self.push(Op::Sum { x }, out, "sum")
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        let out = matrix::relu(self.value(x));
        self.push(Op::Relu { x }, out, "relu")
    }

    pub fn masked_softmax(&mut self, x: ValueId, mask: &[bool]) -> Result<ValueId> {
        let out = matrix::masked_softmax(self.value(x), mask)?;
        self.push(
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
            out,
            "masked_softmax",
        )
    }

    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let out = matrix::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            out,
            "layer_norm",
        )
    }

    pub fn avg_pool_rows(&mut self, x: ValueId, m: usize) -> Result<ValueId> {
        let valid = vec![true; self.value(x).rows()];
        self.masked_avg_pool_rows(x, m, &valid)
    }

    pub fn masked_avg_pool_rows(
        &mut self,
        x: ValueId,
        m: usize,
        valid: &[bool],
    ) -> Result<ValueId> {
        let out = matrix::masked_avg_pool_rows(self.value(x), m, valid)?;
        self.push(
            Op::AvgPoolRows {
                x,
                m,
                valid: valid.to_vec(),
            },
            out,
            "avg_pool_rows",
        )
    }

    pub fn mean_rows(&mut self, x: ValueId, valid: &[bool]) -> Result<ValueId> {
        let out = matrix::mean_rows(self.value(x), valid)?;
        self.push(
            Op::MeanRows {
                x,
                valid: valid.to_vec(),
            },
            out,
            "mean_rows",
        )
    }

    pub fn gather_rows(&mut self, x: ValueId, slots: &[Option<usize>]) -> Result<ValueId> {
        let out = matrix::gather_rows(self.value(x), slots)?;
        self.push(
            Op::GatherRows {
                x,
                slots: slots.to_vec(),
            },
            out,
            "gather_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = matrix::concat_rows(&mats)?;
        self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            out,
            "concat_rows",
        )
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = matrix::concat_cols(&mats)?;
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            out,
            "concat_cols",
        )
    }

    /// Mean cross-entropy in bits: `-(1/S) sum_s log2(clamp(p[s, target_s]))`.
    ///
    /// Rows of `probs` must be stochastic within 1e-9; probabilities are
    /// clamped to `[PROB_CLAMP, 1]` before the log.
    pub fn cce_loss(&mut self, probs: ValueId, targets: &[usize]) -> Result<ValueId> {
        let p = self.value(probs);
        validate_stochastic(p)?;
        if targets.len() != p.rows() {
            return Err(HierformError::Validation(format!(
                "{} targets for {} probability rows",
                targets.len(),
                p.rows()
            )));
        }
        let classes = p.cols();
        let mut total = 0.0;
        for (s, &c) in targets.iter().enumerate() {
            if c >= classes {
                return Err(HierformError::Validation(format!(
                    "label {c} out of range for {classes} classes"
                )));
            }
            total -= p.get(s, c).clamp(PROB_CLAMP, 1.0).log2();
        }
        let out = Matrix::new(1, 1, vec![total / targets.len() as f64])?;
        self.push(
            Op::CceLoss {
                probs,
                targets: targets.to_vec(),
            },
            out,
            "cce_loss",
        )
    }

    // ── Backward pass ────────────────────────────────────────────────

    /// Seeds the scalar `loss` with gradient 1 and replays the tape in
    /// reverse. Parameters untouched by the loss keep zero gradients
    /// (see [`Tape::grad_or_zero`]).
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(HierformError::Usage(format!(
                "backward: value {} is not on this tape",
                loss.0
            )));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            let (r, c) = self.nodes[loss.0].value.shape();
            return Err(HierformError::Usage(format!(
                "backward: loss must be a 1x1 scalar, got {r}x{c}"
            )));
        }
        self.nodes[loss.0].grad = Some(Matrix::new(1, 1, vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let op = self.nodes[i].op.clone();
            let Some(grad_out) = self.nodes[i].grad.take() else {
                self.nodes[i].grad = None;
                continue;
            };
            self.backward_op(&op, ValueId(i), &grad_out)?;
            self.nodes[i].grad = Some(grad_out);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: ValueId, grad: Matrix) {
        match &mut self.nodes[id.0].grad {
            Some(existing) => {
                let dst = existing.data_mut();
                for (d, g) in dst.iter_mut().zip(grad.data()) {
                    *d += g;
                }
            }
            None => self.nodes[id.0].grad = Some(grad),
        }
    }

    fn backward_op(&mut self, op: &Op, out: ValueId, d_out: &Matrix) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let d_a = matrix::matmul_tb(d_out, self.value(*b))?;
                let d_b = matrix::matmul_ta(self.value(*a), d_out)?;
                self.accumulate(*a, d_a);
                self.accumulate(*b, d_b);
            }
            Op::MatMulTB { a, b } => {
                // out = a b^T:  d_a = d_out b,  d_b = d_out^T a
                let d_a = matrix::matmul(d_out, self.value(*b))?;
                let d_b = matrix::matmul_ta(d_out, self.value(*a))?;
                self.accumulate(*a, d_a);
                self.accumulate(*b, d_b);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, d_out.clone());
                self.accumulate(*b, d_out.clone());
            }
            Op::AddBias { x, bias } => {
                self.accumulate(*x, d_out.clone());
                let cols = d_out.cols();
                let mut d_bias = Matrix::zeros(1, cols);
                for r in 0..d_out.rows() {
                    for (db, g) in d_bias.data_mut().iter_mut().zip(d_out.row(r)) {
                        *db += g;
                    }
                }
                self.accumulate(*bias, d_bias);
            }
            Op::Scale { x, factor } => {
                self.accumulate(*x, matrix::scale(d_out, *factor));
            }
            Op::Hadamard { a, b } => {
                let d_a = matrix::hadamard(d_out, self.value(*b))?;
                let d_b = matrix::hadamard(d_out, self.value(*a))?;
                self.accumulate(*a, d_a);
                self.accumulate(*b, d_b);
            }
            Op::Sum { x } => {
                let g = d_out.get(0, 0);
                let xm = self.value(*x);
                let mut d_x = Matrix::zeros(xm.rows(), xm.cols());
                d_x.data_mut().fill(g);
                self.accumulate(*x, d_x);
            }
            Op::Relu { x } => {
                let xm = self.value(*x);
                let mut d_x = d_out.clone();
                for (g, v) in d_x.data_mut().iter_mut().zip(xm.data()) {
                    if *v <= 0.0 {
                        *g = 0.0;
                    }
                }
                self.accumulate(*x, d_x);
            }
            Op::MaskedSoftmax { x, mask } => {
                // Row-wise: d_x_j = p_j (d_p_j - sum_k p_k d_p_k), zero on masked.
                let p = &self.nodes[out.0].value;
                let (rows, cols) = p.shape();
                let mut d_x = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let prow = p.row(r);
                    let grow = d_out.row(r);
                    let dot: f64 = prow.iter().zip(grow).map(|(pv, gv)| pv * gv).sum();
                    for c in 0..cols {
                        if mask[c] {
                            d_x.set(r, c, prow[c] * (grow[c] - dot));
                        }
                    }
                }
                self.accumulate(*x, d_x);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let (d_x, d_gamma, d_beta) =
                    layer_norm_backward(self.value(*x), self.value(*gamma), d_out, *eps);
                self.accumulate(*x, d_x);
                self.accumulate(*gamma, d_gamma);
                self.accumulate(*beta, d_beta);
            }
            Op::AvgPoolRows { x, m, valid } => {
                let xm = self.value(*x);
                let (rows, cols) = xm.shape();
                let mut d_x = Matrix::zeros(rows, cols);
                for k in 0..d_out.rows() {
                    let lo = k * m;
                    let hi = ((k + 1) * m).min(rows);
                    let count = (lo..hi).filter(|&r| valid[r]).count();
                    if count == 0 {
                        continue;
                    }
                    for r in lo..hi {
                        if !valid[r] {
                            continue;
                        }
                        for c in 0..cols {
                            d_x.set(r, c, d_out.get(k, c) / count as f64);
                        }
                    }
                }
                self.accumulate(*x, d_x);
            }
            Op::MeanRows { x, valid } => {
                let xm = self.value(*x);
                let (rows, cols) = xm.shape();
                let count = valid.iter().filter(|&&v| v).count() as f64;
                let mut d_x = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    if !valid[r] {
                        continue;
                    }
                    for c in 0..cols {
                        d_x.set(r, c, d_out.get(0, c) / count);
                    }
                }
                self.accumulate(*x, d_x);
            }
            Op::GatherRows { x, slots } => {
                let xm = self.value(*x);
                let mut d_x = Matrix::zeros(xm.rows(), xm.cols());
                for (s, slot) in slots.iter().enumerate() {
                    if let Some(r) = slot {
                        for c in 0..xm.cols() {
                            let cur = d_x.get(*r, c);
                            d_x.set(*r, c, cur + d_out.get(s, c));
                        }
                    }
                }
                self.accumulate(*x, d_x);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let pm = self.value(p);
                    let (pr, pc) = pm.shape();
                    let mut d_p = Matrix::zeros(pr, pc);
                    for r in 0..pr {
                        for c in 0..pc {
                            d_p.set(r, c, d_out.get(offset + r, c));
                        }
                    }
                    offset += pr;
                    self.accumulate(p, d_p);
                }
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let pm = self.value(p);
                    let (pr, pc) = pm.shape();
                    let mut d_p = Matrix::zeros(pr, pc);
                    for r in 0..pr {
                        for c in 0..pc {
                            d_p.set(r, c, d_out.get(r, offset + c));
                        }
                    }
                    offset += pc;
                    self.accumulate(p, d_p);
                }
            }
            Op::CceLoss { probs, targets } => {
                // d/dp[s,c] = -y_sc / (S ln2 clamp(p)); zero below the floor
                // where the clamp is flat, left-limit value at p = 1
                let g = d_out.get(0, 0);
                let p = self.value(*probs);
                let s_count = targets.len() as f64;
                let ln2 = std::f64::consts::LN_2;
                let mut d_p = Matrix::zeros(p.rows(), p.cols());
                for (s, &c) in targets.iter().enumerate() {
                    let v = p.get(s, c);
                    if v > PROB_CLAMP {
                        d_p.set(s, c, -g / (s_count * ln2 * v.min(1.0)));
                    }
                }
                self.accumulate(*probs, d_p);
            }
        }
        Ok(())
    }

    /// Ids of all registered parameters, in registration order.
    pub fn param_ids(&self) -> Vec<ValueId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_param)
            .map(|(i, _)| ValueId(i))
            .collect()
    }
}

fn validate_stochastic(p: &Matrix) -> Result<()> {
    for r in 0..p.rows() {
        let s: f64 = p.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(HierformError::Validation(format!(
                "probability row {r} sums to {s}, expected 1"
            )));
        }
        if p.row(r).iter().any(|&v| v < 0.0) {
            return Err(HierformError::Validation(format!(
                "probability row {r} has a negative entry"
            )));
        }
    }
    Ok(())
}

fn layer_norm_backward(
    x: &Matrix,
    gamma: &Matrix,
    d_out: &Matrix,
    eps: f64,
) -> (Matrix, Matrix, Matrix) {
    let (rows, cols) = x.shape();
    let n = cols as f64;
    let mut d_x = Matrix::zeros(rows, cols);
    let mut d_gamma = Matrix::zeros(1, cols);
    let mut d_beta = Matrix::zeros(1, cols);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_sigma = 1.0 / (var + eps).sqrt();
        // g = d_out * gamma; d_x = (g - mean(g) - xhat * mean(g*xhat)) / sigma
        let mut g_mean = 0.0;
        let mut gx_mean = 0.0;
        for c in 0..cols {
            let xhat = (row[c] - mean) * inv_sigma;
            let g = d_out.get(r, c) * gamma.get(0, c);
            g_mean += g / n;
            gx_mean += g * xhat / n;
            let dg = d_gamma.get(0, c);
            d_gamma.set(0, c, dg + d_out.get(r, c) * xhat);
            let db = d_beta.get(0, c);
            d_beta.set(0, c, db + d_out.get(r, c));
        }
        for c in 0..cols {
            let xhat = (row[c] - mean) * inv_sigma;
            let g = d_out.get(r, c) * gamma.get(0, c);
            d_x.set(r, c, (g - g_mean - xhat * gx_mean) * inv_sigma);
        }
    }
    (d_x, d_gamma, d_beta)
}
