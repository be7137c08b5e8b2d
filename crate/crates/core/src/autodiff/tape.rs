use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Numeric precision of a tape.
///
/// `Single` rounds every stored value and gradient to `f32` resolution
/// (arithmetic still runs in `f64`); `Double` keeps full `f64`. Gradient
/// checks are only meaningful in `Double`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

/// A named leaf with `requires_grad = true`; the unit of optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::InvalidShape {
                op: "parameter",
                shape,
                reason: format!("{} values for parameter `{name}`", values.len()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("parameter `{name}`"),
            });
        }
        Ok(Parameter { name, shape, values })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Dense tensor node: flat row-major values plus the recorded op that
/// produced it (`Op::Leaf` for inputs and parameters).
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    op: Op,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    /// `A × Bᵀ` with `B` stored row-major `[n, k]`.
    MatMulBt { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    /// `[m, n] + [n]` row broadcast.
    AddRow { a: TensorId, row: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Relu { x: TensorId },
    Scale { x: TensorId, c: f64 },
    Concat { parts: Vec<TensorId>, axis: usize },
    Slice { x: TensorId, axis: usize, start: usize },
    L2NormalizeRows { x: TensorId, norms: Vec<f64> },
    LogSumExpRows { x: TensorId },
    Sigmoid { x: TensorId },
    Mean { x: TensorId },
    Sum { x: TensorId },
    SumRows { x: TensorId },
    Grl { x: TensorId, lambda: f64 },
    /// Masked sum of per-element binary cross-entropy on logits.
    /// Targets and mask are captured constants, not tape nodes.
    BceLogitsSum {
        logits: TensorId,
        targets: Vec<f64>,
        mask: Vec<bool>,
    },
}

/// Operation kinds accepted by [`Tape::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Relu,
    Scale(f64),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    L2NormalizeRows,
    LogSumExpRows,
    Sigmoid,
    Mean,
}

/// Records operations in topological order; replays them in reverse on
/// [`Tape::backward`]. Confined to one thread of execution by usage; the
/// struct itself holds no shared state.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Tensor>,
    precision: Precision,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const ROW_NORM_MIN: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::Double)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            backward_done: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last `backward` call, if this node required one.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn round(&self, v: f64) -> f64 {
        match self.precision {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }

    fn round_vec(&self, mut values: Vec<f64>) -> Vec<f64> {
        if self.precision == Precision::Single {
            for v in values.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        values
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite op output");
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            values,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    /// Insert a leaf tensor. Values must be finite.
    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::InvalidShape {
                op: "leaf",
                shape,
                reason: format!("{} values", values.len()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "leaf tensor".to_string(),
            });
        }
        let values = self.round_vec(values);
        Ok(self.push(shape, values, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<TensorId> {
        self.leaf(vec![v], vec![1], false)
    }

    /// Bind a parameter's current values as a `requires_grad` leaf.
    pub fn param(&mut self, p: &Parameter) -> Result<TensorId> {
        self.leaf(p.values.clone(), p.shape.clone(), true)
    }

    /// Dispatch one of the documented operation kinds.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[TensorId]) -> Result<TensorId> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::autodiff(format!(
                    "{kind:?} expects {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            OpKind::Scale(c) => {
                arity(1)?;
                self.scale(inputs[0], c)
            }
            OpKind::Concat(axis) => self.concat(inputs, axis),
            OpKind::Slice { axis, start, len } => {
                arity(1)?;
                self.slice(inputs[0], axis, start, len)
            }
            OpKind::L2NormalizeRows => {
                arity(1)?;
                self.l2_normalize_rows(inputs[0])
            }
            OpKind::LogSumExpRows => {
                arity(1)?;
                self.log_sum_exp_rows(inputs[0])
            }
            OpKind::Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            OpKind::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
        }
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::InvalidShape {
                op,
                shape: self.nodes[id.0].shape.clone(),
                reason: "expected rank 2".to_string(),
            }),
        }
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = mm(self.values(a), m, ka, self.values(b), n);
        let rg = self.any_requires_grad(&[a, b]);
        let out = self.round_vec(out);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b }))
    }

    /// `[m, k] × [n, k]ᵀ → [m, n]`. Right operand row-major, used untransposed
    /// in memory; avoids materializing prototype/weight transposes.
    pub fn matmul_bt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2(a, "matmul_bt")?;
        let (n, kb) = self.dims2(b, "matmul_bt")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_bt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = mm_abt(self.values(a), m, ka, self.values(b), n);
        let rg = self.any_requires_grad(&[a, b]);
        let out = self.round_vec(out);
        Ok(self.push(vec![m, n], out, rg, Op::MatMulBt { a, b }))
    }

    /// Element-wise addition; also accepts `[m, n] + [n]` row broadcast.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let out: Vec<f64> = self
                .values(a)
                .iter()
                .zip(self.values(b))
                .map(|(x, y)| x + y)
                .collect();
            let rg = self.any_requires_grad(&[a, b]);
            let out = self.round_vec(out);
            Ok(self.push(sa, out, rg, Op::Add { a, b }))
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            let (m, n) = (sa[0], sa[1]);
            let row = self.values(b);
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                let base = &self.values(a)[i * n..(i + 1) * n];
                for j in 0..n {
                    out.push(base[j] + row[j]);
                }
            }
            let rg = self.any_requires_grad(&[a, b]);
            let out = self.round_vec(out);
            Ok(self.push(sa, out, rg, Op::AddRow { a, row: b }))
        } else {
            Err(Error::ShapeMismatch {
                op: "add",
                left: sa,
                right: sb,
            })
        }
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "sub",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.any_requires_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        let out = self.round_vec(out);
        Ok(self.push(shape, out, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.any_requires_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        let out = self.round_vec(out);
        Ok(self.push(shape, out, rg, Op::Mul { a, b }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.values(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, rg, Op::Relu { x }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        if !c.is_finite() {
            return Err(Error::NonFinite {
                context: "scale factor".to_string(),
            });
        }
        let out: Vec<f64> = self.values(x).iter().map(|v| v * c).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.shape(x).to_vec();
        let out = self.round_vec(out);
        Ok(self.push(shape, out, rg, Op::Scale { x, c }))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::autodiff("concat of zero tensors"));
        }
        let rank = self.shape(parts[0]).len();
        if axis >= rank {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: self.shape(parts[0]).to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut out_shape = self.shape(parts[0]).to_vec();
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s.len() != rank
                || s.iter()
                    .zip(&out_shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: out_shape,
                    right: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                let src = &self.values(p)[o * d * inner..(o + 1) * d * inner];
                out.extend_from_slice(src);
            }
        }
        let rg = self.any_requires_grad(parts);
        let out = self.round_vec(out);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice",
                shape,
                reason: format!("axis {axis}, range {start}..{}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            out.extend_from_slice(&self.values(x)[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out_shape, out, rg, Op::Slice { x, axis, start }))
    }

    /// Normalize each row of a rank-2 tensor to unit Euclidean norm.
    /// Rows with norm below `1e-6` are an error, not a clamp.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "l2_normalize_rows")?;
        let mut out = Vec::with_capacity(m * n);
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &self.values(x)[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < ROW_NORM_MIN {
                return Err(Error::autodiff(format!(
                    "l2_normalize_rows: row {i} has norm {norm:.3e} < {ROW_NORM_MIN:.0e}"
                )));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let rg = self.nodes[x.0].requires_grad;
        let out = self.round_vec(out);
        Ok(self.push(vec![m, n], out, rg, Op::L2NormalizeRows { x, norms }))
    }

    /// Row-wise `log Σ exp` with max-subtraction stabilization: `[m, n] → [m]`.
    pub fn log_sum_exp_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "log_sum_exp_rows")?;
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &self.values(x)[i * n..(i + 1) * n];
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - hi).exp()).sum();
            out.push(hi + sum.ln());
        }
        let rg = self.nodes[x.0].requires_grad;
        let out = self.round_vec(out);
        Ok(self.push(vec![m], out, rg, Op::LogSumExpRows { x }))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.values(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.shape(x).to_vec();
        let out = self.round_vec(out);
        Ok(self.push(shape, out, rg, Op::Sigmoid { x }))
    }

    /// Mean of all elements → scalar `[1]`.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.nodes[x.0].numel();
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "mean",
                shape: self.shape(x).to_vec(),
                reason: "empty tensor".to_string(),
            });
        }
        let v = self.values(x).iter().sum::<f64>() / n as f64;
        let rg = self.nodes[x.0].requires_grad;
        let v = self.round(v);
        Ok(self.push(vec![1], vec![v], rg, Op::Mean { x }))
    }

    /// Sum of all elements → scalar `[1]`.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.values(x).iter().sum::<f64>();
        let rg = self.nodes[x.0].requires_grad;
        let v = self.round(v);
        Ok(self.push(vec![1], vec![v], rg, Op::Sum { x }))
    }

    /// Row sums: `[m, n] → [m]`.
    pub fn sum_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(x, "sum_rows")?;
        let out: Vec<f64> = (0..m)
            .map(|i| self.values(x)[i * n..(i + 1) * n].iter().sum())
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        let out = self.round_vec(out);
        Ok(self.push(vec![m], out, rg, Op::SumRows { x }))
    }

    /// Gradient reversal layer. Forward is the identity (values are copied
    /// bit-exactly); backward delivers `-lambda ×` the upstream gradient.
    pub fn grl(&mut self, x: TensorId, lambda: f64) -> Result<TensorId> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::autodiff(format!(
                "grl: lambda must be a nonnegative finite real, got {lambda}"
            )));
        }
        let out = self.values(x).to_vec();
        let rg = self.nodes[x.0].requires_grad;
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, rg, Op::Grl { x, lambda }))
    }

    /// Masked sum of binary cross-entropy on logits, in the stable form
    /// `max(ℓ, 0) − ℓ·y + log(1 + e^{−|ℓ|})`. Targets and mask are constants
    /// with the same element count as `logits`; masked-out terms contribute
    /// nothing to value or gradient. Output is a scalar `[1]`.
    pub fn bce_with_logits_sum(
        &mut self,
        logits: TensorId,
        targets: &[f64],
        mask: &[bool],
    ) -> Result<TensorId> {
        let n = self.nodes[logits.0].numel();
        if targets.len() != n || mask.len() != n {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits_sum",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len(), mask.len()],
            });
        }
        if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::autodiff("bce_with_logits_sum: targets must be 0 or 1"));
        }
        let mut total = 0.0;
        for ((&l, &t), &m) in self.values(logits).iter().zip(targets).zip(mask) {
            if m {
                total += l.max(0.0) - l * t + (-l.abs()).exp().ln_1p();
            }
        }
        let rg = self.nodes[logits.0].requires_grad;
        let total = self.round(total);
        Ok(self.push(
            vec![1],
            vec![total],
            rg,
            Op::BceLogitsSum {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    fn any_requires_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Clear accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` tensor reachable from `loss`; accumulation is
    /// additive when a tensor feeds multiple nodes.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::autodiff(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::autodiff(
                "backward called twice without reset_grads",
            ));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            self.propagate(&op, &g, &mut grads);
            self.nodes[id].grad = Some(self.round_vec(g));
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, update: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].numel()]);
        update(slot);
    }

    fn propagate(&self, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                // dA += G·Bᵀ, dB += Aᵀ·G
                let da = mm_abt(g, m, n, self.values(*b), k);
                let db = mm_atb(self.values(*a), m, k, g, n);
                self.accumulate(grads, *a, |s| axpy(s, &da));
                self.accumulate(grads, *b, |s| axpy(s, &db));
            }
            Op::MatMulBt { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                // out = A·Bᵀ, so dA += G·B and dB += Gᵀ·A.
                let da = mm(g, m, n, self.values(*b), k);
                let db = mm_atb(g, m, n, self.values(*a), k);
                self.accumulate(grads, *a, |s| axpy(s, &da));
                self.accumulate(grads, *b, |s| axpy(s, &db));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |s| axpy(s, g));
                self.accumulate(grads, *b, |s| axpy(s, g));
            }
            Op::AddRow { a, row } => {
                self.accumulate(grads, *a, |s| axpy(s, g));
                let n = self.nodes[row.0].numel();
                self.accumulate(grads, *row, |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % n] += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |s| axpy(s, g));
                self.accumulate(grads, *b, |s| {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.values(*a), self.values(*b));
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Relu { x } => {
                let xv = self.values(*x);
                self.accumulate(grads, *x, |s| {
                    for i in 0..s.len() {
                        if xv[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, |s| {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv += gv * c;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = {
                    let mut s = self.shape(parts[0]).to_vec();
                    s[*axis] = parts.iter().map(|p| self.shape(*p)[*axis]).sum();
                    s
                };
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_d = out_shape[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let d = self.shape(p)[*axis];
                    self.accumulate(grads, p, |s| {
                        for o in 0..outer {
                            let src = o * total_d * inner + offset * inner;
                            let dst = o * d * inner;
                            for i in 0..d * inner {
                                s[dst + i] += g[src + i];
                            }
                        }
                    });
                    offset += d;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let d = shape[*axis];
                let len = g.len() / (outer * inner).max(1);
                self.accumulate(grads, *x, |s| {
                    for o in 0..outer {
                        let dst = o * d * inner + start * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            s[dst + i] += g[src + i];
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = self.values(*x);
                self.accumulate(grads, *x, |s| {
                    for i in 0..m {
                        let r = norms[i];
                        let row = &xv[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = row
                            .iter()
                            .zip(gr)
                            .map(|(xj, gj)| xj / r * gj)
                            .sum();
                        for j in 0..n {
                            s[i * n + j] += (gr[j] - row[j] / r * dot) / r;
                        }
                    }
                });
            }
            Op::LogSumExpRows { x } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = self.values(*x);
                // out_i was stabilized; softmax recomputed the same way.
                self.accumulate(grads, *x, |s| {
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - hi).exp()).sum();
                        for j in 0..n {
                            s[i * n + j] += g[i] * (row[j] - hi).exp() / denom;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let yv: Vec<f64> = self.values(*x).iter().map(|&v| sigmoid(v)).collect();
                self.accumulate(grads, *x, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].numel() as f64;
                let gv = g[0] / n;
                self.accumulate(grads, *x, |s| {
                    for sv in s.iter_mut() {
                        *sv += gv;
                    }
                });
            }
            Op::Sum { x } => {
                let gv = g[0];
                self.accumulate(grads, *x, |s| {
                    for sv in s.iter_mut() {
                        *sv += gv;
                    }
                });
            }
            Op::SumRows { x } => {
                let n = self.shape(*x)[1];
                self.accumulate(grads, *x, |s| {
                    for (i, sv) in s.iter_mut().enumerate() {
                        *sv += g[i / n];
                    }
                });
            }
            Op::Grl { x, lambda } => {
                self.accumulate(grads, *x, |s| {
                    for (sv, gv) in s.iter_mut().zip(g) {
                        *sv += -lambda * gv;
                    }
                });
            }
            Op::BceLogitsSum { logits, targets, mask } => {
                let lv = self.values(*logits);
                self.accumulate(grads, *logits, |s| {
                    for i in 0..s.len() {
                        if mask[i] {
                            s[i] += g[0] * (sigmoid(lv[i]) - targets[i]);
                        }
                    }
                });
            }
        }
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

fn axpy(acc: &mut [f64], add: &[f64]) {
    for (a, b) in acc.iter_mut().zip(add) {
        *a += b;
    }
}

/// `[m, k] × [k, n]`, ikj order.
fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `A [m, n] × Bᵀ` where `B` is `[k, n]` → `[m, k]`.
fn mm_abt(a: &[f64], m: usize, n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `Aᵀ × B` where `A` is `[m, k]`, `B` is `[m, n]` → `[k, n]`.
fn mm_atb(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for l in 0..m {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..k {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, values: &[f64], shape: &[usize]) -> TensorId {
        tape.leaf(values.to_vec(), shape.to_vec(), true).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[-1.0, 0.0, 2.0], &[3]);
        let y = t.relu(x).unwrap();
        assert_eq!(t.values(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3.0, 4.0], &[1, 2]);
        let y = t.l2_normalize_rows(x).unwrap();
        assert!((t.values(y)[0] - 0.6).abs() < 1e-15);
        assert!((t.values(y)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_rejects_near_zero_row() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1e-9, 0.0], &[1, 2]);
        assert!(t.l2_normalize_rows(x).is_err());
    }

    #[test]
    fn l2_normalize_rows_unit_norm() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[0.3, -2.0, 1.7, 5.0, 0.001, -0.002], &[2, 3]);
        let y = t.l2_normalize_rows(x).unwrap();
        for i in 0..2 {
            let norm: f64 = t.values(y)[i * 3..(i + 1) * 3]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Independent oracle: naive ijk triple loop.
        let a = [1.0, -2.0, 3.0, 0.5, 4.0, -1.0];
        let b = [2.0, 1.0, 0.0, -3.0, 1.5, 2.0];
        let (m, k, n) = (2usize, 3usize, 2usize);
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    expect[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        let mut t = Tape::new();
        let ta = leaf(&mut t, &a, &[2, 3]);
        let tb = leaf(&mut t, &b, &[3, 2]);
        let c = t.matmul(ta, tb).unwrap();
        assert_eq!(t.values(c), &expect[..]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[1.0, 2.0], &[1, 2]);
        let b = leaf(&mut t, &[1.0, 2.0, 3.0], &[3, 1]);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[1, 2]") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn grl_forward_identity_bitwise() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1.5, -2.0], &[2]);
        let y = t.grl(x, 1.0).unwrap();
        assert_eq!(t.values(y), t.values(x));
    }

    #[test]
    fn grl_backward_negates_and_scales() {
        // Upstream grad [1, -3] via loss = sum(upstream .* grl(x)).
        let mut t = Tape::new();
        let x = leaf(&mut t, &[0.4, 0.7], &[2]);
        let r = t.grl(x, 2.0).unwrap();
        let up = t.constant(vec![1.0, -3.0], vec![2]).unwrap();
        let prod = t.mul(r, up).unwrap();
        let loss = t.sum(prod).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[-2.0, 6.0]);
    }

    #[test]
    fn grl_backward_lambda_zero_blocks_flow() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[0.4, 0.7], &[2]);
        let r = t.grl(x, 0.0).unwrap();
        let loss = t.sum(r).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let p = leaf(&mut t, &[1.0, -4.0, 2.5], &[3]);
        let loss = t.sum(p).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(p).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_mean_relu_piecewise() {
        let mut t = Tape::new();
        let p = leaf(&mut t, &[-1.0, 2.0], &[2]);
        let r = t.relu(p).unwrap();
        let loss = t.mean(r).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(p).unwrap(), &[0.0, 0.5]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::new();
        let p = leaf(&mut t, &[1.0, 2.0], &[2]);
        assert!(t.backward(p).is_err());
    }

    #[test]
    fn backward_twice_without_reset_errors() {
        let mut t = Tape::new();
        let p = leaf(&mut t, &[1.0, 2.0], &[2]);
        let loss = t.sum(p).unwrap();
        t.backward(loss).unwrap();
        assert!(t.backward(loss).is_err());
        t.reset_grads();
        assert!(t.backward(loss).is_ok());
    }

    #[test]
    fn accumulation_matches_single_use_rewrite() {
        // x + x must produce the same gradient as 2·x.
        let vals = [0.3, -1.2, 7.0];
        let mut t1 = Tape::new();
        let x1 = leaf(&mut t1, &vals, &[3]);
        let dbl = t1.add(x1, x1).unwrap();
        let loss1 = t1.mean(dbl).unwrap();
        t1.backward(loss1).unwrap();

        let mut t2 = Tape::new();
        let x2 = leaf(&mut t2, &vals, &[3]);
        let dbl2 = t2.scale(x2, 2.0).unwrap();
        let loss2 = t2.mean(dbl2).unwrap();
        t2.backward(loss2).unwrap();

        assert_eq!(t1.grad(x1).unwrap(), t2.grad(x2).unwrap());
    }

    #[test]
    fn log_sum_exp_survives_scale_64() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[64.0, 63.0, -64.0], &[1, 3]);
        let y = t.log_sum_exp_rows(x).unwrap();
        let expect = 64.0 + (1.0 + (-1.0f64).exp() + (-128.0f64).exp()).ln();
        assert!((t.values(y)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = leaf(&mut t, &[5.0, 6.0], &[2, 1]);
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 3]);
        assert_eq!(t.values(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = t.slice(c, 1, 0, 2).unwrap();
        assert_eq!(t.values(s), t.values(a));
        let loss = t.sum(s).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0; 4]);
        assert!(t.grad(b).is_none() || t.grad(b).unwrap() == &[0.0, 0.0]);
    }

    #[test]
    fn forward_op_dispatches_documented_kinds() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1.0, -1.0, 0.5, 2.0], &[2, 2]);
        let y = t.forward_op(OpKind::Relu, &[x]).unwrap();
        assert_eq!(t.values(y), &[1.0, 0.0, 0.5, 2.0]);
        let s = t.forward_op(OpKind::Scale(2.0), &[x]).unwrap();
        assert_eq!(t.values(s), &[2.0, -2.0, 1.0, 4.0]);
        let m = t.forward_op(OpKind::Mean, &[x]).unwrap();
        assert_eq!(t.values(m), &[0.625]);
        let lse = t.forward_op(OpKind::LogSumExpRows, &[x]).unwrap();
        assert_eq!(t.shape(lse), &[2]);
        let sg = t.forward_op(OpKind::Sigmoid, &[x]).unwrap();
        assert!((t.values(sg)[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn single_precision_rounds_values() {
        let mut t = Tape::with_precision(Precision::Single);
        let v = 0.1f64 + 1e-12;
        let x = t.leaf(vec![v], vec![1], false).unwrap();
        assert_eq!(t.values(x)[0], v as f32 as f64);
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut t = Tape::new();
        assert!(t.leaf(vec![f64::NAN], vec![1], false).is_err());
        assert!(t.leaf(vec![f64::INFINITY], vec![1], false).is_err());
    }

    #[test]
    fn bce_logits_stable_at_saturation() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[40.0, -40.0], &[2]);
        let l = t
            .bce_with_logits_sum(x, &[1.0, 0.0], &[true, true])
            .unwrap();
        assert!(t.values(l)[0].is_finite());
        assert!(t.values(l)[0] < 1e-15);
    }
}
