//! Reverse-mode differentiation over the small, closed set of operations the
//! denoiser needs.
//!
//! A [`Graph`] is built once per example: leaves are registered first
//! (inputs, trainable parameters, constants), then operations are appended
//! in topological order. [`Graph::forward_eval`] fills the value cache and
//! [`Graph::backward`] walks it in reverse. A node that never receives an
//! upstream gradient is skipped entirely, so anything feeding only into a
//! [`Graph::stop_gradient`] node contributes nothing, not even a signed zero.

mod check;
mod tensor;

use std::collections::BTreeMap;

pub use check::{compare_gradients, grad_check, GradCheckReport, FD_STEP};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Floor applied to probabilities inside the masked cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a trainable parameter across graphs; the caller owns the mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Input { slot: usize },
    Param { key: ParamKey, value: Tensor },
    Const { value: Tensor },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    Gather { table: NodeId, indices: Vec<usize> },
    ConcatCols(NodeId, NodeId),
    MaskedCrossEntropy {
        probs: NodeId,
        targets: Vec<Option<usize>>,
        weight: f64,
    },
    StopGradient(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Const { .. } => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Tanh(..) => "tanh",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Gather { .. } => "gather",
            Op::ConcatCols(..) => "concat_cols",
            Op::MaskedCrossEntropy { .. } => "masked_cross_entropy",
            Op::StopGradient(..) => "stop_gradient",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: (usize, usize),
}

/// Gradients of the graph output with respect to each trainable leaf.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_key: BTreeMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.by_key.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &Tensor)> {
        self.by_key.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_map(self) -> BTreeMap<ParamKey, Tensor> {
        self.by_key
    }

    pub fn insert(&mut self, key: ParamKey, grad: Tensor) {
        self.by_key.insert(key, grad);
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    input_shapes: Vec<(usize, usize)>,
    output: Option<NodeId>,
    values: Vec<Tensor>,
    last_inputs: Vec<Tensor>,
    evaluated: bool,
    clamped: usize,
    /// Values substituted for stop-gradient nodes while finite differencing.
    frozen_stops: Option<BTreeMap<usize, Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape_of(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: (usize, usize)) -> NodeId {
        self.evaluated = false;
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn check_id(&self, id: NodeId) -> Result<(usize, usize)> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape)
            .ok_or_else(|| Error::Config(format!("unknown node {}", id.0)))
    }

    /// Placeholder filled from `forward_eval`'s input list, in creation order.
    pub fn input(&mut self, rows: usize, cols: usize) -> NodeId {
        let slot = self.input_shapes.len();
        self.input_shapes.push((rows, cols));
        self.push(Op::Input { slot }, (rows, cols))
    }

    /// Trainable leaf.
    pub fn param(&mut self, key: ParamKey, value: Tensor) -> NodeId {
        let shape = value.shape();
        self.push(Op::Param { key, value }, shape)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape();
        self.push(Op::Const { value }, shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check_id(a)?, self.check_id(b)?);
        if sa.1 != sb.0 {
            return Err(Error::Config(format!(
                "matmul shape mismatch: {}x{} · {}x{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(self.push(Op::MatMul(a, b), (sa.0, sb.1)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check_id(a)?, self.check_id(b)?);
        if sa != sb {
            return Err(Error::Config(format!(
                "add shape mismatch: {}x{} + {}x{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    /// Adds a `1×n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check_id(a)?, self.check_id(bias)?);
        if sb != (1, sa.1) {
            return Err(Error::Config(format!(
                "add_row expects bias 1x{}, got {}x{}",
                sa.1, sb.0, sb.1
            )));
        }
        Ok(self.push(Op::AddRow(a, bias), sa))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.check_id(a)?;
        Ok(self.push(Op::Tanh(a), sa))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.check_id(a)?;
        Ok(self.push(Op::SoftmaxRows(a), sa))
    }

    /// Row `r` of the result is row `indices[r]` of `table`.
    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let st = self.check_id(table)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= st.0) {
            return Err(Error::Config(format!(
                "gather index {bad} out of range for table with {} rows",
                st.0
            )));
        }
        let rows = indices.len();
        Ok(self.push(Op::Gather { table, indices }, (rows, st.1)))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check_id(a)?, self.check_id(b)?);
        if sa.0 != sb.0 {
            return Err(Error::Config(format!(
                "concat_cols row mismatch: {} vs {}",
                sa.0, sb.0
            )));
        }
        Ok(self.push(Op::ConcatCols(a, b), (sa.0, sa.1 + sb.1)))
    }

    /// `weight · Σ_{r: targets[r] = Some(c)} −ln probs[r][c]`, a `1×1` node.
    pub fn masked_cross_entropy(
        &mut self,
        probs: NodeId,
        targets: Vec<Option<usize>>,
        weight: f64,
    ) -> Result<NodeId> {
        let sp = self.check_id(probs)?;
        if targets.len() != sp.0 {
            return Err(Error::Config(format!(
                "masked_cross_entropy: {} targets for {} rows",
                targets.len(),
                sp.0
            )));
        }
        if targets.iter().flatten().any(|&c| c >= sp.1) {
            return Err(Error::Config("masked_cross_entropy target out of range".into()));
        }
        Ok(self.push(
            Op::MaskedCrossEntropy {
                probs,
                targets,
                weight,
            },
            (1, 1),
        ))
    }

    /// Identity in the forward pass, blocks all gradient in the backward pass.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.check_id(a)?;
        Ok(self.push(Op::StopGradient(a), sa))
    }

    /// Marks the node whose value `forward_eval` returns. Defaults to the last node.
    pub fn set_output(&mut self, id: NodeId) -> Result<()> {
        self.check_id(id)?;
        self.output = Some(id);
        Ok(())
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output.or_else(|| self.nodes.len().checked_sub(1).map(NodeId))
    }

    pub fn param_keys(&self) -> Vec<ParamKey> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param { key, .. } => Some(*key),
                _ => None,
            })
            .collect()
    }

    /// Number of probabilities floored at [`PROB_FLOOR`] in the last forward pass.
    pub fn clamped_count(&self) -> usize {
        self.clamped
    }

    /// Cached value of any node after `forward_eval`.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        if !self.evaluated {
            return Err(Error::State("graph has not been evaluated".into()));
        }
        self.values
            .get(id.0)
            .ok_or_else(|| Error::Config(format!("unknown node {}", id.0)))
    }

    pub fn forward_eval(&mut self, inputs: &[Tensor]) -> Result<&Tensor> {
        if inputs.len() != self.input_shapes.len() {
            return Err(Error::Config(format!(
                "graph expects {} inputs, got {}",
                self.input_shapes.len(),
                inputs.len()
            )));
        }
        for (slot, (t, &expected)) in inputs.iter().zip(&self.input_shapes).enumerate() {
            if t.shape() != expected {
                return Err(Error::Config(format!(
                    "input {slot} has shape {:?}, expected {:?}",
                    t.shape(),
                    expected
                )));
            }
        }
        let out = self
            .output()
            .ok_or_else(|| Error::Config("empty graph".into()))?;

        self.evaluated = false;
        self.clamped = 0;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let frozen = match (&node.op, &self.frozen_stops) {
                (Op::StopGradient(_), Some(map)) => map.get(&idx).cloned(),
                _ => None,
            };
            let v = match frozen {
                Some(v) => v,
                None => eval_node(&node.op, &values, inputs, &mut self.clamped),
            };
            if !v.is_finite() {
                return Err(Error::numeric(
                    format!("node {idx} ({})", node.op.name()),
                    "non-finite value",
                ));
            }
            values.push(v);
        }
        self.values = values;
        self.last_inputs = inputs.to_vec();
        self.evaluated = true;
        Ok(&self.values[out.0])
    }

    /// Back-propagates `seed` (shaped like the output) to every trainable leaf.
    /// Leaves with no path to the output get a zero gradient.
    pub fn backward(&self, seed: &Tensor) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::State("backward called before forward_eval".into()));
        }
        let out = self.output().expect("evaluated graph has nodes");
        if seed.shape() != self.nodes[out.0].shape {
            return Err(Error::Config(format!(
                "seed gradient shape {:?} does not match output {:?}",
                seed.shape(),
                self.nodes[out.0].shape
            )));
        }

        let needs = self.requires_grad();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.clone());
        let accumulate = |grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor| {
            if needs[id.0] {
                accumulate(grads, id, contribution);
            }
        };
        let mut result = Gradients::default();

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let y = &self.values[idx];
            match &self.nodes[idx].op {
                Op::Input { .. } | Op::Const { .. } | Op::StopGradient(_) => {}
                Op::Param { key, .. } => match result.by_key.get_mut(key) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        result.by_key.insert(*key, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                    accumulate(&mut grads, *a, g.matmul_transposed(vb));
                    accumulate(&mut grads, *b, va.transposed_matmul(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (d, yv) in ga.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        *d *= 1.0 - yv * yv;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather { table, indices } => {
                    let (rows, cols) = self.nodes[table.0].shape;
                    let mut gt = Tensor::zeros(rows, cols);
                    for (r, &src) in indices.iter().enumerate() {
                        for (acc, v) in gt.row_mut(src).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].shape.1;
                    let cb = self.nodes[b.0].shape.1;
                    let mut ga = Tensor::zeros(g.rows(), ca);
                    let mut gb = Tensor::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaskedCrossEntropy {
                    probs,
                    targets,
                    weight,
                } => {
                    let upstream = g.get(0, 0);
                    let vp = &self.values[probs.0];
                    let mut gp = Tensor::zeros(vp.rows(), vp.cols());
                    for (r, target) in targets.iter().enumerate() {
                        if let Some(c) = *target {
                            let p = vp.get(r, c);
                            if p >= PROB_FLOOR {
                                gp.set(r, c, -upstream * weight / p);
                            }
                        }
                    }
                    accumulate(&mut grads, *probs, gp);
                }
            }
        }

        for key in self.param_keys() {
            if !result.by_key.contains_key(&key) {
                let shape = self
                    .nodes
                    .iter()
                    .find_map(|n| match &n.op {
                        Op::Param { key: k, value } if *k == key => Some(value.shape()),
                        _ => None,
                    })
                    .expect("key came from a param node");
                result.by_key.insert(key, Tensor::zeros(shape.0, shape.1));
            }
        }
        Ok(result)
    }

    /// Whether any trainable leaf reaches each node without crossing a stop-gradient.
    fn requires_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            needs[idx] = match &node.op {
                Op::Param { .. } => true,
                Op::Input { .. } | Op::Const { .. } | Op::StopGradient(_) => false,
                Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::ConcatCols(a, b) => {
                    needs[a.0] || needs[b.0]
                }
                Op::Tanh(a) | Op::SoftmaxRows(a) => needs[a.0],
                Op::Gather { table, .. } => needs[table.0],
                Op::MaskedCrossEntropy { probs, .. } => needs[probs.0],
            };
        }
        needs
    }

    /// Mutable access to a parameter leaf's value; used by the finite-difference
    /// checker. Invalidates the forward cache.
    pub(crate) fn param_value_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        self.evaluated = false;
        self.nodes.iter_mut().find_map(|n| match &mut n.op {
            Op::Param { key: k, value } if *k == key => Some(value),
            _ => None,
        })
    }

    /// Pins every stop-gradient node at its current value until [`Graph::thaw_stops`].
    pub(crate) fn freeze_stops(&mut self) {
        let map = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::StopGradient(_)))
            .map(|(i, _)| (i, self.values[i].clone()))
            .collect();
        self.frozen_stops = Some(map);
    }

    pub(crate) fn thaw_stops(&mut self) {
        self.frozen_stops = None;
    }

    pub(crate) fn last_inputs(&self) -> &[Tensor] {
        &self.last_inputs
    }

    pub(crate) fn is_evaluated(&self) -> bool {
        self.evaluated
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn eval_node(op: &Op, values: &[Tensor], inputs: &[Tensor], clamped: &mut usize) -> Tensor {
    match op {
        Op::Input { slot } => inputs[*slot].clone(),
        Op::Param { value, .. } | Op::Const { value } => value.clone(),
        Op::MatMul(a, b) => values[a.0].matmul(&values[b.0]),
        Op::Add(a, b) => {
            let mut out = values[a.0].clone();
            out.add_assign(&values[b.0]);
            out
        }
        Op::AddRow(a, bias) => {
            let mut out = values[a.0].clone();
            let b = values[bias.0].as_slice();
            for r in 0..out.rows() {
                for (o, v) in out.row_mut(r).iter_mut().zip(b) {
                    *o += v;
                }
            }
            out
        }
        Op::Tanh(a) => {
            let mut out = values[a.0].clone();
            out.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
            out
        }
        Op::SoftmaxRows(a) => {
            let mut out = values[a.0].clone();
            for r in 0..out.rows() {
                softmax_in_place(out.row_mut(r));
            }
            out
        }
        Op::Gather { table, indices } => {
            let t = &values[table.0];
            let mut out = Tensor::zeros(indices.len(), t.cols());
            for (r, &src) in indices.iter().enumerate() {
                out.row_mut(r).copy_from_slice(t.row(src));
            }
            out
        }
        Op::ConcatCols(a, b) => {
            let (va, vb) = (&values[a.0], &values[b.0]);
            let mut out = Tensor::zeros(va.rows(), va.cols() + vb.cols());
            for r in 0..va.rows() {
                let row = out.row_mut(r);
                row[..va.cols()].copy_from_slice(va.row(r));
                row[va.cols()..].copy_from_slice(vb.row(r));
            }
            out
        }
        Op::MaskedCrossEntropy {
            probs,
            targets,
            weight,
        } => {
            let vp = &values[probs.0];
            let mut nll = 0.0;
            for (r, target) in targets.iter().enumerate() {
                if let Some(c) = *target {
                    let p = vp.get(r, c);
                    if p < PROB_FLOOR {
                        *clamped += 1;
                    }
                    nll -= p.max(PROB_FLOOR).ln();
                }
            }
            Tensor::scalar(weight * nll)
        }
        Op::StopGradient(a) => values[a.0].clone(),
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
