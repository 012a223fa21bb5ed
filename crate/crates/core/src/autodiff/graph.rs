//! The tape: forward primitives with recorded reverse rules.

use std::collections::HashMap;

use rand_chacha::rand_core::RngCore;

use crate::error::{Error, Result};
use crate::Float;

use super::tensor::{numel_of, Tensor};

/// Primitive operations available through [`Graph::apply_primitive`].
///
/// Data-dependent metadata (slice window, lookup rows) rides on the variant;
/// everything else is inferred from input shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[m,k] @ [k,n] -> [m,n]` or `[m,k] @ [k] -> [m]`.
    MatMul,
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// Hadamard (elementwise) product of two same-shape tensors.
    Mul,
    /// Concatenate along the last axis; leading dims must agree.
    ConcatLast,
    /// Copy a contiguous window of the flat data into a new shape.
    /// `product(shape)` is the window length; `offset .. offset+len` must
    /// lie inside the input. With `offset == 0` and a full-length shape this
    /// doubles as a reshape.
    Slice { offset: usize, shape: Vec<usize> },
    Tanh,
    Sigmoid,
    /// Softmax along the last axis, max-subtracted per row.
    SoftmaxLast,
    /// Natural log, elementwise. Inputs must be positive.
    Log,
    /// Row lookup: input `[v, d]`, output `[rows.len(), d]`.
    EmbedLookup { rows: Vec<usize> },
    /// Broadcast multiply: inputs `[scalar (one element), x]`, output shaped
    /// like `x`. Differentiable in both inputs.
    ScalarMul,
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::ConcatLast => "concat-last",
            Primitive::Slice { .. } => "slice",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::SoftmaxLast => "softmax-last",
            Primitive::Log => "log",
            Primitive::EmbedLookup { .. } => "embed-lookup",
            Primitive::ScalarMul => "scalar-mul",
        }
    }
}

enum NodeOp {
    Prim(Primitive),
    /// Mean negative log-likelihood of `targets` under `log_probs [steps, vocab]`,
    /// restricted to positions with nonzero mask. `denom` is the mask sum.
    CrossEntropy { targets: Vec<usize>, mask: Vec<Float>, denom: Float },
    /// Inverted dropout; `mask` holds `0` or `1/(1-p)` per element.
    Dropout { mask: Vec<Float> },
}

struct Node {
    op: NodeOp,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Linear tape of recorded operations. Backward walks nodes in exact
/// reverse construction order.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// Recording graph for training passes.
    pub fn new() -> Graph {
        Graph { nodes: Vec::new(), recording: true }
    }

    /// Non-recording graph for pure inference; outputs never require grad.
    pub fn inference() -> Graph {
        Graph { nodes: Vec::new(), recording: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Run one primitive, record it if any input is trainable, and return
    /// the output tensor.
    pub fn apply_primitive(&mut self, kind: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        let (shape, data) = forward(&kind, inputs)?;
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "{} produced a non-finite value",
            kind.name()
        );
        let out = Tensor::from_data(&shape, data)?;
        self.record(NodeOp::Prim(kind), inputs, &out);
        Ok(out)
    }

    fn record(&mut self, op: NodeOp, inputs: &[&Tensor], out: &Tensor) {
        if self.recording && inputs.iter().any(|t| t.requires_grad()) {
            out.set_requires_grad(true);
            self.nodes.push(Node {
                op,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                output: out.clone(),
            });
        }
    }

    // ── Convenience wrappers ─────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Mul, &[a, b])
    }

    pub fn concat_last(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.apply_primitive(Primitive::ConcatLast, inputs)
    }

    pub fn slice(&mut self, x: &Tensor, offset: usize, shape: &[usize]) -> Result<Tensor> {
        self.apply_primitive(Primitive::Slice { offset, shape: shape.to_vec() }, &[x])
    }

    /// Whole-tensor reshape (a zero-offset slice).
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.slice(x, 0, shape)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Sigmoid, &[x])
    }

    pub fn softmax_last(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::SoftmaxLast, &[x])
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::Log, &[x])
    }

    pub fn embed_lookup(&mut self, table: &Tensor, rows: &[usize]) -> Result<Tensor> {
        self.apply_primitive(Primitive::EmbedLookup { rows: rows.to_vec() }, &[table])
    }

    pub fn scalar_mul(&mut self, scalar: &Tensor, x: &Tensor) -> Result<Tensor> {
        self.apply_primitive(Primitive::ScalarMul, &[scalar, x])
    }

    /// Multiply by a constant (non-trainable) scalar.
    pub fn scale_const(&mut self, c: Float, x: &Tensor) -> Result<Tensor> {
        let s = Tensor::scalar(c);
        self.scalar_mul(&s, x)
    }

    /// `1 - x` elementwise, built from add and a constant negation.
    pub fn one_minus(&mut self, x: &Tensor) -> Result<Tensor> {
        let ones = Tensor::from_data(&x.shape(), vec![1.0; x.numel()])?;
        let neg = self.scale_const(-1.0, x)?;
        self.add(&ones, &neg)
    }

    // ── Loss and regularization ops ──────────────────────────────────

    /// Mean negative log-likelihood over unmasked positions.
    ///
    /// `log_probs` is `[steps, vocab]`; `targets` and `mask` have length
    /// `steps`. Masked positions (mask 0) contribute nothing.
    pub fn cross_entropy(
        &mut self,
        log_probs: &Tensor,
        targets: &[usize],
        mask: &[Float],
    ) -> Result<Tensor> {
        let shape = log_probs.shape();
        if shape.len() != 2 {
            return Err(Error::shape(
                "cross-entropy",
                format!("log_probs must be [steps, vocab], got {shape:?}"),
            ));
        }
        let (steps, vocab) = (shape[0], shape[1]);
        if targets.len() != steps || mask.len() != steps {
            return Err(Error::invalid(format!(
                "cross-entropy: {} steps but {} targets / {} mask entries",
                steps,
                targets.len(),
                mask.len()
            )));
        }
        let denom: Float = mask.iter().sum();
        if denom <= 0.0 {
            return Err(Error::invalid("cross-entropy: all-zero mask"));
        }
        let mut nll = 0.0;
        {
            let lp = log_probs.data();
            for (t, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
                if m == 0.0 {
                    continue;
                }
                if tgt >= vocab {
                    return Err(Error::invalid(format!(
                        "cross-entropy: target {tgt} out of vocabulary {vocab} at step {t}"
                    )));
                }
                nll -= m * lp[t * vocab + tgt];
            }
        }
        let out = Tensor::scalar(nll / denom);
        self.record(
            NodeOp::CrossEntropy { targets: targets.to_vec(), mask: mask.to_vec(), denom },
            &[log_probs],
            &out,
        );
        Ok(out)
    }

    /// Inverted dropout: zero each element with probability `p` and scale
    /// survivors by `1/(1-p)`. Identity when `p == 0` or not training.
    pub fn dropout(
        &mut self,
        x: &Tensor,
        p: Float,
        training: bool,
        rng: &mut impl RngCore,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x.clone());
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<Float> = (0..x.numel())
            .map(|_| {
                let u = (rng.next_u64() >> 11) as Float / (1u64 << 53) as Float;
                if u < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<Float> = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_data(&x.shape(), data)?;
        self.record(NodeOp::Dropout { mask }, &[x], &out);
        Ok(out)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss recorded on this graph.
    ///
    /// Gradients are *added* into the `grad` accumulator of every
    /// `requires_grad` tensor reachable from the loss; call sites zero
    /// grads explicitly between optimization steps.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let on_graph = self.nodes.iter().any(|n| n.output.ptr_eq(loss));
        if !on_graph {
            return Err(Error::invalid("backward: loss is not an output of this graph"));
        }

        // Transient gradient table keyed by storage identity. Keeping the
        // propagation local (instead of reading tensor.grad) makes repeated
        // backward calls accumulate exactly.
        let mut grads: HashMap<usize, Vec<Float>> = HashMap::new();
        let mut handles: HashMap<usize, Tensor> = HashMap::new();
        grads.insert(loss.ptr_id(), vec![1.0]);
        handles.insert(loss.ptr_id(), loss.clone());

        for node in self.nodes.iter().rev() {
            let out_id = node.output.ptr_id();
            let Some(dy) = grads.get(&out_id).cloned() else { continue };
            let contribs = backward_op(node, &dy);
            for (idx, d_in) in contribs {
                let t = &node.inputs[idx];
                if !t.requires_grad() {
                    continue;
                }
                let id = t.ptr_id();
                handles.entry(id).or_insert_with(|| t.clone());
                match grads.get_mut(&id) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&d_in) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(id, d_in);
                    }
                }
            }
        }

        for (id, g) in grads {
            let t = &handles[&id];
            if t.requires_grad() {
                t.accumulate_grad(&g);
            }
        }
        Ok(())
    }
}

// ── Forward kernels ──────────────────────────────────────────────────

fn forward(kind: &Primitive, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<Float>)> {
    let arity_err = |want: &str| {
        Err(Error::invalid(format!("{} expects {want} inputs, got {}", kind.name(), inputs.len())))
    };
    match kind {
        Primitive::MatMul => {
            if inputs.len() != 2 {
                return arity_err("2");
            }
            matmul_fwd(inputs[0], inputs[1])
        }
        Primitive::Add | Primitive::Mul => {
            if inputs.len() != 2 {
                return arity_err("2");
            }
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    kind.name(),
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let (ad, bd) = (a.data(), b.data());
            let data = match kind {
                Primitive::Add => ad.iter().zip(bd.iter()).map(|(x, y)| x + y).collect(),
                _ => ad.iter().zip(bd.iter()).map(|(x, y)| x * y).collect(),
            };
            Ok((a.shape(), data))
        }
        Primitive::ConcatLast => {
            if inputs.is_empty() {
                return arity_err(">= 1");
            }
            concat_fwd(inputs)
        }
        Primitive::Slice { offset, shape } => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            let x = inputs[0];
            let len = numel_of(shape);
            if offset + len > x.numel() {
                return Err(Error::shape(
                    "slice",
                    format!(
                        "window {offset}..{} exceeds input of {} elements (input shape {:?})",
                        offset + len,
                        x.numel(),
                        x.shape()
                    ),
                ));
            }
            let data = x.data()[*offset..offset + len].to_vec();
            Ok((shape.clone(), data))
        }
        Primitive::Tanh => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            let x = inputs[0];
            Ok((x.shape(), x.data().iter().map(|v| v.tanh()).collect()))
        }
        Primitive::Sigmoid => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            let x = inputs[0];
            Ok((x.shape(), x.data().iter().map(|v| sigmoid(*v)).collect()))
        }
        Primitive::SoftmaxLast => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            softmax_fwd(inputs[0])
        }
        Primitive::Log => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            let x = inputs[0];
            Ok((x.shape(), x.data().iter().map(|v| v.ln()).collect()))
        }
        Primitive::EmbedLookup { rows } => {
            if inputs.len() != 1 {
                return arity_err("1");
            }
            let table = inputs[0];
            let shape = table.shape();
            if shape.len() != 2 {
                return Err(Error::shape(
                    "embed-lookup",
                    format!("table must be 2-d, got {shape:?}"),
                ));
            }
            let (v, d) = (shape[0], shape[1]);
            let mut data = Vec::with_capacity(rows.len() * d);
            let td = table.data();
            for &r in rows {
                if r >= v {
                    return Err(Error::invalid(format!(
                        "embed-lookup: row {r} out of range for table with {v} rows"
                    )));
                }
                data.extend_from_slice(&td[r * d..(r + 1) * d]);
            }
            Ok((vec![rows.len(), d], data))
        }
        Primitive::ScalarMul => {
            if inputs.len() != 2 {
                return arity_err("2");
            }
            let (s, x) = (inputs[0], inputs[1]);
            if s.numel() != 1 {
                return Err(Error::shape(
                    "scalar-mul",
                    format!("first input must hold one element, got {:?}", s.shape()),
                ));
            }
            let sv = s.data()[0];
            Ok((x.shape(), x.data().iter().map(|v| sv * v).collect()))
        }
    }
}

fn sigmoid(x: Float) -> Float {
    1.0 / (1.0 + (-x).exp())
}

fn matmul_fwd(a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, Vec<Float>)> {
    let (ash, bsh) = (a.shape(), b.shape());
    let bad = || Error::shape("matmul", format!("{ash:?} @ {bsh:?}"));
    if ash.len() != 2 {
        return Err(bad());
    }
    let (m, k) = (ash[0], ash[1]);
    let (ad, bd) = (a.data(), b.data());
    match bsh.len() {
        1 => {
            if bsh[0] != k {
                return Err(bad());
            }
            let mut out = vec![0.0; m];
            for i in 0..m {
                let row = &ad[i * k..(i + 1) * k];
                out[i] = row.iter().zip(bd.iter()).map(|(x, y)| x * y).sum();
            }
            Ok((vec![m], out))
        }
        2 => {
            if bsh[0] != k {
                return Err(bad());
            }
            let n = bsh[1];
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Ok((vec![m, n], out))
        }
        _ => Err(bad()),
    }
}

fn concat_fwd(inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<Float>)> {
    let first = inputs[0].shape();
    let nd = first.len();
    let lead = &first[..nd - 1];
    let mut widths = Vec::with_capacity(inputs.len());
    for t in inputs {
        let sh = t.shape();
        if sh.len() != nd || &sh[..nd - 1] != lead {
            return Err(Error::shape(
                "concat-last",
                format!("leading dims differ: {first:?} vs {sh:?}"),
            ));
        }
        widths.push(sh[nd - 1]);
    }
    let total_w: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut out = Vec::with_capacity(rows * total_w);
    for r in 0..rows {
        for (t, w) in inputs.iter().zip(&widths) {
            let d = t.data();
            out.extend_from_slice(&d[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total_w);
    Ok((shape, out))
}

fn softmax_fwd(x: &Tensor) -> Result<(Vec<usize>, Vec<Float>)> {
    let shape = x.shape();
    let w = *shape.last().ok_or_else(|| Error::shape("softmax-last", "empty shape"))?;
    let rows = numel_of(&shape) / w;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for r in 0..rows {
        let row = &xd[r * w..(r + 1) * w];
        let max = row.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
        let mut sum = 0.0;
        for (o, v) in out[r * w..(r + 1) * w].iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in &mut out[r * w..(r + 1) * w] {
            *o /= sum;
        }
    }
    Ok((shape, out))
}

// ── Backward rules ───────────────────────────────────────────────────

/// Per-input gradient contributions `(input index, gradient)` for one node.
fn backward_op(node: &Node, dy: &[Float]) -> Vec<(usize, Vec<Float>)> {
    match &node.op {
        NodeOp::Prim(p) => prim_backward(p, node, dy),
        NodeOp::CrossEntropy { targets, mask, denom } => {
            let lp = &node.inputs[0];
            let vocab = lp.shape()[1];
            let mut d = vec![0.0; lp.numel()];
            for (t, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
                if m != 0.0 {
                    d[t * vocab + tgt] = -dy[0] * m / denom;
                }
            }
            vec![(0, d)]
        }
        NodeOp::Dropout { mask } => {
            let d = dy.iter().zip(mask).map(|(g, m)| g * m).collect();
            vec![(0, d)]
        }
    }
}

fn prim_backward(p: &Primitive, node: &Node, dy: &[Float]) -> Vec<(usize, Vec<Float>)> {
    match p {
        Primitive::MatMul => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            let ash = a.shape();
            let (m, k) = (ash[0], ash[1]);
            let bsh = b.shape();
            let n = if bsh.len() == 2 { bsh[1] } else { 1 };
            let (ad, bd) = (a.data(), b.data());
            // dA = dY @ B^T
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += dy[i * n + j] * bd[p * n + j];
                    }
                    da[i * k + p] = acc;
                }
            }
            // dB = A^T @ dY
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        db[p * n + j] += av * dy[i * n + j];
                    }
                }
            }
            vec![(0, da), (1, db)]
        }
        Primitive::Add => vec![(0, dy.to_vec()), (1, dy.to_vec())],
        Primitive::Mul => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            let da = dy.iter().zip(b.data().iter()).map(|(g, v)| g * v).collect();
            let db = dy.iter().zip(a.data().iter()).map(|(g, v)| g * v).collect();
            vec![(0, da), (1, db)]
        }
        Primitive::ConcatLast => {
            let widths: Vec<usize> =
                node.inputs.iter().map(|t| *t.shape().last().unwrap()).collect();
            let total: usize = widths.iter().sum();
            let rows = dy.len() / total;
            let mut out = Vec::with_capacity(node.inputs.len());
            let mut col = 0;
            for (idx, w) in widths.iter().enumerate() {
                let mut d = vec![0.0; rows * w];
                for r in 0..rows {
                    d[r * w..(r + 1) * w]
                        .copy_from_slice(&dy[r * total + col..r * total + col + w]);
                }
                out.push((idx, d));
                col += w;
            }
            out
        }
        Primitive::Slice { offset, shape } => {
            let x = &node.inputs[0];
            let len = numel_of(shape);
            let mut d = vec![0.0; x.numel()];
            d[*offset..offset + len].copy_from_slice(dy);
            vec![(0, d)]
        }
        Primitive::Tanh => {
            let y = node.output.data();
            vec![(0, dy.iter().zip(y.iter()).map(|(g, v)| g * (1.0 - v * v)).collect())]
        }
        Primitive::Sigmoid => {
            let y = node.output.data();
            vec![(0, dy.iter().zip(y.iter()).map(|(g, v)| g * v * (1.0 - v)).collect())]
        }
        Primitive::SoftmaxLast => {
            let y = node.output.data();
            let shape = node.output.shape();
            let w = *shape.last().unwrap();
            let rows = y.len() / w;
            let mut d = vec![0.0; y.len()];
            for r in 0..rows {
                let yr = &y[r * w..(r + 1) * w];
                let gr = &dy[r * w..(r + 1) * w];
                let dot: Float = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..w {
                    d[r * w + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(0, d)]
        }
        Primitive::Log => {
            let x = node.inputs[0].data();
            vec![(0, dy.iter().zip(x.iter()).map(|(g, v)| g / v).collect())]
        }
        Primitive::EmbedLookup { rows } => {
            let table = &node.inputs[0];
            let d_model = table.shape()[1];
            let mut d = vec![0.0; table.numel()];
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..d_model {
                    d[r * d_model + j] += dy[i * d_model + j];
                }
            }
            vec![(0, d)]
        }
        Primitive::ScalarMul => {
            let (s, x) = (&node.inputs[0], &node.inputs[1]);
            let sv = s.data()[0];
            let ds: Float = dy.iter().zip(x.data().iter()).map(|(g, v)| g * v).sum();
            let dx = dy.iter().map(|g| g * sv).collect();
            vec![(0, vec![ds]), (1, dx)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(shape: &[usize], data: &[Float]) -> Tensor {
        Tensor::param(shape, data.to_vec()).unwrap()
    }

    // ── Forward oracles ──────────────────────────────────────────────

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut g = Graph::new();
        let x = leaf(&[3], &[0.0, 0.0, 0.0]);
        let y = g.softmax_last(&x).unwrap();
        for v in y.data().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = leaf(&[4], &[0.0; 4]);
        let y = g.sigmoid(&x).unwrap();
        assert!(y.data().iter().all(|v| (*v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn matmul_matches_hand_product() {
        // identity-padded 2x3 matrix against [1,2,3]: rows pick out elements
        let mut g = Graph::new();
        let a = leaf(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let b = leaf(&[3], &[1.0, 2.0, 3.0]);
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.data_vec(), vec![1.0, 2.0]);

        // full 2x2 @ 2x2 hand product
        let a = leaf(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.data_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch_naming_shapes() {
        let mut g = Graph::new();
        let a = leaf(&[2, 3], &[0.0; 6]);
        let b = leaf(&[4], &[0.0; 4]);
        let err = g.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = leaf(&[2], &[1.0, 2.0]);
        let b = leaf(&[3], &[3.0, 4.0, 5.0]);
        let c = g.concat_last(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), vec![5]);
        assert_eq!(c.data_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let back = g.slice(&c, 2, &[3]).unwrap();
        assert_eq!(back.data_vec(), vec![3.0, 4.0, 5.0]);
        // matrix concat along last axis
        let m1 = leaf(&[2, 1], &[1.0, 2.0]);
        let m2 = leaf(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let m = g.concat_last(&[&m1, &m2]).unwrap();
        assert_eq!(m.shape(), vec![2, 3]);
        assert_eq!(m.data_vec(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn cross_entropy_oracle_values() {
        // uniform log-probs over vocab 7 -> ln 7 regardless of targets
        let mut g = Graph::new();
        let v = 7;
        let lp = leaf(&[3, v], &vec![(1.0 / v as Float).ln(); 3 * v]);
        let loss = g.cross_entropy(&lp, &[0, 3, 6], &[1.0, 1.0, 1.0]).unwrap();
        assert!((loss.data()[0] - (v as Float).ln()).abs() < 1e-12);

        // probability one on the target -> zero loss
        let mut lp_data = vec![-1e9; 3];
        lp_data[1] = 0.0; // log 1
        let lp = leaf(&[1, 3], &lp_data);
        let loss = g.cross_entropy(&lp, &[1], &[1.0]).unwrap();
        assert_eq!(loss.data()[0], 0.0);

        // probs [0.5, 0.25, 0.25], target 1, single step -> -ln(0.25)
        let lp = leaf(&[1, 3], &[0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()]);
        let loss = g.cross_entropy(&lp, &[1], &[1.0]).unwrap();
        assert!((loss.data()[0] - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets_and_empty_mask() {
        let mut g = Graph::new();
        let lp = leaf(&[2, 3], &[0.0; 6]);
        assert!(g.cross_entropy(&lp, &[0, 3], &[1.0, 1.0]).is_err());
        assert!(g.cross_entropy(&lp, &[0, 1], &[0.0, 0.0]).is_err());
        // out-of-range target on a masked position is ignored
        assert!(g.cross_entropy(&lp, &[0, 99], &[1.0, 0.0]).is_ok());
    }

    // ── Backward oracles ─────────────────────────────────────────────

    /// Scalar loss = dot(fixed weights, flattened output) so any op output
    /// reduces to a scalar without extra machinery under test.
    fn reduce_loss(g: &mut Graph, y: &Tensor, w: &[Float]) -> Tensor {
        let wt = Tensor::from_data(&[1, w.len()], w.to_vec()).unwrap();
        let flat = g.reshape(y, &[y.numel()]).unwrap();
        let s = g.matmul(&wt, &flat).unwrap();
        g.reshape(&s, &[1]).unwrap()
    }

    #[test]
    fn backward_of_sum_gives_ones() {
        let mut g = Graph::new();
        let x = leaf(&[2, 3], &[0.3, -0.2, 0.5, 0.9, -1.0, 0.1]);
        let loss = reduce_loss(&mut g, &x, &[1.0; 6]);
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn two_backward_calls_double_the_grads() {
        let mut g = Graph::new();
        let x = leaf(&[3], &[0.2, -0.4, 0.6]);
        let y = g.tanh(&x).unwrap();
        let loss = reduce_loss(&mut g, &y, &[1.0, 2.0, 3.0]);
        g.backward(&loss).unwrap();
        let once = x.grad().unwrap();
        g.backward(&loss).unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_nonscalar_and_foreign_loss() {
        let mut g = Graph::new();
        let x = leaf(&[2], &[1.0, 2.0]);
        let y = g.tanh(&x).unwrap();
        assert!(g.backward(&y).is_err()); // not scalar
        let foreign = Tensor::scalar(1.0);
        assert!(g.backward(&foreign).is_err()); // not on graph
    }

    #[test]
    fn sigmoid_dot_gradient_matches_finite_differences() {
        // loss = sigmoid(w . x); check grad wrt w by central differences
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w0 = Tensor::uniform(&[1, 4], -0.5, 0.5, &mut rng).data_vec();
        let x = Tensor::uniform(&[4], -0.5, 0.5, &mut rng).data_vec();

        let f = |wv: &[Float]| -> Float {
            let mut g = Graph::new();
            let w = leaf(&[1, 4], wv);
            let xt = Tensor::from_data(&[4], x.clone()).unwrap();
            let dot = g.matmul(&w, &xt).unwrap();
            let y = g.sigmoid(&dot).unwrap();
            y.data()[0]
        };

        let mut g = Graph::new();
        let w = leaf(&[1, 4], &w0);
        let xt = Tensor::from_data(&[4], x.clone()).unwrap();
        let dot = g.matmul(&w, &xt).unwrap();
        let y = g.sigmoid(&dot).unwrap();
        let loss = g.reshape(&y, &[1]).unwrap();
        g.backward(&loss).unwrap();
        let analytic = w.grad().unwrap();

        let step = 1e-4;
        for i in 0..4 {
            let mut plus = w0.clone();
            plus[i] += step;
            let mut minus = w0.clone();
            minus[i] -= step;
            let fd = (f(&plus) - f(&minus)) / (2.0 * step);
            let rel = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "grad[{i}]: analytic {} vs fd {}", analytic[i], fd);
        }
    }

    /// Central-difference gradient check for one primitive applied to
    /// random inputs, reduced to a scalar by a fixed random projection.
    fn check_primitive_grads(build: impl Fn(&mut Graph, &[Tensor]) -> Tensor, shapes: &[Vec<usize>], seed: u64, lo: Float, hi: Float) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> =
            shapes.iter().map(|s| Tensor::uniform(s, lo, hi, &mut rng)).collect();
        for t in &inputs {
            t.set_requires_grad(true);
        }
        let probe_w: Vec<Float> = {
            let mut g = Graph::inference();
            let frozen: Vec<Tensor> = inputs.iter().map(|t| t.detached()).collect();
            let y = build(&mut g, &frozen);
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            Tensor::uniform(&[y.numel()], -1.0, 1.0, &mut r).data_vec()
        };

        // analytic
        let mut g = Graph::new();
        let y = build(&mut g, &inputs);
        let loss = reduce_loss(&mut g, &y, &probe_w);
        g.backward(&loss).unwrap();

        // numeric, input by input, coordinate by coordinate
        let eval = |vals: &[Vec<Float>]| -> Float {
            let mut g = Graph::inference();
            let ts: Vec<Tensor> = vals
                .iter()
                .zip(shapes)
                .map(|(v, s)| Tensor::from_data(s, v.clone()).unwrap())
                .collect();
            let y = build(&mut g, &ts);
            y.data().iter().zip(&probe_w).map(|(a, b)| a * b).sum()
        };
        let base: Vec<Vec<Float>> = inputs.iter().map(|t| t.data_vec()).collect();
        let step = 1e-4;
        for (ti, t) in inputs.iter().enumerate() {
            let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            for ci in 0..t.numel() {
                let mut plus = base.clone();
                plus[ti][ci] += step;
                let mut minus = base.clone();
                minus[ti][ci] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let denom = fd.abs().max(analytic[ci].abs()).max(1e-6);
                let rel = (analytic[ci] - fd).abs() / denom;
                assert!(
                    rel < 1e-4,
                    "seed {seed} input {ti} coord {ci}: analytic {} vs fd {}",
                    analytic[ci],
                    fd
                );
            }
        }
    }

    #[test]
    fn every_primitive_gradient_matches_finite_differences_over_ten_seeds() {
        for seed in 0..10u64 {
            check_primitive_grads(
                |g, t| g.matmul(&t[0], &t[1]).unwrap(),
                &[vec![2, 3], vec![3, 2]],
                seed,
                -1.0,
                1.0,
            );
            check_primitive_grads(
                |g, t| g.matmul(&t[0], &t[1]).unwrap(),
                &[vec![3, 4], vec![4]],
                seed,
                -1.0,
                1.0,
            );
            check_primitive_grads(
                |g, t| g.add(&t[0], &t[1]).unwrap(),
                &[vec![5], vec![5]],
                seed,
                -1.0,
                1.0,
            );
            check_primitive_grads(
                |g, t| g.mul(&t[0], &t[1]).unwrap(),
                &[vec![2, 2], vec![2, 2]],
                seed,
                -1.0,
                1.0,
            );
            check_primitive_grads(
                |g, t| g.concat_last(&[&t[0], &t[1], &t[2]]).unwrap(),
                &[vec![2, 2], vec![2, 3], vec![2, 1]],
                seed,
                -1.0,
                1.0,
            );
            check_primitive_grads(
                |g, t| g.slice(&t[0], 2, &[2, 2]).unwrap(),
                &[vec![8]],
                seed,
                -1.0,
                1.0,
            );
            check_primitive_grads(|g, t| g.tanh(&t[0]).unwrap(), &[vec![6]], seed, -1.5, 1.5);
            check_primitive_grads(|g, t| g.sigmoid(&t[0]).unwrap(), &[vec![6]], seed, -1.5, 1.5);
            check_primitive_grads(
                |g, t| g.softmax_last(&t[0]).unwrap(),
                &[vec![2, 4]],
                seed,
                -1.0,
                1.0,
            );
            // log needs positive inputs away from zero for a stable check
            check_primitive_grads(|g, t| g.log(&t[0]).unwrap(), &[vec![5]], seed, 0.5, 2.0);
            check_primitive_grads(
                |g, t| g.embed_lookup(&t[0], &[2, 0, 2]).unwrap(),
                &[vec![3, 4]],
                seed,
                -1.0,
                1.0,
            );
            check_primitive_grads(
                |g, t| g.scalar_mul(&t[0], &t[1]).unwrap(),
                &[vec![1], vec![4]],
                seed,
                -1.0,
                1.0,
            );
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
            raw.set_requires_grad(true);
            let targets = [1usize, 3, 0];
            let mask = [1.0, 0.0, 1.0];

            let f = |vals: &[Float]| -> Float {
                let mut g = Graph::inference();
                let x = Tensor::from_data(&[3, 4], vals.to_vec()).unwrap();
                let sm = g.softmax_last(&x).unwrap();
                let lp = g.log(&sm).unwrap();
                g.cross_entropy(&lp, &targets, &mask).unwrap().data()[0]
            };

            let mut g = Graph::new();
            let sm = g.softmax_last(&raw).unwrap();
            let lp = g.log(&sm).unwrap();
            let loss = g.cross_entropy(&lp, &targets, &mask).unwrap();
            g.backward(&loss).unwrap();
            let analytic = raw.grad().unwrap();

            let base = raw.data_vec();
            let step = 1e-4;
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus[i] += step;
                let mut minus = base.clone();
                minus[i] -= step;
                let fd = (f(&plus) - f(&minus)) / (2.0 * step);
                let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
                assert!((analytic[i] - fd).abs() / denom < 1e-4);
            }
        }
    }

    // ── Dropout ──────────────────────────────────────────────────────

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = leaf(&[10], &[1.0; 10]);
        let y = g.dropout(&x, 0.0, true, &mut rng).unwrap();
        assert!(y.ptr_eq(&x));
        let y = g.dropout(&x, 0.5, false, &mut rng).unwrap();
        assert!(y.ptr_eq(&x));
        assert!(g.dropout(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_zero_fraction_is_near_rate_and_survivors_are_scaled() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let x = leaf(&[n], &vec![1.0; n]);
        let y = g.dropout(&x, 0.3, true, &mut rng).unwrap();
        let d = y.data();
        let zeros = d.iter().filter(|v| **v == 0.0).count();
        let frac = zeros as Float / n as Float;
        assert!((frac - 0.3).abs() < 0.02, "zero fraction {frac}");
        let scale = 1.0 / 0.7;
        assert!(d.iter().all(|v| *v == 0.0 || (*v - scale).abs() < 1e-12));
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut g = Graph::inference();
        let x = leaf(&[2], &[1.0, 2.0]);
        let y = g.tanh(&x).unwrap();
        assert!(g.is_empty());
        assert!(!y.requires_grad());
    }

    // ── Property tests ───────────────────────────────────────────────

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_are_probability_vectors(
                vals in proptest::collection::vec(-30.0f64..30.0, 12)
            ) {
                let mut g = Graph::new();
                let x = Tensor::from_data(&[3, 4], vals).unwrap();
                let y = g.softmax_last(&x).unwrap();
                let d = y.data();
                for r in 0..3 {
                    let row = &d[r * 4..(r + 1) * 4];
                    prop_assert!(row.iter().all(|v| *v >= 0.0));
                    let s: Float = row.iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }

            #[test]
            fn clip_grad_norm_is_idempotent(
                vals in proptest::collection::vec(-10.0f64..10.0, 6),
                max_norm in 0.1f64..5.0
            ) {
                let mut s = super::super::ParamStore::new();
                s.insert("g", Tensor::from_data(&[6], vals).unwrap()).unwrap();
                clip_grad_norm(&s, max_norm).unwrap();
                let once = s.get("g").unwrap().data_vec();
                clip_grad_norm(&s, max_norm).unwrap();
                let twice = s.get("g").unwrap().data_vec();
                for (a, b) in once.iter().zip(&twice) {
                    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
        }
    }
}
