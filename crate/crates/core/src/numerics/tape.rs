//! Reverse-mode gradient tape.
//!
//! Operations are recorded in order as they execute; [`Tape::backward`]
//! replays the record in exact reverse, summing contributions for tensors
//! with several consumers. Only the op set the model needs is supported,
//! and shapes must match exactly (no broadcasting beyond a row bias).

use std::rc::Rc;

use super::conv::{col2im, im2col, ConvGeom};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside this module.
///
/// `inputs` are the recorded input values, `needs_grad[i]` tells whether a
/// gradient for input `i` is wanted. Return one entry per input.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom, cols: Rc<Vec<f64>> },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Sum(Var),
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Sum(_) => "sum",
            Op::Custom { rule, .. } => rule.name(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Logits beyond this magnitude are clamped before `exp` in the sigmoid.
pub const SIGMOID_CLAMP: f64 = 36.0;

/// Linear record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    branch_hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            branch_hash: FNV_OFFSET,
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Fingerprint of every piecewise branch taken so far (ReLU signs,
    /// clamps). Two evaluations with equal fingerprints lie on the same
    /// smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    /// Folds branch decisions into [`Tape::branch_signature`].
    pub fn note_branches(&mut self, bits: impl IntoIterator<Item = bool>) {
        let mut h = self.branch_hash;
        let mut word = 0u64;
        let mut n = 0;
        for b in bits {
            word = (word << 1) | b as u64;
            n += 1;
            if n == 64 {
                h = (h ^ word).wrapping_mul(FNV_PRIME);
                word = 0;
                n = 0;
            }
        }
        h = (h ^ word ^ ((n as u64) << 56)).wrapping_mul(FNV_PRIME);
        self.branch_hash = h;
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, value, false)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Result<Var> {
        self.push(Op::Leaf, value, trainable)
    }

    /// `[n,k]·[k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, ta.data(), (k as isize, 1), tb.data(), (m as isize, 1), &mut out, false);
        let needs = self.any_grad(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::new(vec![n, m], out)?, needs)
    }

    /// Adds a length-`m` bias to every row of an `[n,m]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.numel() != tx.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let mut out = tx.clone();
        let m = tb.numel();
        for row in out.data_mut().chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let needs = self.any_grad(&[x, bias]);
        self.push(Op::AddBias(x, bias), out, needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.any_grad(&[a, b]);
        self.push(Op::Add(a, b), out, needs)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let needs = self.any_grad(&[a, b]);
        self.push(Op::Mul(a, b), out, needs)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.scale(factor);
        let needs = self.any_grad(&[x]);
        self.push(Op::Scale(x, factor), out, needs)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = self.any_grad(inputs);
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            Tensor::new(shape, out)?,
            needs,
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let needs = self.any_grad(&[x]);
        self.push(
            Op::Slice {
                input: x,
                axis,
                start,
            },
            Tensor::new(new_shape, out)?,
            needs,
        )
    }

    /// Same-padded 2-D convolution of a `[H·W, C]` map with a
    /// `[k·k·C, C']` kernel and `[C']` bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, geom: ConvGeom) -> Result<Var> {
        let ti = self.value(input);
        if ti.shape() != [geom.pixels(), geom.c_in] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} for {geom:?}", ti.shape()),
            ));
        }
        if self.value(kernel).shape() != [geom.patch_len(), geom.c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?} for {geom:?}", self.value(kernel).shape()),
            ));
        }
        if self.value(bias).numel() != geom.c_out {
            return Err(Error::shape("conv2d", "bias width"));
        }
        let cols = if geom.kernel == 1 {
            ti.data().to_vec()
        } else {
            im2col(ti.data(), &geom)
        };
        let (n, k, m) = (geom.pixels(), geom.patch_len(), geom.c_out);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        gemm(
            n,
            k,
            m,
            &cols,
            (k as isize, 1),
            self.value(kernel).data(),
            (m as isize, 1),
            &mut out,
            true,
        );
        let needs = self.any_grad(&[input, kernel, bias]);
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols: Rc::new(cols),
            },
            Tensor::new(vec![n, m], out)?,
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| v.max(0.0)).collect(),
        )?;
        let signs: Vec<bool> = self.value(x).data().iter().map(|v| *v > 0.0).collect();
        self.note_branches(signs);
        let needs = self.any_grad(&[x]);
        self.push(Op::Relu(x), out, needs)
    }

    /// Logistic function with logits clamped to `±SIGMOID_CLAMP`.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| sigmoid(*v)).collect(),
        )?;
        let clamped: Vec<bool> = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.abs() > SIGMOID_CLAMP)
            .collect();
        self.note_branches(clamped);
        let needs = self.any_grad(&[x]);
        self.push(Op::Sigmoid(x), out, needs)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.any_grad(&[x]);
        self.push(Op::Softmax(x), out, needs)
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let needs = self.any_grad(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(s), needs)
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn CustomOp>) -> Result<Var> {
        let needs = self.any_grad(inputs);
        self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            value,
            needs,
        )
    }

    /// Propagates `d output / d ·` back through the tape, seeding the output
    /// gradient with ones.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let out_shape = self.value(output).shape().to_vec();
        grads[output.0] = Some(Tensor::full(&out_shape, 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(node, &g)?;
            grads[idx] = Some(g);
            for (var, contrib) in contributions {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("backward of {}", self.nodes[idx].op.name()),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    // dA = G·Bᵀ
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), (m as isize, 1), tb.data(), (1, m as isize), &mut da, false);
                    out.push((*a, Tensor::new(vec![n, k], da)?));
                }
                if wants(*b) {
                    // dB = Aᵀ·G
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, ta.data(), (1, k as isize), g.data(), (m as isize, 1), &mut db, false);
                    out.push((*b, Tensor::new(vec![k, m], db)?));
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    out.push((*x, g.clone()));
                }
                if wants(*bias) {
                    out.push((*bias, column_sums(g, val(*bias).shape())?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let mut ga = g.clone();
                    for (o, v) in ga.data_mut().iter_mut().zip(val(*b).data()) {
                        *o *= v;
                    }
                    out.push((*a, ga));
                }
                if wants(*b) {
                    let mut gb = g.clone();
                    for (o, v) in gb.data_mut().iter_mut().zip(val(*a).data()) {
                        *o *= v;
                    }
                    out.push((*b, gb));
                }
            }
            Op::Scale(x, factor) => {
                let mut gx = g.clone();
                gx.scale(*factor);
                out.push((*x, gx));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for v in inputs {
                    let s = val(*v).shape();
                    let len = s[*axis];
                    if wants(*v) {
                        let mut buf = Vec::with_capacity(val(*v).numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            buf.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        out.push((*v, Tensor::new(s.to_vec(), buf)?));
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = val(*input).shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut buf = vec![0.0; val(*input).numel()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    buf[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                out.push((*input, Tensor::new(s.to_vec(), buf)?));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (n, k, m) = (geom.pixels(), geom.patch_len(), geom.c_out);
                if wants(*kernel) {
                    let mut dk = vec![0.0; k * m];
                    gemm(k, n, m, cols, (1, k as isize), g.data(), (m as isize, 1), &mut dk, false);
                    out.push((*kernel, Tensor::new(vec![k, m], dk)?));
                }
                if wants(*bias) {
                    out.push((*bias, column_sums(g, val(*bias).shape())?));
                }
                if wants(*input) {
                    let mut dcols = vec![0.0; n * k];
                    gemm(
                        n,
                        m,
                        k,
                        g.data(),
                        (m as isize, 1),
                        val(*kernel).data(),
                        (1, m as isize),
                        &mut dcols,
                        false,
                    );
                    let dx = if geom.kernel == 1 {
                        dcols
                    } else {
                        col2im(&dcols, geom)
                    };
                    out.push((*input, Tensor::new(vec![n, geom.c_in], dx)?));
                }
            }
            Op::Relu(x) => {
                let mut gx = g.clone();
                for (o, v) in gx.data_mut().iter_mut().zip(val(*x).data()) {
                    if *v <= 0.0 {
                        *o = 0.0;
                    }
                }
                out.push((*x, gx));
            }
            Op::Sigmoid(x) => {
                let mut gx = g.clone();
                for ((o, y), v) in gx
                    .data_mut()
                    .iter_mut()
                    .zip(node.value.data())
                    .zip(val(*x).data())
                {
                    *o = if v.abs() > SIGMOID_CLAMP {
                        0.0
                    } else {
                        *o * y * (1.0 - y)
                    };
                }
                out.push((*x, gx));
            }
            Op::Softmax(x) => {
                let cols = node.value.cols();
                let mut gx = g.clone();
                for (grow, yrow) in gx
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(node.value.data().chunks(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (o, y) in grow.iter_mut().zip(yrow) {
                        *o = y * (*o - dot);
                    }
                }
                out.push((*x, gx));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(val(*x).shape(), g.item())));
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| wants(*v)).collect();
                let grads = rule.backward(&values, &node.value, g, &needs);
                if grads.len() != inputs.len() {
                    return Err(Error::Invariant(format!(
                        "{} returned {} gradients for {} inputs",
                        rule.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (v, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        if gi.shape() != val(*v).shape() {
                            return Err(Error::shape(rule.name(), "gradient shape mismatch"));
                        }
                        out.push((*v, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn column_sums(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let m: usize = shape.iter().product();
    let mut db = vec![0.0; m];
    for row in g.data().chunks(m) {
        for (o, v) in db.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), db)
}

pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    1.0 / (1.0 + (-x).exp())
}

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

/// Per-[`Var`] gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2)).unwrap();
        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_shape_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).shape(), &[5]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0)).unwrap();
        let y = tape.constant(Tensor::scalar(3.0)).unwrap();
        let p = tape.mul(x, y).unwrap();
        let grads = tape.backward(p).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn fan_out_gradients_sum() {
        // y = x·x + x  => dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5)).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn activations_reference_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        let s = tape.softmax(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let big = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap()).unwrap();
        let s = tape.softmax(big).unwrap();
        assert_eq!(tape.value(s).data()[0], 1.0);
        assert!(tape.value(s).data()[1] < 1e-300);
        let zero = tape.constant(Tensor::scalar(0.0)).unwrap();
        let sg = tape.sigmoid(zero).unwrap();
        assert_eq!(tape.value(sg).item(), 0.5);
        let huge = tape.constant(Tensor::new(vec![2], vec![1e6, -1e6]).unwrap()).unwrap();
        let sg = tape.sigmoid(huge).unwrap();
        let v = tape.value(sg).data();
        assert!(v[0] < 1.0 && v[0] > 0.99 && v[1] > 0.0 && v[1] < 1e-15);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.constant(Tensor::scalar(f64::NAN)),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn conv_1x1_is_per_pixel_matmul() {
        let geom = ConvGeom::new(2, 3, 1, 1, 2, 3).unwrap();
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let k: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![6, 2], x).unwrap()).unwrap();
        let kv = tape.constant(Tensor::new(vec![2, 3], k).unwrap()).unwrap();
        let bv = tape.constant(Tensor::zeros(&[3])).unwrap();
        let conv = tape.conv2d(xv, kv, bv, geom).unwrap();
        let mm = tape.matmul(xv, kv).unwrap();
        assert_eq!(tape.value(conv), tape.value(mm));
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let geom = ConvGeom::new(4, 4, 3, 2, 2, 2).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::full(&[16, 2], 0.7)).unwrap();
        let kv = tape.constant(Tensor::zeros(&[18, 2])).unwrap();
        let bv = tape.constant(Tensor::new(vec![2], vec![0.25, -1.5]).unwrap()).unwrap();
        let y = tape.conv2d(xv, kv, bv, geom).unwrap();
        for row in tape.value(y).data().chunks(2) {
            assert_eq!(row, &[0.25, -1.5]);
        }
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::full(&[2, 2], 1.0)).unwrap();
        let x = tape.param(Tensor::full(&[1, 2], 1.0)).unwrap();
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }
}
