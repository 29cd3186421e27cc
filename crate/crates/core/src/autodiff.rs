//! Reverse-mode automatic differentiation over a flat tape of scalar nodes.
//!
//! A [`Tape`] is built once (inputs first, then operations in topological
//! order) and can then be evaluated many times against different input
//! values through a reusable [`Workspace`]. Training loops rely on this
//! build-once/run-many split; the one-shot helpers [`eval_graph`], [`grad`]
//! and [`jacobian`] wrap it for convenience.
//!
//! Matrix-valued computations (network layers, Jacobian entries) are
//! expressed as scalar graphs by builder helpers; the only concession to
//! throughput is a fused `Dot` node that contracts two contiguous runs of
//! scalar nodes in one operation.

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, Lu};

/// Index of a node on the tape.
pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    Input,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Tanh,
    Softplus,
    Sigmoid,
    Square,
    Recip,
    Relu,
    SmoothLeakyRelu,
    Abs,
    /// Inner product of `len` consecutive nodes starting at `a` with `len`
    /// consecutive nodes starting at `b`.
    Dot,
}

impl OpKind {
    fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Const => "const",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Tanh => "tanh",
            OpKind::Softplus => "softplus",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Square => "square",
            OpKind::Recip => "recip",
            OpKind::Relu => "relu",
            OpKind::SmoothLeakyRelu => "smooth_leaky_relu",
            OpKind::Abs => "abs",
            OpKind::Dot => "dot",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    kind: OpKind,
    a: u32,
    b: u32,
    /// `Dot`: operand length; `Const`/`SmoothLeakyRelu`: index into the
    /// constant pool; unused otherwise.
    c: u32,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// An append-only computation graph: `n_inputs` input nodes first, then
/// operations whose operands always precede them.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    consts: Vec<f64>,
    n_inputs: usize,
    outputs: Vec<NodeId>,
}

/// Reusable primal/adjoint storage for repeated tape evaluations.
#[derive(Debug, Default)]
pub struct Workspace {
    primal: Vec<f64>,
    adjoint: Vec<f64>,
}

impl Tape {
    pub fn builder(n_inputs: usize) -> TapeBuilder {
        let mut nodes = Vec::with_capacity(n_inputs + 64);
        for slot in 0..n_inputs {
            nodes.push(Node {
                kind: OpKind::Input,
                a: slot as u32,
                b: 0,
                c: 0,
            });
        }
        TapeBuilder {
            tape: Tape {
                nodes,
                consts: Vec::new(),
                n_inputs,
                outputs: Vec::new(),
            },
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    /// Forward pass: fills the workspace primals and errors on the first
    /// non-finite intermediate, naming the offending node.
    pub fn forward(&self, inputs: &[f64], ws: &mut Workspace) -> Result<()> {
        if inputs.len() != self.n_inputs {
            return Err(Error::Dimension {
                context: "tape forward",
                expected: self.n_inputs,
                got: inputs.len(),
            });
        }
        ws.primal.resize(self.nodes.len(), 0.0);
        let p = &mut ws.primal;
        for (i, node) in self.nodes.iter().enumerate() {
            let a = node.a as usize;
            let b = node.b as usize;
            let v = match node.kind {
                OpKind::Input => inputs[a],
                OpKind::Const => self.consts[node.c as usize],
                OpKind::Add => p[a] + p[b],
                OpKind::Sub => p[a] - p[b],
                OpKind::Mul => p[a] * p[b],
                OpKind::Div => p[a] / p[b],
                OpKind::Neg => -p[a],
                OpKind::Exp => p[a].exp(),
                OpKind::Ln => p[a].ln(),
                OpKind::Tanh => p[a].tanh(),
                OpKind::Softplus => softplus(p[a]),
                OpKind::Sigmoid => sigmoid(p[a]),
                OpKind::Square => p[a] * p[a],
                OpKind::Recip => 1.0 / p[a],
                OpKind::Relu => p[a].max(0.0),
                OpKind::SmoothLeakyRelu => {
                    let alpha = self.consts[node.c as usize];
                    alpha * p[a] + (1.0 - alpha) * softplus(p[a])
                }
                OpKind::Abs => p[a].abs(),
                OpKind::Dot => {
                    let len = node.c as usize;
                    let mut acc = 0.0;
                    for k in 0..len {
                        acc += p[a + k] * p[b + k];
                    }
                    acc
                }
            };
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.kind.name(),
                });
            }
            p[i] = v;
        }
        Ok(())
    }

    pub fn output_values(&self, ws: &Workspace) -> Vec<f64> {
        self.outputs.iter().map(|&o| ws.primal[o as usize]).collect()
    }

    pub fn output_value(&self, ws: &Workspace, index: usize) -> f64 {
        ws.primal[self.outputs[index] as usize]
    }

    /// Reverse sweep seeded with `d objective / d output_j = seeds[j]`.
    /// Requires a prior [`Tape::forward`] on the same workspace. Input
    /// gradients land in `ws.adjoint[..n_inputs]` (input slot == node index).
    pub fn backward_seeded(&self, ws: &mut Workspace, seeds: &[f64]) -> Result<()> {
        if seeds.len() != self.outputs.len() {
            return Err(Error::Dimension {
                context: "tape backward seeds",
                expected: self.outputs.len(),
                got: seeds.len(),
            });
        }
        ws.adjoint.clear();
        ws.adjoint.resize(self.nodes.len(), 0.0);
        for (&o, &s) in self.outputs.iter().zip(seeds) {
            ws.adjoint[o as usize] += s;
        }
        let p = &ws.primal;
        let adj = &mut ws.adjoint;
        for (i, node) in self.nodes.iter().enumerate().rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let a = node.a as usize;
            let b = node.b as usize;
            match node.kind {
                OpKind::Input | OpKind::Const => {}
                OpKind::Add => {
                    adj[a] += g;
                    adj[b] += g;
                }
                OpKind::Sub => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                OpKind::Mul => {
                    adj[a] += p[b] * g;
                    adj[b] += p[a] * g;
                }
                OpKind::Div => {
                    adj[a] += g / p[b];
                    adj[b] -= g * p[i] / p[b];
                }
                OpKind::Neg => adj[a] -= g,
                OpKind::Exp => adj[a] += p[i] * g,
                OpKind::Ln => adj[a] += g / p[a],
                OpKind::Tanh => adj[a] += (1.0 - p[i] * p[i]) * g,
                OpKind::Softplus => adj[a] += sigmoid(p[a]) * g,
                OpKind::Sigmoid => adj[a] += p[i] * (1.0 - p[i]) * g,
                OpKind::Square => adj[a] += 2.0 * p[a] * g,
                OpKind::Recip => adj[a] -= p[i] * p[i] * g,
                OpKind::Relu => {
                    if p[a] > 0.0 {
                        adj[a] += g;
                    }
                }
                OpKind::SmoothLeakyRelu => {
                    let alpha = self.consts[node.c as usize];
                    adj[a] += (alpha + (1.0 - alpha) * sigmoid(p[a])) * g;
                }
                OpKind::Abs => {
                    if p[a] >= 0.0 {
                        adj[a] += g;
                    } else {
                        adj[a] -= g;
                    }
                }
                OpKind::Dot => {
                    let len = node.c as usize;
                    for k in 0..len {
                        adj[a + k] += p[b + k] * g;
                        adj[b + k] += p[a + k] * g;
                    }
                }
            }
        }
        for (i, &g) in adj[..self.n_inputs].iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: "input gradient",
                });
            }
        }
        Ok(())
    }

    /// Reverse sweep w.r.t. a single output.
    pub fn backward(&self, ws: &mut Workspace, output_index: usize) -> Result<()> {
        let mut seeds = vec![0.0; self.outputs.len()];
        seeds[output_index] = 1.0;
        self.backward_seeded(ws, &seeds)
    }

    /// Gradient of each input after a backward sweep.
    pub fn input_grads<'a>(&self, ws: &'a Workspace) -> &'a [f64] {
        &ws.adjoint[..self.n_inputs]
    }
}

/// Incremental tape construction. Input nodes occupy ids `0..n_inputs`.
pub struct TapeBuilder {
    tape: Tape,
}

impl TapeBuilder {
    fn push(&mut self, kind: OpKind, a: u32, b: u32, c: u32) -> NodeId {
        let id = self.tape.nodes.len() as u32;
        self.tape.nodes.push(Node { kind, a, b, c });
        id
    }

    pub fn input(&self, slot: usize) -> NodeId {
        debug_assert!(slot < self.tape.n_inputs);
        slot as u32
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        let idx = self.tape.consts.len() as u32;
        self.tape.consts.push(v);
        self.push(OpKind::Const, 0, 0, idx)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Add, a, b, 0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Sub, a, b, 0)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Mul, a, b, 0)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Div, a, b, 0)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(OpKind::Neg, a, 0, 0)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(OpKind::Exp, a, 0, 0)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.push(OpKind::Ln, a, 0, 0)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(OpKind::Tanh, a, 0, 0)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(OpKind::Softplus, a, 0, 0)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(OpKind::Sigmoid, a, 0, 0)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(OpKind::Square, a, 0, 0)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.push(OpKind::Recip, a, 0, 0)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(OpKind::Relu, a, 0, 0)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.push(OpKind::Abs, a, 0, 0)
    }

    pub fn smooth_leaky_relu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let idx = self.tape.consts.len() as u32;
        self.tape.consts.push(alpha);
        self.push(OpKind::SmoothLeakyRelu, a, 0, idx)
    }

    /// Fused inner product of two runs of consecutive node ids. Callers must
    /// lay the operands out contiguously (the network builders do).
    pub fn dot(&mut self, a_first: NodeId, b_first: NodeId, len: usize) -> NodeId {
        debug_assert!((a_first as usize + len) <= self.tape.nodes.len());
        debug_assert!((b_first as usize + len) <= self.tape.nodes.len());
        self.push(OpKind::Dot, a_first, b_first, len as u32)
    }

    /// Emits constants for a slice, contiguously.
    pub fn constants(&mut self, values: &[f64]) -> Vec<NodeId> {
        values.iter().map(|&v| self.constant(v)).collect()
    }

    /// Sum of a set of nodes (balanced fold keeps the depth modest).
    pub fn sum(&mut self, ids: &[NodeId]) -> NodeId {
        match ids.len() {
            0 => self.constant(0.0),
            1 => ids[0],
            _ => {
                let mut acc = self.add(ids[0], ids[1]);
                for &id in &ids[2..] {
                    acc = self.add(acc, id);
                }
                acc
            }
        }
    }

    pub fn finish(mut self, outputs: Vec<NodeId>) -> Tape {
        self.tape.outputs = outputs;
        self.tape
    }
}

/// Evaluates the tape's declared outputs at `inputs`.
pub fn eval_graph(tape: &Tape, inputs: &[f64]) -> Result<Vec<f64>> {
    let mut ws = Workspace::default();
    tape.forward(inputs, &mut ws)?;
    Ok(tape.output_values(&ws))
}

/// Gradient of output `output_index` with respect to every input, via a
/// single reverse sweep.
pub fn grad(tape: &Tape, inputs: &[f64], output_index: usize) -> Result<Vec<f64>> {
    if output_index >= tape.n_outputs() {
        return Err(Error::Dimension {
            context: "grad output index",
            expected: tape.n_outputs(),
            got: output_index,
        });
    }
    let mut ws = Workspace::default();
    tape.forward(inputs, &mut ws)?;
    tape.backward(&mut ws, output_index)?;
    Ok(tape.input_grads(&ws).to_vec())
}

/// Full Jacobian (`n_outputs x n_inputs`), one reverse sweep per output.
pub fn jacobian(tape: &Tape, inputs: &[f64]) -> Result<DenseMatrix> {
    let mut ws = Workspace::default();
    tape.forward(inputs, &mut ws)?;
    let mut j = DenseMatrix::zeros(tape.n_outputs(), tape.n_inputs());
    for out in 0..tape.n_outputs() {
        tape.backward(&mut ws, out)?;
        let g = tape.input_grads(&ws);
        for (col, &v) in g.iter().enumerate() {
            j[(out, col)] = v;
        }
    }
    Ok(j)
}

/// Default step for [`finite_diff_jacobian`]: balances truncation against
/// rounding error at double precision.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference Jacobian estimate; the independent oracle used to
/// cross-check reverse-mode results.
pub fn finite_diff_jacobian(
    f: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    point: &[f64],
    step: f64,
) -> Result<DenseMatrix> {
    if step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step {step} must be > 0")));
    }
    let base = f(point)?;
    let mut j = DenseMatrix::zeros(base.len(), point.len());
    let mut probe = point.to_vec();
    for col in 0..point.len() {
        probe[col] = point[col] + step;
        let plus = f(&probe)?;
        probe[col] = point[col] - step;
        let minus = f(&probe)?;
        probe[col] = point[col];
        for row in 0..base.len() {
            j[(row, col)] = (plus[row] - minus[row]) / (2.0 * step);
        }
    }
    Ok(j)
}

/// `log |det M(inputs)|` and its input gradient, for a tape whose outputs
/// are the row-major entries of a square matrix.
///
/// The determinant itself is taken on the primal entries with an LU
/// factorization; the gradient follows from seeding the reverse sweep with
/// the transposed inverse (`d log|det M| / d M_ij = (M^{-1})_ji`).
pub fn logabsdet_grad(tape: &Tape, inputs: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n_out = tape.n_outputs();
    let d = (n_out as f64).sqrt().round() as usize;
    if d * d != n_out {
        return Err(Error::Dimension {
            context: "logabsdet_grad outputs",
            expected: d * d,
            got: n_out,
        });
    }
    let mut ws = Workspace::default();
    tape.forward(inputs, &mut ws)?;
    let entries = tape.output_values(&ws);
    let m = DenseMatrix::from_vec(d, d, entries)?;
    let lu = Lu::new(&m)?;
    let value = lu.log_abs_det();
    let inv = lu.inverse()?;
    let mut seeds = vec![0.0; n_out];
    for i in 0..d {
        for j in 0..d {
            seeds[i * d + j] = inv[(j, i)];
        }
    }
    tape.backward_seeded(&mut ws, &seeds)?;
    Ok((value, tape.input_grads(&ws).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn product_tape() -> Tape {
        let mut b = Tape::builder(2);
        let x = b.input(0);
        let y = b.input(1);
        let p = b.mul(x, y);
        b.finish(vec![p])
    }

    #[test]
    fn eval_product() {
        let t = product_tape();
        assert_eq!(eval_graph(&t, &[3.0, 4.0]).unwrap(), vec![12.0]);
    }

    #[test]
    fn eval_identity() {
        let mut b = Tape::builder(1);
        let x = b.input(0);
        let t = b.finish(vec![x]);
        assert_eq!(eval_graph(&t, &[7.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn grad_square() {
        let mut b = Tape::builder(1);
        let x = b.input(0);
        let y = b.square(x);
        let t = b.finish(vec![y]);
        let g = grad(&t, &[3.0], 0).unwrap();
        assert_relative_eq!(g[0], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn grad_constant_is_zero() {
        let mut b = Tape::builder(1);
        let c = b.constant(5.0);
        let t = b.finish(vec![c]);
        let g = grad(&t, &[2.0], 0).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn jacobian_of_linear_map_is_weights() {
        // y = W x with W = [[1, 2], [3, 4]], written via dot nodes.
        let mut b = Tape::builder(2);
        let x0 = b.input(0);
        let w_row0 = b.constants(&[1.0, 2.0]);
        let w_row1 = b.constants(&[3.0, 4.0]);
        let y0 = b.dot(w_row0[0], x0, 2);
        let y1 = b.dot(w_row1[0], x0, 2);
        let t = b.finish(vec![y0, y1]);
        let j = jacobian(&t, &[0.3, -0.7]).unwrap();
        assert_eq!(
            j,
            DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()
        );
    }

    #[test]
    fn jacobian_of_identity() {
        let mut b = Tape::builder(3);
        let ids: Vec<NodeId> = (0..3).map(|i| b.input(i)).collect();
        let t = b.finish(ids);
        let j = jacobian(&t, &[1.0, 2.0, 3.0]).unwrap();
        assert!(j.max_abs_diff(&DenseMatrix::identity(3)) == 0.0);
    }

    #[test]
    fn nonfinite_forward_names_node() {
        let mut b = Tape::builder(1);
        let x = b.input(0);
        let l = b.ln(x);
        let t = b.finish(vec![l]);
        let err = eval_graph(&t, &[-1.0]).unwrap_err();
        match err {
            Error::NonFinite { node, op } => {
                assert_eq!(node, 1);
                assert_eq!(op, "ln");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn finite_diff_on_linear_map() {
        let mut f = |x: &[f64]| Ok(vec![2.0 * x[0]]);
        let j = finite_diff_jacobian(&mut f, &[0.37], FD_STEP).unwrap();
        assert_relative_eq!(j[(0, 0)], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn finite_diff_on_constant_map() {
        let mut f = |_: &[f64]| Ok(vec![4.2, -1.0]);
        let j = finite_diff_jacobian(&mut f, &[0.5, 0.5, 0.5], FD_STEP).unwrap();
        assert_eq!(j.data().iter().filter(|v| **v != 0.0).count(), 0);
    }

    #[test]
    fn deterministic_forward() {
        let t = product_tape();
        let a = eval_graph(&t, &[1.23456789, -9.87654321]).unwrap();
        let b = eval_graph(&t, &[1.23456789, -9.87654321]).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    /// Every unary/binary primitive against central finite differences at
    /// points away from singularities.
    #[test]
    fn primitives_match_finite_differences() {
        type BuildFn = fn(&mut TapeBuilder, NodeId, NodeId) -> NodeId;
        let cases: Vec<(&str, BuildFn)> = vec![
            ("add", |b, x, y| b.add(x, y)),
            ("sub", |b, x, y| b.sub(x, y)),
            ("mul", |b, x, y| b.mul(x, y)),
            ("div", |b, x, y| b.div(x, y)),
            ("neg", |b, x, _| b.neg(x)),
            ("exp", |b, x, _| b.exp(x)),
            ("ln", |b, x, _| b.ln(x)),
            ("tanh", |b, x, _| b.tanh(x)),
            ("softplus", |b, x, _| b.softplus(x)),
            ("sigmoid", |b, x, _| b.sigmoid(x)),
            ("square", |b, x, _| b.square(x)),
            ("recip", |b, x, _| b.recip(x)),
            ("abs", |b, x, _| b.abs(x)),
            ("slr", |b, x, _| b.smooth_leaky_relu(x, 0.2)),
        ];
        let mut rng_state = 0x9E3779B97F4A7C15u64;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for (name, build) in cases {
            let mut b = Tape::builder(2);
            let x = b.input(0);
            let y = b.input(1);
            let out = build(&mut b, x, y);
            let t = b.finish(vec![out]);
            for _ in 0..100 {
                // Stay away from 0 (ln/div/recip/abs singularities).
                let px = 0.5 + 2.0 * next();
                let py = 0.5 + 2.0 * next();
                let g = grad(&t, &[px, py], 0).unwrap();
                let mut f = |v: &[f64]| eval_graph(&t, v);
                let fd = finite_diff_jacobian(&mut f, &[px, py], FD_STEP).unwrap();
                for col in 0..2 {
                    let denom = fd[(0, col)].abs().max(1.0);
                    assert!(
                        (g[col] - fd[(0, col)]).abs() / denom < 1e-5,
                        "{name}: grad {} vs fd {} at ({px}, {py})",
                        g[col],
                        fd[(0, col)]
                    );
                }
            }
        }
    }

    /// Chain rule: the Jacobian of linear-after-nonlinear equals the product
    /// of the two Jacobians.
    #[test]
    fn composition_jacobian_is_product() {
        // inner: (tanh x0, exp x1); outer: W .
        let w = [[0.7, -1.1], [0.4, 0.9]];
        let mut b = Tape::builder(2);
        let x0 = b.input(0);
        let x1 = b.input(1);
        let h0 = b.tanh(x0);
        let h1 = b.exp(x1);
        let mut outs = Vec::new();
        for row in &w {
            let c0 = b.constant(row[0]);
            let t0 = b.mul(c0, h0);
            let c1 = b.constant(row[1]);
            let t1 = b.mul(c1, h1);
            outs.push(b.add(t0, t1));
        }
        let t = b.finish(outs);

        let point = [0.3, -0.4];
        let j = jacobian(&t, &point).unwrap();
        let inner = DenseMatrix::from_vec(
            2,
            2,
            vec![1.0 - point[0].tanh().powi(2), 0.0, 0.0, point[1].exp()],
        )
        .unwrap();
        let outer =
            DenseMatrix::from_vec(2, 2, vec![w[0][0], w[0][1], w[1][0], w[1][1]]).unwrap();
        let product = outer.matmul(&inner).unwrap();
        assert!(j.max_abs_diff(&product) < 1e-8);
    }

    /// The log|det| helper: value and gradient against finite differences,
    /// on a tape whose outputs are the entries of a parameter-dependent
    /// matrix M(s) = [[s0, s1], [s1^2, 2 + tanh s0]].
    #[test]
    fn logabsdet_grad_matches_fd() {
        let mut b = Tape::builder(2);
        let s0 = b.input(0);
        let s1 = b.input(1);
        let m01 = s1;
        let m10 = b.square(s1);
        let th = b.tanh(s0);
        let two = b.constant(2.0);
        let m11 = b.add(two, th);
        let t = b.finish(vec![s0, m01, m10, m11]);

        let point = [1.3, 0.6];
        let (val, g) = logabsdet_grad(&t, &point).unwrap();

        let mut f = |v: &[f64]| -> Result<Vec<f64>> {
            let entries = eval_graph(&t, v)?;
            let m = DenseMatrix::from_vec(2, 2, entries)?;
            Ok(vec![Lu::new(&m)?.log_abs_det()])
        };
        let fd = finite_diff_jacobian(&mut f, &point, FD_STEP).unwrap();
        let direct = f(&point).unwrap()[0];
        assert_relative_eq!(val, direct, epsilon = 1e-12);
        for col in 0..2 {
            assert_relative_eq!(g[col], fd[(0, col)], max_relative = 1e-5);
        }
    }

    #[test]
    fn dot_matches_scalar_chain() {
        let mut b = Tape::builder(6);
        let a0 = b.input(0);
        let b0 = b.input(3);
        let d = b.dot(a0, b0, 3);
        let t = b.finish(vec![d]);
        let vals = [0.5, -1.5, 2.0, 3.0, 0.25, -0.75];
        let out = eval_graph(&t, &vals).unwrap()[0];
        assert_relative_eq!(out, 0.5 * 3.0 - 1.5 * 0.25 + 2.0 * -0.75, epsilon = 1e-15);
        let g = grad(&t, &vals, 0).unwrap();
        assert_eq!(&g[..3], &vals[3..]);
        assert_eq!(&g[3..], &vals[..3]);
    }
}
