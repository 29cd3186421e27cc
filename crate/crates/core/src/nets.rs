//! Multilayer perceptrons: construction, initialization schemes, forward
//! evaluation, tape builders for differentiable use, Newton inversion, and
//! an exact text serialization.
//!
//! All networks are "affine -> activation" per hidden layer with an affine
//! output layer. The smooth Leaky ReLU `alpha*x + (1-alpha)*softplus(x)` is
//! the default nonlinearity for invertible square networks.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{self, NodeId, Tape, TapeBuilder};
use crate::error::{Error, Result};
use crate::hexfloat::{format_hex_f64, parse_hex_f64};
use crate::linalg::{newton_invert, qr_orthogonal, DenseMatrix};
use crate::rng::derive_rng;

/// Default slope parameter of the smooth Leaky ReLU; kept as a visible
/// constant so oracles and configs agree on the functional form.
pub const SMOOTH_LEAKY_RELU_ALPHA: f64 = 0.2;

/// Diagonal magnitude floor for upper-triangular initialization; keeps every
/// affine layer invertible.
pub const TRIANGULAR_DIAG_FLOOR: f64 = 0.1;

/// Hidden-layer activation. The output layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    SmoothLeakyRelu { alpha: f64 },
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::SmoothLeakyRelu { alpha } => smooth_leaky_relu(x, alpha),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => autodiff::sigmoid(x),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::SmoothLeakyRelu { alpha } => smooth_leaky_relu_deriv(x, alpha),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = autodiff::sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> String {
        match self {
            Activation::SmoothLeakyRelu { alpha } => {
                format!("smooth-leaky-relu {}", format_hex_f64(alpha))
            }
            Activation::Relu => "relu".to_string(),
            Activation::Sigmoid => "sigmoid".to_string(),
            Activation::Identity => "identity".to_string(),
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        let mut parts = tag.split_whitespace();
        match parts.next() {
            Some("smooth-leaky-relu") => {
                let alpha = parse_hex_f64(
                    parts
                        .next()
                        .ok_or_else(|| Error::Parse("missing alpha".into()))?,
                )?;
                Ok(Activation::SmoothLeakyRelu { alpha })
            }
            Some("relu") => Ok(Activation::Relu),
            Some("sigmoid") => Ok(Activation::Sigmoid),
            Some("identity") => Ok(Activation::Identity),
            other => Err(Error::Parse(format!("unknown activation {other:?}"))),
        }
    }
}

/// `alpha*x + (1-alpha)*softplus(x)`: smooth, strictly increasing, with
/// slope tending to `alpha` at -inf and 1 at +inf.
pub fn smooth_leaky_relu(x: f64, alpha: f64) -> f64 {
    alpha * x + (1.0 - alpha) * autodiff::softplus(x)
}

pub fn smooth_leaky_relu_deriv(x: f64, alpha: f64) -> f64 {
    alpha + (1.0 - alpha) * autodiff::sigmoid(x)
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Gaussian draw followed by QR orthogonalization (square layers only).
    Orthogonal,
    /// Gaussian entries with strict lower triangle zeroed and diagonal
    /// magnitudes floored at [`TRIANGULAR_DIAG_FLOOR`] (square layers only).
    UpperTriangular,
    /// Entries ~ N(0, 1/fan_in).
    GaussianFanIn,
}

/// Parameters of a fully connected network.
///
/// `weights[i]` has shape `layer_sizes[i+1] x layer_sizes[i]`; `biases[i]`
/// has length `layer_sizes[i+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

impl MlpParams {
    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total number of scalar parameters (weights then biases, layer order).
    pub fn n_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.data().len() + b.len())
            .sum()
    }

    /// Flattens parameters into `out` in the layout the tape builders use:
    /// per layer, weights row-major then biases.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
    }

    /// Reads parameters back from the flat layout written by
    /// [`MlpParams::flatten_into`].
    pub fn unflatten_from(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Dimension {
                context: "MlpParams::unflatten_from",
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let nw = w.data().len();
            w.data_mut().copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = b.len();
            b.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }
}

/// Initializes an MLP; `layer_sizes` lists every layer width including input
/// and output. Orthogonal and triangular modes require all layers square.
pub fn init_mlp(
    layer_sizes: &[usize],
    mode: InitMode,
    activation: Activation,
    seed: u64,
) -> Result<MlpParams> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config("an MLP needs at least input and output sizes".into()));
    }
    if matches!(mode, InitMode::Orthogonal | InitMode::UpperTriangular) {
        let d = layer_sizes[0];
        if layer_sizes.iter().any(|&s| s != d) {
            return Err(Error::Config(format!(
                "{mode:?} initialization requires square layers, got {layer_sizes:?}"
            )));
        }
    }
    let mut rng = derive_rng(seed, &[0x6D6C70]);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for win in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (win[0], win[1]);
        let w = match mode {
            InitMode::Orthogonal => {
                let gauss = DenseMatrix::from_fn(fan_out, fan_in, |_, _| {
                    rng.sample::<f64, _>(StandardNormal)
                });
                qr_orthogonal(&gauss)?
            }
            InitMode::UpperTriangular => {
                let mut w = DenseMatrix::from_fn(fan_out, fan_in, |i, j| {
                    if j < i {
                        0.0
                    } else {
                        rng.sample::<f64, _>(StandardNormal)
                    }
                });
                for i in 0..fan_out {
                    let d = w[(i, i)];
                    if d.abs() < TRIANGULAR_DIAG_FLOOR {
                        w[(i, i)] = TRIANGULAR_DIAG_FLOOR * if d < 0.0 { -1.0 } else { 1.0 };
                    }
                }
                w
            }
            InitMode::GaussianFanIn => {
                let std = (1.0 / fan_in as f64).sqrt();
                DenseMatrix::from_fn(fan_out, fan_in, |_, _| {
                    std * rng.sample::<f64, _>(StandardNormal)
                })
            }
        };
        weights.push(w);
        biases.push(vec![0.0; fan_out]);
    }
    Ok(MlpParams {
        layer_sizes: layer_sizes.to_vec(),
        weights,
        biases,
        activation,
    })
}

/// Plain forward pass (no tape).
pub fn mlp_forward(params: &MlpParams, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != params.input_dim() {
        return Err(Error::Dimension {
            context: "mlp_forward",
            expected: params.input_dim(),
            got: z.len(),
        });
    }
    let last = params.n_layers() - 1;
    let mut h = z.to_vec();
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        let mut pre = w.matvec(&h)?;
        for (p, bi) in pre.iter_mut().zip(b) {
            *p += bi;
        }
        if l < last {
            for p in pre.iter_mut() {
                *p = params.activation.apply(*p);
            }
        }
        h = pre;
    }
    Ok(h)
}

/// Exact Jacobian of the forward pass by the layer-chain product
/// `W_L D_{L-1} ... D_1 W_1` with `D_l = diag(act'(pre_l))`.
pub fn mlp_jacobian(params: &MlpParams, z: &[f64]) -> Result<DenseMatrix> {
    if z.len() != params.input_dim() {
        return Err(Error::Dimension {
            context: "mlp_jacobian",
            expected: params.input_dim(),
            got: z.len(),
        });
    }
    let last = params.n_layers() - 1;
    let mut h = z.to_vec();
    let mut j = params.weights[0].clone();
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        if l > 0 {
            j = w.matmul(&j)?;
        }
        let mut pre = w.matvec(&h)?;
        for (p, bi) in pre.iter_mut().zip(b) {
            *p += bi;
        }
        if l < last {
            // Scale rows of the accumulated Jacobian by the activation slope.
            for (row, &p) in pre.iter().enumerate() {
                let d = params.activation.derivative(p);
                for col in 0..j.cols() {
                    j[(row, col)] *= d;
                }
            }
            for p in pre.iter_mut() {
                *p = params.activation.apply(*p);
            }
        }
        h = pre;
    }
    Ok(j)
}

/// How an MLP's parameters enter a tape.
pub enum MlpTapeParams<'a> {
    /// Baked in as constants; the tape differentiates only w.r.t. its
    /// data inputs.
    Fixed(&'a MlpParams),
    /// Read from input slots starting at `offset`, in the
    /// [`MlpParams::flatten_into`] layout, so parameter gradients flow.
    Slots { params: &'a MlpParams, offset: usize },
}

/// Appends an MLP forward pass to a tape under construction. `inputs` must
/// be contiguous node ids (the builders keep vectors contiguous); returns
/// the output node ids, also contiguous.
pub fn append_mlp(
    b: &mut TapeBuilder,
    params_src: &MlpTapeParams,
    inputs: &[NodeId],
) -> Vec<NodeId> {
    let params = match params_src {
        MlpTapeParams::Fixed(p) => *p,
        MlpTapeParams::Slots { params, .. } => *params,
    };
    assert_eq!(params.input_dim(), inputs.len(), "mlp input arity");
    for w in inputs.windows(2) {
        assert_eq!(w[1], w[0] + 1, "mlp tape inputs must be contiguous");
    }
    let last = params.n_layers() - 1;
    let mut h_first = inputs[0];
    let mut h_len = inputs.len();
    let mut slot_cursor = match params_src {
        MlpTapeParams::Slots { offset, .. } => *offset,
        MlpTapeParams::Fixed(_) => 0,
    };
    for (l, (w, bias)) in params.weights.iter().zip(&params.biases).enumerate() {
        let (rows, cols) = (w.rows(), w.cols());
        // Materialize weight rows and biases as contiguous nodes.
        let (w_first, b_first) = match params_src {
            MlpTapeParams::Fixed(_) => {
                let w_first = b.constants(w.data())[0];
                let b_first = b.constants(bias)[0];
                (w_first, b_first)
            }
            MlpTapeParams::Slots { .. } => {
                let w_first = b.input(slot_cursor);
                let b_first = b.input(slot_cursor + rows * cols);
                slot_cursor += rows * cols + rows;
                (w_first, b_first)
            }
        };
        // Pre-activations: dot(w_row, h) + bias, emitted contiguously.
        let mut pre_ids = Vec::with_capacity(rows);
        for r in 0..rows {
            let d = b.dot(w_first + (r * cols) as u32, h_first, cols);
            pre_ids.push(d);
        }
        let mut out_first = 0;
        for (r, &d) in pre_ids.iter().enumerate() {
            let s = b.add(d, b_first + r as u32);
            if r == 0 {
                out_first = s;
            }
        }
        if l < last && params.activation != Activation::Identity {
            let mut act_first = 0;
            for r in 0..rows {
                let pre = out_first + r as u32;
                let a = match params.activation {
                    Activation::SmoothLeakyRelu { alpha } => b.smooth_leaky_relu(pre, alpha),
                    Activation::Relu => b.relu(pre),
                    Activation::Sigmoid => b.sigmoid(pre),
                    Activation::Identity => unreachable!(),
                };
                if r == 0 {
                    act_first = a;
                }
            }
            h_first = act_first;
        } else {
            h_first = out_first;
        }
        h_len = rows;
    }
    (0..h_len).map(|r| h_first + r as u32).collect()
}

/// Builds a standalone tape computing `f(z)` for fixed parameters, with the
/// network input occupying slots `0..input_dim`.
pub fn mlp_tape(params: &MlpParams) -> Tape {
    let mut b = Tape::builder(params.input_dim());
    let inputs: Vec<NodeId> = (0..params.input_dim()).map(|i| b.input(i)).collect();
    let outputs = append_mlp(&mut b, &MlpTapeParams::Fixed(params), &inputs);
    b.finish(outputs)
}

/// Builds a tape whose outputs are the row-major entries of the network
/// Jacobian at the input point, expressed through activation-derivative
/// nodes. Square networks only; used where a differentiable `log|det J|` is
/// needed on top of the LU-based primal determinant.
pub fn mlp_jacobian_tape(params: &MlpParams) -> Result<Tape> {
    let d = params.input_dim();
    if params.output_dim() != d || params.layer_sizes.iter().any(|&s| s != d) {
        return Err(Error::Config(
            "mlp_jacobian_tape requires square layers".into(),
        ));
    }
    let mut b = Tape::builder(d);
    let inputs: Vec<NodeId> = (0..d).map(|i| b.input(i)).collect();

    // Track J as a d x d grid of node ids while replaying the layer chain.
    let mut h: Vec<NodeId> = inputs.clone();
    let mut j: Option<Vec<Vec<NodeId>>> = None;
    let last = params.n_layers() - 1;
    for (l, (w, bias)) in params.weights.iter().zip(&params.biases).enumerate() {
        // j <- W * j (or W itself on the first layer).
        let mut new_j = vec![vec![0u32; d]; d];
        for r in 0..d {
            for c in 0..d {
                match &j {
                    None => {
                        new_j[r][c] = b.constant(w[(r, c)]);
                    }
                    Some(prev) => {
                        let mut terms = Vec::with_capacity(d);
                        for k in 0..d {
                            let wk = b.constant(w[(r, k)]);
                            terms.push(b.mul(wk, prev[k][c]));
                        }
                        new_j[r][c] = b.sum(&terms);
                    }
                }
            }
        }
        // pre = W h + b
        let mut pre = Vec::with_capacity(d);
        for r in 0..d {
            let mut terms = Vec::with_capacity(d);
            for c in 0..d {
                let wc = b.constant(w[(r, c)]);
                terms.push(b.mul(wc, h[c]));
            }
            let s = b.sum(&terms);
            let bc = b.constant(bias[r]);
            pre.push(b.add(s, bc));
        }
        if l < last {
            // Row-scale J by act'(pre_r) and apply the activation to h.
            for r in 0..d {
                let slope = match params.activation {
                    Activation::SmoothLeakyRelu { alpha } => {
                        let s = b.sigmoid(pre[r]);
                        let am = b.constant(1.0 - alpha);
                        let scaled = b.mul(am, s);
                        let ac = b.constant(alpha);
                        b.add(ac, scaled)
                    }
                    Activation::Sigmoid => {
                        let s = b.sigmoid(pre[r]);
                        let one = b.constant(1.0);
                        let om = b.sub(one, s);
                        b.mul(s, om)
                    }
                    Activation::Identity => b.constant(1.0),
                    Activation::Relu => {
                        return Err(Error::Config(
                            "relu has no usable derivative nodes for a Jacobian tape".into(),
                        ))
                    }
                };
                for c in 0..d {
                    new_j[r][c] = b.mul(slope, new_j[r][c]);
                }
            }
            let mut new_h = Vec::with_capacity(d);
            for r in 0..d {
                let a = match params.activation {
                    Activation::SmoothLeakyRelu { alpha } => b.smooth_leaky_relu(pre[r], alpha),
                    Activation::Sigmoid => b.sigmoid(pre[r]),
                    Activation::Identity => pre[r],
                    Activation::Relu => unreachable!(),
                };
                new_h.push(a);
            }
            h = new_h;
        } else {
            h = pre;
        }
        j = Some(new_j);
    }
    let outputs: Vec<NodeId> = j.unwrap().into_iter().flatten().collect();
    Ok(b.finish(outputs))
}

/// Newton inversion of a square MLP: recovers `z` with `f(z) = x`.
pub fn invert_mlp(params: &MlpParams, x: &[f64], z0: &[f64], tol: f64) -> Result<Vec<f64>> {
    let mut f = |z: &[f64]| mlp_forward(params, z);
    let mut jac = |z: &[f64]| mlp_jacobian(params, z);
    newton_invert(&mut f, &mut jac, x, z0, tol, 100)
}

/// Writes the parameters as a flat text block: layer sizes, then per layer
/// the row-major weights and the biases, all hex-float encoded.
pub fn write_mlp<W: Write>(out: &mut W, params: &MlpParams) -> Result<()> {
    writeln!(out, "mlp v1")?;
    writeln!(out, "activation {}", params.activation.tag())?;
    write!(out, "layers")?;
    for s in &params.layer_sizes {
        write!(out, " {s}")?;
    }
    writeln!(out)?;
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        write!(out, "weights {l}")?;
        for v in w.data() {
            write!(out, " {}", format_hex_f64(*v))?;
        }
        writeln!(out)?;
        write!(out, "biases {l}")?;
        for v in b {
            write!(out, " {}", format_hex_f64(*v))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Parses the block written by [`write_mlp`] from a line iterator.
pub fn read_mlp<B: BufRead>(lines: &mut std::io::Lines<B>) -> Result<MlpParams> {
    let mut next_line = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse("unexpected end of mlp block".into()))?
            .map_err(Error::from)
    };
    let header = next_line()?;
    if header.trim() != "mlp v1" {
        return Err(Error::Parse(format!("bad mlp header {header:?}")));
    }
    let act_line = next_line()?;
    let activation = Activation::from_tag(
        act_line
            .trim()
            .strip_prefix("activation ")
            .ok_or_else(|| Error::Parse("missing activation line".into()))?,
    )?;
    let layers_line = next_line()?;
    let layer_sizes: Vec<usize> = layers_line
        .trim()
        .strip_prefix("layers")
        .ok_or_else(|| Error::Parse("missing layers line".into()))?
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(e.to_string())))
        .collect::<Result<_>>()?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..layer_sizes.len() - 1 {
        let (rows, cols) = (layer_sizes[l + 1], layer_sizes[l]);
        let wline = next_line()?;
        let prefix = format!("weights {l}");
        let data: Vec<f64> = wline
            .trim()
            .strip_prefix(&prefix)
            .ok_or_else(|| Error::Parse(format!("expected {prefix:?}")))?
            .split_whitespace()
            .map(parse_hex_f64)
            .collect::<Result<_>>()?;
        weights.push(DenseMatrix::from_vec(rows, cols, data)?);
        let bline = next_line()?;
        let prefix = format!("biases {l}");
        let b: Vec<f64> = bline
            .trim()
            .strip_prefix(&prefix)
            .ok_or_else(|| Error::Parse(format!("expected {prefix:?}")))?
            .split_whitespace()
            .map(parse_hex_f64)
            .collect::<Result<_>>()?;
        if b.len() != rows {
            return Err(Error::Dimension {
                context: "mlp bias parse",
                expected: rows,
                got: b.len(),
            });
        }
        biases.push(b);
    }
    Ok(MlpParams {
        layer_sizes,
        weights,
        biases,
        activation,
    })
}

pub fn save_mlp(params: &MlpParams, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_mlp(&mut file, params)
}

pub fn load_mlp(path: &Path) -> Result<MlpParams> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_mlp(&mut std::io::BufRead::lines(file))
}
