//! Ground-truth data-generating processes: invertible mixings with exact
//! Jacobians, source sampling, dataset construction, and the exact
//! log-likelihood of observations through the change of variables.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{expm, log_abs_det, newton_invert, qr_orthogonal, spectral_norm, DenseMatrix, Lu};
use crate::nets::{mlp_forward, mlp_jacobian, MlpParams};
use crate::rng::derive_rng;

/// Parameters of the Moebius transform `x = t + alpha * A (z - b) / |z - b|^eps`
/// with orthogonal `A` and `eps = 2` (the conformal, nonlinear case).
#[derive(Debug, Clone, PartialEq)]
pub struct MoebiusParams {
    pub t: Vec<f64>,
    pub b: Vec<f64>,
    pub a: DenseMatrix,
    pub alpha: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MixingKind {
    Moebius(MoebiusParams),
    Mlp(MlpParams),
    Linear(DenseMatrix),
    Composed {
        inner: Box<MixingSpec>,
        outer: DenseMatrix,
    },
}

/// An invertible map from sources to observations with exact Jacobian access.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingSpec {
    pub kind: MixingKind,
    pub dim: usize,
}

impl MixingSpec {
    pub fn new(kind: MixingKind, dim: usize) -> Result<Self> {
        let spec = Self { kind, dim };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        match &self.kind {
            MixingKind::Moebius(p) => {
                if p.t.len() != self.dim || p.b.len() != self.dim || p.a.rows() != self.dim {
                    return Err(Error::Config("moebius parameter dimensions disagree".into()));
                }
                if p.epsilon != 2.0 {
                    return Err(Error::Config(format!(
                        "moebius epsilon must be 2, got {}",
                        p.epsilon
                    )));
                }
                let gram = p.a.gram();
                if gram.max_abs_diff(&DenseMatrix::identity(self.dim)) > 1e-10 {
                    return Err(Error::Config("moebius A must be orthogonal".into()));
                }
            }
            MixingKind::Mlp(p) => {
                if p.input_dim() != self.dim || p.output_dim() != self.dim {
                    return Err(Error::Config("mlp mixing must be square".into()));
                }
            }
            MixingKind::Linear(w) => {
                if w.rows() != self.dim || w.cols() != self.dim {
                    return Err(Error::Config("linear mixing must be square".into()));
                }
                let det = Lu::new(w)
                    .map_err(|_| Error::Config("linear mixing is singular".into()))?
                    .det();
                if det.abs() <= 1e-12 {
                    return Err(Error::Config(format!(
                        "linear mixing |det| = {:.3e} below 1e-12",
                        det.abs()
                    )));
                }
            }
            MixingKind::Composed { inner, outer } => {
                inner.validate()?;
                if inner.dim != self.dim || outer.rows() != self.dim || outer.cols() != self.dim {
                    return Err(Error::Config("composed mixing dimensions disagree".into()));
                }
                let det = Lu::new(outer)
                    .map_err(|_| Error::Config("outer linear map is singular".into()))?
                    .det();
                if det.abs() <= 1e-12 {
                    return Err(Error::Config("outer linear map is singular".into()));
                }
            }
        }
        Ok(())
    }

    /// Short tag for dataset headers and run records.
    pub fn kind_tag(&self) -> &'static str {
        match &self.kind {
            MixingKind::Moebius(_) => "moebius",
            MixingKind::Mlp(_) => "mlp",
            MixingKind::Linear(_) => "linear",
            MixingKind::Composed { .. } => "composed",
        }
    }
}

/// Evaluates the mixing, optionally with its exact Jacobian.
pub fn mix_forward(
    spec: &MixingSpec,
    z: &[f64],
    want_jacobian: bool,
) -> Result<(Vec<f64>, Option<DenseMatrix>)> {
    if z.len() != spec.dim {
        return Err(Error::Dimension {
            context: "mix_forward",
            expected: spec.dim,
            got: z.len(),
        });
    }
    match &spec.kind {
        MixingKind::Moebius(p) => {
            let u: Vec<f64> = z.iter().zip(&p.b).map(|(zi, bi)| zi - bi).collect();
            let r2: f64 = u.iter().map(|v| v * v).sum();
            if r2 == 0.0 {
                return Err(Error::Domain("moebius evaluated at its pole z = b".into()));
            }
            let scaled: Vec<f64> = u.iter().map(|v| p.alpha * v / r2).collect();
            let rotated = p.a.matvec(&scaled)?;
            let x: Vec<f64> = rotated.iter().zip(&p.t).map(|(v, t)| v + t).collect();
            let j = if want_jacobian {
                Some(moebius_jacobian(p, &u, r2)?)
            } else {
                None
            };
            Ok((x, j))
        }
        MixingKind::Mlp(params) => {
            let x = mlp_forward(params, z)?;
            let j = if want_jacobian {
                Some(mlp_jacobian(params, z)?)
            } else {
                None
            };
            Ok((x, j))
        }
        MixingKind::Linear(w) => {
            let x = w.matvec(z)?;
            let j = if want_jacobian { Some(w.clone()) } else { None };
            Ok((x, j))
        }
        MixingKind::Composed { inner, outer } => {
            let (y, jin) = mix_forward(inner, z, want_jacobian)?;
            let x = outer.matvec(&y)?;
            let j = match jin {
                Some(ji) => Some(outer.matmul(&ji)?),
                None => None,
            };
            Ok((x, j))
        }
    }
}

/// Analytic Moebius Jacobian: `(alpha / |u|^2) * A * (I - 2 uu^T / |u|^2)`.
fn moebius_jacobian(p: &MoebiusParams, u: &[f64], r2: f64) -> Result<DenseMatrix> {
    let d = u.len();
    let mut householder = DenseMatrix::identity(d);
    for i in 0..d {
        for j in 0..d {
            householder[(i, j)] -= 2.0 * u[i] * u[j] / r2;
        }
    }
    Ok(p.a.matmul(&householder)?.scale(p.alpha / r2))
}

/// Closed-form Moebius inverse (the map is an involution up to the affine
/// frame): `z = b + v / |v|^2` with `v = A^T (x - t) / alpha`.
pub fn moebius_inverse(p: &MoebiusParams, x: &[f64]) -> Result<Vec<f64>> {
    let shifted: Vec<f64> = x.iter().zip(&p.t).map(|(xi, ti)| (xi - ti) / p.alpha).collect();
    let v = p.a.transpose().matvec(&shifted)?;
    let n2: f64 = v.iter().map(|a| a * a).sum();
    if n2 == 0.0 {
        return Err(Error::Domain("moebius inverse at the image of infinity".into()));
    }
    Ok(v.iter().zip(&p.b).map(|(vi, bi)| vi / n2 + bi).collect())
}

/// Inverts the mixing at `x`. Closed form where available, Newton otherwise.
pub fn mix_invert(spec: &MixingSpec, x: &[f64], z0: &[f64]) -> Result<Vec<f64>> {
    match &spec.kind {
        MixingKind::Moebius(p) => moebius_inverse(p, x),
        MixingKind::Linear(w) => Lu::new(w)?.solve(x),
        MixingKind::Composed { inner, outer } => {
            let y = Lu::new(outer)?.solve(x)?;
            mix_invert(inner, &y, z0)
        }
        MixingKind::Mlp(_) => {
            let mut f = |z: &[f64]| Ok(mix_forward(spec, z, false)?.0);
            let mut jac = |z: &[f64]| Ok(mix_forward(spec, z, true)?.1.unwrap());
            newton_invert(&mut f, &mut jac, x, z0, 1e-10, 100)
        }
    }
}

/// Factorized source distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceKind {
    StandardGaussian,
    Uniform { low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceDistribution {
    pub kind: SourceKind,
    pub dim: usize,
}

impl SourceDistribution {
    pub fn standard_gaussian(dim: usize) -> Self {
        Self {
            kind: SourceKind::StandardGaussian,
            dim,
        }
    }

    pub fn uniform(dim: usize, low: f64, high: f64) -> Result<Self> {
        if low >= high {
            return Err(Error::Config(format!("uniform bounds [{low}, {high}) are empty")));
        }
        Ok(Self {
            kind: SourceKind::Uniform { low, high },
            dim,
        })
    }

    /// Log density of the factorized source; `-inf` outside the support.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        match self.kind {
            SourceKind::StandardGaussian => {
                let sq: f64 = z.iter().map(|v| v * v).sum();
                -0.5 * sq - 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln()
            }
            SourceKind::Uniform { low, high } => {
                if z.iter().all(|&v| v >= low && v < high) {
                    -(self.dim as f64) * (high - low).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

/// Draws `n` i.i.d. source vectors (rows), deterministic given the seed.
pub fn sample_sources(dist: &SourceDistribution, n: usize, seed: u64) -> DenseMatrix {
    let mut rng = derive_rng(seed, &[0x5A]);
    let mut m = DenseMatrix::zeros(n, dist.dim);
    for i in 0..n {
        for j in 0..dist.dim {
            m[(i, j)] = match dist.kind {
                SourceKind::StandardGaussian => rng.sample(StandardNormal),
                SourceKind::Uniform { low, high } => rng.gen_range(low..high),
            };
        }
    }
    m
}

/// Sampled sources with their mixed observations and a train/val/test split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sources: DenseMatrix,
    pub observations: DenseMatrix,
    pub split: (usize, usize, usize),
    pub mixing_tag: String,
    pub seed: u64,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.sources.cols()
    }

    pub fn len(&self) -> usize {
        self.sources.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self, which: Split) -> std::ops::Range<usize> {
        let (tr, va, te) = self.split;
        match which {
            Split::Train => 0..tr,
            Split::Val => tr..tr + va,
            Split::Test => tr + va..tr + va + te,
        }
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        self.observations.row(i)
    }

    pub fn source(&self, i: usize) -> &[f64] {
        self.sources.row(i)
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        self.range(which).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Samples sources, pushes them through the mixing, and splits.
pub fn make_dataset(
    spec: &MixingSpec,
    dist: &SourceDistribution,
    split: (usize, usize, usize),
    seed: u64,
) -> Result<Dataset> {
    let n = split.0 + split.1 + split.2;
    if n == 0 {
        return Err(Error::Config("dataset must contain at least one sample".into()));
    }
    if dist.dim != spec.dim {
        return Err(Error::Dimension {
            context: "make_dataset",
            expected: spec.dim,
            got: dist.dim,
        });
    }
    let sources = sample_sources(dist, n, seed);
    let mut observations = DenseMatrix::zeros(n, spec.dim);
    for i in 0..n {
        let (x, _) = mix_forward(spec, sources.row(i), false)?;
        for (j, v) in x.iter().enumerate() {
            observations[(i, j)] = *v;
        }
    }
    Ok(Dataset {
        sources,
        observations,
        split,
        mixing_tag: spec.kind_tag().to_string(),
        seed,
    })
}

/// Exact model log-likelihood of `x` for an invertible mixing via the change
/// of variables: `log p0(z) - log |det J_f(z)|` at the supplied preimage.
///
/// The caller provides the preimage (datasets carry their sources); it is
/// checked to reproduce `x` within `1e-8`.
pub fn pushforward_log_density(
    spec: &MixingSpec,
    dist: &SourceDistribution,
    x: &[f64],
    z_preimage: &[f64],
) -> Result<f64> {
    let (fx, j) = mix_forward(spec, z_preimage, true)?;
    let residual = fx
        .iter()
        .zip(x)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if residual > 1e-8 {
        return Err(Error::Preimage {
            residual,
            tol: 1e-8,
        });
    }
    let lad = log_abs_det(&j.unwrap())?;
    Ok(dist.log_density(z_preimage) - lad)
}

/// Random volume-preserving linear map: `M = exp(severity * S)` for a random
/// `S` scaled to unit spectral norm, then normalized to `|det M| = 1`.
/// Severity 0 gives the identity; larger severities move the map away from
/// column orthogonality.
pub fn make_volume_preserving_linear(dim: usize, severity: f64, seed: u64) -> Result<DenseMatrix> {
    if dim < 2 {
        return Err(Error::Config("volume-preserving map needs dim >= 2".into()));
    }
    if severity < 0.0 {
        return Err(Error::Config("severity must be nonnegative".into()));
    }
    let mut rng = derive_rng(seed, &[0x76704C]);
    let s = DenseMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = spectral_norm(&s);
    let s = s.scale(1.0 / norm);
    let mut m = expm(&s.scale(severity))?;
    // det(exp(severity * S)) = exp(severity * tr S) > 0; two normalization
    // passes push |det| to 1 within 1e-10 even after rounding.
    for _ in 0..2 {
        let det = Lu::new(&m)?.det();
        m = m.scale(1.0 / det.abs().powf(1.0 / dim as f64));
    }
    Ok(m)
}

/// Samples a random Moebius mixing: Haar-orthogonal `A`, Gaussian `t`,
/// `alpha = 1`, `eps = 2`, and `b` pushed at least `margin` away from the
/// source support box `[low, high]^dim` so the pole stays outside.
pub fn sample_moebius(dim: usize, support: (f64, f64), margin: f64, seed: u64) -> Result<MixingSpec> {
    let mut rng = derive_rng(seed, &[0x4D6F65]);
    let gauss = DenseMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let a = qr_orthogonal(&gauss)?;
    let t: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut b: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    // Translate b along its first coordinate until it clears the support box.
    let (low, high) = support;
    let inside = |b: &[f64]| b.iter().all(|&v| v > low - margin && v < high + margin);
    if inside(&b) {
        b[0] = low - margin - b[0].abs().fract();
    }
    MixingSpec::new(
        MixingKind::Moebius(MoebiusParams {
            t,
            b,
            a,
            alpha: 1.0,
            epsilon: 2.0,
        }),
        dim,
    )
}

/// Writes a dataset as a columnar text file: header lines, then one row per
/// sample holding the source followed by the observation, every value in
/// shortest exact-round-trip decimal.
pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "dataset v1")?;
    writeln!(out, "dim {}", data.dim())?;
    writeln!(out, "split {} {} {}", data.split.0, data.split.1, data.split.2)?;
    writeln!(out, "mixing {}", data.mixing_tag)?;
    writeln!(out, "seed {}", data.seed)?;
    for i in 0..data.len() {
        let mut fields = Vec::with_capacity(2 * data.dim());
        for v in data.source(i) {
            fields.push(format!("{v}"));
        }
        for v in data.observation(i) {
            fields.push(format!("{v}"));
        }
        writeln!(out, "{}", fields.join(" "))?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse("truncated dataset file".into()))?
            .map_err(Error::from)
    };
    if next()?.trim() != "dataset v1" {
        return Err(Error::Parse("bad dataset header".into()));
    }
    let parse_tail = |line: String, key: &str| -> Result<String> {
        line.trim()
            .strip_prefix(key)
            .map(|s| s.trim().to_string())
            .ok_or_else(|| Error::Parse(format!("expected {key:?} line")))
    };
    let dim: usize = parse_tail(next()?, "dim")?
        .parse()
        .map_err(|e: std::num::ParseIntError| Error::Parse(e.to_string()))?;
    let split_str = parse_tail(next()?, "split")?;
    let split_parts: Vec<usize> = split_str
        .split_whitespace()
        .map(|t| t.parse().map_err(|e: std::num::ParseIntError| Error::Parse(e.to_string())))
        .collect::<Result<_>>()?;
    if split_parts.len() != 3 {
        return Err(Error::Parse("split line needs three counts".into()));
    }
    let mixing_tag = parse_tail(next()?, "mixing")?;
    let seed: u64 = parse_tail(next()?, "seed")?
        .parse()
        .map_err(|e: std::num::ParseIntError| Error::Parse(e.to_string()))?;
    let n = split_parts[0] + split_parts[1] + split_parts[2];
    let mut sources = DenseMatrix::zeros(n, dim);
    let mut observations = DenseMatrix::zeros(n, dim);
    for i in 0..n {
        let line = next()?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|e: std::num::ParseFloatError| Error::Parse(e.to_string())))
            .collect::<Result<_>>()?;
        if vals.len() != 2 * dim {
            return Err(Error::Parse(format!(
                "row {i} has {} fields, expected {}",
                vals.len(),
                2 * dim
            )));
        }
        for j in 0..dim {
            sources[(i, j)] = vals[j];
            observations[(i, j)] = vals[dim + j];
        }
    }
    Ok(Dataset {
        sources,
        observations,
        split: (split_parts[0], split_parts[1], split_parts[2]),
        mixing_tag,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_jacobian, FD_STEP};
    use crate::ima::cima_local;
    use crate::nets::{init_mlp, Activation, InitMode};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn identity_mixing(dim: usize) -> MixingSpec {
        MixingSpec::new(MixingKind::Linear(DenseMatrix::identity(dim)), dim).unwrap()
    }

    #[test]
    fn linear_identity_forward() {
        let spec = identity_mixing(3);
        let (x, j) = mix_forward(&spec, &[1.0, -2.0, 0.5], true).unwrap();
        assert_eq!(x, vec![1.0, -2.0, 0.5]);
        assert!(j.unwrap().max_abs_diff(&DenseMatrix::identity(3)) == 0.0);
    }

    #[test]
    fn moebius_unit_sphere_eigenstructure() {
        // t = 0, A = I, alpha = 1, b = 0, z = (1, 0, 0): x = z and
        // J = I - 2 e1 e1^T with eigenvalues (-1, +1, +1).
        let p = MoebiusParams {
            t: vec![0.0; 3],
            b: vec![0.0; 3],
            a: DenseMatrix::identity(3),
            alpha: 1.0,
            epsilon: 2.0,
        };
        let spec = MixingSpec::new(MixingKind::Moebius(p), 3).unwrap();
        let (x, j) = mix_forward(&spec, &[1.0, 0.0, 0.0], true).unwrap();
        let j = j.unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(x[1], 0.0, epsilon = 1e-14);
        let expected =
            DenseMatrix::from_vec(3, 3, vec![-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
                .unwrap();
        assert!(j.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn moebius_jacobian_matches_finite_differences() {
        let spec = sample_moebius(3, (0.0, 1.0), 0.5, 1234).unwrap();
        let mut rng = crate::rng::derive_rng(5, &[2]);
        for _ in 0..50 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (_, j) = mix_forward(&spec, &z, true).unwrap();
            let j = j.unwrap();
            let mut f = |v: &[f64]| Ok(mix_forward(&spec, v, false)?.0);
            let fd = finite_diff_jacobian(&mut f, &z, FD_STEP).unwrap();
            for i in 0..3 {
                for k in 0..3 {
                    let denom = fd[(i, k)].abs().max(1e-3);
                    assert!(
                        (j[(i, k)] - fd[(i, k)]).abs() / denom < 1e-5,
                        "entry ({i},{k}): {} vs {}",
                        j[(i, k)],
                        fd[(i, k)]
                    );
                }
            }
        }
    }

    #[test]
    fn moebius_pole_is_domain_error() {
        let p = MoebiusParams {
            t: vec![0.0; 2],
            b: vec![0.25, 0.25],
            a: DenseMatrix::identity(2),
            alpha: 1.0,
            epsilon: 2.0,
        };
        let spec = MixingSpec { kind: MixingKind::Moebius(p), dim: 2 };
        assert!(matches!(
            mix_forward(&spec, &[0.25, 0.25], false),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn moebius_is_conformal() {
        let spec = sample_moebius(3, (0.0, 1.0), 0.5, 99).unwrap();
        let mut rng = crate::rng::derive_rng(17, &[3]);
        for _ in 0..100 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (_, j) = mix_forward(&spec, &z, true).unwrap();
            let j = j.unwrap();
            // J^T J must be a positive multiple of the identity.
            let gram = j.gram();
            let scale = gram[(0, 0)];
            assert!(scale > 0.0);
            let scaled_id = DenseMatrix::identity(3).scale(scale);
            assert!(gram.max_abs_diff(&scaled_id) < 1e-8 * scale.max(1.0));
            assert!(cima_local(&j).unwrap() < 1e-10);
        }
    }

    #[test]
    fn moebius_closed_form_inverse() {
        let spec = sample_moebius(3, (0.0, 1.0), 0.5, 7).unwrap();
        let MixingKind::Moebius(p) = &spec.kind else { unreachable!() };
        let mut rng = crate::rng::derive_rng(8, &[4]);
        for _ in 0..200 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (x, _) = mix_forward(&spec, &z, false).unwrap();
            let back = moebius_inverse(p, &x).unwrap();
            for (a, b) in back.iter().zip(&z) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn orthogonal_mlp_round_trip() {
        let params = init_mlp(
            &[3, 3, 3, 3],
            InitMode::Orthogonal,
            Activation::SmoothLeakyRelu { alpha: 0.2 },
            13,
        )
        .unwrap();
        let spec = MixingSpec::new(MixingKind::Mlp(params), 3).unwrap();
        let mut rng = crate::rng::derive_rng(21, &[5]);
        for _ in 0..200 {
            let z: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let (x, _) = mix_forward(&spec, &z, false).unwrap();
            let back = mix_invert(&spec, &x, &[0.0; 3]).unwrap();
            for (a, b) in back.iter().zip(&z) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sources_match_their_moments() {
        let dist = SourceDistribution::standard_gaussian(3);
        let m = sample_sources(&dist, 100_000, 3);
        for j in 0..3 {
            let col = m.column(j);
            let mean: f64 = col.iter().sum::<f64>() / col.len() as f64;
            let var: f64 =
                col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.03, "var {var}");
        }
        let dist = SourceDistribution::uniform(2, 0.0, 1.0).unwrap();
        let m = sample_sources(&dist, 100_000, 4);
        assert!(m.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn sampling_is_deterministic() {
        let dist = SourceDistribution::standard_gaussian(2);
        let a = sample_sources(&dist, 100, 11);
        let b = sample_sources(&dist, 100, 11);
        assert_eq!(a, b);
    }

    #[test]
    fn pushforward_identity_at_origin() {
        let spec = identity_mixing(3);
        let dist = SourceDistribution::standard_gaussian(3);
        let lp = pushforward_log_density(&spec, &dist, &[0.0; 3], &[0.0; 3]).unwrap();
        assert_relative_eq!(
            lp,
            -1.5 * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn pushforward_scaled_linear() {
        // W = 2I in 2D, Gaussian source, x = 0: log p = -log(2 pi) - log 4.
        let spec =
            MixingSpec::new(MixingKind::Linear(DenseMatrix::identity(2).scale(2.0)), 2).unwrap();
        let dist = SourceDistribution::standard_gaussian(2);
        let lp = pushforward_log_density(&spec, &dist, &[0.0; 2], &[0.0; 2]).unwrap();
        assert_relative_eq!(
            lp,
            -(2.0 * std::f64::consts::PI).ln() - 4.0f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn pushforward_rejects_bad_preimage() {
        let spec = identity_mixing(2);
        let dist = SourceDistribution::standard_gaussian(2);
        assert!(matches!(
            pushforward_log_density(&spec, &dist, &[1.0, 1.0], &[0.0, 0.0]),
            Err(Error::Preimage { .. })
        ));
    }

    #[test]
    fn volume_preserving_outer_keeps_density() {
        // |det| = 1 outer map: density at matched points is unchanged.
        let inner = identity_mixing(3);
        let outer = make_volume_preserving_linear(3, 1.5, 42).unwrap();
        let spec = MixingSpec::new(
            MixingKind::Composed {
                inner: Box::new(inner.clone()),
                outer: outer.clone(),
            },
            3,
        )
        .unwrap();
        let dist = SourceDistribution::standard_gaussian(3);
        let z = [0.3, -0.1, 0.7];
        let (x, _) = mix_forward(&spec, &z, false).unwrap();
        let lp_composed = pushforward_log_density(&spec, &dist, &x, &z).unwrap();
        let lp_inner = pushforward_log_density(&inner, &dist, &z, &z).unwrap();
        assert_relative_eq!(lp_composed, lp_inner, epsilon = 1e-10);
    }

    #[test]
    fn volume_preserving_basics() {
        for seed in 0..20 {
            let m = make_volume_preserving_linear(3, 2.0, seed).unwrap();
            let det = Lu::new(&m).unwrap().det();
            assert!((det.abs() - 1.0).abs() < 1e-10, "det {det}");
        }
        let m0 = make_volume_preserving_linear(3, 0.0, 5).unwrap();
        assert!(m0.gram().max_abs_diff(&DenseMatrix::identity(3)) < 1e-10);
        assert!(cima_local(&m0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn severity_sweep_covers_reported_contrast_range() {
        // Across seeds and severities at dim 3, the achieved c_IMA values
        // span at least [0.3, 6.8].
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for seed in 0..100 {
            for &severity in &[0.5, 1.0, 2.0, 4.0, 8.0] {
                let m = make_volume_preserving_linear(3, severity, seed).unwrap();
                let c = cima_local(&m).unwrap();
                min = min.min(c);
                max = max.max(c);
            }
        }
        assert!(min <= 0.3, "min contrast {min}");
        assert!(max >= 6.8, "max contrast {max}");
    }

    #[test]
    fn pushforward_normalizes_in_2d() {
        // Numerical quadrature of exp(log density) over a wide grid.
        let w = DenseMatrix::from_vec(2, 2, vec![1.2, 0.3, -0.4, 0.8]).unwrap();
        let spec = MixingSpec::new(MixingKind::Linear(w.clone()), 2).unwrap();
        let dist = SourceDistribution::standard_gaussian(2);
        let lu = Lu::new(&w).unwrap();
        let n = 200;
        let lim = 8.0;
        let h = 2.0 * lim / n as f64;
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [-lim + (i as f64 + 0.5) * h, -lim + (j as f64 + 0.5) * h];
                let z = lu.solve(&x).unwrap();
                let lp = pushforward_log_density(&spec, &dist, &x, &z).unwrap();
                mass += lp.exp() * h * h;
            }
        }
        assert!((mass - 1.0).abs() < 1e-2, "mass {mass}");
    }

    #[test]
    fn dataset_round_trip() {
        let spec = identity_mixing(2);
        let dist = SourceDistribution::standard_gaussian(2);
        let data = make_dataset(&spec, &dist, (6, 2, 2), 77).unwrap();
        let dir = std::env::temp_dir().join("vaelab-test-dataset");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.txt");
        save_dataset(&data, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(data.sources, loaded.sources);
        assert_eq!(data.observations, loaded.observations);
        assert_eq!(data.split, loaded.split);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn dataset_observations_equal_forward() {
        let spec = sample_moebius(3, (0.0, 1.0), 0.5, 3).unwrap();
        let dist = SourceDistribution::uniform(3, 0.0, 1.0).unwrap();
        let data = make_dataset(&spec, &dist, (8, 0, 2), 5).unwrap();
        for i in 0..data.len() {
            let (x, _) = mix_forward(&spec, data.source(i), false).unwrap();
            assert_eq!(x.as_slice(), data.observation(i));
        }
    }
}
