//! The IMA contrast: a per-point measure of how far a Jacobian is from
//! having orthogonal columns, its Monte-Carlo expectation under a source
//! distribution, and the regularized log-likelihood objective built on it.

use crate::error::{Error, Result};
use crate::linalg::{log_abs_det, DenseMatrix};
use crate::mixing::{mix_forward, sample_sources, MixingSpec, SourceDistribution};

/// Summary of the contrast of a mixing: local value at a reference point,
/// Monte-Carlo global estimate with its standard error, and the weight used
/// in the regularized objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ImaReport {
    pub cima_local: f64,
    pub cima_global: f64,
    pub cima_global_stderr: f64,
    pub lambda: f64,
    pub n_mc: usize,
}

/// Default regularization weight: the deterministic-limit correspondence
/// between the ELBO gap and the contrast carries unit weight.
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Local IMA contrast of a square Jacobian:
/// `sum_k log ||J column k|| - log |det J|`.
///
/// Nonnegative by Hadamard's inequality, zero exactly when the columns are
/// orthogonal; invariant under left-multiplication by orthogonal matrices
/// and under nonzero column scaling.
pub fn cima_local(j: &DenseMatrix) -> Result<f64> {
    if !j.is_square() {
        return Err(Error::Dimension {
            context: "cima_local",
            expected: j.rows(),
            got: j.cols(),
        });
    }
    let lad = log_abs_det(j)?;
    let mut col_log_norms = 0.0;
    for k in 0..j.cols() {
        let sq = j.column_sq_norm(k);
        if sq == 0.0 {
            return Err(Error::Singular(format!("zero column {k}")));
        }
        col_log_norms += 0.5 * sq.ln();
    }
    Ok(col_log_norms - lad)
}

/// Monte-Carlo estimate of the global contrast `E_z[c(J_f(z))]` under the
/// source distribution, with its standard error.
///
/// Samples where the Jacobian is singular are rejected and counted; more
/// than 1% rejections aborts the estimate.
pub fn cima_global_mc(
    spec: &MixingSpec,
    dist: &SourceDistribution,
    n_mc: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_mc < 100 {
        return Err(Error::Config(format!(
            "global contrast estimation needs n_mc >= 100, got {n_mc}"
        )));
    }
    let sources = sample_sources(dist, n_mc, seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    for i in 0..n_mc {
        let value = mix_forward(spec, sources.row(i), true)
            .and_then(|(_, j)| cima_local(&j.unwrap()));
        match value {
            Ok(c) => {
                sum += c;
                sum_sq += c * c;
                accepted += 1;
            }
            Err(Error::Singular(_)) | Err(Error::Domain(_)) => rejected += 1,
            Err(e) => return Err(e),
        }
    }
    if rejected * 100 > n_mc {
        return Err(Error::Estimation(format!(
            "{rejected} of {n_mc} contrast samples rejected (limit 1%)"
        )));
    }
    let n = accepted as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let stderr = (var / n).sqrt();
    Ok((mean, stderr))
}

/// The regularized objective `log p(x) - lambda * c`.
pub fn ima_regularized_loglik(log_px: f64, cima_value: f64, lambda: f64) -> f64 {
    debug_assert!(lambda >= 0.0);
    log_px - lambda * cima_value
}

/// The left KL-divergence measure of diagonality of a positive-definite
/// matrix: `0.5 * (log det diag(M) - log det M)`. Applied to `J^T J` it
/// coincides with [`cima_local`] of `J`.
pub fn kld_diagonality(m: &DenseMatrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Dimension {
            context: "kld_diagonality",
            expected: m.rows(),
            got: m.cols(),
        });
    }
    let mut log_det_diag = 0.0;
    for k in 0..m.rows() {
        let d = m[(k, k)];
        if d <= 0.0 {
            return Err(Error::Singular(format!("nonpositive diagonal entry {k}")));
        }
        log_det_diag += d.ln();
    }
    Ok(0.5 * (log_det_diag - log_abs_det(m)?))
}
