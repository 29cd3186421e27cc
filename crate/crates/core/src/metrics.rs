//! Identifiability and diagnostic metrics: Pearson correlation matrices,
//! the mean correlation coefficient with permutation/sign indeterminacies
//! removed by an optimal assignment, rank correlation, and power-law slope
//! fitting on log-log axes.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// MCC outcome: the mean absolute correlation along the optimal assignment,
/// the permutation and signs that realize it, and the full correlation
/// matrix it came from.
#[derive(Debug, Clone)]
pub struct MccResult {
    pub mcc: f64,
    /// `permutation[i]` is the estimated-source column matched to true
    /// dimension `i`.
    pub permutation: Vec<usize>,
    pub signs: Vec<i8>,
    pub corr_matrix: DenseMatrix,
}

/// Pearson correlation of every column of `a` against every column of `b`.
/// Entry `(i, j)` correlates `a[:, i]` with `b[:, j]`.
pub fn corr_matrix(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows() != b.rows() {
        return Err(Error::Dimension {
            context: "corr_matrix sample counts",
            expected: a.rows(),
            got: b.rows(),
        });
    }
    let n = a.rows();
    if n < 3 {
        return Err(Error::Config(format!("correlation needs >= 3 samples, got {n}")));
    }
    let stats = |m: &DenseMatrix| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut means = vec![0.0; m.cols()];
        let mut stds = vec![0.0; m.cols()];
        for j in 0..m.cols() {
            let mut mean = 0.0;
            for i in 0..n {
                mean += m[(i, j)];
            }
            mean /= n as f64;
            let mut var = 0.0;
            for i in 0..n {
                let d = m[(i, j)] - mean;
                var += d * d;
            }
            let std = (var / n as f64).sqrt();
            means[j] = mean;
            stds[j] = std;
        }
        Ok((means, stds))
    };
    let (mean_a, std_a) = stats(a)?;
    let (mean_b, std_b) = stats(b)?;
    for (j, s) in std_a.iter().enumerate() {
        if *s <= 1e-12 {
            return Err(Error::DegenerateColumn { column: j });
        }
    }
    for (j, s) in std_b.iter().enumerate() {
        if *s <= 1e-12 {
            return Err(Error::DegenerateColumn { column: j });
        }
    }
    let mut c = DenseMatrix::zeros(a.cols(), b.cols());
    for i in 0..a.cols() {
        for j in 0..b.cols() {
            let mut cov = 0.0;
            for k in 0..n {
                cov += (a[(k, i)] - mean_a[i]) * (b[(k, j)] - mean_b[j]);
            }
            cov /= n as f64;
            c[(i, j)] = (cov / (std_a[i] * std_b[j])).clamp(-1.0, 1.0);
        }
    }
    Ok(c)
}

/// Maximum-weight perfect matching on a square score matrix via the
/// potentials form of the Hungarian algorithm (O(n^3)). Returns the column
/// assigned to each row.
pub fn hungarian_max(score: &DenseMatrix) -> Result<Vec<usize>> {
    if !score.is_square() {
        return Err(Error::Dimension {
            context: "hungarian_max",
            expected: score.rows(),
            got: score.cols(),
        });
    }
    let n = score.rows();
    // Minimize cost = -score with the shortest-augmenting-path formulation
    // (1-based sentinel arrays).
    let cost = |i: usize, j: usize| -score[(i, j)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut assigned_row = vec![0usize; n + 1]; // assigned_row[col] = row
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0usize; n];
    for j in 1..=n {
        if assigned_row[j] > 0 {
            result[assigned_row[j] - 1] = j - 1;
        }
    }
    Ok(result)
}

/// Mean correlation coefficient between true and estimated sources after the
/// assignment maximizing the total absolute correlation.
pub fn mcc(z_true: &DenseMatrix, z_hat: &DenseMatrix) -> Result<MccResult> {
    let corr = corr_matrix(z_true, z_hat)?;
    if !corr.is_square() {
        return Err(Error::Dimension {
            context: "mcc",
            expected: corr.rows(),
            got: corr.cols(),
        });
    }
    let d = corr.rows();
    let abs_corr = DenseMatrix::from_fn(d, d, |i, j| corr[(i, j)].abs());
    let permutation = hungarian_max(&abs_corr)?;
    let mut total = 0.0;
    let mut signs = vec![0i8; d];
    for (i, &j) in permutation.iter().enumerate() {
        total += abs_corr[(i, j)];
        signs[i] = if corr[(i, j)] >= 0.0 { 1 } else { -1 };
    }
    Ok(MccResult {
        mcc: total / d as f64,
        permutation,
        signs,
        corr_matrix: corr,
    })
}

/// Ordinary least squares of `log y` on `log x`: returns (slope, intercept,
/// r-squared). All inputs must be strictly positive.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension {
            context: "fit_loglog_slope",
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::Config("slope fit needs at least 3 points".into()));
    }
    if xs.iter().chain(ys).any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::Domain("log-log fit requires positive finite inputs".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = ly.iter().map(|v| (v - my) * (v - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("all x values identical in slope fit".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((slope, intercept, r2))
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension {
            context: "spearman",
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::Config("rank correlation needs at least 3 points".into()));
    }
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let rx = DenseMatrix::from_vec(xs.len(), 1, ranks(xs))?;
    let ry = DenseMatrix::from_vec(ys.len(), 1, ranks(ys))?;
    Ok(corr_matrix(&rx, &ry)?[(0, 0)])
}
