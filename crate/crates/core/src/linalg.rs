//! Dense row-major matrices and the small-dimension factorizations the rest
//! of the crate needs: LU with partial pivoting (determinants, solves), a
//! Householder QR (orthogonal initialization), a scaling-and-squaring matrix
//! exponential, and a Newton inverter for smooth maps.
//!
//! Everything here targets dimensions of a few tens at most; clarity and
//! exactness of the contracts win over throughput.

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds from row-major data; `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                context: "DenseMatrix::from_vec",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Self {
        let mut m = Self::zeros(entries.len(), entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                context: "matmul",
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Dimension {
                context: "matvec",
                expected: self.cols,
                got: v.len(),
            });
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += self[(i, j)] * v[j];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= s;
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension {
                context: "matrix add",
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(out)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn column_sq_norm(&self, j: usize) -> f64 {
        (0..self.rows).map(|i| self[(i, j)] * self[(i, j)]).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `A^T A`, used for orthogonality checks and the diagonality measure.
    pub fn gram(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.cols);
        for i in 0..self.cols {
            for j in 0..self.cols {
                let mut acc = 0.0;
                for k in 0..self.rows {
                    acc += self[(k, i)] * self[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// LU factorization with partial pivoting of a square matrix.
pub struct Lu {
    lu: DenseMatrix,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn new(a: &DenseMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension {
                context: "LU",
                expected: a.rows(),
                got: a.cols(),
            });
        }
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut max = lu[(k, k)].abs();
            for i in (k + 1)..n {
                let v = lu[(i, k)].abs();
                if v > max {
                    max = v;
                    p = i;
                }
            }
            if max == 0.0 {
                return Err(Error::Singular(format!("zero pivot at column {k}")));
            }
            if p != k {
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[(k, k)];
            for i in (k + 1)..n {
                let factor = lu[(i, k)] / pivot;
                lu[(i, k)] = factor;
                for j in (k + 1)..n {
                    let delta = factor * lu[(k, j)];
                    lu[(i, j)] -= delta;
                }
            }
        }
        Ok(Self { lu, perm, sign })
    }

    pub fn det(&self) -> f64 {
        let n = self.lu.rows();
        let mut d = self.sign;
        for i in 0..n {
            d *= self.lu[(i, i)];
        }
        d
    }

    /// `log |det|`, summed in log space so near-singular matrices do not
    /// underflow the product.
    pub fn log_abs_det(&self) -> f64 {
        let n = self.lu.rows();
        (0..n).map(|i| self.lu[(i, i)].abs().ln()).sum()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.lu.rows();
        if b.len() != n {
            return Err(Error::Dimension {
                context: "LU solve",
                expected: n,
                got: b.len(),
            });
        }
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = b[self.perm[i]];
            for j in 0..i {
                acc -= self.lu[(i, j)] * y[j];
            }
            y[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = y[i];
            for j in (i + 1)..n {
                acc -= self.lu[(i, j)] * y[j];
            }
            y[i] = acc / self.lu[(i, i)];
        }
        Ok(y)
    }

    pub fn inverse(&self) -> Result<DenseMatrix> {
        let n = self.lu.rows();
        let mut inv = DenseMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.solve(&e)?;
            e[j] = 0.0;
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        Ok(inv)
    }
}

/// `log |det A|` via LU; errors when `|det| < 1e-300` or a pivot vanishes.
pub fn log_abs_det(a: &DenseMatrix) -> Result<f64> {
    let lu = Lu::new(a)?;
    let lad = lu.log_abs_det();
    if lad < (1e-300f64).ln() {
        return Err(Error::Singular(format!(
            "|det| = exp({lad:.3e}) below 1e-300"
        )));
    }
    Ok(lad)
}

/// Orthogonal factor of a Householder QR, sign-fixed so that `diag(R) > 0`.
///
/// For a square matrix with i.i.d. Gaussian entries the result is Haar
/// distributed over the orthogonal group.
pub fn qr_orthogonal(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::Config(format!(
            "QR orthogonalization requires a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let mut r = a.clone();
    let mut q = DenseMatrix::identity(n);
    for k in 0..n {
        // Householder vector for column k.
        let mut norm = 0.0;
        for i in k..n {
            norm += r[(i, k)] * r[(i, k)];
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            return Err(Error::Singular(format!(
                "rank-deficient input to QR at column {k}"
            )));
        }
        let alpha = if r[(k, k)] >= 0.0 { -norm } else { norm };
        let mut v = vec![0.0; n];
        v[k] = r[(k, k)] - alpha;
        for i in (k + 1)..n {
            v[i] = r[(i, k)];
        }
        let vtv: f64 = v[k..].iter().map(|x| x * x).sum();
        if vtv == 0.0 {
            continue;
        }
        // Apply H = I - 2 v v^T / (v^T v) to R (left) and accumulate into Q.
        for j in 0..n {
            let mut dot = 0.0;
            for i in k..n {
                dot += v[i] * r[(i, j)];
            }
            let f = 2.0 * dot / vtv;
            for i in k..n {
                r[(i, j)] -= f * v[i];
            }
        }
        for i in 0..n {
            let mut dot = 0.0;
            for j in k..n {
                dot += q[(i, j)] * v[j];
            }
            let f = 2.0 * dot / vtv;
            for j in k..n {
                q[(i, j)] -= f * v[j];
            }
        }
    }
    // Fix signs so diag(R) > 0.
    for k in 0..n {
        if r[(k, k)] < 0.0 {
            for i in 0..n {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    Ok(q)
}

/// Matrix exponential by scaling and squaring with a Taylor core.
pub fn expm(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::Dimension {
            context: "expm",
            expected: a.rows(),
            got: a.cols(),
        });
    }
    let n = a.rows();
    let norm = a.data().iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let b = a.scale(0.5f64.powi(squarings as i32));
    // Taylor series: with |B| <= 0.5 roughly 24 terms reach double precision.
    let mut result = DenseMatrix::identity(n);
    let mut term = DenseMatrix::identity(n);
    for k in 1..=24 {
        term = term.matmul(&b)?.scale(1.0 / k as f64);
        result = result.add(&term)?;
    }
    for _ in 0..squarings {
        result = result.matmul(&result)?;
    }
    Ok(result)
}

/// Largest singular value via power iteration on `A^T A` (deterministic start).
pub fn spectral_norm(a: &DenseMatrix) -> f64 {
    let n = a.cols();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut sigma = 0.0;
    for _ in 0..200 {
        let av = a.matvec(&v).expect("cols match");
        let atav = a.transpose().matvec(&av).expect("rows match");
        let norm = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for (vi, &x) in v.iter_mut().zip(&atav) {
            *vi = x / norm;
        }
        sigma = norm.sqrt();
    }
    sigma
}

/// Newton inversion of a smooth map: solves `f(z) = x` starting from `z0`.
///
/// Convergence is declared when `max_k |f(z)_k - x_k| <= tol`.
pub fn newton_invert(
    f: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    jac: &mut dyn FnMut(&[f64]) -> Result<DenseMatrix>,
    x: &[f64],
    z0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let mut z = z0.to_vec();
    for _ in 0..max_iter {
        let fz = f(&z)?;
        let mut residual = vec![0.0; x.len()];
        let mut max_res = 0.0f64;
        for k in 0..x.len() {
            residual[k] = fz[k] - x[k];
            max_res = max_res.max(residual[k].abs());
        }
        if max_res <= tol {
            return Ok(z);
        }
        let j = jac(&z)?;
        let step = Lu::new(&j)?.solve(&residual)?;
        let mut damping = 1.0;
        // Backtrack if the full step worsens the residual badly.
        loop {
            let candidate: Vec<f64> = z.iter().zip(&step).map(|(zi, si)| zi - damping * si).collect();
            match f(&candidate) {
                Ok(fc) => {
                    let cand_res = fc
                        .iter()
                        .zip(x)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    if cand_res < max_res || damping < 1.0 / 16.0 {
                        z = candidate;
                        break;
                    }
                }
                Err(_) if damping >= 1.0 / 16.0 => {}
                Err(e) => return Err(e),
            }
            damping *= 0.5;
        }
    }
    let fz = f(&z)?;
    let max_res = fz
        .iter()
        .zip(x)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if max_res <= tol {
        Ok(z)
    } else {
        Err(Error::Estimation(format!(
            "Newton inversion stalled with residual {max_res:.3e} > tol {tol:.1e}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lu_det_and_solve() {
        let a = DenseMatrix::from_vec(2, 2, vec![3.0, 1.0, 4.0, 2.0]).unwrap();
        let lu = Lu::new(&a).unwrap();
        assert_relative_eq!(lu.det(), 2.0, max_relative = 1e-12);
        let x = lu.solve(&[5.0, 6.0]).unwrap();
        // 3x + y = 5; 4x + 2y = 6 -> x = 2, y = -1
        assert_relative_eq!(x[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn lu_rejects_singular() {
        let a = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(Lu::new(&a).is_err());
    }

    #[test]
    fn qr_gives_orthogonal_factor() {
        let a = DenseMatrix::from_vec(
            3,
            3,
            vec![0.3, -1.2, 0.7, 1.5, 0.2, -0.4, -0.8, 0.9, 1.1],
        )
        .unwrap();
        let q = qr_orthogonal(&a).unwrap();
        let qtq = q.gram();
        assert!(qtq.max_abs_diff(&DenseMatrix::identity(3)) < 1e-12);
    }

    #[test]
    fn expm_matches_scalar_exponential() {
        let a = DenseMatrix::from_vec(2, 2, vec![0.7, 0.0, 0.0, -1.3]).unwrap();
        let e = expm(&a).unwrap();
        assert_relative_eq!(e[(0, 0)], 0.7f64.exp(), max_relative = 1e-12);
        assert_relative_eq!(e[(1, 1)], (-1.3f64).exp(), max_relative = 1e-12);
        assert!(e[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn expm_rotation() {
        // exp of a skew-symmetric generator is a rotation.
        let theta = 1.1f64;
        let a = DenseMatrix::from_vec(2, 2, vec![0.0, -theta, theta, 0.0]).unwrap();
        let e = expm(&a).unwrap();
        assert_relative_eq!(e[(0, 0)], theta.cos(), epsilon = 1e-12);
        assert_relative_eq!(e[(1, 0)], theta.sin(), epsilon = 1e-12);
    }

    #[test]
    fn spectral_norm_of_diag() {
        let a = DenseMatrix::diag(&[3.0, -7.0, 0.5]);
        assert_relative_eq!(spectral_norm(&a), 7.0, max_relative = 1e-9);
    }

    #[test]
    fn newton_inverts_cubic() {
        let mut f = |z: &[f64]| Ok(vec![z[0].powi(3) + z[0]]);
        let mut jac = |z: &[f64]| {
            DenseMatrix::from_vec(1, 1, vec![3.0 * z[0] * z[0] + 1.0])
        };
        let z = newton_invert(&mut f, &mut jac, &[10.0], &[1.0], 1e-12, 100).unwrap();
        assert_relative_eq!(z[0].powi(3) + z[0], 10.0, epsilon = 1e-10);
    }
}
