//! Dense complex linear-algebra kernels shared by the estimators.
//!
//! Matrices are `nalgebra::DMatrix<Complex64>`. Everything here is a pure
//! function of its inputs.

use std::cmp::Ordering;
use std::f64::consts::TAU;

use log::debug;
use nalgebra::linalg::Schur;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{KoopError, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

/// Relative singular-value cutoff used for rank decisions unless overridden.
pub const DEFAULT_RANK_EPS: f64 = 1e-12;

/// Eigenvalues closer than this (relative to the spectral radius) are
/// treated as coincident.
pub const DISTINCT_EIG_TOL: f64 = 1e-8;

/// Eigenvector matrices with a larger 2-norm condition are treated as defective.
pub const DEFECTIVE_CONDITION: f64 = 1e12;

const MAX_SWEEPS_PER_DIM: usize = 1000;

// Convergence threshold handed to the iterative SVD and Schur solvers. The
// complex bidiagonal SVD can stall on a wrong answer with a threshold of a
// single ulp (rank-one input with repeated columns), so use the library's
// own default of five ulps.
const ITER_EPS: f64 = 5.0 * f64::EPSILON;

/// Complex number as `{re, im}`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct C64Json {
    pub re: f64,
    pub im: f64,
}

impl From<C64> for C64Json {
    fn from(z: C64) -> Self {
        C64Json { re: z.re, im: z.im }
    }
}

impl From<C64Json> for C64 {
    fn from(z: C64Json) -> Self {
        c64(z.re, z.im)
    }
}


pub fn to_json(v: &[C64]) -> Vec<C64Json> {
    v.iter().map(|&z| z.into()).collect()
}

#[inline]
pub fn c64(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// `e^{i t}`.
#[inline]
pub fn expi(t: f64) -> C64 {
    C64::from_polar(1.0, t)
}

pub fn check_finite(a: &CMatrix) -> Result<()> {
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let z = a[(i, j)];
            if !z.re.is_finite() || !z.im.is_finite() {
                return Err(KoopError::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

fn check_nonempty(a: &CMatrix) -> Result<()> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(KoopError::shape(format!(
            "empty {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

/// Root mean square of a complex vector.
pub fn rms(v: &[C64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|z| z.norm_sqr()).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn vec_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest entry modulus.
pub fn max_abs(a: &CMatrix) -> f64 {
    a.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

/// Argument mapped into `[0, 2π)`.
pub fn arg_0_2pi(z: C64) -> f64 {
    let a = z.arg().rem_euclid(TAU);
    if a >= TAU - 1e-12 {
        0.0
    } else {
        a
    }
}

/// Permutation that puts `values` in canonical order: modulus descending,
/// ties (moduli within `1e-9` relative) broken by argument ascending in `[0, 2π)`.
pub fn canonical_order(values: &[C64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].norm().total_cmp(&values[a].norm()));

    let mut out = Vec::with_capacity(idx.len());
    let mut start = 0;
    while start < idx.len() {
        let head = values[idx[start]].norm();
        let tol = 1e-9 * head.max(1.0);
        let mut end = start + 1;
        while end < idx.len() && head - values[idx[end]].norm() <= tol {
            end += 1;
        }
        let mut group = idx[start..end].to_vec();
        group.sort_by(|&a, &b| {
            arg_0_2pi(values[a])
                .total_cmp(&arg_0_2pi(values[b]))
                .then(Ordering::Equal)
        });
        out.extend(group);
        start = end;
    }
    out
}

pub fn canonical_sort(values: &[C64]) -> Vec<C64> {
    canonical_order(values).into_iter().map(|i| values[i]).collect()
}

/// Thin singular value decomposition `A = G Σ V†`.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// `m x n`, orthonormal columns.
    pub g: CMatrix,
    /// Nonincreasing singular values.
    pub sigma: Vec<f64>,
    /// `n x n` unitary.
    pub v: CMatrix,
}

impl ThinSvd {
    pub fn sigma_matrix(&self) -> CMatrix {
        CMatrix::from_diagonal(&DVector::from_iterator(
            self.sigma.len(),
            self.sigma.iter().map(|&s| c64(s, 0.0)),
        ))
    }

    pub fn reconstruct(&self) -> CMatrix {
        &self.g * self.sigma_matrix() * self.v.adjoint()
    }
}

/// Full economy SVD of any shape; singular values sorted nonincreasing.
///
/// The bidiagonal QR SVD is tried first and its output verified. On
/// failure a one-sided Jacobi SVD is used instead.
fn economy_svd(a: &CMatrix) -> Result<ThinSvd> {
    check_nonempty(a)?;
    check_finite(a)?;
    if let Some(out) = qr_svd(a).filter(|s| svd_is_valid(a, s)) {
        return Ok(out);
    }
    debug!("bidiagonal SVD failed verification on {}x{}; using Jacobi", a.nrows(), a.ncols());
    let out = jacobi_svd(a);
    if svd_is_valid(a, &out) {
        Ok(out)
    } else {
        Err(KoopError::NoConvergence {
            what: "SVD",
            rows: a.nrows(),
            cols: a.ncols(),
        })
    }
}

fn qr_svd(a: &CMatrix) -> Option<ThinSvd> {
    let (rows, cols) = a.shape();
    let svd = a
        .clone()
        .try_svd(true, true, ITER_EPS, MAX_SWEEPS_PER_DIM * rows.max(cols))?;
    let u = svd.u?;
    let v_t = svd.v_t?;
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    Some(ThinSvd {
        g: CMatrix::from_fn(rows, k, |i, j| u[(i, order[j])]),
        sigma: order.iter().map(|&j| svd.singular_values[j]).collect(),
        v: CMatrix::from_fn(cols, k, |i, j| v_t[(order[j], i)].conj()),
    })
}

fn svd_is_valid(a: &CMatrix, s: &ThinSvd) -> bool {
    let k = s.sigma.len();
    let id = CMatrix::identity(k, k);
    let finite = s.g.iter().chain(s.v.iter()).all(|z| z.re.is_finite() && z.im.is_finite());
    finite
        && s.sigma.iter().all(|x| x.is_finite() && *x >= 0.0)
        && s.sigma.windows(2).all(|w| w[0] >= w[1])
        && energy_matches(a, &s.sigma)
        && (s.g.adjoint() * &s.g - &id).norm() <= 1e-10
        && (s.v.adjoint() * &s.v - &id).norm() <= 1e-10
        && (s.reconstruct() - a).norm() <= 1e-10 * a.norm().max(f64::MIN_POSITIVE)
}

/// `Σ σ_k² = ‖A‖_F²` is a cheap sanity check on an iterative SVD.
fn energy_matches(a: &CMatrix, sigma: &[f64]) -> bool {
    let fro2 = a.norm_squared();
    let sum: f64 = sigma.iter().map(|s| s * s).sum();
    (sum - fro2).abs() <= 1e-10 * fro2.max(f64::MIN_POSITIVE)
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD.
fn jacobi_svd(a: &CMatrix) -> ThinSvd {
    if a.nrows() < a.ncols() {
        let t = jacobi_svd(&a.adjoint());
        return ThinSvd {
            g: t.v,
            sigma: t.sigma,
            v: t.g,
        };
    }
    let (rows, n) = a.shape();
    let mut u = a.clone();
    let mut v = CMatrix::identity(n, n);
    let tol = rows as f64 * f64::EPSILON;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = u.column(p).norm_squared();
                let beta = u.column(q).norm_squared();
                let gamma = u.column(p).dotc(&u.column(q));
                let g = gamma.norm();
                if g == 0.0 || g <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut u, &mut v] {
                    for i in 0..m.nrows() {
                        let x = m[(i, p)];
                        let y = m[(i, q)] * phase.conj();
                        m[(i, p)] = x * c - y * s;
                        m[(i, q)] = x * s + y * c;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| u.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let smax = norms[order[0]];
    let mut g = CMatrix::zeros(rows, n);
    let mut sigma = Vec::with_capacity(n);
    for (j, &k) in order.iter().enumerate() {
        let s = norms[k];
        if s > 0.0 && s > f64::EPSILON * f64::EPSILON * smax {
            g.set_column(j, &(u.column(k) / c64(s, 0.0)));
            sigma.push(s);
        } else {
            sigma.push(0.0);
        }
    }
    complete_orthonormal(&mut g, &sigma);
    ThinSvd {
        g,
        sigma,
        v: CMatrix::from_fn(n, n, |i, j| v[(i, order[j])]),
    }
}

/// Replaces the columns belonging to zero singular values by an orthonormal
/// completion of the others.
fn complete_orthonormal(g: &mut CMatrix, sigma: &[f64]) {
    let rows = g.nrows();
    let mut e = 0;
    for j in 0..sigma.len() {
        if sigma[j] > 0.0 {
            continue;
        }
        while e < rows {
            let mut x = DVector::<C64>::zeros(rows);
            x[e] = c64(1.0, 0.0);
            e += 1;
            // Two Gram-Schmidt passes.
            for _ in 0..2 {
                for (k, &sk) in sigma.iter().enumerate() {
                    if k != j && (sk > 0.0 || k < j) {
                        let col = g.column(k).into_owned();
                        let d = col.dotc(&x);
                        x -= col * d;
                    }
                }
            }
            let nrm = x.norm();
            if nrm > 0.5 {
                g.set_column(j, &(x / c64(nrm, 0.0)));
                break;
            }
        }
    }
}

/// Thin SVD of a tall (`m >= n`) matrix.
pub fn thin_svd(a: &CMatrix) -> Result<ThinSvd> {
    if a.nrows() < a.ncols() {
        return Err(KoopError::shape(format!(
            "thin SVD needs rows >= cols, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    economy_svd(a)
}

pub fn singular_values(a: &CMatrix) -> Result<Vec<f64>> {
    check_nonempty(a)?;
    check_finite(a)?;
    let (rows, cols) = a.shape();
    let quick = a
        .clone()
        .try_svd(false, false, ITER_EPS, MAX_SWEEPS_PER_DIM * rows.max(cols))
        .map(|svd| {
            let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
            s.sort_by(|a, b| b.total_cmp(a));
            s
        })
        .filter(|s| s.iter().all(|x| x.is_finite()) && energy_matches(a, s));
    match quick {
        Some(s) => Ok(s),
        None => Ok(economy_svd(a)?.sigma),
    }
}

pub fn spectral_norm(a: &CMatrix) -> Result<f64> {
    Ok(singular_values(a)?.first().copied().unwrap_or(0.0))
}

/// Moore-Penrose pseudoinverse together with the rank it was built at.
#[derive(Debug, Clone)]
pub struct Pinv {
    pub matrix: CMatrix,
    pub rank: usize,
    /// Set when singular values were dropped below the threshold.
    pub truncated: bool,
    pub singular_values: Vec<f64>,
}

pub fn pseudoinverse(a: &CMatrix) -> Result<Pinv> {
    pseudoinverse_with(a, DEFAULT_RANK_EPS)
}

/// Pseudoinverse keeping singular values `σ_k >= rank_eps * σ_max`.
pub fn pseudoinverse_with(a: &CMatrix, rank_eps: f64) -> Result<Pinv> {
    let svd = economy_svd(a)?;
    let smax = svd.sigma.first().copied().unwrap_or(0.0);
    let cutoff = rank_eps * smax;
    let rank = svd
        .sigma
        .iter()
        .take_while(|&&s| s > 0.0 && s >= cutoff)
        .count();
    let (rows, cols) = a.shape();
    let mut pinv = CMatrix::zeros(cols, rows);
    for k in 0..rank {
        let inv = 1.0 / svd.sigma[k];
        let vk = svd.v.column(k);
        let gk = svd.g.column(k);
        pinv += (vk * gk.adjoint()) * c64(inv, 0.0);
    }
    Ok(Pinv {
        matrix: pinv,
        rank,
        truncated: rank < svd.sigma.len(),
        singular_values: svd.sigma,
    })
}

/// `σ_max / σ_min`, or `+inf` when `σ_min < DEFAULT_RANK_EPS * σ_max`.
pub fn condition_2norm(a: &CMatrix) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return Err(KoopError::shape(format!(
            "condition number needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(condition_from_singular(&singular_values(a)?))
}

pub(crate) fn condition_from_singular(s: &[f64]) -> f64 {
    let smax = s.first().copied().unwrap_or(0.0);
    let smin = s.last().copied().unwrap_or(0.0);
    if smax == 0.0 || smin < DEFAULT_RANK_EPS * smax {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// `N x N` matrix with entry `(i, j) = λ_i^j`.
pub fn vandermonde(lambdas: &[C64]) -> CMatrix {
    let n = lambdas.len();
    let mut v = CMatrix::zeros(n, n);
    for (i, &l) in lambdas.iter().enumerate() {
        let mut p = c64(1.0, 0.0);
        for j in 0..n {
            v[(i, j)] = p;
            p *= l;
        }
    }
    v
}

/// Eigendecomposition of a general square complex matrix.
#[derive(Debug, Clone)]
pub struct EigenResult {
    /// Canonical order (modulus descending, argument ascending).
    pub eigenvalues: Vec<C64>,
    /// Columns `a_j`, unit 2-norm.
    pub right: CMatrix,
    /// Rows `â_j`. Normalised so that `â_j a_j = 1` whenever that is possible.
    pub left: CMatrix,
    /// No two eigenvalues closer than `DISTINCT_EIG_TOL` (relative).
    pub distinct: bool,
    /// Left vectors are the rows of `right⁻¹`.
    pub left_from_inverse: bool,
    /// 2-norm condition of `right` (`inf` when numerically singular).
    pub vector_condition: f64,
}

impl EigenResult {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn right_vector(&self, j: usize) -> Vec<C64> {
        self.right.column(j).iter().copied().collect()
    }

    pub fn left_vector(&self, j: usize) -> Vec<C64> {
        self.left.row(j).iter().copied().collect()
    }

    /// Largest `‖M a_j − λ_j a_j‖₂`.
    pub fn max_right_residual(&self, m: &CMatrix) -> f64 {
        (0..self.len())
            .map(|j| {
                let a = self.right.column(j);
                (m * a - a * self.eigenvalues[j]).norm()
            })
            .fold(0.0, f64::max)
    }

    /// Largest `‖â_j M − λ_j â_j‖₂ / ‖â_j‖₂`.
    pub fn max_left_residual(&self, m: &CMatrix) -> f64 {
        (0..self.len())
            .map(|j| {
                let a = self.left.row(j);
                let scale = a.norm().max(f64::MIN_POSITIVE);
                (a * m - a * self.eigenvalues[j]).norm() / scale
            })
            .fold(0.0, f64::max)
    }
}

/// Permutation `Q` with `QᵀMQ` upper triangular, when the sparsity pattern
/// allows one. Diagonal and nilpotent shift matrices are common here and the
/// shifted QR iteration converges poorly on the latter.
fn triangular_permutation(m: &CMatrix) -> Option<CMatrix> {
    let n = m.nrows();
    let zero = c64(0.0, 0.0);
    // Edge j -> i for every off-diagonal entry m[i][j] != 0: i must precede j.
    let mut indegree = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && m[(i, j)] != zero {
                indegree[j] += 1;
            }
        }
    }
    let mut ready: Vec<usize> = (0..n).rev().filter(|&k| indegree[k] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop() {
        order.push(i);
        for j in (0..n).rev() {
            if i != j && m[(i, j)] != zero {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.push(j);
                }
            }
        }
    }
    (order.len() == n).then(|| {
        let mut q = CMatrix::zeros(n, n);
        for (k, &i) in order.iter().enumerate() {
            q[(i, k)] = c64(1.0, 0.0);
        }
        q
    })
}

fn iterative_schur(m: &CMatrix) -> Result<(CMatrix, CMatrix)> {
    let n = m.nrows();
    let failed = || KoopError::NoConvergence {
        what: "Schur eigensolver",
        rows: n,
        cols: n,
    };
    let schur = Schur::try_new(m.clone(), ITER_EPS, MAX_SWEEPS_PER_DIM * n).ok_or_else(failed)?;
    let (q, t) = schur.unpack();
    let scale = m.norm().max(f64::MIN_POSITIVE);
    let finite = q.iter().chain(t.iter()).all(|z| z.re.is_finite() && z.im.is_finite());
    if !finite || (&q * &t * q.adjoint() - m).norm() > 1e-10 * scale {
        return Err(failed());
    }
    Ok((q, t))
}

fn schur_eigen(m: &CMatrix) -> Result<(Vec<C64>, CMatrix)> {
    let n = m.nrows();
    let (q, t) = match triangular_permutation(m) {
        Some(q) => {
            let t = q.transpose() * m * &q;
            (q, t)
        }
        None => iterative_schur(m)?,
    };
    let values: Vec<C64> = (0..n).map(|i| t[(i, i)]).collect();

    // Back substitution on the triangular factor; near-zero pivots are
    // replaced by a small multiple of ‖T‖ as in LAPACK's trevc.
    let tnorm = t.norm().max(f64::MIN_POSITIVE);
    // Floor keeps |d|² representable in complex division.
    let smin = (f64::EPSILON * tnorm).max(1e-150);
    let mut vectors = CMatrix::zeros(n, n);
    for k in 0..n {
        let lambda = values[k];
        let mut y = DVector::<C64>::zeros(n);
        y[k] = c64(1.0, 0.0);
        for i in (0..k).rev() {
            let mut s = c64(0.0, 0.0);
            for j in (i + 1)..=k {
                s += t[(i, j)] * y[j];
            }
            let mut d = t[(i, i)] - lambda;
            if d.norm() < smin {
                d = c64(smin, 0.0);
            }
            y[i] = -s / d;
            // Rescale to avoid overflow when pivots were tiny.
            let big = y.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()));
            if big > 1e150 {
                y /= c64(big, 0.0);
            }
        }
        let mut x = &q * y;
        let nrm = x.norm();
        if nrm > 0.0 {
            x /= c64(nrm, 0.0);
        }
        vectors.set_column(k, &x);
    }
    Ok((values, vectors))
}

fn is_distinct(values: &[C64]) -> bool {
    let scale = values.iter().fold(1.0_f64, |acc, z| acc.max(z.norm()));
    for i in 0..values.len() {
        for j in (i + 1)..values.len() {
            if (values[i] - values[j]).norm() <= DISTINCT_EIG_TOL * scale {
                return false;
            }
        }
    }
    true
}

/// General eigendecomposition with right and left eigenvectors.
///
/// Left vectors come from the rows of `A⁻¹` when the eigenvalues are distinct
/// and `A` is well conditioned; otherwise from a separate eigenproblem on `Mᵀ`.
pub fn eig(m: &CMatrix) -> Result<EigenResult> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(KoopError::shape(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            n,
            m.ncols()
        )));
    }
    check_nonempty(m)?;
    check_finite(m)?;

    let (values, vectors) = schur_eigen(m)?;
    let order = canonical_order(&values);
    let eigenvalues: Vec<C64> = order.iter().map(|&i| values[i]).collect();
    let right = CMatrix::from_fn(n, n, |i, j| vectors[(i, order[j])]);

    let distinct = is_distinct(&eigenvalues);
    let vector_condition = condition_2norm(&right)?;

    if distinct && vector_condition < DEFECTIVE_CONDITION {
        if let Some(inv) = right.clone().try_inverse() {
            return Ok(EigenResult {
                eigenvalues,
                right,
                left: inv,
                distinct,
                left_from_inverse: true,
                vector_condition,
            });
        }
    }

    // Left eigenproblem: w^T M = μ w^T  <=>  M^T w = μ w.
    let (mu, w) = schur_eigen(&m.transpose())?;
    let mut used = vec![false; n];
    let mut left = CMatrix::zeros(n, n);
    for (j, &lambda) in eigenvalues.iter().enumerate() {
        let best = (0..n)
            .filter(|&k| !used[k])
            .min_by(|&a, &b| (mu[a] - lambda).norm().total_cmp(&(mu[b] - lambda).norm()))
            .expect("as many left as right eigenvalues");
        used[best] = true;
        let row = w.column(best).transpose();
        let s = (&row * right.column(j))[(0, 0)];
        let row = if s.norm() > 1e-12 { row / s } else { row };
        left.set_row(j, &row);
    }
    Ok(EigenResult {
        eigenvalues,
        right,
        left,
        distinct,
        left_from_inverse: false,
        vector_condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> CMatrix {
        CMatrix::from_fn(r, c, |_, _| {
            c64(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    #[test]
    fn pinv_identity_and_zero() {
        let id = CMatrix::identity(3, 3);
        let p = pseudoinverse(&id).unwrap();
        assert!((p.matrix - &id).norm() < 1e-14);
        assert_eq!(p.rank, 3);
        assert!(!p.truncated);

        let z = CMatrix::zeros(2, 3);
        let p = pseudoinverse(&z).unwrap();
        assert_eq!(p.matrix.shape(), (3, 2));
        assert_eq!(max_abs(&p.matrix), 0.0);
        assert_eq!(p.rank, 0);
        assert!(p.truncated);
    }

    #[test]
    fn pinv_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 5, 3);
        let p = pseudoinverse(&a).unwrap().matrix;
        assert!(max_abs(&(&a * &p * &a - &a)) <= 1e-10);
        let normal = (a.adjoint() * &a).try_inverse().unwrap() * a.adjoint();
        assert!(max_abs(&(normal - p)) <= 1e-10);
    }

    #[test]
    fn rank_deficient_is_flagged() {
        let col = CMatrix::from_fn(4, 1, |i, _| c64(i as f64 + 1.0, 0.5));
        let a = CMatrix::from_fn(4, 2, |i, _| col[(i, 0)]);
        let p = pseudoinverse(&a).unwrap();
        assert_eq!(p.rank, 1);
        assert!(p.truncated);
    }

    #[test]
    fn thin_svd_padded_diagonal() {
        let mut a = CMatrix::zeros(4, 2);
        a[(0, 0)] = c64(3.0, 0.0);
        a[(1, 1)] = c64(1.0, 0.0);
        let s = thin_svd(&a).unwrap();
        assert!((s.sigma[0] - 3.0).abs() < 1e-14);
        assert!((s.sigma[1] - 1.0).abs() < 1e-14);
        assert_eq!(s.g.shape(), (4, 2));
    }

    #[test]
    fn thin_svd_unitary_has_unit_singular_values() {
        let w = expi(TAU / 3.0);
        let dft = CMatrix::from_fn(3, 3, |i, j| w.powu((i * j) as u32) / c64(3f64.sqrt(), 0.0));
        let s = thin_svd(&dft).unwrap();
        for x in s.sigma {
            assert!((x - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn thin_svd_repeated_columns() {
        let col: Vec<C64> = (0..29).map(|l| expi(0.3 + 0.8168 * l as f64) + 0.5).collect();
        let a = CMatrix::from_fn(29, 2, |l, _| col[l]);
        let svd = thin_svd(&a).unwrap();
        assert!((svd.reconstruct() - &a).norm() < 1e-12);
        assert!(svd.sigma[1] < 1e-12 * svd.sigma[0]);
    }

    #[test]
    fn jacobi_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let low_rank = random_matrix(&mut rng, 6, 2) * random_matrix(&mut rng, 2, 5);
        let cases = [
            random_matrix(&mut rng, 7, 4),
            random_matrix(&mut rng, 3, 6),
            low_rank.clone(),
            low_rank.adjoint(),
            CMatrix::zeros(4, 3),
            CMatrix::from_element(5, 3, c64(1.0, -1.0)),
        ];
        for a in &cases {
            let s = jacobi_svd(a);
            assert!(svd_is_valid(a, &s), "{a}");
            let want = singular_values(a).unwrap();
            for (x, y) in s.sigma.iter().zip(&want) {
                assert!((x - y).abs() <= 1e-12 * want[0].max(1.0));
            }
        }
        assert!(jacobi_svd(&low_rank).sigma[2] < 1e-14);
    }

    #[test]
    fn rank_deficient_product_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random_matrix(&mut rng, 6, 3) * random_matrix(&mut rng, 3, 5);
            let p = pseudoinverse(&a).unwrap();
            assert_eq!(p.rank, 3);
            assert!((&a * &p.matrix * &a - &a).norm() <= 1e-10 * a.norm());
        }
    }

    #[test]
    fn eig_zero_and_nilpotent() {
        let e = eig(&CMatrix::zeros(3, 3)).unwrap();
        assert!(e.eigenvalues.iter().all(|z| z.norm() == 0.0));
        let mut m = CMatrix::zeros(3, 3);
        m[(1, 0)] = c64(1.0, 0.0);
        let e = eig(&m).unwrap();
        assert!(e.eigenvalues.iter().all(|z| z.norm() < 1e-12));
        assert!(!e.distinct);
        assert!(e.max_right_residual(&m) < 1e-12);
    }

    #[test]
    fn thin_svd_rejects_wide() {
        assert!(thin_svd(&CMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn eig_diagonal_order() {
        let w = TAU * 0.13;
        let m = CMatrix::from_diagonal(&DVector::from_vec(vec![expi(w), expi(2.0 * w)]));
        let e = eig(&m).unwrap();
        // Both unit modulus: argument order decides.
        assert!((e.eigenvalues[0] - expi(w)).norm() < 1e-14);
        assert!((e.eigenvalues[1] - expi(2.0 * w)).norm() < 1e-14);
        assert!(e.left_from_inverse);
    }

    #[test]
    fn eig_nilpotent_section() {
        let mut m = CMatrix::zeros(3, 3);
        m[(1, 0)] = c64(1.0, 0.0);
        let e = eig(&m).unwrap();
        for l in &e.eigenvalues {
            assert!(l.norm() < 1e-12);
        }
        assert!(!e.distinct);
        assert!(!e.left_from_inverse);
        assert!(e.max_right_residual(&m) < 1e-12);
    }

    #[test]
    fn eig_companion_roots() {
        let w = TAU * 0.13;
        let (z1, z2) = (expi(w), expi(2.0 * w));
        let mut c = CMatrix::zeros(2, 2);
        c[(1, 0)] = c64(1.0, 0.0);
        c[(0, 1)] = -z1 * z2;
        c[(1, 1)] = z1 + z2;
        let e = eig(&c).unwrap();
        assert!((e.eigenvalues[0] - z1).norm() < 1e-12);
        assert!((e.eigenvalues[1] - z2).norm() < 1e-12);
    }

    #[test]
    fn eig_rejects_nonsquare() {
        assert!(matches!(eig(&CMatrix::zeros(2, 3)), Err(KoopError::Shape(_))));
    }

    #[test]
    fn biorthogonal_left_right() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_matrix(&mut rng, 6, 6);
        let e = eig(&m).unwrap();
        let prod = &e.left * &e.right;
        assert!(max_abs(&(prod - CMatrix::identity(6, 6))) < 1e-9);
        assert!(e.max_left_residual(&m) < 1e-9 * spectral_norm(&m).unwrap());
    }

    #[test]
    fn vandermonde_small_cases() {
        assert_eq!(vandermonde(&[c64(1.0, 0.0)]), CMatrix::from_element(1, 1, c64(1.0, 0.0)));
        let v = vandermonde(&[c64(1.0, 0.0), c64(-1.0, 0.0)]);
        assert_eq!(v[(1, 1)], c64(-1.0, 0.0));
        assert_eq!(v[(0, 1)], c64(1.0, 0.0));
    }

    #[test]
    fn vandermonde_rows_are_left_eigenvectors_of_companion() {
        let w = TAU * 0.13;
        let (z1, z2) = (expi(w), expi(2.0 * w));
        let mut c = CMatrix::zeros(2, 2);
        c[(1, 0)] = c64(1.0, 0.0);
        c[(0, 1)] = -z1 * z2;
        c[(1, 1)] = z1 + z2;
        let v = vandermonde(&[z1, z2]);
        for (i, z) in [z1, z2].into_iter().enumerate() {
            let row = v.row(i);
            assert!((row * &c - row * z).norm() < 1e-12);
        }
    }

    #[test]
    fn condition_cases() {
        assert!((condition_2norm(&CMatrix::identity(3, 3)).unwrap() - 1.0).abs() < 1e-14);
        let d = CMatrix::from_diagonal(&DVector::from_vec(vec![c64(10.0, 0.0), c64(1.0, 0.0)]));
        assert!((condition_2norm(&d).unwrap() - 10.0).abs() < 1e-12);
        // Unit-circle roots: √N times a unitary matrix.
        let n = 8;
        let roots: Vec<C64> = (0..n).map(|k| expi(TAU * k as f64 / n as f64)).collect();
        assert!((condition_2norm(&vandermonde(&roots)).unwrap() - 1.0).abs() < 1e-12);
        let mut sing = CMatrix::zeros(2, 2);
        sing[(0, 0)] = c64(1.0, 0.0);
        assert!(condition_2norm(&sing).unwrap().is_infinite());
    }

    #[test]
    fn canonical_order_breaks_modulus_ties_by_argument() {
        let vals = vec![expi(2.0), c64(0.5, 0.0), expi(0.5), expi(-0.1)];
        let sorted = canonical_sort(&vals);
        assert!((sorted[0] - expi(0.5)).norm() < 1e-15);
        assert!((sorted[1] - expi(2.0)).norm() < 1e-15);
        assert!((sorted[2] - expi(-0.1)).norm() < 1e-15);
        assert_eq!(sorted[3], c64(0.5, 0.0));
    }

    #[test]
    fn non_finite_rejected() {
        let mut a = CMatrix::identity(2, 2);
        a[(1, 0)] = c64(f64::NAN, 0.0);
        assert!(matches!(pseudoinverse(&a), Err(KoopError::NonFinite { row: 1, col: 0 })));
    }
}
