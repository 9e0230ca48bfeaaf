//! SVD-based DMD: the reduced operator `G†F'VΣ⁻¹` from a thin SVD of `F`,
//! and a check of its similarity to `F⁺F'`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{KoopError, Result};
use crate::finite_section::empirical_section;
use crate::numerics::{c64, canonical_sort, eig, thin_svd, CMatrix, EigenResult, C64};
use crate::observables::DataMatrixPair;

pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct SvdDmdResult {
    /// `N_r x N_r`.
    pub reduced: CMatrix,
    pub rank: usize,
    pub eigen: EigenResult,
    /// `G a_j`, one column per eigenvalue.
    pub eigenfunction_samples: CMatrix,
    pub kept: Vec<f64>,
    pub dropped: Vec<f64>,
    /// `V Σ⁻¹` restricted to the kept singular values (`N x N_r`).
    pub lift: CMatrix,
}

impl SvdDmdResult {
    pub fn truncated(&self) -> bool {
        !self.dropped.is_empty()
    }

    /// `V Σ⁻¹ a_j`: coefficients of eigenfunction `j` in the dictionary.
    pub fn dictionary_vector(&self, j: usize) -> Vec<C64> {
        (&self.lift * self.eigen.right.column(j)).iter().copied().collect()
    }
}

pub fn svd_dmd(pair: &DataMatrixPair, rank_tol: f64) -> Result<SvdDmdResult> {
    if !(rank_tol > 0.0 && rank_tol < 1.0) {
        return Err(KoopError::invalid(format!(
            "rank tolerance {rank_tol} must lie in (0, 1)"
        )));
    }
    let svd = thin_svd(&pair.f)?;
    let smax = svd.sigma.first().copied().unwrap_or(0.0);
    let rank = svd
        .sigma
        .iter()
        .take_while(|&&s| s > 0.0 && s >= rank_tol * smax)
        .count();
    if rank == 0 {
        return Err(KoopError::RankDeficient {
            column: 0,
            sigma: 0.0,
            threshold: rank_tol,
        });
    }
    if rank < svd.sigma.len() {
        warn!(
            "SVD-DMD truncated from {} to {rank} singular values; similarity to F⁺F' no longer exact",
            svd.sigma.len()
        );
    }
    let g = svd.g.columns(0, rank).into_owned();
    let lift = CMatrix::from_fn(svd.v.nrows(), rank, |i, j| svd.v[(i, j)] / svd.sigma[j]);
    let reduced = g.adjoint() * &pair.f_prime * &lift;
    let eigen = eig(&reduced)?;
    Ok(SvdDmdResult {
        eigenfunction_samples: &g * &eigen.right,
        reduced,
        rank,
        eigen,
        kept: svd.sigma[..rank].to_vec(),
        dropped: svd.sigma[rank..].to_vec(),
        lift,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityStatus {
    Similar,
    /// Singular values were dropped; the two spectra need not agree.
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub status: SimilarityStatus,
    pub rank: usize,
    pub order: usize,
    /// Largest distance between canonically sorted spectra.
    pub max_eigenvalue_distance: Option<f64>,
    /// Largest `‖U w − λ w‖ / ‖w‖` for `w = V Σ⁻¹ a_j` and `U = F⁺F'`.
    pub max_vector_residual: Option<f64>,
    /// Largest `‖G a_j − F w_j‖`.
    pub max_sample_mismatch: Option<f64>,
}

/// Compares the SVD-DMD operator with `F⁺F'`.
pub fn similarity_check(pair: &DataMatrixPair, rank_tol: f64) -> Result<SimilarityReport> {
    let dmd = svd_dmd(pair, rank_tol)?;
    let order = pair.order();
    if dmd.truncated() {
        return Ok(SimilarityReport {
            status: SimilarityStatus::Truncated,
            rank: dmd.rank,
            order,
            max_eigenvalue_distance: None,
            max_vector_residual: None,
            max_sample_mismatch: None,
        });
    }
    let section = empirical_section(pair)?;
    let a = canonical_sort(&dmd.eigen.eigenvalues);
    let b = canonical_sort(&eig(&section.matrix)?.eigenvalues);
    let dist = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max);

    let mut vec_res = 0.0_f64;
    let mut mismatch = 0.0_f64;
    for j in 0..dmd.rank {
        let w = nalgebra::DVector::from_vec(dmd.dictionary_vector(j));
        let lambda = dmd.eigen.eigenvalues[j];
        let r = (&section.matrix * &w - &w * lambda).norm() / w.norm().max(f64::MIN_POSITIVE);
        vec_res = vec_res.max(r);
        let diff = dmd.eigenfunction_samples.column(j) - &pair.f * &w;
        mismatch = mismatch.max(diff.norm());
    }
    Ok(SimilarityReport {
        status: SimilarityStatus::Similar,
        rank: dmd.rank,
        order,
        max_eigenvalue_distance: Some(dist),
        max_vector_residual: Some(vec_res),
        max_sample_mismatch: Some(mismatch),
    })
}

/// Random complex `rows x cols` pair with entries uniform in the unit square.
pub fn random_pair(rows: usize, cols: usize, seed: u64) -> Result<DataMatrixPair> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r: usize, c: usize| {
        CMatrix::from_fn(r, c, |_, _| {
            c64(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    };
    let f = draw(rows, cols);
    let fp = draw(rows, cols);
    DataMatrixPair::from_matrices(f, fp, (0..cols).map(|j| format!("g{}", j + 1)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{trajectory, MapSystem};
    use crate::numerics::expi;
    use crate::observables::{fourier_dictionary, sample_pair};
    use std::f64::consts::TAU;

    const W: f64 = TAU * 0.13;

    fn rotation_pair(m: usize) -> DataMatrixPair {
        let t = trajectory(&MapSystem::rotation(W), &[0.3], m).unwrap();
        let d = fourier_dictionary(&[vec![1], vec![2], vec![3]], 1).unwrap();
        sample_pair(&d, &t).unwrap()
    }

    #[test]
    fn rotation_spectrum() {
        let r = svd_dmd(&rotation_pair(500), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(r.rank, 3);
        for l in [expi(W), expi(2.0 * W), expi(3.0 * W)] {
            assert!(r.eigen.eigenvalues.iter().any(|z| (z - l).norm() < 1e-8));
        }
        let rep = similarity_check(&rotation_pair(500), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(rep.status, SimilarityStatus::Similar);
        assert!(rep.max_eigenvalue_distance.unwrap() <= 1e-9);
    }

    #[test]
    fn orthonormal_columns() {
        let m = 6;
        let f = CMatrix::from_fn(m, 2, |l, j| expi(TAU * (l * (j + 1)) as f64 / m as f64));
        let fp = CMatrix::from_fn(m, 2, |l, j| expi(TAU * ((l + 1) * (j + 1)) as f64 / m as f64));
        let pair = DataMatrixPair::from_matrices(f, fp, vec!["a".into(), "b".into()]).unwrap();
        let r = svd_dmd(&pair, DEFAULT_RANK_TOL).unwrap();
        let s = empirical_section(&pair).unwrap();
        let a = canonical_sort(&r.eigen.eigenvalues);
        let b = canonical_sort(&eig(&s.matrix).unwrap().eigenvalues);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn repeated_column_truncates() {
        let t = trajectory(&MapSystem::rotation(W), &[0.3], 30).unwrap();
        let col: Vec<C64> = t.points.iter().map(|p| expi(p[0]) + 0.5).collect();
        let f = CMatrix::from_fn(29, 2, |l, _| col[l]);
        let fp = CMatrix::from_fn(29, 2, |l, _| col[l + 1]);
        let pair = DataMatrixPair::from_matrices(f, fp, vec!["a".into(), "b".into()]).unwrap();
        let r = svd_dmd(&pair, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(r.rank, 1);
        let x = pair.f.column(0);
        let y = pair.f_prime.column(0);
        let rayleigh = x.dotc(&y) / x.dotc(&x);
        assert!((r.eigen.eigenvalues[0] - rayleigh).norm() < 1e-12);
        let rep = similarity_check(&pair, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(rep.status, SimilarityStatus::Truncated);
        assert!(rep.max_eigenvalue_distance.is_none());
    }

    #[test]
    fn tolerance_and_zero_matrix() {
        let pair = rotation_pair(10);
        assert!(svd_dmd(&pair, 0.0).is_err());
        assert!(svd_dmd(&pair, 1.0).is_err());
        let z = DataMatrixPair::from_matrices(
            CMatrix::zeros(4, 1),
            CMatrix::zeros(4, 1),
            vec!["z".into()],
        )
        .unwrap();
        assert!(matches!(svd_dmd(&z, 1e-10), Err(KoopError::RankDeficient { .. })));
    }

    #[test]
    fn scalar_case() {
        let f = CMatrix::from_fn(5, 1, |l, _| c64(1.0 + l as f64, 0.5));
        let fp = CMatrix::from_fn(5, 1, |l, _| c64(0.0, 2.0) * c64(1.0 + l as f64, 0.5));
        let pair = DataMatrixPair::from_matrices(f, fp, vec!["x".into()]).unwrap();
        let r = svd_dmd(&pair, DEFAULT_RANK_TOL).unwrap();
        let s = empirical_section(&pair).unwrap();
        assert!((r.eigen.eigenvalues[0] - s.matrix[(0, 0)]).norm() < 1e-14);
        assert!((r.eigen.eigenvalues[0] - c64(0.0, 2.0)).norm() < 1e-14);
    }

    #[test]
    fn random_pairs_are_similar() {
        for seed in 0..5 {
            let pair = random_pair(50, 4, seed).unwrap();
            let rep = similarity_check(&pair, DEFAULT_RANK_TOL).unwrap();
            assert!(rep.max_eigenvalue_distance.unwrap() <= 1e-9);
            assert!(rep.max_vector_residual.unwrap() <= 1e-8);
            assert!(rep.max_sample_mismatch.unwrap() <= 1e-9);
        }
    }
}
