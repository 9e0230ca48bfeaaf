//! Finite sections of the Koopman operator on a dictionary: empirical
//! (`F⁺F'`), time-average and analytic constructions, their spectra, modes,
//! reconstructions and the section-error residual.
//!
//! Convention: `F' ≈ F U`, so column `j` of `U` holds the coefficients of
//! `U f_j` in the dictionary.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{trajectory, MapSystem, SystemKind};
use crate::error::{KoopError, Result};
use crate::numerics::{
    c64, eig, expi, pseudoinverse, rms, spectral_norm, CMatrix, EigenResult, C64,
    DEFAULT_RANK_EPS, DEFECTIVE_CONDITION,
};
use crate::observables::{sample_pair, DataMatrixPair, Dictionary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    Analytic,
    Empirical,
    TimeAverage,
}

impl Construction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Construction::Analytic => "analytic",
            Construction::Empirical => "empirical",
            Construction::TimeAverage => "time_average",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FiniteSection {
    pub matrix: CMatrix,
    pub labels: Vec<String>,
    /// Number of sample rows (0 for analytic sections).
    pub sample_count: usize,
    pub construction: Construction,
}

impl FiniteSection {
    pub fn order(&self) -> usize {
        self.matrix.nrows()
    }
}

fn rank_error(singular: &[f64], rank: usize) -> KoopError {
    let smax = singular.first().copied().unwrap_or(0.0);
    let s = singular.get(rank).copied().unwrap_or(0.0);
    KoopError::RankDeficient {
        column: rank,
        sigma: if smax > 0.0 { s / smax } else { 0.0 },
        threshold: DEFAULT_RANK_EPS,
    }
}

/// `U = F⁺ F'`.
///
/// With fewer rows than observables the minimum-norm solution is returned
/// and a warning is logged; otherwise `F` must have full column rank.
pub fn empirical_section(pair: &DataMatrixPair) -> Result<FiniteSection> {
    let (m, n) = pair.f.shape();
    let p = pseudoinverse(&pair.f)?;
    if m < n {
        warn!("finite section from {m} samples for {n} observables is underdetermined");
    } else if p.rank < n {
        return Err(rank_error(&p.singular_values, p.rank));
    }
    Ok(FiniteSection {
        matrix: &p.matrix * &pair.f_prime,
        labels: pair.labels.clone(),
        sample_count: m,
        construction: Construction::Empirical,
    })
}

/// Which sampled dual basis the time-average section uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualChoice {
    /// Rows of `m F⁺`; reproduces `F⁺F'` exactly.
    Sampled,
    /// `ĝ_k = conj(f_k)`, the dual of a dictionary that is orthonormal for
    /// the invariant measure (Fourier modes on a torus).
    Orthonormal,
}

/// `(1/m) Σ_l f_j(x_{l+1}) ĝ_k(x_l)` for the chosen dual.
pub fn time_average_section(pair: &DataMatrixPair, dual: DualChoice) -> Result<FiniteSection> {
    match dual {
        DualChoice::Sampled => {
            let mut s = empirical_section(pair)?;
            s.construction = Construction::TimeAverage;
            Ok(s)
        }
        DualChoice::Orthonormal => {
            let m = pair.rows();
            Ok(FiniteSection {
                matrix: pair.f.adjoint() * &pair.f_prime / c64(m as f64, 0.0),
                labels: pair.labels.clone(),
                sample_count: m,
                construction: Construction::TimeAverage,
            })
        }
    }
}

fn unsupported(system: &MapSystem, why: &str) -> KoopError {
    KoopError::invalid(format!(
        "no analytic section for system `{}`: {why}",
        system.name()
    ))
}

/// Exact sections for rotations (diagonal `e^{i⟨j,ω⟩}`) and the doubling map
/// (`U f_j = f_{2j}`) on Fourier dictionaries.
pub fn analytic_section(system: &MapSystem, dict: &Dictionary) -> Result<FiniteSection> {
    let fourier = dict
        .fourier_indices()
        .ok_or_else(|| unsupported(system, "dictionary is not Fourier"))?;
    dict.check_dims(system)?;
    let n = fourier.len();
    let mut u = CMatrix::zeros(n, n);
    match system.kind() {
        SystemKind::Rotation { .. } | SystemKind::TorusRotation { .. } => {
            let shifts: Vec<f64> = match system.kind() {
                SystemKind::Rotation { omega } => vec![*omega],
                SystemKind::TorusRotation { freqs } => {
                    freqs.iter().map(|f| std::f64::consts::TAU * f).collect()
                }
                _ => unreachable!(),
            };
            for (j, (index, _)) in fourier.iter().enumerate() {
                let phase: f64 = index.iter().zip(&shifts).map(|(&k, &w)| k as f64 * w).sum();
                u[(j, j)] = expi(phase);
            }
        }
        SystemKind::Doubling => {
            if fourier.iter().any(|(_, w)| *w != 1.0) {
                return Err(unsupported(system, "damped Fourier modes"));
            }
            for (j, (index, _)) in fourier.iter().enumerate() {
                let doubled = 2 * index[0];
                if let Some(k) = fourier.iter().position(|(o, _)| o[0] == doubled) {
                    u[(k, j)] = c64(1.0, 0.0);
                }
            }
        }
        SystemKind::RotationContraction { .. } => {
            return Err(unsupported(system, "only rotations and the doubling map"));
        }
    }
    Ok(FiniteSection {
        matrix: u,
        labels: dict.labels(),
        sample_count: 0,
        construction: Construction::Analytic,
    })
}

#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigen: EigenResult,
    /// `φ_j(X) = F a_j`, one column per eigenvalue.
    pub eigenfunction_samples: CMatrix,
    /// Koopman modes (rows of `A⁻¹`); absent when the section is defective.
    pub modes: Option<CMatrix>,
    /// Eigenvalues are repeated or the eigenvector matrix is nearly singular.
    pub jordan_risk: bool,
    /// `‖U a_j − λ_j a_j‖₂`.
    pub eigen_residuals: Vec<f64>,
    /// RMS section-error residual per eigenvector, when samples of `Uf` were
    /// supplied.
    pub section_residuals: Option<Vec<f64>>,
}

impl SpectralDecomposition {
    pub fn eigenvalues(&self) -> &[C64] {
        &self.eigen.eigenvalues
    }
}

pub fn decompose(section: &FiniteSection, f: &CMatrix) -> Result<SpectralDecomposition> {
    let n = section.order();
    if f.ncols() != n {
        return Err(KoopError::shape(format!(
            "F has {} columns, section has order {n}",
            f.ncols()
        )));
    }
    let eigen = eig(&section.matrix)?;
    let jordan_risk = !eigen.distinct || eigen.vector_condition >= DEFECTIVE_CONDITION;
    if jordan_risk {
        warn!(
            "section has repeated or nearly defective eigenvalues (vector condition {:.3e}); modes skipped",
            eigen.vector_condition
        );
    }
    let eigen_residuals = (0..n)
        .map(|j| {
            let a = eigen.right.column(j);
            (&section.matrix * a - a * eigen.eigenvalues[j]).norm()
        })
        .collect();
    Ok(SpectralDecomposition {
        eigenfunction_samples: f * &eigen.right,
        modes: (!jordan_risk).then(|| eigen.left.clone()),
        jordan_risk,
        eigen_residuals,
        section_residuals: None,
        eigen,
    })
}

/// `decompose` on `pair.f`, with section-error residuals from `pair.f_prime`.
pub fn decompose_with_residuals(
    section: &FiniteSection,
    pair: &DataMatrixPair,
) -> Result<SpectralDecomposition> {
    let mut dec = decompose(section, &pair.f)?;
    let defect = projection_defect(pair)?;
    dec.section_residuals = Some(
        (0..section.order())
            .map(|j| {
                let r = &defect * dec.eigen.right.column(j);
                rms(r.as_slice())
            })
            .collect(),
    );
    Ok(dec)
}

/// `F A Λ A⁻¹`.
pub fn reconstruct(f: &CMatrix, dec: &SpectralDecomposition) -> Result<CMatrix> {
    let modes = match (&dec.modes, dec.jordan_risk) {
        (Some(m), false) => m,
        _ => {
            return Err(KoopError::Defective {
                condition: dec.eigen.vector_condition,
            })
        }
    };
    if f.ncols() != dec.eigen.len() {
        return Err(KoopError::shape("F and decomposition orders differ"));
    }
    let lambda = CMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(
        &dec.eigen.eigenvalues,
    ));
    Ok(f * &dec.eigen.right * lambda * modes)
}

/// `F' − F F⁺ F'`: the part of `Uf̃` outside the span of the dictionary.
fn projection_defect(pair: &DataMatrixPair) -> Result<CMatrix> {
    let p = pseudoinverse(&pair.f)?;
    Ok(&pair.f_prime - &pair.f * (&p.matrix * &pair.f_prime))
}

/// Samples of `Σ_j a_j (Uf_j − P Uf_j)` and their RMS norm.
pub fn section_error_residual(pair: &DataMatrixPair, a: &[C64]) -> Result<(Vec<C64>, f64)> {
    if a.len() != pair.order() {
        return Err(KoopError::shape(format!(
            "coefficient vector has length {}, dictionary has {}",
            a.len(),
            pair.order()
        )));
    }
    let defect = projection_defect(pair)?;
    let r = defect * nalgebra::DVector::from_column_slice(a);
    let r: Vec<C64> = r.iter().copied().collect();
    let norm = rms(&r);
    Ok((r, norm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    /// Trajectory length.
    pub m: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub reference: Construction,
    pub estimator: String,
    pub points: Vec<ConvergencePoint>,
    /// Least-squares log-log slope; `None` when every error is at rounding
    /// level.
    pub slope: Option<f64>,
}

/// Errors at or below this are treated as exact.
pub const EXACT_ERROR: f64 = 1e-14;

/// Least-squares slope of `log err` against `log m`.
pub fn loglog_slope(points: &[ConvergencePoint]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.error > EXACT_ERROR)
        .map(|p| ((p.m as f64).ln(), p.error.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Spectral-norm error of sections built from trajectory prefixes of length
/// `m` against a reference section.
///
/// The reference is analytic where available, otherwise an empirical section
/// from a trajectory of length `reference_m` (default `100·max m`). For unit
/// Fourier dictionaries on torus maps the estimator is the time average with
/// the conjugate dual; otherwise it is `F⁺F'`.
pub fn convergence_study(
    system: &MapSystem,
    dict: &Dictionary,
    x0: &[f64],
    schedule: &[usize],
    reference_m: Option<usize>,
) -> Result<ConvergenceStudy> {
    if schedule.len() < 3 {
        return Err(KoopError::invalid(
            "convergence study needs at least three schedule entries",
        ));
    }
    if let Some(&m) = schedule.iter().find(|&&m| m < 2) {
        return Err(KoopError::invalid(format!("schedule entry {m} is below 2")));
    }
    let max_m = *schedule.iter().max().unwrap();

    let (reference, ref_kind) = match analytic_section(system, dict) {
        Ok(s) => (s, Construction::Analytic),
        Err(_) => {
            let rm = reference_m.unwrap_or(100 * max_m);
            if rm <= max_m {
                return Err(KoopError::invalid(
                    "reference length must exceed every schedule entry",
                ));
            }
            let t = trajectory(system, x0, rm)?;
            (empirical_section(&sample_pair(dict, &t)?)?, Construction::Empirical)
        }
    };

    let orthonormal = dict.is_orthonormal_fourier() && system.angle_dims() == system.dim();
    let traj = trajectory(system, x0, max_m)?;
    let mut points = schedule
        .par_iter()
        .map(|&m| {
            let pair = sample_pair(dict, &traj.prefix(m))?;
            let section = if orthonormal {
                time_average_section(&pair, DualChoice::Orthonormal)?
            } else {
                empirical_section(&pair)?
            };
            Ok(ConvergencePoint {
                m,
                error: spectral_norm(&(&section.matrix - &reference.matrix))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by_key(|p| p.m);
    let slope = loglog_slope(&points);
    Ok(ConvergenceStudy {
        reference: ref_kind,
        estimator: if orthonormal {
            "time_average_conjugate_dual".into()
        } else {
            "pseudoinverse".into()
        },
        points,
        slope,
    })
}
