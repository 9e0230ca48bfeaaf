//! Krylov (Hankel-DMD) approximation from a single observable: companion
//! fit, spectrum, residual and pseudospectral bound, residual-decay studies.
//!
//! Residual norms are RMS over the sample rows.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{trajectory, MapSystem};
use crate::error::{KoopError, Result};
use crate::numerics::{
    c64, eig, pseudoinverse, rms, singular_values, vandermonde, vec_norm, CMatrix, EigenResult,
    C64, DEFAULT_RANK_EPS,
};
use crate::observables::{hankel_takens, Observable};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrylovOptions {
    pub rank_eps: f64,
    /// Largest accepted condition of the Gram matrix `F†F`.
    pub gram_limit: f64,
    /// Fit on the leading well-conditioned columns instead of failing.
    pub force: bool,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions {
            rank_eps: DEFAULT_RANK_EPS,
            gram_limit: 1e12,
            force: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompanionModel {
    /// Last-column coefficients `c_1..c_N`.
    pub c: Vec<C64>,
    /// Subdiagonal ones, last column `c`.
    pub matrix: CMatrix,
    /// Samples of `f∘T^N − Σ c_k f∘T^{k−1}`.
    pub residual: Vec<C64>,
    pub residual_norm: f64,
    pub eigen: EigenResult,
    pub vandermonde: CMatrix,
    /// `φ_j(x_l) = (F a_j)_l`.
    pub eigenfunction_samples: CMatrix,
    pub gram_condition: f64,
    /// Number of leading Krylov columns the coefficients were fitted on
    /// (`N` unless forced past a rank or conditioning failure).
    pub fitted_columns: usize,
}

impl CompanionModel {
    pub fn order(&self) -> usize {
        self.c.len()
    }
}

/// `C` with `C[i+1][i] = 1` and last column `c`.
pub fn companion_matrix(c: &[C64]) -> CMatrix {
    let n = c.len();
    let mut m = CMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        m[(i + 1, i)] = c64(1.0, 0.0);
    }
    for (i, &ci) in c.iter().enumerate() {
        m[(i, n - 1)] = ci;
    }
    m
}

/// `m x (N+1)` matrix of `f(T^k x_l)`, `k = 0..=N`, from a scalar series
/// along one trajectory.
pub fn krylov_samples(series: &[C64], rows: usize, n: usize) -> Result<CMatrix> {
    if rows == 0 {
        return Err(KoopError::invalid("need at least one sample row"));
    }
    Ok(hankel_takens(series, rows - 1, n + 1)?.h)
}

struct ColumnStatus {
    rank_ok: bool,
    gram: f64,
}

fn column_status(f: &CMatrix, k: usize, rank_eps: f64) -> Result<ColumnStatus> {
    let s = singular_values(&f.columns(0, k).into_owned())?;
    let smax = s[0];
    let smin = *s.last().unwrap();
    let rank_ok = smax > 0.0 && smin >= rank_eps * smax;
    let gram = if smin > 0.0 {
        (smax / smin).powi(2)
    } else {
        f64::INFINITY
    };
    Ok(ColumnStatus { rank_ok, gram })
}

/// Largest `k` such that the first `k` columns pass `ok`; conditioning grows
/// with `k`, so bisection suffices.
fn leading_good_columns(
    f: &CMatrix,
    ok: impl Fn(&ColumnStatus) -> bool,
    rank_eps: f64,
) -> Result<usize> {
    let (mut lo, mut hi) = (0, f.ncols());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if ok(&column_status(f, mid, rank_eps)?) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(lo)
}

/// Fits `f∘T^N ≈ Σ_k c_k f∘T^{k−1}` by least squares on the sample rows.
pub fn fit_companion(samples: &CMatrix, opts: &KrylovOptions) -> Result<CompanionModel> {
    let (m, cols) = samples.shape();
    if cols < 2 {
        return Err(KoopError::shape("Krylov samples need at least two columns"));
    }
    let n = cols - 1;
    if m < n {
        return Err(KoopError::invalid(format!(
            "{m} sample rows cannot determine {n} coefficients"
        )));
    }
    crate::numerics::check_finite(samples)?;
    let f = samples.columns(0, n).into_owned();
    let target = samples.column(n).into_owned();

    let full = column_status(&f, n, opts.rank_eps)?;
    let mut used = n;
    if !full.rank_ok || full.gram > opts.gram_limit {
        let good_rank = leading_good_columns(&f, |s| s.rank_ok, opts.rank_eps)?;
        if !opts.force {
            if !full.rank_ok {
                let s = singular_values(&f)?;
                return Err(KoopError::RankDeficient {
                    column: good_rank,
                    sigma: if s[0] > 0.0 { s[n - 1] / s[0] } else { 0.0 },
                    threshold: opts.rank_eps,
                });
            }
            return Err(KoopError::IllConditioned {
                condition: full.gram,
                limit: opts.gram_limit,
            });
        }
        used = leading_good_columns(
            &f,
            |s| s.rank_ok && s.gram <= opts.gram_limit,
            opts.rank_eps,
        )?;
        if used == 0 {
            return Err(KoopError::RankDeficient {
                column: 0,
                sigma: 0.0,
                threshold: opts.rank_eps,
            });
        }
        warn!("companion fit forced onto the first {used} of {n} Krylov columns");
    }

    let lead = f.columns(0, used).into_owned();
    let coef = pseudoinverse(&lead)?.matrix * &target;
    let mut c = vec![c64(0.0, 0.0); n];
    c[..used].copy_from_slice(coef.as_slice());

    let fitted = &f * nalgebra::DVector::from_column_slice(&c);
    let residual: Vec<C64> = (&target - fitted).iter().copied().collect();
    let residual_norm = rms(&residual);
    let matrix = companion_matrix(&c);
    let eigen = eig(&matrix)?;
    let vandermonde = vandermonde(&eigen.eigenvalues);
    let eigenfunction_samples = &f * &eigen.right;
    Ok(CompanionModel {
        c,
        matrix,
        residual,
        residual_norm,
        eigen,
        vandermonde,
        eigenfunction_samples,
        gram_condition: if used == n {
            full.gram
        } else {
            column_status(&f, used, opts.rank_eps)?.gram
        },
        fitted_columns: used,
    })
}

/// True when `c = (1, 0, ..., 0)` within `1e-9`, i.e. `C` is the cyclic shift.
pub fn circulant_check(model: &CompanionModel) -> bool {
    model.c.iter().enumerate().all(|(i, &ci)| {
        let want = if i == 0 { c64(1.0, 0.0) } else { c64(0.0, 0.0) };
        (ci - want).norm() <= 1e-9
    })
}

/// `ε_j = |e_N| ‖r‖` for the unit right eigenvector `e` of eigenvalue `j`.
pub fn pseudospectral_bound(model: &CompanionModel, j: usize) -> Result<f64> {
    if j >= model.order() {
        return Err(KoopError::invalid(format!(
            "eigen index {j} out of range for order {}",
            model.order()
        )));
    }
    let e = model.eigen.right.column(j);
    let scale = e.norm();
    let last = e[model.order() - 1].norm() / scale;
    Ok(last * model.residual_norm)
}

pub fn pseudospectral_bounds(model: &CompanionModel) -> Vec<f64> {
    (0..model.order())
        .map(|j| pseudospectral_bound(model, j).expect("index in range"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub n: usize,
    pub residual_norm: f64,
    /// `residual_norm / ‖f‖` with `‖f‖` the RMS of the observable.
    pub relative: f64,
    pub fitted_columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDecay {
    pub points: Vec<DecayPoint>,
    pub f_norm: f64,
    /// Fraction of consecutive schedule entries whose residual decreased.
    pub decreasing_fraction: f64,
}

/// Companion residuals for each `N` in the schedule, all fitted on `m`
/// sample rows of one trajectory started at `x0`.
pub fn residual_decay_study(
    system: &MapSystem,
    f: &Observable,
    x0: &[f64],
    schedule: &[usize],
    m: usize,
    opts: &KrylovOptions,
) -> Result<ResidualDecay> {
    if schedule.is_empty() {
        return Err(KoopError::invalid("empty schedule"));
    }
    if schedule.windows(2).any(|w| w[0] >= w[1]) || schedule[0] == 0 {
        return Err(KoopError::invalid("schedule must be positive and ascending"));
    }
    let max_n = *schedule.last().unwrap();
    if m < max_n + 1 {
        return Err(KoopError::invalid(format!(
            "{m} sample rows are too few for N = {max_n}"
        )));
    }
    f.check_dims(system)?;
    let traj = trajectory(system, x0, m + max_n)?;
    let series = f.series(&traj);
    let f_norm = rms(&series[..m]);
    let mut points = schedule
        .par_iter()
        .map(|&n| {
            let model = fit_companion(&krylov_samples(&series, m, n)?, opts)?;
            Ok(DecayPoint {
                n,
                residual_norm: model.residual_norm,
                relative: if f_norm > 0.0 {
                    model.residual_norm / f_norm
                } else {
                    0.0
                },
                fitted_columns: model.fitted_columns,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by_key(|p| p.n);
    let pairs = points.len().saturating_sub(1);
    let decreasing_fraction = if pairs == 0 {
        0.0
    } else {
        points
            .windows(2)
            .filter(|w| w[1].residual_norm < w[0].residual_norm)
            .count() as f64
            / pairs as f64
    };
    Ok(ResidualDecay {
        points,
        f_norm,
        decreasing_fraction,
    })
}

/// True when every Krylov column lies in the span of the candidate columns,
/// with relative projection error at most `tol`.
pub fn smallest_invariant_span_check(
    samples: &CMatrix,
    candidate: &CMatrix,
    tol: f64,
) -> Result<bool> {
    if samples.nrows() != candidate.nrows() {
        return Err(KoopError::shape(
            "candidate basis must be sampled on the same points",
        ));
    }
    let p = pseudoinverse(candidate)?;
    let proj = candidate * (&p.matrix * samples);
    Ok((0..samples.ncols()).all(|j| {
        let col: Vec<C64> = samples.column(j).iter().copied().collect();
        let diff: Vec<C64> = (samples.column(j) - proj.column(j)).iter().copied().collect();
        vec_norm(&diff) <= tol * vec_norm(&col).max(f64::MIN_POSITIVE)
    }))
}
