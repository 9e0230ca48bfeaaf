//! Sample-space view: regression generators acting on sample points, the
//! minimum-norm coefficient solve, and weak eigenfunctionals along
//! trajectories.
//!
//! Inputs use the library orientation (rows are points, columns are
//! observables). The formulas here are stated for the transposed layout
//! `Φ = Fᵀ` (observables by points), and the functions transpose
//! internally.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{trajectory, MapSystem, Trajectory};
use crate::error::{KoopError, Result};
use crate::gla::{gla_average_with, GlaOptions};
use crate::numerics::{
    c64, expi, pseudoinverse, vec_norm, C64Json, CMatrix, C64, DEFAULT_RANK_EPS,
};
use crate::observables::Dictionary;

#[derive(Debug, Clone)]
pub struct CmpSolution {
    /// One coefficient per sample point.
    pub c: Vec<C64>,
    pub residual_norm: f64,
    pub rank: usize,
}

/// Minimum-norm least-squares solution of `Fᵀ c = target`, where `F` is
/// `points x observables` and `target` has one entry per observable.
pub fn c_mp_solve(f: &CMatrix, target: &[C64]) -> Result<CmpSolution> {
    if target.len() != f.ncols() {
        return Err(KoopError::shape(format!(
            "target has {} entries, F has {} observables",
            target.len(),
            f.ncols()
        )));
    }
    let phi = f.transpose();
    let p = pseudoinverse(&phi)?;
    let full = phi.nrows().min(phi.ncols());
    if p.rank < full {
        let smax = p.singular_values[0];
        return Err(KoopError::RankDeficient {
            column: p.rank,
            sigma: if smax > 0.0 {
                p.singular_values[p.rank] / smax
            } else {
                0.0
            },
            threshold: DEFAULT_RANK_EPS,
        });
    }
    let t = nalgebra::DVector::from_column_slice(target);
    let c = &p.matrix * &t;
    let residual_norm = (&phi * &c - t).norm();
    Ok(CmpSolution {
        c: c.iter().copied().collect(),
        residual_norm,
        rank: p.rank,
    })
}

#[derive(Debug, Clone)]
pub struct RegressionGenerator {
    /// `C = Bᵀ`, `m x m`, acting on sample points.
    pub c: CMatrix,
    /// `B = argmin ‖Φ' − Φ B‖_F`, the transfer on the transposed layout.
    pub transfer: CMatrix,
    /// `Φ` has full column rank, so the minimiser is unique.
    pub unique: bool,
    pub residual_fro: f64,
}

/// Minimiser of `‖f(Tx) − f(x) B‖_F` over `m x m` matrices `B`; minimum norm
/// when not unique.
pub fn regression_generator(x: &CMatrix, tx: &CMatrix) -> Result<RegressionGenerator> {
    if x.shape() != tx.shape() {
        return Err(KoopError::shape(format!(
            "sample matrices differ in shape: {:?} vs {:?}",
            x.shape(),
            tx.shape()
        )));
    }
    let phi = x.transpose();
    let phi_t = tx.transpose();
    let p = pseudoinverse(&phi)?;
    let m = phi.ncols();
    let unique = p.rank == m;
    if !unique {
        warn!(
            "regression generator is not unique: rank {} < {m} sample points",
            p.rank
        );
    }
    let b = &p.matrix * &phi_t;
    let residual_fro = (&phi_t - &phi * &b).norm();
    Ok(RegressionGenerator {
        c: b.transpose(),
        transfer: b,
        unique,
        residual_fro,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPoint {
    pub m: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityStudy {
    pub points: Vec<DensityPoint>,
    pub decreasing_fraction: f64,
}

/// Worst one-step prediction error `max |f_j(T x_l) − (f(x) B)_{j,l}|` of the
/// regression generator fitted on the first `m` trajectory points.
pub fn density_error_estimate(
    system: &MapSystem,
    dict: &Dictionary,
    x0: &[f64],
    schedule: &[usize],
) -> Result<DensityStudy> {
    if schedule.is_empty() || schedule.windows(2).any(|w| w[0] >= w[1]) || schedule[0] == 0 {
        return Err(KoopError::invalid("schedule must be positive and ascending"));
    }
    dict.check_dims(system)?;
    let max_m = *schedule.last().unwrap();
    let traj = trajectory(system, x0, max_m + 1)?;
    let all = dict.sample(&traj.points);
    let points = schedule
        .par_iter()
        .map(|&m| {
            let x = all.rows(0, m).into_owned();
            let tx = all.rows(1, m).into_owned();
            let g = regression_generator(&x, &tx)?;
            let pred = x.transpose() * &g.transfer;
            let err = (tx.transpose() - pred)
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max);
            Ok(DensityPoint { m, error: err })
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs = points.len().saturating_sub(1);
    let decreasing_fraction = if pairs == 0 {
        0.0
    } else {
        points.windows(2).filter(|w| w[1].error < w[0].error).count() as f64 / pairs as f64
    };
    Ok(DensityStudy {
        points,
        decreasing_fraction,
    })
}

/// Unit-circle band accepted for weak eigenvalues.
pub const WEAK_BAND: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakEntry {
    pub h: String,
    pub k: usize,
    /// `L_K(h) = (1/K) Σ_{k=1..K} h(x_k) ẽ(x_k)`.
    pub value: C64Json,
    /// `(1/K) Σ h(x_k) ẽ(x_{k+1})`.
    pub shifted: C64Json,
    /// `L_K(h∘T)`.
    pub pullback: C64Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakFunctional {
    pub lambda: C64Json,
    pub entries: Vec<WeakEntry>,
    /// `max_h |UL_K(h) − λ L_K(h)|` at the largest `K`.
    pub defect: f64,
    /// `max_h |λ L_K(h∘T) − L_K(h)|` at the largest `K`.
    pub pullback_defect: f64,
    /// `2 ‖h‖_∞ ‖ẽ‖_∞ / K` at the largest `K`, sup over the samples used.
    pub bound: f64,
    /// `max |L_K(h) − gla_average(h, 1/λ, K)|` over all entries.
    pub gla_discrepancy: f64,
}

/// Weak eigenfunctional averages along a trajectory with weights
/// `ẽ(x_k) = λ^{k−1}`.
pub fn weak_functional(
    traj: &Trajectory,
    lambda: C64,
    h_set: &Dictionary,
    schedule: &[usize],
) -> Result<WeakFunctional> {
    let r = lambda.norm();
    if !r.is_finite() || (r - 1.0).abs() > WEAK_BAND {
        return Err(KoopError::ModulusOutOfBand { modulus: r });
    }
    if schedule.is_empty() || schedule.contains(&0) {
        return Err(KoopError::invalid("K schedule must be nonempty and positive"));
    }
    let max_k = *schedule.iter().max().unwrap();
    if traj.len() < max_k + 1 {
        return Err(KoopError::invalid(format!(
            "trajectory of length {} is too short for K = {max_k}",
            traj.len()
        )));
    }
    h_set.check_dims(&traj.system)?;

    let (rho, theta) = lambda.to_polar();
    let weights: Vec<C64> = (0..=max_k)
        .map(|k| expi(theta * k as f64) * rho.powf(k as f64))
        .collect();
    let h_samples = h_set.sample(&traj.points[..=max_k]);
    let inv = c64(1.0, 0.0) / lambda;
    let gla_opts = GlaOptions {
        allow_decaying: true,
        n_max: usize::MAX,
    };

    let mut entries = Vec::new();
    let mut defect = 0.0_f64;
    let mut pullback_defect = 0.0_f64;
    let mut gla_discrepancy = 0.0_f64;
    let mut h_sup = 0.0_f64;
    let labels = h_set.labels();
    for (j, label) in labels.iter().enumerate() {
        let h: Vec<C64> = h_samples.column(j).iter().copied().collect();
        h_sup = h_sup.max(h[..max_k].iter().map(|z| z.norm()).fold(0.0, f64::max));
        let mut ks: Vec<usize> = schedule.to_vec();
        ks.sort_unstable();
        ks.dedup();
        for &k in &ks {
            let kf = k as f64;
            let mut value = c64(0.0, 0.0);
            let mut shifted = c64(0.0, 0.0);
            let mut pullback = c64(0.0, 0.0);
            for i in 0..k {
                value += h[i] * weights[i];
                shifted += h[i] * weights[i + 1];
                pullback += h[i + 1] * weights[i];
            }
            value /= kf;
            shifted /= kf;
            pullback /= kf;
            let via_gla = gla_average_with(&h, inv, k, &gla_opts)?;
            gla_discrepancy = gla_discrepancy.max((via_gla - value).norm());
            if k == max_k {
                defect = defect.max((shifted - lambda * value).norm());
                pullback_defect = pullback_defect.max((lambda * pullback - value).norm());
            }
            entries.push(WeakEntry {
                h: label.clone(),
                k,
                value: value.into(),
                shifted: shifted.into(),
                pullback: pullback.into(),
            });
        }
    }
    let e_sup = weights[..=max_k].iter().map(|z| z.norm()).fold(0.0, f64::max);
    let h_sup_all = (0..labels.len())
        .flat_map(|j| h_samples.column(j).iter().map(|z| z.norm()).collect::<Vec<_>>())
        .fold(h_sup, f64::max);
    Ok(WeakFunctional {
        lambda: lambda.into(),
        entries,
        defect,
        pullback_defect,
        bound: 2.0 * h_sup_all * e_sup / max_k as f64,
        gla_discrepancy,
    })
}

/// Norm of a coefficient vector, for comparing least-squares solutions.
pub fn coefficient_norm(c: &[C64]) -> f64 {
    vec_norm(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::max_abs;
    use crate::observables::{fourier_dictionary, Observable};
    use rand::{Rng, SeedableRng};
    use std::f64::consts::TAU;

    const W: f64 = TAU * 0.13;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> CMatrix {
        CMatrix::from_fn(rows, cols, |_, _| {
            c64(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0))
        })
    }

    #[test]
    fn c_mp_square_and_consistent() {
        let mut r = rng(3);
        let f = random(&mut r, 4, 4);
        let c0: Vec<C64> = (0..4).map(|i| c64(i as f64, 1.0)).collect();
        let target: Vec<C64> = (f.transpose() * nalgebra::DVector::from_vec(c0.clone()))
            .iter()
            .copied()
            .collect();
        let s = c_mp_solve(&f, &target).unwrap();
        assert!(s.residual_norm < 1e-12);
        for (a, b) in s.c.iter().zip(&c0) {
            assert!((a - b).norm() < 1e-10);
        }

        // Overdetermined (more observables than points), consistent.
        let f = random(&mut r, 3, 7);
        let c0 = nalgebra::DVector::from_vec(vec![c64(1.0, 0.0), c64(0.0, -2.0), c64(0.5, 0.5)]);
        let target: Vec<C64> = (f.transpose() * &c0).iter().copied().collect();
        let s = c_mp_solve(&f, &target).unwrap();
        for (a, b) in s.c.iter().zip(c0.iter()) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn c_mp_matches_normal_equations() {
        let mut r = rng(5);
        let f = random(&mut r, 4, 9);
        let target: Vec<C64> = (0..9).map(|_| c64(r.gen_range(-1.0..1.0), 0.3)).collect();
        let s = c_mp_solve(&f, &target).unwrap();
        let phi = f.transpose();
        let normal = (phi.adjoint() * &phi)
            .try_inverse()
            .unwrap()
            * phi.adjoint()
            * nalgebra::DVector::from_vec(target);
        for (a, b) in s.c.iter().zip(normal.iter()) {
            assert!((a - b).norm() < 1e-10);
        }
        assert!(c_mp_solve(&f, &[c64(1.0, 0.0)]).is_err());
        let rank1 = CMatrix::from_element(3, 2, c64(1.0, 0.0));
        assert!(c_mp_solve(&rank1, &[c64(1.0, 0.0); 2]).is_err());
    }

    #[test]
    fn c_mp_minimum_norm() {
        let mut r = rng(9);
        let f = random(&mut r, 6, 3);
        let target = vec![c64(1.0, 0.0), c64(-1.0, 0.5), c64(0.0, 2.0)];
        let s = c_mp_solve(&f, &target).unwrap();
        let phi = f.transpose();
        // Projector onto the null space of Φ.
        let p = pseudoinverse(&phi).unwrap().matrix;
        let null = CMatrix::identity(6, 6) - &p * &phi;
        for _ in 0..10 {
            let z = random(&mut r, 6, 1);
            let c = nalgebra::DVector::from_vec(s.c.clone()) + (&null * z).column(0);
            assert!((&phi * &c - nalgebra::DVector::from_vec(target.clone())).norm() < 1e-10);
            assert!(coefficient_norm(&s.c) <= c.norm() + 1e-12);
        }
    }

    #[test]
    fn periodic_orbit_gives_cyclic_permutation() {
        let m = 5;
        let sys = MapSystem::rotation(TAU / m as f64);
        let t = trajectory(&sys, &[0.2], m + 1).unwrap();
        let orders: Vec<Vec<i64>> = (0..m as i64).map(|k| vec![k]).collect();
        let d = fourier_dictionary(&orders, 1).unwrap();
        let all = d.sample(&t.points);
        let g = regression_generator(&all.rows(0, m).into_owned(), &all.rows(1, m).into_owned())
            .unwrap();
        assert!(g.unique);
        for i in 0..m {
            for j in 0..m {
                let want = if j == (i + 1) % m { 1.0 } else { 0.0 };
                assert!((g.c[(i, j)] - c64(want, 0.0)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn identity_generator() {
        let mut r = rng(1);
        let x = random(&mut r, 4, 6);
        let g = regression_generator(&x, &x).unwrap();
        assert!(max_abs(&(g.c - CMatrix::identity(4, 4))) < 1e-10);
    }

    #[test]
    fn generator_is_minimiser() {
        let m = 8;
        let t = trajectory(&MapSystem::rotation(W), &[0.3], m + 1).unwrap();
        let orders: Vec<Vec<i64>> = (-8..8).map(|k| vec![k]).collect();
        let d = fourier_dictionary(&orders, 1).unwrap();
        let all = d.sample(&t.points);
        let (x, tx) = (all.rows(0, m).into_owned(), all.rows(1, m).into_owned());
        let g = regression_generator(&x, &tx).unwrap();
        let mut r = rng(21);
        for _ in 0..100 {
            let b = &g.transfer + random(&mut r, m, m) * c64(0.1, 0.0);
            let other = (tx.transpose() - x.transpose() * b).norm();
            assert!(g.residual_fro <= other + 1e-12);
        }
    }

    #[test]
    fn density_study_cases() {
        let m = 6;
        let sys = MapSystem::rotation(TAU / m as f64);
        let orders: Vec<Vec<i64>> = (0..m as i64).map(|k| vec![k]).collect();
        let d = fourier_dictionary(&orders, 1).unwrap();
        let st = density_error_estimate(&sys, &d, &[0.1], &[m]).unwrap();
        assert!(st.points[0].error < 1e-10);

        let golden = MapSystem::rotation(TAU * (5f64.sqrt() - 1.0) / 2.0);
        let d = Dictionary::from_registry("dfourier:0.8:-128..128", &golden).unwrap();
        let st = density_error_estimate(&golden, &d, &[0.3], &[16, 64, 256]).unwrap();
        assert_eq!(st.decreasing_fraction, 1.0, "{:?}", st.points);
        assert!(density_error_estimate(&golden, &d, &[0.3], &[64, 16]).is_err());
    }

    fn traj(omega: f64, len: usize) -> Trajectory {
        trajectory(&MapSystem::rotation(omega), &[0.3], len).unwrap()
    }

    #[test]
    fn weak_constant() {
        let d = Dictionary::new(vec![Observable::custom("c", |_| c64(2.0, 1.0))]).unwrap();
        let w = weak_functional(&traj(W, 11), c64(1.0, 0.0), &d, &[10]).unwrap();
        assert_eq!(C64::from(w.entries[0].value), c64(2.0, 1.0));
        assert_eq!(w.defect, 0.0);
    }

    #[test]
    fn weak_rotation_examples() {
        let lambda = expi(W);
        let d = fourier_dictionary(&[vec![-1], vec![1]], 1).unwrap();
        let ks = [100, 1000, 10_000];
        let w = weak_functional(&traj(W, 10_001), lambda, &d, &ks).unwrap();
        let gap = (c64(1.0, 0.0) - expi(2.0 * W)).norm();
        for e in &w.entries {
            let v = C64::from(e.value);
            let k = e.k as f64;
            if e.h == "fourier:-1" {
                assert!((v - expi(-0.3)).norm() <= 2.0 / (k * gap));
            } else {
                assert!(v.norm() <= 2.0 / (k * gap));
            }
        }
        assert!(w.defect <= w.bound);
        assert!(w.pullback_defect <= w.bound);
        assert!(w.gla_discrepancy < 1e-10);
    }

    #[test]
    fn weak_guards() {
        let d = fourier_dictionary(&[vec![1]], 1).unwrap();
        assert!(weak_functional(&traj(W, 20), c64(0.9, 0.0), &d, &[10]).is_err());
        assert!(weak_functional(&traj(W, 10), c64(1.0, 0.0), &d, &[10]).is_err());
        assert!(weak_functional(&traj(W, 20), c64(1.0, 0.0), &d, &[]).is_err());
    }
}
