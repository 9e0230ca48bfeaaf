//! Generalized Laplace analysis: weighted Cesàro averages along a trajectory
//! that project onto individual eigenvalues, peeled in modulus order.
//!
//! Eigenvalues are supplied by the caller. The averages only converge to the
//! projections when no other spectrum has modulus at least `|λ_K|`; this
//! cannot be checked from data. With dense point spectrum the averages
//! converge arbitrarily slowly, so restrict the field to a finite resolution.

use rayon::prelude::*;

use crate::error::{KoopError, Result};
use crate::numerics::{c64, CMatrix, C64};

/// Half-width of the band around the unit circle accepted by default.
pub const UNIT_BAND: f64 = 1e-6;

/// Tolerance used when checking the modulus ordering of eigenvalues.
pub const ORDER_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlaOptions {
    /// Accept `|λ| < 1`. The weights `|λ|^{-i}` grow geometrically, so the
    /// averaging length is capped by `n_max`.
    pub allow_decaying: bool,
    pub n_max: usize,
}

impl Default for GlaOptions {
    fn default() -> Self {
        GlaOptions {
            allow_decaying: false,
            n_max: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlaResult {
    pub eigenvalues: Vec<C64>,
    /// `f_k(z)` for each eigenvalue, over the observable index `z`.
    pub components: Vec<Vec<C64>>,
    /// Eigenfunction value at the initial point, normalised to a unit phase
    /// taken from the largest entry of `f_k` (zero when `f_k` vanishes).
    pub eigenfunction_values: Vec<C64>,
    /// `s_k = f_k / φ_k(x)`.
    pub modes: Vec<Vec<C64>>,
    /// `max_z |avg_n − avg_{n/2}|` per eigenvalue.
    pub tails: Vec<f64>,
    pub n: usize,
}

#[derive(Default, Clone, Copy)]
struct Kahan {
    sum: C64,
    comp: C64,
}

impl Kahan {
    fn add(&mut self, x: C64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }
}

fn check_lambda(lambda: C64, n: usize, opts: &GlaOptions) -> Result<()> {
    let r = lambda.norm();
    if !r.is_finite() || r == 0.0 {
        return Err(KoopError::ModulusOutOfBand { modulus: r });
    }
    if (r - 1.0).abs() <= UNIT_BAND {
        return Ok(());
    }
    if r < 1.0 && opts.allow_decaying {
        if n > opts.n_max {
            return Err(KoopError::invalid(format!(
                "averaging length {n} exceeds the cap {} for |λ| = {r}",
                opts.n_max
            )));
        }
        if (n as f64 - 1.0) * -r.ln() > 690.0 {
            return Err(KoopError::invalid(format!(
                "|λ|^-n overflows for |λ| = {r}, n = {n}"
            )));
        }
        return Ok(());
    }
    Err(KoopError::ModulusOutOfBand { modulus: r })
}

/// `λ^{-i}` in polar form, which keeps the phase exact to rounding for any `i`.
fn inv_power(lambda: C64, i: usize) -> C64 {
    let (r, t) = lambda.to_polar();
    let k = i as f64;
    C64::from_polar(r.powf(-k), -t * k)
}

fn lambda_power(lambda: C64, i: usize) -> C64 {
    let (r, t) = lambda.to_polar();
    let k = i as f64;
    C64::from_polar(r.powf(k), t * k)
}

fn average_unchecked(series: impl Iterator<Item = C64>, lambda: C64, n: usize) -> C64 {
    let mut acc = Kahan::default();
    for (i, g) in series.take(n).enumerate() {
        acc.add(inv_power(lambda, i) * g);
    }
    acc.sum / n as f64
}

/// `(1/n) Σ_{i<n} λ^{-i} series[i]`.
pub fn gla_average(series: &[C64], lambda: C64, n: usize) -> Result<C64> {
    gla_average_with(series, lambda, n, &GlaOptions::default())
}

pub fn gla_average_with(series: &[C64], lambda: C64, n: usize, opts: &GlaOptions) -> Result<C64> {
    if n == 0 {
        return Err(KoopError::invalid("averaging length must be at least 1"));
    }
    if series.len() < n {
        return Err(KoopError::invalid(format!(
            "series has {} samples, {n} requested",
            series.len()
        )));
    }
    check_lambda(lambda, n, opts)?;
    Ok(average_unchecked(series.iter().copied(), lambda, n))
}

/// Peels `f_0, f_1, ...` off a field sampled along one trajectory
/// (`field[(i, z)] = f(T^i x, z)`).
pub fn gla_modes(field: &CMatrix, lambdas: &[C64], n: usize) -> Result<GlaResult> {
    gla_modes_with(field, lambdas, n, &GlaOptions::default())
}

pub fn gla_modes_with(
    field: &CMatrix,
    lambdas: &[C64],
    n: usize,
    opts: &GlaOptions,
) -> Result<GlaResult> {
    if lambdas.is_empty() {
        return Err(KoopError::invalid("no eigenvalues supplied"));
    }
    for k in 1..lambdas.len() {
        let (a, b) = (lambdas[k - 1].norm(), lambdas[k].norm());
        if b > a + ORDER_TOL {
            return Err(KoopError::invalid(format!(
                "eigenvalues must have non-increasing modulus: |λ_{k}| = {b} > |λ_{}| = {a}",
                k - 1
            )));
        }
    }
    if n < lambdas.len() {
        return Err(KoopError::invalid(format!(
            "averaging length {n} is shorter than the number of eigenvalues {}",
            lambdas.len()
        )));
    }
    if field.nrows() < n {
        return Err(KoopError::shape(format!(
            "field has {} time samples, {n} requested",
            field.nrows()
        )));
    }
    if field.ncols() == 0 {
        return Err(KoopError::shape("field has no observables"));
    }
    for &l in lambdas {
        check_lambda(l, n, opts)?;
    }
    crate::numerics::check_finite(field)?;

    let mut residual: Vec<Vec<C64>> = (0..field.ncols())
        .map(|z| field.column(z).iter().take(n).copied().collect())
        .collect();
    let half = (n / 2).max(1);
    let mut out = GlaResult {
        eigenvalues: lambdas.to_vec(),
        components: Vec::with_capacity(lambdas.len()),
        eigenfunction_values: Vec::with_capacity(lambdas.len()),
        modes: Vec::with_capacity(lambdas.len()),
        tails: Vec::with_capacity(lambdas.len()),
        n,
    };

    for &lambda in lambdas {
        let powers: Vec<C64> = (0..n).map(|i| lambda_power(lambda, i)).collect();
        let per_column: Vec<(C64, f64)> = residual
            .par_iter_mut()
            .map(|col| {
                let full = average_unchecked(col.iter().copied(), lambda, n);
                let early = average_unchecked(col.iter().copied(), lambda, half);
                for (g, p) in col.iter_mut().zip(&powers) {
                    *g -= p * full;
                }
                (full, (full - early).norm())
            })
            .collect();
        let f: Vec<C64> = per_column.iter().map(|p| p.0).collect();
        let tail = per_column.iter().map(|p| p.1).fold(0.0, f64::max);
        let (phi, s) = split_mode(&f);
        out.components.push(f);
        out.eigenfunction_values.push(phi);
        out.modes.push(s);
        out.tails.push(tail);
    }
    Ok(out)
}

fn split_mode(f: &[C64]) -> (C64, Vec<C64>) {
    let big = f
        .iter()
        .copied()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .unwrap_or_default();
    if big.norm() == 0.0 {
        return (c64(0.0, 0.0), vec![c64(0.0, 0.0); f.len()]);
    }
    let phi = big / big.norm();
    (phi, f.iter().map(|z| z / phi).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::expi;
    use std::f64::consts::TAU;

    const W: f64 = TAU * 0.13;

    #[test]
    fn constant_series() {
        let s = vec![c64(2.5, -1.0); 7];
        let a = gla_average(&s, c64(1.0, 0.0), 7).unwrap();
        assert!((a - c64(2.5, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn resonant_term() {
        let s: Vec<C64> = (0..1000).map(|i| expi(W * i as f64)).collect();
        for n in [1, 2, 17, 1000] {
            let a = gla_average(&s, expi(W), n).unwrap();
            assert!((a - c64(1.0, 0.0)).norm() < 1e-12, "n={n}: {a}");
        }
    }

    #[test]
    fn two_term_geometric_bound() {
        let n = 1000;
        let s: Vec<C64> = (0..n)
            .map(|i| expi(W * i as f64) + expi(2.0 * W * i as f64))
            .collect();
        let a = gla_average(&s, expi(W), n).unwrap();
        let bound = 2.0 / (n as f64 * (c64(1.0, 0.0) - expi(W)).norm());
        assert!((a - c64(1.0, 0.0)).norm() <= bound);
    }

    #[test]
    fn modulus_guard() {
        let s = vec![c64(1.0, 0.0); 10];
        assert!(matches!(
            gla_average(&s, c64(0.5, 0.0), 10),
            Err(KoopError::ModulusOutOfBand { .. })
        ));
        assert!(gla_average(&s, c64(1.0 + 1e-7, 0.0), 10).is_ok());
        assert!(gla_average(&s, c64(1.1, 0.0), 10).is_err());
        assert!(gla_average(&s, c64(1.0, 0.0), 0).is_err());
        assert!(gla_average(&s, c64(1.0, 0.0), 11).is_err());

        let opts = GlaOptions {
            allow_decaying: true,
            n_max: 10,
        };
        let s: Vec<C64> = (0..10).map(|i| c64(0.5f64.powi(i), 0.0) * 3.0).collect();
        let a = gla_average_with(&s, c64(0.5, 0.0), 10, &opts).unwrap();
        assert!((a - c64(3.0, 0.0)).norm() < 1e-12);
        let s = vec![c64(1.0, 0.0); 11];
        assert!(gla_average_with(&s, c64(0.5, 0.0), 11, &opts).is_err());
        // Growing eigenvalues stay rejected even with the override.
        assert!(gla_average_with(&s, c64(1.5, 0.0), 5, &opts).is_err());
    }

    #[test]
    fn single_eigencomponent() {
        let lambda = expi(W);
        let phi = expi(0.7);
        let s = [c64(1.0, 0.0), c64(0.0, 2.0), c64(-0.5, 0.25)];
        let n = 64;
        let field = CMatrix::from_fn(n, 3, |i, z| phi * s[z] * lambda_power(lambda, i));
        let r = gla_modes(&field, &[lambda], n).unwrap();
        for z in 0..3 {
            assert!((r.components[0][z] - phi * s[z]).norm() < 1e-12);
        }
        // The largest entry carries the phase.
        assert!((r.eigenfunction_values[0] - phi * c64(0.0, 1.0)).norm() < 1e-12);
        assert!(r.tails[0] < 1e-12);
    }

    #[test]
    fn constant_field() {
        let field = CMatrix::from_fn(5, 2, |_, z| c64(z as f64 + 1.0, 0.5));
        let r = gla_modes(&field, &[c64(1.0, 0.0)], 5).unwrap();
        for z in 0..2 {
            assert!((r.components[0][z] - field[(0, z)]).norm() < 1e-15);
        }
    }

    fn two_frequency_field(n: usize, theta0: f64, s1: [C64; 2], s2: [C64; 2]) -> CMatrix {
        CMatrix::from_fn(n, 2, |i, z| {
            let t = theta0 + W * i as f64;
            expi(t) * s1[z] + expi(2.0 * t) * s2[z]
        })
    }

    #[test]
    fn two_frequency_recovery_and_peeling() {
        let n = 10_000;
        let (s1, s2) = ([c64(1.0, 0.0), c64(0.3, 0.1)], [c64(0.5, 0.0), c64(-0.2, 0.4)]);
        let t0 = 0.4;
        let field = two_frequency_field(n, t0, s1, s2);
        let lambdas = [expi(W), expi(2.0 * W)];
        let r = gla_modes(&field, &lambdas, n).unwrap();
        let gap = (c64(1.0, 0.0) - expi(W)).norm();
        for z in 0..2 {
            let bound = 2.0 * (s1[z].norm() + s2[z].norm()) / (n as f64 * gap);
            assert!((r.components[0][z] - expi(t0) * s1[z]).norm() <= bound);
            assert!((r.components[1][z] - expi(2.0 * t0) * s2[z]).norm() <= bound);
        }

        // Peeling: the residual after removing f_0 averages to ~0 at λ_0.
        let sup = field.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for z in 0..2 {
            let resid: Vec<C64> = (0..n)
                .map(|i| field[(i, z)] - lambda_power(lambdas[0], i) * r.components[0][z])
                .collect();
            let again = gla_average(&resid, lambdas[0], n).unwrap();
            assert!(again.norm() <= 2.0 * sup / n as f64);
        }
    }

    #[test]
    fn ordering_and_length_checks() {
        let field = CMatrix::from_element(10, 1, c64(1.0, 0.0));
        let bad = [c64(1.0 - 1e-7, 0.0), c64(1.0, 0.0)];
        assert!(gla_modes(&field, &bad, 10).is_err());
        assert!(gla_modes(&field, &[c64(1.0, 0.0), expi(1.0)], 1).is_err());
        assert!(gla_modes(&field, &[], 10).is_err());
        assert!(gla_modes(&field, &[c64(1.0, 0.0)], 11).is_err());
        // Equal moduli within the tolerance are accepted.
        assert!(gla_modes(&field, &[expi(1.0), c64(1.0 + 5e-13, 0.0)], 10).is_ok());
    }

    #[test]
    fn windowed_cesaro_rate() {
        let (s1, s2) = ([c64(1.0, 0.0); 2], [c64(1.0, 0.0); 2]);
        let field = two_frequency_field(6400, 0.0, s1, s2);
        let err = |n: usize| {
            let a = gla_average(&field.column(0).iter().copied().collect::<Vec<_>>(), expi(W), n)
                .unwrap();
            (a - c64(1.0, 0.0)).norm()
        };
        let window = |lo: usize| (lo..2 * lo).map(err).fold(0.0, f64::max);
        for n in [100, 200, 400, 800, 1600] {
            assert!(window(2 * n) <= 0.75 * window(n), "n={n}");
        }
    }
}
