//! Discrete-time maps and trajectory generation.
//!
//! Angle coordinates live in `[0, 2π)` and are reduced after every step.
//! Built-in systems are assumed to have well-defined time averages along
//! generic trajectories; nothing here checks that.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KoopError, Result};

/// Parameters accepted by [`make_system`]. Unused fields are ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Rotation angle per step, radians.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    /// Torus frequencies in cycles per step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freqs: Option<Vec<f64>>,
    /// Contraction factor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SystemKind {
    /// `θ' = θ + ω mod 2π`
    Rotation { omega: f64 },
    /// `θ' = 2θ mod 2π`
    Doubling,
    /// `θ'_i = θ_i + 2π ω_i mod 2π`
    TorusRotation { freqs: Vec<f64> },
    /// `(θ, x)' = (θ + ω mod 2π, μ x)`
    RotationContraction { omega: f64, mu: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSystem {
    kind: SystemKind,
}

pub const SYSTEM_NAMES: [&str; 4] = [
    "rotation",
    "doubling",
    "torus_rotation",
    "rotation_contraction",
];

fn require(p: Option<f64>, what: &str, system: &str) -> Result<f64> {
    let v = p.ok_or_else(|| KoopError::invalid(format!("{system} needs parameter `{what}`")))?;
    if !v.is_finite() {
        return Err(KoopError::invalid(format!("`{what}` must be finite")));
    }
    Ok(v)
}

pub fn make_system(name: &str, params: &SystemParams) -> Result<MapSystem> {
    let kind = match name {
        "rotation" => SystemKind::Rotation {
            omega: require(params.omega, "omega", name)?,
        },
        "doubling" => SystemKind::Doubling,
        "torus_rotation" => {
            let freqs = params
                .freqs
                .clone()
                .ok_or_else(|| KoopError::invalid("torus_rotation needs `freqs`"))?;
            if freqs.is_empty() {
                return Err(KoopError::shape("torus_rotation needs at least one frequency"));
            }
            if freqs.iter().any(|f| !f.is_finite()) {
                return Err(KoopError::invalid("torus frequencies must be finite"));
            }
            SystemKind::TorusRotation { freqs }
        }
        "rotation_contraction" => {
            let omega = require(params.omega, "omega", name)?;
            let mu = require(params.mu, "mu", name)?;
            if mu.abs() >= 1.0 {
                return Err(KoopError::invalid(format!(
                    "contraction factor must satisfy |mu| < 1, got {mu}"
                )));
            }
            SystemKind::RotationContraction { omega, mu }
        }
        other => {
            return Err(KoopError::invalid(format!(
                "unknown system `{other}` (expected one of {})",
                SYSTEM_NAMES.join(", ")
            )))
        }
    };
    Ok(MapSystem { kind })
}

#[inline]
pub(crate) fn wrap_angle(t: f64) -> f64 {
    let r = t.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

impl MapSystem {
    pub fn rotation(omega: f64) -> Self {
        MapSystem {
            kind: SystemKind::Rotation { omega },
        }
    }

    pub fn doubling() -> Self {
        MapSystem {
            kind: SystemKind::Doubling,
        }
    }

    pub fn kind(&self) -> &SystemKind {
        &self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            SystemKind::Rotation { .. } => "rotation",
            SystemKind::Doubling => "doubling",
            SystemKind::TorusRotation { .. } => "torus_rotation",
            SystemKind::RotationContraction { .. } => "rotation_contraction",
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            SystemKind::Rotation { .. } | SystemKind::Doubling => 1,
            SystemKind::TorusRotation { freqs } => freqs.len(),
            SystemKind::RotationContraction { .. } => 2,
        }
    }

    /// Number of leading coordinates that are angles.
    pub fn angle_dims(&self) -> usize {
        match &self.kind {
            SystemKind::RotationContraction { .. } => 1,
            _ => self.dim(),
        }
    }

    pub fn params(&self) -> SystemParams {
        match &self.kind {
            SystemKind::Rotation { omega } => SystemParams {
                omega: Some(*omega),
                ..Default::default()
            },
            SystemKind::Doubling => SystemParams::default(),
            SystemKind::TorusRotation { freqs } => SystemParams {
                freqs: Some(freqs.clone()),
                ..Default::default()
            },
            SystemKind::RotationContraction { omega, mu } => SystemParams {
                omega: Some(*omega),
                mu: Some(*mu),
                ..Default::default()
            },
        }
    }

    /// Named real parameters, for metadata.
    pub fn param_map(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        match &self.kind {
            SystemKind::Rotation { omega } => {
                m.insert("omega".into(), *omega);
            }
            SystemKind::Doubling => {}
            SystemKind::TorusRotation { freqs } => {
                for (i, f) in freqs.iter().enumerate() {
                    m.insert(format!("freq{}", i + 1), *f);
                }
            }
            SystemKind::RotationContraction { omega, mu } => {
                m.insert("omega".into(), *omega);
                m.insert("mu".into(), *mu);
            }
        }
        m
    }

    /// Maps a state into the canonical representation (angles reduced).
    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(KoopError::shape(format!(
                "{} has state dimension {}, got {}",
                self.name(),
                self.dim(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(KoopError::invalid("state must be finite"));
        }
        let k = self.angle_dims();
        Ok(x
            .iter()
            .enumerate()
            .map(|(i, &v)| if i < k { wrap_angle(v) } else { v })
            .collect())
    }

    /// One application of the map. `x` must already have the right dimension.
    pub fn step(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            SystemKind::Rotation { omega } => vec![wrap_angle(x[0] + omega)],
            SystemKind::Doubling => vec![wrap_angle(2.0 * x[0])],
            SystemKind::TorusRotation { freqs } => x
                .iter()
                .zip(freqs)
                .map(|(t, f)| wrap_angle(t + TAU * f))
                .collect(),
            SystemKind::RotationContraction { omega, mu } => {
                vec![wrap_angle(x[0] + omega), mu * x[1]]
            }
        }
    }

    /// `T^k x`.
    pub fn iterate(&self, x: &[f64], k: usize) -> Vec<f64> {
        let mut y = x.to_vec();
        for _ in 0..k {
            y = self.step(&y);
        }
        y
    }

    /// Reproducible surrogate for "almost every initial condition".
    ///
    /// Angles are uniform on `[0, 2π)`; the contracting coordinate is uniform
    /// on `[0.5, 1.5)`.
    pub fn generic_initial_state(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.angle_dims();
        (0..self.dim())
            .map(|i| {
                if i < k {
                    rng.gen_range(0.0..TAU)
                } else {
                    rng.gen_range(0.5..1.5)
                }
            })
            .collect()
    }

    /// Default seed for the doubling map, `2π/√2`.
    pub fn default_doubling_seed() -> f64 {
        TAU / std::f64::consts::SQRT_2
    }
}

/// Angles that are dyadic multiples of `2π` reach the fixed point `0`
/// under doubling.
pub fn is_degenerate_doubling_seed(theta: f64) -> bool {
    let x = theta / TAU * (1u64 << 40) as f64;
    x.fract() == 0.0
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub points: Vec<Vec<f64>>,
    pub system: MapSystem,
    pub x0: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    /// Component `i` of every point.
    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.points.iter().map(|p| p[i]).collect()
    }

    /// First `m` points as a new trajectory.
    pub fn prefix(&self, m: usize) -> Trajectory {
        Trajectory {
            points: self.points[..m.min(self.len())].to_vec(),
            system: self.system.clone(),
            x0: self.x0.clone(),
        }
    }

    /// CSV with header `k,x1,...,xd`; values printed with 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["k".to_string()];
        header.extend((1..=self.dim()).map(|i| format!("x{i}")));
        wtr.write_record(&header)?;
        for (k, p) in self.points.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(p.iter().map(|v| format!("{v:.16e}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`Trajectory::write_csv`]. The points are taken
    /// as given; `system` is attached as metadata.
    pub fn read_csv<R: Read>(r: R, system: &MapSystem) -> Result<Trajectory> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let d = system.dim();
        if headers.len() != d + 1 || &headers[0] != "k" {
            return Err(KoopError::invalid(format!(
                "trajectory header must be `k,x1..x{d}`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut points = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let p = rec
                .iter()
                .skip(1)
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| KoopError::invalid(format!("bad number `{s}`: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(KoopError::invalid("trajectory contains non-finite values"));
            }
            points.push(p);
        }
        if points.is_empty() {
            return Err(KoopError::invalid("trajectory file has no rows"));
        }
        Ok(Trajectory {
            x0: points[0].clone(),
            points,
            system: system.clone(),
        })
    }
}

/// `m` points `x0, T x0, ..., T^{m-1} x0`.
pub fn trajectory(system: &MapSystem, x0: &[f64], m: usize) -> Result<Trajectory> {
    if m == 0 {
        return Err(KoopError::invalid("trajectory length must be at least 1"));
    }
    let x0 = system.normalize(x0)?;
    if matches!(system.kind(), SystemKind::Doubling) && is_degenerate_doubling_seed(x0[0]) {
        log::warn!(
            "doubling-map seed {} is a dyadic multiple of 2π; the orbit collapses to 0",
            x0[0]
        );
    }
    let mut points = Vec::with_capacity(m);
    points.push(x0.clone());
    for k in 1..m {
        let next = system.step(&points[k - 1]);
        points.push(next);
    }
    Ok(Trajectory {
        points,
        system: system.clone(),
        x0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn rot(omega: f64) -> MapSystem {
        make_system(
            "rotation",
            &SystemParams {
                omega: Some(omega),
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_rotation_is_identity() {
        let s = rot(0.0);
        assert_eq!(s.step(&[1.234]), vec![1.234]);
    }

    #[test]
    fn doubling_arithmetic() {
        let s = make_system("doubling", &SystemParams::default()).unwrap();
        let y = s.step(&[std::f64::consts::PI / 3.0]);
        assert!((y[0] - 2.0 * std::f64::consts::PI / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rotation_steps_match_direct_arithmetic() {
        let w = TAU * 0.13;
        let t = trajectory(&rot(w), &[0.0], 4).unwrap();
        for (k, p) in t.points.iter().enumerate() {
            let expect = (k as f64 * w).rem_euclid(TAU);
            assert!((p[0] - expect).abs() < 1e-14, "step {k}");
        }
        assert!((t.points[1][0] - 0.8168140899333463).abs() < 1e-15);
    }

    #[test]
    fn single_point_trajectory() {
        let t = trajectory(&rot(0.3), &[0.7], 1).unwrap();
        assert_eq!(t.points, vec![vec![0.7]]);
    }

    #[test]
    fn rational_rotation_is_periodic() {
        let t = trajectory(&rot(TAU / 5.0), &[0.0], 6).unwrap();
        let d = (t.points[5][0] - t.points[0][0]).rem_euclid(TAU);
        assert!(d.min(TAU - d) < 1e-12);
    }

    #[test]
    fn contraction_component_halves() {
        let s = make_system(
            "rotation_contraction",
            &SystemParams {
                omega: Some(TAU * 0.13),
                mu: Some(0.5),
                ..Default::default()
            },
        )
        .unwrap();
        let t = trajectory(&s, &[0.0, 1.0], 4).unwrap();
        assert_eq!(t.coordinate(1), vec![1.0, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn torus_rotation_uses_cycles() {
        let s = make_system(
            "torus_rotation",
            &SystemParams {
                freqs: Some(vec![0.25, 0.5]),
                ..Default::default()
            },
        )
        .unwrap();
        let y = s.step(&[0.0, 0.0]);
        assert!((y[0] - TAU * 0.25).abs() < 1e-15);
        assert!((y[1] - TAU * 0.5).abs() < 1e-15);
    }

    #[test]
    fn construction_errors() {
        assert!(make_system("henon", &SystemParams::default()).is_err());
        let bad_mu = SystemParams {
            omega: Some(0.1),
            mu: Some(1.0),
            ..Default::default()
        };
        assert!(make_system("rotation_contraction", &bad_mu).is_err());
        assert!(make_system("rotation", &SystemParams::default()).is_err());
        assert!(trajectory(&rot(0.1), &[0.0, 1.0], 3).is_err());
        assert!(trajectory(&rot(0.1), &[0.0], 0).is_err());
    }

    #[test]
    fn doubling_time_average_is_small() {
        let s = MapSystem::doubling();
        let t = trajectory(&s, &[MapSystem::default_doubling_seed()], 100_000).unwrap();
        let avg: Complex64 = t
            .points
            .iter()
            .map(|p| Complex64::from_polar(1.0, p[0]))
            .sum::<Complex64>()
            / 100_000.0;
        assert!(avg.norm() <= 0.05);
    }

    #[test]
    fn degenerate_doubling_seed_detected() {
        assert!(is_degenerate_doubling_seed(0.0));
        assert!(is_degenerate_doubling_seed(TAU * 0.375));
        assert!(!is_degenerate_doubling_seed(MapSystem::default_doubling_seed()));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let t = trajectory(&rot(TAU * 0.13), &[0.1], 20).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("k,x1\n0,"));
        let back = Trajectory::read_csv(&buf[..], &t.system).unwrap();
        assert_eq!(back.points, t.points);
    }

    #[test]
    fn generic_seed_is_reproducible() {
        let s = rot(0.3);
        assert_eq!(s.generic_initial_state(42), s.generic_initial_state(42));
        assert_ne!(s.generic_initial_state(42), s.generic_initial_state(43));
    }
}
