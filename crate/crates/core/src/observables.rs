//! Observable dictionaries, data matrices, Hankel-Takens matrices and
//! sampled dual bases.
//!
//! Orientation is fixed everywhere: rows are sample points, columns are
//! observables.
//!
//! Registry syntax (used by the CLI and stored in run configs):
//!
//! | observable            | meaning                                   |
//! |-----------------------|-------------------------------------------|
//! | `fourier:1_0`         | `e^{i⟨j,θ⟩}`, multi-index joined by `_`   |
//! | `dfourier:0.9:3`      | `0.9^{|j|₁} e^{i⟨j,θ⟩}`                   |
//! | `state:2`             | coordinate `x_2` (1-based)                |
//! | `cauchy:1:0.5`        | `1 / (1 − 0.5 e^{iθ_1})`                  |
//! | `geom:2:1`            | `x_2 / (1 − x_2)`                         |
//! | `a+b`                 | sum of atoms                              |
//!
//! Dictionaries: `fourier:<orders>`, `dfourier:<r>:<orders>` and
//! `delay:<observable>:<n>`. Orders are comma separated multi-indices; a 1-D
//! range `a..b` expands inclusively.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{MapSystem, Trajectory};
use crate::error::{KoopError, Result};
use crate::numerics::{c64, expi, pseudoinverse, CMatrix, C64, DEFAULT_RANK_EPS};

pub type ObsFn = Arc<dyn Fn(&[f64]) -> C64 + Send + Sync>;

#[derive(Clone)]
pub enum Observable {
    /// `weight^{|j|₁} e^{i⟨j,θ⟩}` over the leading angle coordinates.
    Fourier { index: Vec<i64>, weight: f64 },
    /// Coordinate `x_k` (0-based).
    State(usize),
    /// `1 / (1 − r e^{iθ_k})`.
    Cauchy { coord: usize, r: f64 },
    /// `x_k / (1 − r x_k)`.
    Geometric { coord: usize, r: f64 },
    Sum(Vec<Observable>),
    /// `base ∘ T^steps`.
    Delayed {
        base: Box<Observable>,
        steps: usize,
        system: MapSystem,
    },
    Custom { label: String, f: ObsFn },
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn fmt_index(index: &[i64]) -> String {
    index
        .iter()
        .map(|j| j.to_string())
        .collect::<Vec<_>>()
        .join("_")
}

fn parse_index(s: &str) -> Result<Vec<i64>> {
    s.split('_')
        .map(|p| {
            p.trim()
                .parse::<i64>()
                .map_err(|e| KoopError::invalid(format!("bad Fourier index `{s}`: {e}")))
        })
        .collect()
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    let v = s
        .trim()
        .parse::<f64>()
        .map_err(|e| KoopError::invalid(format!("bad {what} `{s}`: {e}")))?;
    if !v.is_finite() {
        return Err(KoopError::invalid(format!("{what} must be finite")));
    }
    Ok(v)
}

fn parse_coord(s: &str) -> Result<usize> {
    let k = s
        .trim()
        .parse::<usize>()
        .map_err(|e| KoopError::invalid(format!("bad coordinate `{s}`: {e}")))?;
    if k == 0 {
        return Err(KoopError::invalid("coordinates are 1-based"));
    }
    Ok(k - 1)
}

impl Observable {
    pub fn fourier(index: Vec<i64>) -> Self {
        Observable::Fourier { index, weight: 1.0 }
    }

    pub fn custom(label: impl Into<String>, f: impl Fn(&[f64]) -> C64 + Send + Sync + 'static) -> Self {
        Observable::Custom {
            label: label.into(),
            f: Arc::new(f),
        }
    }

    /// Parses the registry syntax (atoms joined by `+`).
    pub fn parse(s: &str) -> Result<Observable> {
        let terms: Vec<&str> = s.split('+').map(str::trim).collect();
        if terms.iter().any(|t| t.is_empty()) {
            return Err(KoopError::invalid(format!("empty term in observable `{s}`")));
        }
        let mut atoms = terms
            .into_iter()
            .map(Self::parse_atom)
            .collect::<Result<Vec<_>>>()?;
        Ok(if atoms.len() == 1 {
            atoms.pop().unwrap()
        } else {
            Observable::Sum(atoms)
        })
    }

    fn parse_atom(s: &str) -> Result<Observable> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["fourier", idx] => Ok(Observable::fourier(parse_index(idx)?)),
            ["dfourier", r, idx] => Ok(Observable::Fourier {
                index: parse_index(idx)?,
                weight: parse_f64(r, "weight")?,
            }),
            ["state", k] => Ok(Observable::State(parse_coord(k)?)),
            ["cauchy", k, r] => {
                let r = parse_f64(r, "radius")?;
                if r.abs() >= 1.0 {
                    return Err(KoopError::invalid("cauchy radius must satisfy |r| < 1"));
                }
                Ok(Observable::Cauchy {
                    coord: parse_coord(k)?,
                    r,
                })
            }
            ["geom", k, r] => Ok(Observable::Geometric {
                coord: parse_coord(k)?,
                r: parse_f64(r, "ratio")?,
            }),
            _ => Err(KoopError::invalid(format!("unknown observable `{s}`"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Observable::Fourier { index, weight } if *weight == 1.0 => {
                format!("fourier:{}", fmt_index(index))
            }
            Observable::Fourier { index, weight } => {
                format!("dfourier:{weight}:{}", fmt_index(index))
            }
            Observable::State(k) => format!("state:{}", k + 1),
            Observable::Cauchy { coord, r } => format!("cauchy:{}:{r}", coord + 1),
            Observable::Geometric { coord, r } => format!("geom:{}:{r}", coord + 1),
            Observable::Sum(terms) => terms
                .iter()
                .map(Observable::label)
                .collect::<Vec<_>>()
                .join("+"),
            Observable::Delayed { base, steps, .. } => format!("{}@T{steps}", base.label()),
            Observable::Custom { label, .. } => label.clone(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> C64 {
        match self {
            Observable::Fourier { index, weight } => {
                let phase: f64 = index.iter().zip(x).map(|(&j, &t)| j as f64 * t).sum();
                let z = expi(phase);
                if *weight == 1.0 {
                    z
                } else {
                    let order: i64 = index.iter().map(|j| j.abs()).sum();
                    z * weight.powi(order as i32)
                }
            }
            Observable::State(k) => c64(x[*k], 0.0),
            Observable::Cauchy { coord, r } => c64(1.0, 0.0) / (c64(1.0, 0.0) - expi(x[*coord]) * *r),
            Observable::Geometric { coord, r } => c64(x[*coord] / (1.0 - r * x[*coord]), 0.0),
            Observable::Sum(terms) => terms.iter().map(|t| t.eval(x)).sum(),
            Observable::Delayed {
                base,
                steps,
                system,
            } => base.eval(&system.iterate(x, *steps)),
            Observable::Custom { f, .. } => f(x),
        }
    }

    /// Checks that the observable only touches coordinates the system has.
    pub fn check_dims(&self, system: &MapSystem) -> Result<()> {
        let (dim, angles) = (system.dim(), system.angle_dims());
        let bad = |msg: String| Err(KoopError::shape(format!("{}: {msg}", self.label())));
        match self {
            Observable::Fourier { index, .. } if index.len() > angles => bad(format!(
                "Fourier index has {} components but {} has {} angle coordinate(s)",
                index.len(),
                system.name(),
                angles
            )),
            Observable::Fourier { index, .. } if index.is_empty() => bad("empty Fourier index".into()),
            Observable::State(k) | Observable::Geometric { coord: k, .. } if *k >= dim => {
                bad(format!("coordinate {} out of range", k + 1))
            }
            Observable::Cauchy { coord, .. } if *coord >= angles => {
                bad(format!("coordinate {} is not an angle", coord + 1))
            }
            Observable::Sum(terms) => terms.iter().try_for_each(|t| t.check_dims(system)),
            Observable::Delayed { base, .. } => base.check_dims(system),
            _ => Ok(()),
        }
    }

    /// Samples along a trajectory.
    pub fn series(&self, traj: &Trajectory) -> Vec<C64> {
        traj.points.iter().map(|p| self.eval(p)).collect()
    }
}

/// Ordered, uniquely labelled set of observables.
#[derive(Clone, Debug)]
pub struct Dictionary {
    entries: Vec<(String, Observable)>,
    spec: Option<String>,
}

fn parse_orders(s: &str) -> Result<Vec<Vec<i64>>> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim) {
        if let Some((a, b)) = item.split_once("..") {
            let a: i64 = a
                .trim()
                .parse()
                .map_err(|e| KoopError::invalid(format!("bad range `{item}`: {e}")))?;
            let b: i64 = b
                .trim()
                .parse()
                .map_err(|e| KoopError::invalid(format!("bad range `{item}`: {e}")))?;
            if b < a {
                return Err(KoopError::invalid(format!("empty range `{item}`")));
            }
            out.extend((a..=b).map(|j| vec![j]));
        } else {
            out.push(parse_index(item)?);
        }
    }
    Ok(out)
}

impl Dictionary {
    pub fn new(observables: Vec<Observable>) -> Result<Dictionary> {
        if observables.is_empty() {
            return Err(KoopError::invalid("dictionary must not be empty"));
        }
        let entries: Vec<(String, Observable)> =
            observables.into_iter().map(|o| (o.label(), o)).collect();
        for i in 0..entries.len() {
            for j in (i + 1)..entries.len() {
                if entries[i].0 == entries[j].0 {
                    return Err(KoopError::invalid(format!(
                        "duplicate dictionary entry `{}`",
                        entries[i].0
                    )));
                }
            }
        }
        Ok(Dictionary {
            entries,
            spec: None,
        })
    }

    /// Builds a dictionary from its registry name.
    pub fn from_registry(spec: &str, system: &MapSystem) -> Result<Dictionary> {
        let spec = spec.trim();
        let dict = if let Some(rest) = spec.strip_prefix("fourier:") {
            let orders = parse_orders(rest)?;
            let d = orders.first().map(Vec::len).unwrap_or(0);
            fourier_dictionary(&orders, d)?
        } else if let Some(rest) = spec.strip_prefix("dfourier:") {
            let (r, orders) = rest
                .split_once(':')
                .ok_or_else(|| KoopError::invalid("dfourier needs `dfourier:<r>:<orders>`"))?;
            let weight = parse_f64(r, "weight")?;
            let orders = parse_orders(orders)?;
            let d = orders.first().map(Vec::len).unwrap_or(0);
            let mut dict = fourier_dictionary(&orders, d)?;
            dict = Dictionary::new(
                dict.entries
                    .into_iter()
                    .map(|(_, o)| match o {
                        Observable::Fourier { index, .. } => Observable::Fourier { index, weight },
                        other => other,
                    })
                    .collect(),
            )?;
            dict
        } else if let Some(rest) = spec.strip_prefix("delay:") {
            let (obs, n) = rest
                .rsplit_once(':')
                .ok_or_else(|| KoopError::invalid("delay needs `delay:<observable>:<n>`"))?;
            let n: usize = n
                .trim()
                .parse()
                .map_err(|e| KoopError::invalid(format!("bad delay count `{n}`: {e}")))?;
            delay_dictionary(&Observable::parse(obs)?, n, system)?
        } else {
            return Err(KoopError::invalid(format!("unknown dictionary `{spec}`")));
        };
        dict.check_dims(system)?;
        Ok(Dictionary {
            spec: Some(spec.to_string()),
            ..dict
        })
    }

    pub fn spec(&self) -> Option<&str> {
        self.spec.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.entries.iter().map(|(l, _)| l.clone()).collect()
    }

    pub fn observables(&self) -> impl Iterator<Item = &Observable> {
        self.entries.iter().map(|(_, o)| o)
    }

    pub fn check_dims(&self, system: &MapSystem) -> Result<()> {
        self.observables().try_for_each(|o| o.check_dims(system))
    }

    /// Fourier indices and weights when every entry is a Fourier mode.
    pub fn fourier_indices(&self) -> Option<Vec<(Vec<i64>, f64)>> {
        self.observables()
            .map(|o| match o {
                Observable::Fourier { index, weight } => Some((index.clone(), *weight)),
                _ => None,
            })
            .collect()
    }

    /// True for unit-weight Fourier modes, which are orthonormal for the
    /// Lebesgue measure on the torus.
    pub fn is_orthonormal_fourier(&self) -> bool {
        self.fourier_indices()
            .map(|v| v.iter().all(|(_, w)| *w == 1.0))
            .unwrap_or(false)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<C64> {
        self.observables().map(|o| o.eval(x)).collect()
    }

    /// `m x N` matrix with entry `(l, j) = f_j(x_l)`.
    pub fn sample<P: AsRef<[f64]>>(&self, points: &[P]) -> CMatrix {
        let n = self.len();
        let mut f = CMatrix::zeros(points.len(), n);
        for (l, p) in points.iter().enumerate() {
            for (j, o) in self.observables().enumerate() {
                f[(l, j)] = o.eval(p.as_ref());
            }
        }
        f
    }
}

/// Fourier modes `e^{i⟨j,θ⟩}` for the given multi-indices.
pub fn fourier_dictionary(orders: &[Vec<i64>], dim: usize) -> Result<Dictionary> {
    if orders.is_empty() {
        return Err(KoopError::invalid("Fourier orders must not be empty"));
    }
    if dim == 0 {
        return Err(KoopError::invalid("Fourier dimension must be positive"));
    }
    if let Some(bad) = orders.iter().find(|o| o.len() != dim) {
        return Err(KoopError::shape(format!(
            "multi-index {bad:?} does not have {dim} components"
        )));
    }
    let dict = Dictionary::new(orders.iter().cloned().map(Observable::fourier).collect())
        .map_err(|e| match e {
            KoopError::InvalidInput(msg) => {
                KoopError::InvalidInput(msg.replace("dictionary entry", "multi-index"))
            }
            other => other,
        })?;
    Ok(dict)
}

/// `f, f∘T, ..., f∘T^{n-1}`.
pub fn delay_dictionary(base: &Observable, n: usize, system: &MapSystem) -> Result<Dictionary> {
    if n == 0 {
        return Err(KoopError::invalid("delay count must be positive"));
    }
    base.check_dims(system)?;
    Dictionary::new(
        (0..n)
            .map(|k| Observable::Delayed {
                base: Box::new(base.clone()),
                steps: k,
                system: system.clone(),
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    /// `trajectory` or `points`.
    pub source: String,
    pub system: String,
    pub params: std::collections::BTreeMap<String, f64>,
    pub x0: Vec<f64>,
}

/// Samples `F` at points `X` and `F'` at `T(X)`.
#[derive(Debug, Clone)]
pub struct DataMatrixPair {
    pub f: CMatrix,
    pub f_prime: CMatrix,
    pub labels: Vec<String>,
    pub meta: PairMeta,
}

impl DataMatrixPair {
    /// Builds a pair from raw matrices, checking shapes and finiteness.
    pub fn from_matrices(f: CMatrix, f_prime: CMatrix, labels: Vec<String>) -> Result<Self> {
        if f.shape() != f_prime.shape() {
            return Err(KoopError::shape(format!(
                "F is {:?} but F' is {:?}",
                f.shape(),
                f_prime.shape()
            )));
        }
        if f.nrows() == 0 || f.ncols() == 0 {
            return Err(KoopError::shape("data matrices must be nonempty"));
        }
        if labels.len() != f.ncols() {
            return Err(KoopError::shape("one label per column required"));
        }
        crate::numerics::check_finite(&f)?;
        crate::numerics::check_finite(&f_prime)?;
        Ok(DataMatrixPair {
            f,
            f_prime,
            labels,
            meta: PairMeta {
                source: "points".into(),
                system: "unknown".into(),
                params: Default::default(),
                x0: vec![],
            },
        })
    }

    pub fn rows(&self) -> usize {
        self.f.nrows()
    }

    pub fn order(&self) -> usize {
        self.f.ncols()
    }

    pub fn write_f_csv<W: Write>(&self, w: W) -> Result<()> {
        write_matrix_csv(w, &self.f, &self.labels)
    }

    pub fn write_f_prime_csv<W: Write>(&self, w: W) -> Result<()> {
        write_matrix_csv(w, &self.f_prime, &self.labels)
    }
}

/// Header `row,<label>_re,<label>_im,...`.
pub fn write_matrix_csv<W: Write>(w: W, m: &CMatrix, labels: &[String]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["row".to_string()];
    for l in labels {
        header.push(format!("{l}_re"));
        header.push(format!("{l}_im"));
    }
    wtr.write_record(&header)?;
    for i in 0..m.nrows() {
        let mut rec = vec![i.to_string()];
        for j in 0..m.ncols() {
            rec.push(format!("{:.16e}", m[(i, j)].re));
            rec.push(format!("{:.16e}", m[(i, j)].im));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// `F` on `x_1..x_{m-1}`, `F'` on `x_2..x_m`.
pub fn sample_pair(dict: &Dictionary, traj: &Trajectory) -> Result<DataMatrixPair> {
    if traj.len() < 2 {
        return Err(KoopError::invalid(format!(
            "trajectory of length {} is too short for a data-matrix pair",
            traj.len()
        )));
    }
    dict.check_dims(&traj.system)?;
    let all = dict.sample(&traj.points);
    let m = traj.len() - 1;
    Ok(DataMatrixPair {
        f: all.rows(0, m).into_owned(),
        f_prime: all.rows(1, m).into_owned(),
        labels: dict.labels(),
        meta: PairMeta {
            source: "trajectory".into(),
            system: traj.system.name().into(),
            params: traj.system.param_map(),
            x0: traj.x0.clone(),
        },
    })
}

/// Pair on an arbitrary point cloud, with `F'` evaluated at `T(x)`.
pub fn sample_pair_points(
    dict: &Dictionary,
    system: &MapSystem,
    points: &[Vec<f64>],
) -> Result<DataMatrixPair> {
    if points.is_empty() {
        return Err(KoopError::invalid("no sample points"));
    }
    dict.check_dims(system)?;
    let points = points
        .iter()
        .map(|p| system.normalize(p))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<Vec<f64>> = points.iter().map(|p| system.step(p)).collect();
    Ok(DataMatrixPair {
        f: dict.sample(&points),
        f_prime: dict.sample(&images),
        labels: dict.labels(),
        meta: PairMeta {
            source: "points".into(),
            system: system.name().into(),
            params: system.param_map(),
            x0: vec![],
        },
    })
}

/// Hankel matrix of a scalar series along one trajectory.
#[derive(Debug, Clone)]
pub struct HankelTakens {
    pub h: CMatrix,
}

/// `H[i][j] = series[i + j]` for `i = 0..=m`, `j = 0..n`.
pub fn hankel_takens(series: &[C64], m: usize, n: usize) -> Result<HankelTakens> {
    if n == 0 {
        return Err(KoopError::invalid("Hankel matrix needs at least one column"));
    }
    if series.len() < m + n {
        return Err(KoopError::invalid(format!(
            "series of length {} is too short for a {}x{} Hankel matrix",
            series.len(),
            m + 1,
            n
        )));
    }
    Ok(HankelTakens {
        h: CMatrix::from_fn(m + 1, n, |i, j| series[i + j]),
    })
}

/// Sampled dual basis: rows `ĝ_k(x_l)` of `(F†F)⁻¹F†`.
pub fn dual_basis_samples(f: &CMatrix) -> Result<CMatrix> {
    dual_basis_samples_with(f, DEFAULT_RANK_EPS)
}

pub fn dual_basis_samples_with(f: &CMatrix, rank_eps: f64) -> Result<CMatrix> {
    let p = pseudoinverse(f)?;
    let n = f.ncols();
    let smax = p.singular_values.first().copied().unwrap_or(0.0);
    if p.singular_values.len() < n {
        return Err(KoopError::RankDeficient {
            column: p.singular_values.len(),
            sigma: 0.0,
            threshold: rank_eps,
        });
    }
    if let Some((k, &s)) = p
        .singular_values
        .iter()
        .enumerate()
        .find(|(_, &s)| smax == 0.0 || s < rank_eps * smax)
    {
        return Err(KoopError::RankDeficient {
            column: k,
            sigma: if smax > 0.0 { s / smax } else { 0.0 },
            threshold: rank_eps,
        });
    }
    Ok(p.matrix)
}
