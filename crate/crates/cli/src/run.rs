use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use koop_core::dynamics::{trajectory, MapSystem, SystemKind, Trajectory};
use koop_core::finite_section::{
    analytic_section, convergence_study, decompose_with_residuals, empirical_section,
    section_error_residual, Construction,
};
use koop_core::gla::{gla_modes_with, GlaOptions};
use koop_core::krylov::{
    circulant_check, fit_companion, krylov_samples, pseudospectral_bounds, residual_decay_study,
    KrylovOptions,
};
use koop_core::numerics::{to_json, CMatrix, C64Json};
use koop_core::observables::{sample_pair, Dictionary, Observable};
use koop_core::svd_dmd::{similarity_check, svd_dmd};
use koop_core::weak_eig::weak_functional;
use log::info;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::CliError;

const DEFAULT_DICT: &str = "fourier:1,2,3";
const DEFAULT_OBSERVABLE: &str = "fourier:1+fourier:2";

/// Below this modulus an eigenvalue of a measure-preserving system's
/// section cannot approximate the (unitary) operator's spectrum.
const FAILURE_MODULUS: f64 = 0.5;

pub fn dispatch(cfg: &RunConfig) -> Result<(), CliError> {
    match cfg.command.as_str() {
        "generate" => generate(cfg),
        "edmd" => emit(cfg, edmd(cfg)?),
        "svd" => emit(cfg, svd(cfg)?),
        "hankel" => emit(cfg, hankel(cfg)?),
        "gla" => emit(cfg, gla(cfg)?),
        "weak" => emit(cfg, weak(cfg)?),
        "convergence" => emit(cfg, convergence(cfg)?),
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

fn write_sidecar(cfg: &RunConfig) -> Result<(), CliError> {
    if let Some(out) = &cfg.out {
        let path = RunConfig::sidecar_path(out);
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, cfg)?;
        writeln!(f)?;
        f.flush()?;
    }
    Ok(())
}

fn emit(cfg: &RunConfig, value: Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(&value)?;
    match &cfg.out {
        Some(path) => {
            std::fs::write(path, format!("{text}\n"))?;
            write_sidecar(cfg)?;
        }
        None => match writeln!(std::io::stdout().lock(), "{text}") {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
            other => other?,
        },
    }
    Ok(())
}

fn write_plot_data(path: &Path, header: &str, rows: &[(f64, f64)]) -> Result<(), CliError> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "# {header}")?;
    for (x, y) in rows {
        writeln!(f, "{x:.17e} {y:.17e}")?;
    }
    f.flush()?;
    Ok(())
}

fn plot_eigenvalues(cfg: &RunConfig, values: &[koop_core::C64]) -> Result<(), CliError> {
    if let Some(p) = &cfg.emit_plot_data {
        let rows: Vec<(f64, f64)> = values.iter().map(|z| (z.re, z.im)).collect();
        write_plot_data(p, "re im", &rows)?;
    }
    Ok(())
}

fn load_trajectory(
    cfg: &RunConfig,
    system: &MapSystem,
    default_steps: usize,
) -> Result<Trajectory, CliError> {
    Ok(match &cfg.input {
        Some(path) => Trajectory::read_csv(File::open(path)?, system)?,
        None => trajectory(system, &cfg.initial_state(system), cfg.steps_or(default_steps))?,
    })
}

fn header(cfg: &RunConfig, system: &MapSystem, traj: Option<&Trajectory>) -> Value {
    json!({
        "command": cfg.command,
        "system": system.name(),
        "params": system.param_map(),
        "seed": cfg.seed,
        "x0": traj.map(|t| t.x0.clone()),
    })
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Some(b), Value::Object(e)) = (base.as_object_mut(), extra) {
        b.extend(e);
    }
    base
}

fn has_default_omega(system: &MapSystem) -> bool {
    matches!(system.kind(), SystemKind::Rotation { omega } if (omega - TAU * 0.13).abs() < 1e-12)
}

fn matrix_rows(m: &CMatrix) -> Vec<Vec<C64Json>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|&z| z.into()).collect())
        .collect()
}

fn measure_preserving(system: &MapSystem) -> bool {
    !matches!(system.kind(), SystemKind::RotationContraction { .. })
}

fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let system = cfg.system()?;
    let traj = load_trajectory(cfg, &system, 1000)?;
    match &cfg.out {
        Some(path) => {
            traj.write_csv(BufWriter::new(File::create(path)?))?;
            write_sidecar(cfg)?;
        }
        None => traj.write_csv(std::io::stdout().lock())?,
    }
    info!("wrote {} states", traj.len());
    Ok(())
}

fn edmd(cfg: &RunConfig) -> Result<Value, CliError> {
    let system = cfg.system()?;
    let spec = cfg.dict.as_deref().unwrap_or(DEFAULT_DICT);
    let dict = Dictionary::from_registry(spec, &system)?;
    let traj = load_trajectory(cfg, &system, 500)?;
    let pair = sample_pair(&dict, &traj)?;
    let section = if cfg.analytic {
        analytic_section(&system, &dict)?
    } else {
        empirical_section(&pair)?
    };
    let dec = decompose_with_residuals(&section, &pair)?;
    plot_eigenvalues(cfg, dec.eigenvalues())?;

    let collapsed = measure_preserving(&system)
        && dec
            .eigenvalues()
            .iter()
            .any(|z| z.norm() < FAILURE_MODULUS);
    let notice = collapsed.then(|| {
        "finite-section failure: the section has eigenvalues far inside the unit circle \
         although the operator is an isometry; the dictionary is not invariant"
            .to_string()
    });
    let worked_example = spec == DEFAULT_DICT
        && (has_default_omega(&system) || matches!(system.kind(), SystemKind::Doubling));
    Ok(merge(
        header(cfg, &system, Some(&traj)),
        json!({
            "construction": section.construction.as_str(),
            "labels": section.labels,
            "m": pair.rows(),
            "N": section.order(),
            "eigenvalues": to_json(dec.eigenvalues()),
            "modes": dec.modes.as_ref().map(matrix_rows),
            "jordan_risk": dec.jordan_risk,
            "vector_condition": finite_or_null(dec.eigen.vector_condition),
            "residual_norms": dec.section_residuals,
            "section": matrix_rows(&section.matrix),
            "notice": notice,
            "paper_example": worked_example,
        }),
    ))
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn svd(cfg: &RunConfig) -> Result<Value, CliError> {
    let system = cfg.system()?;
    let spec = cfg.dict.as_deref().unwrap_or(DEFAULT_DICT);
    let dict = Dictionary::from_registry(spec, &system)?;
    let traj = load_trajectory(cfg, &system, 500)?;
    let pair = sample_pair(&dict, &traj)?;
    let dmd = svd_dmd(&pair, cfg.rank_tol)?;
    let report = similarity_check(&pair, cfg.rank_tol)?;
    let residuals = (0..dmd.rank)
        .map(|j| section_error_residual(&pair, &dmd.dictionary_vector(j)).map(|r| r.1))
        .collect::<Result<Vec<_>, _>>()?;
    plot_eigenvalues(cfg, &dmd.eigen.eigenvalues)?;
    let modes = (dmd.eigen.distinct && dmd.eigen.left_from_inverse).then(|| matrix_rows(&dmd.eigen.left));
    Ok(merge(
        header(cfg, &system, Some(&traj)),
        json!({
            "construction": "svd_dmd",
            "labels": pair.labels,
            "m": pair.rows(),
            "N": pair.order(),
            "rank": dmd.rank,
            "singular_values_kept": dmd.kept,
            "singular_values_dropped": dmd.dropped,
            "eigenvalues": to_json(&dmd.eigen.eigenvalues),
            "modes": modes,
            "residual_norms": residuals,
            "similarity": report,
            "paper_example": spec == DEFAULT_DICT && has_default_omega(&system),
        }),
    ))
}

fn hankel(cfg: &RunConfig) -> Result<Value, CliError> {
    let system = cfg.system()?;
    let spec = cfg.observable.as_deref().unwrap_or(DEFAULT_OBSERVABLE);
    let obs = Observable::parse(spec)?;
    obs.check_dims(&system)?;
    let n = cfg.delays.unwrap_or(2);
    if n == 0 {
        return Err(CliError::Usage("--delays must be positive".into()));
    }
    let traj = load_trajectory(cfg, &system, 200)?;
    if traj.len() < 2 * n + 1 {
        return Err(CliError::Usage(format!(
            "trajectory of length {} is too short for {n} delays",
            traj.len()
        )));
    }
    let rows = traj.len() - n;
    let series = obs.series(&traj);
    let samples = krylov_samples(&series, rows, n)?;
    let opts = KrylovOptions {
        force: cfg.force,
        ..Default::default()
    };
    let model = fit_companion(&samples, &opts)?;
    plot_eigenvalues(cfg, &model.eigen.eigenvalues)?;
    Ok(merge(
        header(cfg, &system, Some(&traj)),
        json!({
            "observable": obs.label(),
            "m": rows,
            "N": n,
            "c": to_json(&model.c),
            "eigenvalues": to_json(&model.eigen.eigenvalues),
            "residual_norm": model.residual_norm,
            "pseudo_eps": pseudospectral_bounds(&model),
            "circulant": circulant_check(&model),
            "fitted_columns": model.fitted_columns,
            "gram_condition": finite_or_null(model.gram_condition),
            "paper_example": spec == DEFAULT_OBSERVABLE && n == 2 && has_default_omega(&system),
        }),
    ))
}

fn gla(cfg: &RunConfig) -> Result<Value, CliError> {
    let system = cfg.system()?;
    let dict = match (&cfg.dict, &cfg.observable) {
        (Some(d), _) => Dictionary::from_registry(d, &system)?,
        (None, o) => {
            let obs = Observable::parse(o.as_deref().unwrap_or(DEFAULT_OBSERVABLE))?;
            obs.check_dims(&system)?;
            Dictionary::new(vec![obs])?
        }
    };
    let lambdas = cfg.lambdas(&system)?;
    let traj = load_trajectory(cfg, &system, 10_000)?;
    let field = dict.sample(&traj.points);
    let opts = GlaOptions {
        allow_decaying: cfg.allow_decaying,
        ..Default::default()
    };
    let res = gla_modes_with(&field, &lambdas, traj.len(), &opts)?;
    if let Some(p) = &cfg.emit_plot_data {
        let rows: Vec<(f64, f64)> = res
            .eigenvalues
            .iter()
            .zip(&res.tails)
            .map(|(l, t)| (l.arg(), *t))
            .collect();
        write_plot_data(p, "arg(lambda) tail", &rows)?;
    }
    let results: Vec<Value> = (0..res.eigenvalues.len())
        .map(|k| {
            json!({
                "lambda": C64Json::from(res.eigenvalues[k]),
                "mode": to_json(&res.components[k]),
                "phi": C64Json::from(res.eigenfunction_values[k]),
                "shape": to_json(&res.modes[k]),
                "tail": res.tails[k],
            })
        })
        .collect();
    let two_freq = lambdas.len() == 2
        && (lambdas[0] - koop_core::numerics::expi(TAU * 0.13)).norm() < 1e-12
        && (lambdas[1] - koop_core::numerics::expi(TAU * 0.26)).norm() < 1e-12;
    Ok(merge(
        header(cfg, &system, Some(&traj)),
        json!({
            "labels": dict.labels(),
            "n": res.n,
            "results": results,
            "paper_example": has_default_omega(&system)
                && cfg.observable.as_deref().unwrap_or(DEFAULT_OBSERVABLE) == DEFAULT_OBSERVABLE
                && cfg.dict.is_none()
                && two_freq,
        }),
    ))
}

fn weak(cfg: &RunConfig) -> Result<Value, CliError> {
    let system = cfg.system()?;
    let dict = Dictionary::from_registry(cfg.dict.as_deref().unwrap_or("fourier:-1,1"), &system)?;
    let lambdas = cfg.lambdas(&system)?;
    let [lambda] = lambdas.as_slice() else {
        return Err(CliError::Usage("weak takes exactly one eigenvalue".into()));
    };
    let schedule = cfg.schedule.clone().unwrap_or_else(|| vec![100, 1000, 10_000]);
    let max_k = schedule.iter().copied().max().unwrap_or(0);
    let traj = load_trajectory(cfg, &system, max_k + 1)?;
    let w = weak_functional(&traj, *lambda, &dict, &schedule)?;
    if let Some(p) = &cfg.emit_plot_data {
        let rows: Vec<(f64, f64)> = w
            .entries
            .iter()
            .map(|e| (e.k as f64, koop_core::C64::from(e.value).norm()))
            .collect();
        write_plot_data(p, "K |L_K(h)|", &rows)?;
    }
    let l: Vec<Value> = w
        .entries
        .iter()
        .map(|e| json!({"h": e.h, "K": e.k, "value": e.value}))
        .collect();
    Ok(merge(
        header(cfg, &system, Some(&traj)),
        json!({
            "lambda": w.lambda,
            "L": l,
            "defect": w.defect,
            "pullback_defect": w.pullback_defect,
            "bound": w.bound,
            "gla_discrepancy": w.gla_discrepancy,
            "paper_example": has_default_omega(&system),
        }),
    ))
}

fn write_study_csv(cfg: &RunConfig, header: &str, rows: &[(usize, f64)]) -> Result<(), CliError> {
    if let Some(out) = &cfg.out {
        let path = out.with_extension("csv");
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "{header}")?;
        for (x, y) in rows {
            writeln!(f, "{x},{y:.17e}")?;
        }
        f.flush()?;
    }
    if let Some(p) = &cfg.emit_plot_data {
        let rows: Vec<(f64, f64)> = rows.iter().map(|&(x, y)| (x as f64, y)).collect();
        write_plot_data(p, header, &rows)?;
    }
    Ok(())
}

fn window_pass(cfg: &RunConfig, slope: Option<f64>) -> Value {
    match (cfg.slope_window, slope) {
        (Some([lo, hi]), Some(s)) => json!(lo <= s && s <= hi),
        _ => Value::Null,
    }
}

fn convergence(cfg: &RunConfig) -> Result<Value, CliError> {
    let system = cfg.system()?;
    let x0 = cfg.initial_state(&system);
    match cfg.study.as_deref().unwrap_or("edmd") {
        "edmd" => {
            let spec = cfg.dict.as_deref().unwrap_or(DEFAULT_DICT);
            let dict = Dictionary::from_registry(spec, &system)?;
            let schedule = cfg.schedule.clone().unwrap_or_else(|| match system.kind() {
                SystemKind::Doubling => vec![1_000, 10_000, 100_000],
                _ => vec![100, 1_000, 10_000],
            });
            let st = convergence_study(&system, &dict, &x0, &schedule, cfg.reference_m)?;
            let rows: Vec<(usize, f64)> = st.points.iter().map(|p| (p.m, p.error)).collect();
            write_study_csv(cfg, "m,error", &rows)?;
            let worked_example = spec == DEFAULT_DICT
                && (has_default_omega(&system) || matches!(system.kind(), SystemKind::Doubling));
            Ok(merge(
                header(cfg, &system, None),
                json!({
                    "x0": x0,
                    "study": "edmd",
                    "reference": match st.reference {
                        Construction::Analytic => "analytic",
                        _ => "empirical",
                    },
                    "estimator": st.estimator,
                    "points": st.points,
                    "slope": st.slope,
                    "slope_note": st.slope.is_none().then_some("not applicable: errors at rounding level"),
                    "pass": window_pass(cfg, st.slope),
                    "paper_example": worked_example,
                }),
            ))
        }
        "krylov" => {
            let default_obs = match system.kind() {
                SystemKind::RotationContraction { .. } => "cauchy:1:0.5+geom:2:1",
                _ => "fourier:1",
            };
            let obs = Observable::parse(cfg.observable.as_deref().unwrap_or(default_obs))?;
            let schedule = cfg.schedule.clone().unwrap_or_else(|| vec![4, 8, 16, 32, 64]);
            let opts = KrylovOptions {
                force: true,
                ..Default::default()
            };
            let m = cfg.steps_or(2000);
            let st = residual_decay_study(&system, &obs, &x0, &schedule, m, &opts)?;
            let rows: Vec<(usize, f64)> =
                st.points.iter().map(|p| (p.n, p.residual_norm)).collect();
            write_study_csv(cfg, "N,residual_norm", &rows)?;
            Ok(merge(
                header(cfg, &system, None),
                json!({
                    "x0": x0,
                    "study": "krylov",
                    "observable": obs.label(),
                    "m": m,
                    "points": st.points,
                    "f_norm": st.f_norm,
                    "decreasing_fraction": st.decreasing_fraction,
                    "paper_example": false,
                }),
            ))
        }
        other => Err(CliError::Usage(format!(
            "unknown study `{other}` (expected edmd or krylov)"
        ))),
    }
}
