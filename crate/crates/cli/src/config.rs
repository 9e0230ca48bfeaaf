use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use clap::Args;
use koop_core::dynamics::{make_system, MapSystem, SystemParams};
use koop_core::numerics::expi;
use koop_core::{KoopError, C64};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_OMEGA: f64 = TAU * 0.13;
pub const DEFAULT_MU: f64 = 0.6;

/// Flags shared by every analysis command. Flags a command does not use are
/// ignored.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// rotation, doubling, torus_rotation or rotation_contraction
    #[arg(long, default_value = "rotation")]
    pub system: String,
    /// Rotation angle per step in radians (default 2π·0.13)
    #[arg(long, allow_hyphen_values = true)]
    pub omega: Option<f64>,
    /// Contraction factor for rotation_contraction (default 0.6)
    #[arg(long, allow_hyphen_values = true)]
    pub mu: Option<f64>,
    /// Torus frequencies in turns per step, comma separated
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub freqs: Option<Vec<f64>>,
    /// Initial state, comma separated; drawn from --seed when absent
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    /// Seed for the generic initial state (KOOP_SEED overrides)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trajectory length
    #[arg(long)]
    pub steps: Option<usize>,
    /// Dictionary registry name, e.g. fourier:1,2,3
    #[arg(long)]
    pub dict: Option<String>,
    /// Single observable, e.g. fourier:1+fourier:2
    #[arg(long)]
    pub observable: Option<String>,
    /// Krylov order N for hankel
    #[arg(long)]
    pub delays: Option<usize>,
    /// Use the exact section of a built-in system
    #[arg(long)]
    pub analytic: bool,
    /// Relative singular value cutoff for svd
    #[arg(long, default_value_t = 1e-10)]
    pub rank_tol: f64,
    /// Fit hankel models on the well-conditioned leading columns
    #[arg(long)]
    pub force: bool,
    /// Eigenvalues: complex literals (0.5+0.1i), exp:<angle> or omega:<k>
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub lambdas: Option<Vec<String>>,
    /// Accept |λ| < 1 in gla
    #[arg(long)]
    pub allow_decaying: bool,
    /// Schedule of m (convergence) or K (weak), comma separated
    #[arg(long, value_delimiter = ',')]
    pub schedule: Option<Vec<usize>>,
    /// Convergence study kind: edmd or krylov
    #[arg(long)]
    pub study: Option<String>,
    /// Accepted slope interval lo,hi for convergence
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub slope_window: Option<Vec<f64>>,
    /// Trajectory length of the empirical reference section
    #[arg(long)]
    pub reference_m: Option<usize>,
    /// Read the trajectory from a CSV file instead of generating it
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output file (stdout when absent); a sidecar config is written next to it
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a two-column text file for plotting
    #[arg(long)]
    pub emit_plot_data: Option<PathBuf>,
}

/// Everything needed to rerun a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub system: String,
    pub params: SystemParams,
    pub x0: Option<Vec<f64>>,
    pub seed: u64,
    pub steps: Option<usize>,
    pub dict: Option<String>,
    pub observable: Option<String>,
    pub delays: Option<usize>,
    pub analytic: bool,
    pub rank_tol: f64,
    pub force: bool,
    pub lambdas: Option<Vec<String>>,
    pub allow_decaying: bool,
    pub schedule: Option<Vec<usize>>,
    pub study: Option<String>,
    pub slope_window: Option<[f64; 2]>,
    pub reference_m: Option<usize>,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub emit_plot_data: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_args(command: &str, a: RunArgs) -> Result<Self, CliError> {
        let slope_window = match a.slope_window.as_deref() {
            None => None,
            Some([lo, hi]) if lo <= hi => Some([*lo, *hi]),
            Some(_) => {
                return Err(CliError::Usage(
                    "--slope-window takes two values lo,hi with lo <= hi".into(),
                ))
            }
        };
        let params = match a.system.as_str() {
            "rotation" => SystemParams {
                omega: Some(a.omega.unwrap_or(DEFAULT_OMEGA)),
                ..Default::default()
            },
            "rotation_contraction" => SystemParams {
                omega: Some(a.omega.unwrap_or(DEFAULT_OMEGA)),
                mu: Some(a.mu.unwrap_or(DEFAULT_MU)),
                ..Default::default()
            },
            "torus_rotation" => SystemParams {
                freqs: Some(
                    a.freqs
                        .unwrap_or_else(|| vec![0.13, (5f64.sqrt() - 1.0) / 2.0]),
                ),
                ..Default::default()
            },
            _ => SystemParams::default(),
        };
        Ok(RunConfig {
            command: command.to_string(),
            system: a.system,
            params,
            x0: a.x0,
            seed: a.seed,
            steps: a.steps,
            dict: a.dict,
            observable: a.observable,
            delays: a.delays,
            analytic: a.analytic,
            rank_tol: a.rank_tol,
            force: a.force,
            lambdas: a.lambdas,
            allow_decaying: a.allow_decaying,
            schedule: a.schedule,
            study: a.study,
            slope_window,
            reference_m: a.reference_m,
            input: a.input,
            out: a.out,
            emit_plot_data: a.emit_plot_data,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Applies `KOOP_SEED` when set.
    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(s) = std::env::var("KOOP_SEED") {
            self.seed = s
                .trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("KOOP_SEED `{s}`: {e}")))?;
        }
        Ok(())
    }

    pub fn system(&self) -> Result<MapSystem, KoopError> {
        make_system(&self.system, &self.params)
    }

    pub fn initial_state(&self, system: &MapSystem) -> Vec<f64> {
        self.x0
            .clone()
            .unwrap_or_else(|| system.generic_initial_state(self.seed))
    }

    pub fn steps_or(&self, default: usize) -> usize {
        self.steps.unwrap_or(default)
    }

    pub fn sidecar_path(out: &Path) -> PathBuf {
        let mut name = out.as_os_str().to_owned();
        name.push(".config.json");
        PathBuf::from(name)
    }

    pub fn lambdas(&self, system: &MapSystem) -> Result<Vec<C64>, CliError> {
        let items = self
            .lambdas
            .as_ref()
            .ok_or_else(|| CliError::Usage("--lambdas is required".into()))?;
        items.iter().map(|s| parse_lambda(s, system)).collect()
    }
}

pub fn parse_lambda(s: &str, system: &MapSystem) -> Result<C64, CliError> {
    let s = s.trim();
    let bad = |e: String| CliError::Usage(format!("eigenvalue `{s}`: {e}"));
    if let Some(t) = s.strip_prefix("exp:") {
        let t: f64 = t.parse().map_err(|e| bad(format!("{e}")))?;
        return Ok(expi(t));
    }
    if let Some(k) = s.strip_prefix("omega:") {
        let k: f64 = k.parse().map_err(|e| bad(format!("{e}")))?;
        let omega = system
            .params()
            .omega
            .ok_or_else(|| bad(format!("system `{}` has no omega", system.name())))?;
        return Ok(expi(k * omega));
    }
    s.parse::<C64>().map_err(|e| bad(format!("{e}")))
}
