//! JSON run configuration. One document drives every subcommand; unknown
//! keys are rejected so typos fail loudly.

use mfchain::error::{Error, Result};
use serde::Deserialize;
use serde_json::Value;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    #[serde(default)]
    pub params: Value,
    #[serde(default)]
    pub numerics: Numerics,
    /// Cartesian ranges for `riccati-table`.
    #[serde(default)]
    pub table: Option<TableRanges>,
    /// Additive offset applied to the closed-form control in `validate`,
    /// for exercising the stationarity check's failure path.
    #[serde(default)]
    pub control_offset: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Step for the constrained mean-ODE integrator.
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Cells of the uniform grid carrying mean curves, densities and
    /// costate fields.
    #[serde(default = "default_grid_cells")]
    pub grid_cells: usize,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Horizon for exit-time searches.
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_damping")]
    pub damping: f64,
    /// Mean fixed-point tolerance.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Outer rounds of the coupled solve.
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    /// Sup-norm tolerance on the control update across outer rounds.
    #[serde(default = "default_outer_tol")]
    pub outer_tol: f64,
    /// Paths written by `simulate`.
    #[serde(default = "default_sim_paths")]
    pub sim_paths: usize,
}

fn default_horizon() -> f64 {
    1.0
}
fn default_dt() -> f64 {
    1e-4
}
fn default_grid_cells() -> usize {
    256
}
fn default_n_paths() -> usize {
    100_000
}
fn default_seed() -> u64 {
    42
}
fn default_t_max() -> f64 {
    100.0
}
fn default_damping() -> f64 {
    0.5
}
fn default_tol() -> f64 {
    0.02
}
fn default_max_rounds() -> usize {
    50
}
fn default_outer_tol() -> f64 {
    1e-3
}
fn default_sim_paths() -> usize {
    8
}

impl Default for Numerics {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("numerics defaults")
    }
}

impl Numerics {
    pub fn validate(&self) -> Result<()> {
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(Error::InvalidInput("horizon must be positive".into()));
        }
        if !self.dt.is_finite() || self.dt <= 0.0 || self.dt > self.t_max.max(self.horizon) {
            return Err(Error::InvalidInput("dt out of range".into()));
        }
        if self.grid_cells < 2 || self.grid_cells > 1 << 20 {
            return Err(Error::InvalidInput("grid_cells out of range".into()));
        }
        if self.n_paths < 2 {
            return Err(Error::InvalidInput("n_paths must be at least 2".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidInput("damping outside (0, 1]".into()));
        }
        if !(self.tol > 0.0 && self.outer_tol > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::InvalidInput("max_rounds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRanges {
    pub pairs: Vec<(usize, usize)>,
    pub alphas: Vec<f64>,
    pub m0s: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ex1Params {
    pub a: usize,
    pub b: usize,
    pub alpha: f64,
    #[serde(default = "one")]
    pub g_ab: f64,
    #[serde(default = "one")]
    pub g_ba: f64,
    pub h_a: f64,
    pub h_b: f64,
    #[serde(default)]
    pub x0: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ex2Params {
    pub a: usize,
    pub b: usize,
    pub alpha: f64,
    #[serde(default = "one")]
    pub g_ab: f64,
    #[serde(default = "one")]
    pub g_ba: f64,
    #[serde(default)]
    pub m0: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchloglParams {
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "one")]
    pub birth_rate: f64,
    pub beta: f64,
    #[serde(default = "default_x0_schlogl")]
    pub x0: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomParams {
    pub states: Vec<usize>,
    pub rates: Vec<Vec<f64>>,
    pub x0: usize,
}

fn one() -> f64 {
    1.0
}
fn default_n_max() -> usize {
    20
}
fn default_x0_schlogl() -> usize {
    5
}

/// The problem variants a config can select.
pub enum Problem {
    Ex1(Ex1Params),
    Ex2(Ex2Params),
    Schlogl(SchloglParams),
    Custom(CustomParams),
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("config parse error: {e}")))?;
        cfg.numerics.validate()?;
        Ok(cfg)
    }

    pub fn problem(&self) -> Result<Problem> {
        let params = self.params.clone();
        let wrap = |e: serde_json::Error| Error::InvalidInput(format!("params: {e}"));
        match self.problem.as_str() {
            "ex1" => Ok(Problem::Ex1(serde_json::from_value(params).map_err(wrap)?)),
            "ex2" => Ok(Problem::Ex2(serde_json::from_value(params).map_err(wrap)?)),
            "schlogl" => Ok(Problem::Schlogl(
                serde_json::from_value(params).map_err(wrap)?,
            )),
            "custom" => Ok(Problem::Custom(
                serde_json::from_value(params).map_err(wrap)?,
            )),
            other => Err(Error::InvalidInput(format!("unknown problem '{other}'"))),
        }
    }
}
