//! TOML run configuration with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slabfv_core::grid::MAX_DIM;
use slabfv_core::{
    BoundarySpec, Error, Grid, GridSpec, InitialData, NumParams, PhysParams, StudyParams,
};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub dim: usize,
    pub half_period: f64,
    pub half_height: f64,
    pub h: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            dim: 2,
            half_period: 0.5,
            half_height: 0.5,
            h: 1.0 / 16.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsSection {
    pub mu: f64,
    pub eta: f64,
    pub kappa: f64,
    pub c_v: f64,
    /// Component of gravity along the vertical axis.
    pub gravity: f64,
}

impl Default for PhysicsSection {
    fn default() -> Self {
        Self {
            mu: 0.1,
            eta: 0.0,
            kappa: 0.1,
            c_v: 1.5,
            gravity: -1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSection {
    pub n_steps: Option<usize>,
    pub final_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub prefix: String,
    /// Snapshot every this many steps; 0 writes only the first and last.
    pub dump_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("output"),
            prefix: "state".into(),
            dump_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    /// Cells across the slab height, coarsest first.
    pub levels: Vec<usize>,
    pub final_time: f64,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            levels: vec![8, 16, 32, 64],
            final_time: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub trials: usize,
    /// `[dim, cells per unit length]` pairs.
    pub sizes: Vec<[usize; 2]>,
    pub tolerance: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        let d = slabfv_core::verify::VerifyConfig::default();
        Self {
            trials: d.trials,
            sizes: d.sizes.iter().map(|&(a, b)| [a, b]).collect(),
            tolerance: d.tolerance,
        }
    }
}

/// Everything a command needs; every key has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSection,
    pub physics: PhysicsSection,
    pub numerics: NumParams,
    pub initial: InitialData,
    pub boundary: BoundarySpec,
    pub time: TimeSection,
    pub output: OutputSection,
    pub study: StudySection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            grid: GridSection::default(),
            physics: PhysicsSection::default(),
            numerics: NumParams::default(),
            initial: InitialData::PerturbedConstant { amplitude: 0.1 },
            boundary: BoundarySpec::Constant { theta: 1.0 },
            time: TimeSection {
                n_steps: Some(10),
                final_time: None,
            },
            output: OutputSection::default(),
            study: StudySection::default(),
            verify: VerifySection::default(),
        }
    }
}

fn config_error(key: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.into(),
        message: message.into(),
    }
}

/// Sets `path = value` in a TOML table, creating intermediate tables.
fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| config_error(path, "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_error(path, format!("`{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses `key=value`; the value is read as TOML, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_error(s, "override must look like key=value"))?;
    let k = k.trim();
    let v = v.trim();
    let value = format!("x = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

/// Deserialises the raw text once so that errors carry line and column.
fn check_spanned(text: &str, origin: &str) -> Result<(), CliError> {
    toml::from_str::<RunConfig>(text)
        .map(|_| ())
        .map_err(|e| config_error(origin, e.to_string()))
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides in order and validates.
    pub fn load(
        path: Option<&Path>,
        overrides: &[(String, toml::Value)],
    ) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_error(p.display().to_string(), e.to_string()))?;
                check_spanned(&text, &p.display().to_string())?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_error(p.display().to_string(), e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            set_path(&mut table, k, v.clone())?;
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        check_spanned(text, "<config>")?;
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| config_error("<config>", e.to_string()))?;
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_table(table: toml::Table) -> Result<Self, CliError> {
        // a user-supplied `time` section replaces the default step count
        let explicit_time = table.contains_key("time");
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_error("<config>", e.to_string()))?;
        if explicit_time && cfg.time.n_steps.is_some() && cfg.time.final_time.is_some() {
            return Err(config_error(
                "time",
                "give either n_steps or final_time, not both",
            ));
        }
        if explicit_time && cfg.time.n_steps.is_none() && cfg.time.final_time.is_none() {
            return Err(config_error("time", "give n_steps or final_time"));
        }
        if !explicit_time {
            cfg.time = RunConfig::default().time;
        }
        Ok(cfg)
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::new(
            self.grid.dim,
            self.grid.half_period,
            self.grid.half_height,
            self.grid.h,
        )
    }

    pub fn phys(&self) -> PhysParams {
        let d = self.grid.dim.clamp(2, 3);
        let mut gravity = [0.0; MAX_DIM];
        gravity[d - 1] = self.physics.gravity;
        PhysParams {
            mu: self.physics.mu,
            eta: self.physics.eta,
            kappa: self.physics.kappa,
            c_v: self.physics.c_v,
            gravity,
            theta_b: self.boundary.temperature(d),
        }
    }

    pub fn dt(&self) -> f64 {
        self.numerics.dt(self.grid.h)
    }

    /// Steps of a `run`; a final time must be a whole number of steps.
    pub fn n_steps(&self) -> Result<usize, CliError> {
        match (self.time.n_steps, self.time.final_time) {
            (Some(n), None) => Ok(n),
            (None, Some(t)) => {
                let dt = self.dt();
                let n = (t / dt).round();
                if n < 1.0 || (n * dt - t).abs() > 1e-9 * t.abs().max(dt) {
                    Err(config_error(
                        "time.final_time",
                        format!("{t} is not a whole number of steps dt = {dt}"),
                    ))
                } else {
                    Ok(n as usize)
                }
            }
            _ => Err(config_error(
                "time",
                "give exactly one of n_steps or final_time",
            )),
        }
    }

    pub fn study_params(&self) -> StudyParams {
        StudyParams {
            dim: self.grid.dim,
            half_period: self.grid.half_period,
            half_height: self.grid.half_height,
            phys: self.phys(),
            num: self.numerics,
            initial: self.initial,
            final_time: self.study.final_time,
            levels: self.study.levels.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.grid.dim != 2 && self.grid.dim != 3 {
            return Err(config_error(
                "grid.dim",
                format!("must be 2 or 3, got {}", self.grid.dim),
            ));
        }
        Grid::new(self.grid_spec()).map_err(|e| config_error("grid", e.to_string()))?;
        let keyed = |section: &str, e: Error| match e {
            Error::InvalidParameter { name, reason } => {
                config_error(format!("{section}.{name}"), reason)
            }
            other => config_error(section, other.to_string()),
        };
        self.numerics.validate().map_err(|e| keyed("numerics", e))?;
        self.phys().validate().map_err(|e| keyed("physics", e))?;
        self.boundary.validate().map_err(|e| keyed("boundary", e))?;
        match self.initial {
            InitialData::Constant { rho, theta } if !(rho > 0.0 && theta > 0.0) => {
                return Err(config_error(
                    "initial",
                    "density and temperature must be positive",
                ));
            }
            InitialData::PerturbedConstant { amplitude }
            | InitialData::ThermalLayer { amplitude }
                if !(amplitude.abs() < 0.5) =>
            {
                return Err(config_error("initial.amplitude", "must lie in (-0.5, 0.5)"));
            }
            _ => {}
        }
        self.n_steps()?;
        if self.output.prefix.is_empty() {
            return Err(config_error("output.prefix", "must not be empty"));
        }
        if self.verify.trials == 0 {
            return Err(config_error("verify.trials", "must be at least 1"));
        }
        Ok(())
    }

    /// Extra checks for the refinement commands.
    pub fn validate_study(&self) -> Result<(), CliError> {
        self.study_params().validate().map_err(|e| match e {
            Error::InvalidParameter { name, reason } => {
                config_error(format!("study.{name}"), reason)
            }
            other => config_error("study", other.to_string()),
        })
    }
}
