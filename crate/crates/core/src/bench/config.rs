//! Experiment configuration files.
//!
//! Configs are TOML. Presets ship inside the crate; `--set key.path=value`
//! style overrides are applied to the parsed table before deserializing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{Region, SystemSpec};
use crate::flowmap::TrainConfig;
use crate::integrators::RkTableau;
use crate::multiscale::{integral, plan_coupling};
use crate::{Error, Result};

/// Built-in presets as `(name, toml source)`.
pub const PRESETS: &[(&str, &str)] = &[
    ("harmonic-mini", include_str!("../../presets/harmonic-mini.toml")),
    ("ushape-cubic-mini", include_str!("../../presets/ushape-cubic-mini.toml")),
    ("noise-sweep-hyperbolic-mini", include_str!("../../presets/noise-sweep-hyperbolic-mini.toml")),
    ("hybrid-timing-hyperbolic", include_str!("../../presets/hybrid-timing-hyperbolic.toml")),
    ("paper-a1-hyperbolic", include_str!("../../presets/paper-a1-hyperbolic.toml")),
    ("paper-a1-cubic", include_str!("../../presets/paper-a1-cubic.toml")),
    ("paper-a1-van_der_pol", include_str!("../../presets/paper-a1-van_der_pol.toml")),
    ("paper-a1-hopf", include_str!("../../presets/paper-a1-hopf.toml")),
    ("paper-a1-lorenz", include_str!("../../presets/paper-a1-lorenz.toml")),
    ("paper-a2-hybrid-hyperbolic", include_str!("../../presets/paper-a2-hybrid-hyperbolic.toml")),
    ("paper-a2-hybrid-cubic", include_str!("../../presets/paper-a2-hybrid-cubic.toml")),
    ("paper-a2-hybrid-van_der_pol", include_str!("../../presets/paper-a2-hybrid-van_der_pol.toml")),
    ("paper-a2-hybrid-hopf", include_str!("../../presets/paper-a2-hybrid-hopf.toml")),
    ("paper-a2-hybrid-lorenz", include_str!("../../presets/paper-a2-hybrid-lorenz.toml")),
    ("noise-sweep-hyperbolic", include_str!("../../presets/noise-sweep-hyperbolic.toml")),
    ("noise-sweep-cubic", include_str!("../../presets/noise-sweep-cubic.toml")),
    ("noise-sweep-van_der_pol", include_str!("../../presets/noise-sweep-van_der_pol.toml")),
    ("noise-sweep-hopf", include_str!("../../presets/noise-sweep-hopf.toml")),
    ("noise-sweep-lorenz", include_str!("../../presets/noise-sweep-lorenz.toml")),
    ("increments-hyperbolic", include_str!("../../presets/increments-hyperbolic.toml")),
    ("increments-cubic", include_str!("../../presets/increments-cubic.toml")),
    ("increments-van_der_pol", include_str!("../../presets/increments-van_der_pol.toml")),
    ("increments-hopf", include_str!("../../presets/increments-hopf.toml")),
    ("increments-lorenz", include_str!("../../presets/increments-lorenz.toml")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    SingleScale,
    Multiscale,
    Hybrid,
    Rk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub validate: usize,
    pub test: usize,
    /// Simulated time discarded before recording each trajectory.
    #[serde(default)]
    pub burn_in: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Hidden widths shared by every scale.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Full layer widths per scale (ascending dt); overrides `hidden`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_dims: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridConfig {
    /// Step sizes (drawn from `dts`) of the coarse neural models.
    pub coarse_dts: Vec<f64>,
    /// One hybrid scheme per fine Runge-Kutta step.
    pub fine_steps: Vec<f64>,
    #[serde(default = "default_tableau")]
    pub tableau: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RkConfig {
    pub steps: Vec<f64>,
    #[serde(default = "default_tableau")]
    pub tableau: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncrementsConfig {
    pub dt: f64,
    pub j_max: usize,
    pub grid_n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
}

fn default_tableau() -> String {
    "rk4".to_string()
}

fn default_noise() -> Vec<f64> {
    vec![0.0]
}

fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::SingleScale, Scheme::Multiscale]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub system: String,
    #[serde(default)]
    pub seed: u64,
    pub horizon: f64,
    /// Model step sizes, strictly ascending.
    pub dts: Vec<f64>,
    #[serde(default = "default_noise")]
    pub noise_fractions: Vec<f64>,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    /// When false the multiscale scheme couples every trained model.
    #[serde(default = "yes")]
    pub cross_validate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Sampling region; the system default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    pub data: DataConfig,
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hybrid: Option<HybridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rk: Option<RkConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub increments: Option<IncrementsConfig>,
}

pub fn preset_source(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, src)| *src)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::config(format!("unknown preset '{name}', expected one of {names:?}"))
        })
}

pub fn parse_table(src: &str) -> Result<toml::Table> {
    src.parse::<toml::Table>()
        .map_err(|e| Error::config(format!("invalid TOML: {e}")))
}

pub fn load_table(path: &Path) -> Result<toml::Table> {
    let src = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_table(&src)
}

/// Apply `key.path=value` to a config table. The value is parsed as a TOML
/// value, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{assignment}' is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key '{key}': '{p}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Deserialize and validate.
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::config(format!("invalid experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(src: &str) -> Result<Self> {
        Self::from_table(parse_table(src)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(load_table(path)?)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml_str(preset_source(name)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        SystemSpec::builtin(&self.system).map_err(|e| Error::config(e.to_string()))
    }

    pub fn region(&self) -> Result<Region> {
        Ok(match &self.region {
            Some(r) => r.clone(),
            None => self.system_spec()?.default_region,
        })
    }

    /// Layer widths of the model for `dts[j]`.
    pub fn layer_dims(&self, j: usize, dim: usize) -> Vec<usize> {
        match &self.arch.layer_dims {
            Some(per) => per[j].clone(),
            None => std::iter::once(dim)
                .chain(self.arch.hidden.iter().copied())
                .chain(std::iter::once(dim))
                .collect(),
        }
    }

    /// Step of the validation/test data and the evaluation grid: the smallest
    /// of all model, hybrid and Runge-Kutta steps.
    pub fn grid_dt(&self) -> f64 {
        let hybrid = self.hybrid.iter().flat_map(|h| h.fine_steps.iter());
        let rk = self.rk.iter().flat_map(|r| r.steps.iter());
        self.dts.iter().chain(hybrid).chain(rk).copied().fold(f64::INFINITY, f64::min)
    }

    /// SHA-256 of the canonical JSON encoding, excluding the output directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn wants(&self, s: Scheme) -> bool {
        self.schemes.contains(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed must fit in a signed 64-bit integer"));
        }
        let sys = self.system_spec()?;
        let region = self.region()?;
        region.validate().map_err(|e| Error::config(e.to_string()))?;
        if region.dim() != sys.dim {
            return Err(Error::config(format!(
                "region has {} axes, system '{}' has dimension {}",
                region.dim(),
                sys.name,
                sys.dim
            )));
        }
        if self.dts.is_empty() {
            return Err(Error::config("dts must not be empty"));
        }
        if self.dts.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::config("dts must be positive and finite"));
        }
        if self.dts.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config("dts must be sorted ascending and pairwise distinct"));
        }
        plan_coupling(&self.dts, self.horizon)?;
        if self.data.train == 0 || self.data.validate == 0 || self.data.test == 0 {
            return Err(Error::config("data split sizes must be positive"));
        }
        if !(self.data.burn_in >= 0.0) {
            return Err(Error::config("data.burn_in must be non-negative"));
        }
        if let Some(per) = &self.arch.layer_dims {
            if per.len() != self.dts.len() {
                return Err(Error::config(format!(
                    "arch.layer_dims has {} entries for {} step sizes",
                    per.len(),
                    self.dts.len()
                )));
            }
        }
        for j in 0..self.dts.len() {
            let dims = self.layer_dims(j, sys.dim);
            if dims.len() < 2 || dims.contains(&0) {
                return Err(Error::config(format!("architecture {dims:?} is invalid")));
            }
            if dims[0] != sys.dim || dims[dims.len() - 1] != sys.dim {
                return Err(Error::config(format!(
                    "architecture {dims:?} does not start and end with the system dimension {}",
                    sys.dim
                )));
            }
        }
        self.train.validate()?;
        if self.noise_fractions.is_empty()
            || self.noise_fractions.iter().any(|&f| !(f >= 0.0) || !f.is_finite())
        {
            return Err(Error::config("noise_fractions must be a non-empty list of values >= 0"));
        }
        if self.schemes.is_empty() {
            return Err(Error::config("no schemes selected"));
        }
        let grid = self.grid_dt();
        let check_step = |h: f64, what: &str| -> Result<()> {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::config(format!("{what} step {h} must be positive")));
            }
            if integral(self.horizon / h).is_none() {
                return Err(Error::config(format!(
                    "{what} step {h} does not divide the horizon {}",
                    self.horizon
                )));
            }
            if integral(h / grid).is_none() {
                return Err(Error::config(format!(
                    "{what} step {h} is not a multiple of the grid step {grid}"
                )));
            }
            Ok(())
        };
        check_step(self.dts[0], "model")?;
        match (&self.hybrid, self.wants(Scheme::Hybrid)) {
            (None, true) => return Err(Error::config("scheme 'hybrid' needs a [hybrid] section")),
            (Some(hy), _) => {
                RkTableau::by_name(&hy.tableau).map_err(|e| Error::config(e.to_string()))?;
                if hy.coarse_dts.is_empty() || hy.fine_steps.is_empty() {
                    return Err(Error::config("hybrid.coarse_dts and hybrid.fine_steps must not be empty"));
                }
                for &c in &hy.coarse_dts {
                    if !self.dts.iter().any(|&d| (d - c).abs() <= 1e-9 * d) {
                        return Err(Error::config(format!("hybrid coarse dt {c} is not one of dts")));
                    }
                }
                plan_coupling(&hy.coarse_dts, self.horizon)?;
                let finest = hy.coarse_dts.iter().copied().fold(f64::INFINITY, f64::min);
                for &h in &hy.fine_steps {
                    check_step(h, "hybrid fine")?;
                    if integral(finest / h).is_none_or(|k| k == 0) {
                        return Err(Error::config(format!(
                            "hybrid coarse dt {finest} is not a multiple of fine step {h}"
                        )));
                    }
                }
            }
            (None, false) => {}
        }
        match (&self.rk, self.wants(Scheme::Rk)) {
            (None, true) => return Err(Error::config("scheme 'rk' needs an [rk] section")),
            (Some(rk), _) => {
                RkTableau::by_name(&rk.tableau).map_err(|e| Error::config(e.to_string()))?;
                if rk.steps.is_empty() {
                    return Err(Error::config("rk.steps must not be empty"));
                }
                for &h in &rk.steps {
                    check_step(h, "rk")?;
                }
            }
            (None, false) => {}
        }
        if let Some(inc) = &self.increments {
            if inc.grid_n == 0 || inc.j_max == 0 || !(inc.dt > 0.0) {
                return Err(Error::config("increments needs grid_n >= 1, j_max >= 1 and dt > 0"));
            }
            if let Some(r) = &inc.region {
                r.validate().map_err(|e| Error::config(e.to_string()))?;
                if r.dim() != sys.dim {
                    return Err(Error::config("increments.region dimension does not match the system"));
                }
            }
        }
        Ok(())
    }
}
