//! Experiment configuration: strict TOML with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, CoefficientSpec};
use crate::controls::{
    intensity_control_from_csv, read_text, scalar_control_from_csv, ControlPair, IntensityControl, ScalarControl,
};
use crate::error::{Error, Result};
use crate::field_io::field_from_csv;
use crate::integrator::SolverOptions;
use crate::ldp::{OptimizerSettings, PerturbationKind};
use crate::skeleton::default_initial_state;
use crate::spectral::{FluidParams, SpectralField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FluidConfig {
    pub alpha: f64,
    pub kappa: f64,
    pub domain_side: f64,
    /// Mode cutoff `N`.
    pub modes: usize,
}

impl Default for FluidConfig {
    fn default() -> Self {
        let p = FluidParams::default();
        FluidConfig {
            alpha: p.alpha,
            kappa: p.kappa,
            domain_side: p.domain_side,
            modes: p.mode_cutoff,
        }
    }
}

/// Controls given inline (uniform cells over the horizon) or as CSV files.
/// Missing components default to `f = 0`, `g = 1`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub f_values: Option<Vec<f64>>,
    /// Cell-major intensity values.
    pub g_values: Option<Vec<f64>>,
    pub f_file: Option<PathBuf>,
    pub g_file: Option<PathBuf>,
}

/// Initial state from a field CSV, or the built-in unit-energy state.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialConfig {
    pub file: Option<PathBuf>,
    /// Multiplies the initial state.
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub eps: Vec<f64>,
    pub paths: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            eps: vec![1e-1, 3e-2, 1e-2, 3e-3],
            paths: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorConfig {
    pub cutoffs: Vec<usize>,
    pub samples: usize,
    pub bound_samples: usize,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig {
            cutoffs: vec![4, 8],
            samples: 100,
            bound_samples: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    pub samples: usize,
    pub delta: f64,
    pub cells: usize,
    /// Level `m` for the envelope constants.
    pub level: f64,
    pub trials: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            samples: 500,
            delta: 1.0,
            cells: 100,
            level: 4.0,
            trials: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub max_level: usize,
    pub trials: usize,
    pub control_cells: usize,
    /// Noise levels for the stochastic scan; empty runs the skeleton scan only.
    pub eps: Vec<f64>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            max_level: 4,
            trials: 100,
            control_cells: 10,
            eps: vec![1e-1, 1e-2, 1e-3],
        }
    }
}

/// Endpoint target: a field file, or the uncontrolled terminal state moved
/// by `shift` along the normalized response to the noise directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateConfig {
    pub target_file: Option<PathBuf>,
    pub shift: f64,
    pub optimizer: OptimizerSettings,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            target_file: None,
            shift: 0.2,
            optimizer: OptimizerSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct C1Config {
    pub ns: Vec<u32>,
    pub kind: PerturbationKind,
    pub high: f64,
}

impl Default for C1Config {
    fn default() -> Self {
        C1Config {
            ns: vec![1, 4, 16, 64],
            kind: PerturbationKind::Brownian,
            high: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RareEventConfig {
    pub radius: f64,
    pub min_hits: usize,
    pub importance_sampling: bool,
    /// Replace the coefficients by the linear single-mode diagnostic on this
    /// mode and report its closed-form tail rate.
    pub linear_mode: Option<[i64; 2]>,
    pub optimizer: OptimizerSettings,
}

impl Default for RareEventConfig {
    fn default() -> Self {
        RareEventConfig {
            radius: 0.25,
            min_hits: 10,
            importance_sampling: true,
            linear_mode: None,
            optimizer: OptimizerSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GirsanovConfig {
    pub eps: f64,
    /// Constant Brownian shift.
    pub psi: f64,
    /// Constant intensity multiplier.
    pub tilt: f64,
    pub paths: usize,
    /// Standard errors allowed between each mean weight and one.
    pub sigmas: f64,
}

impl Default for GirsanovConfig {
    fn default() -> Self {
        GirsanovConfig {
            eps: 0.5,
            psi: 0.3,
            tilt: 1.5,
            paths: 10_000,
            sigmas: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub eps: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { eps: 1e-2 }
    }
}

/// Thresholds turning study outputs into pass/fail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub y_slope_min: f64,
    pub y_slope_max: f64,
    pub c2_final: f64,
    pub rare_event_gap: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            y_slope_min: 0.8,
            y_slope_max: 1.2,
            c2_final: 0.05,
            rare_event_gap: 0.25,
        }
    }
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; mandatory for stochastic studies.
    pub seed: Option<u64>,
    /// Worker threads; `G2LDP_THREADS` caps it.
    pub threads: Option<usize>,
    pub horizon: f64,
    pub fluid: FluidConfig,
    pub solver: SolverOptions,
    pub coefficients: CoefficientSpec,
    pub controls: ControlConfig,
    pub initial: InitialConfig,
    pub mc: McConfig,
    pub operators: OperatorConfig,
    pub check: CheckConfig,
    pub scan: ScanConfig,
    pub rate: RateConfig,
    pub c1: C1Config,
    pub rare_event: RareEventConfig,
    pub girsanov: GirsanovConfig,
    pub simulate: SimulateConfig,
    pub thresholds: Thresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            threads: None,
            horizon: 1.0,
            fluid: FluidConfig::default(),
            solver: SolverOptions::default(),
            coefficients: CoefficientSpec::default(),
            controls: ControlConfig::default(),
            initial: InitialConfig::default(),
            mc: McConfig::default(),
            operators: OperatorConfig::default(),
            check: CheckConfig::default(),
            scan: ScanConfig::default(),
            rate: RateConfig::default(),
            c1: C1Config::default(),
            rare_event: RareEventConfig::default(),
            girsanov: GirsanovConfig::default(),
            simulate: SimulateConfig::default(),
            thresholds: Thresholds::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `key.path=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{part}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = read_text(path).map_err(|e| config_err(e.to_string()))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = dir.join(&*path);
                }
            }
        };
        fix(&mut self.controls.f_file);
        fix(&mut self.controls.g_file);
        fix(&mut self.initial.file);
        fix(&mut self.rate.target_file);
    }

    /// Every referenced file must exist.
    pub fn check_files(&self) -> Result<()> {
        for p in [
            &self.controls.f_file,
            &self.controls.g_file,
            &self.initial.file,
            &self.rate.target_file,
        ]
        .into_iter()
        .flatten()
        {
            if !p.is_file() {
                return Err(config_err(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Checks parameters and time-grid alignment without running anything.
    pub fn validate(&self) -> Result<()> {
        self.params().validate().map_err(config_err)?;
        self.solver.steps(self.horizon).map_err(config_err)?;
        if self.controls.f_values.is_some() && self.controls.f_file.is_some() {
            return Err(config_err("give either controls.f_values or controls.f_file"));
        }
        if self.controls.g_values.is_some() && self.controls.g_file.is_some() {
            return Err(config_err("give either controls.g_values or controls.g_file"));
        }
        if self.mc.eps.iter().any(|e| !(*e > 0.0)) || self.scan.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(config_err("noise levels must be positive"));
        }
        if self.mc.paths == 0 {
            return Err(config_err("mc.paths must be at least 1"));
        }
        if self.controls.f_file.is_none() && self.controls.g_file.is_none() {
            self.controls().map_err(config_err)?.check_alignment(self.solver.dt).map_err(config_err)?;
        }
        Ok(())
    }

    pub fn params(&self) -> FluidParams {
        FluidParams {
            alpha: self.fluid.alpha,
            kappa: self.fluid.kappa,
            domain_side: self.fluid.domain_side,
            mode_cutoff: self.fluid.modes,
        }
    }

    pub fn coefficient_set(&self) -> Result<CoefficientSet> {
        self.coefficients.build(&self.params())
    }

    pub fn master_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| config_err("this study is stochastic and needs a master `seed`"))
    }

    pub fn controls(&self) -> Result<ControlPair> {
        let marks = self.coefficients.mark_weights.len();
        let f = match (&self.controls.f_values, &self.controls.f_file) {
            (Some(v), _) => ScalarControl::uniform(self.horizon, v.clone())?,
            (None, Some(path)) => scalar_control_from_csv(&read_text(path)?)?,
            (None, None) => ScalarControl::zero(self.horizon),
        };
        let g = match (&self.controls.g_values, &self.controls.g_file) {
            (Some(v), _) => {
                if marks == 0 || v.len() % marks != 0 {
                    return Err(config_err("controls.g_values length must be a multiple of the mark count"));
                }
                IntensityControl::uniform(self.horizon, marks, v.clone())?
            }
            (None, Some(path)) => intensity_control_from_csv(&read_text(path)?, marks)?,
            (None, None) => IntensityControl::identity(self.horizon, marks),
        };
        let q = ControlPair::new(f, g)?;
        if (q.horizon() - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(config_err("control horizon differs from `horizon`"));
        }
        Ok(q)
    }

    pub fn initial_state(&self) -> Result<SpectralField> {
        let p = self.params();
        let x0 = match &self.initial.file {
            Some(path) => {
                let stored = field_from_csv(&read_text(path)?)?;
                if stored.field.cutoff() != p.mode_cutoff {
                    return Err(config_err("initial state cutoff differs from fluid.modes"));
                }
                stored.field
            }
            None => default_initial_state(&p),
        };
        Ok(match self.initial.scale {
            Some(s) => &x0 * s,
            None => x0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig {
            seed: Some(7),
            ..Default::default()
        };
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml_str("sed = 1", &[]), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml_str("[fluid]\nalpah = 1.0", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["solver.dtt=0.1".into()]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 3\n[fluid]\nmodes = 6\n",
            &["fluid.modes=5".into(), "mc.eps=[0.1, 0.01]".into(), "c1.kind=intensity".into()],
        )
        .unwrap();
        assert_eq!(cfg.fluid.modes, 5);
        assert_eq!(cfg.mc.eps, vec![0.1, 0.01]);
        assert_eq!(cfg.c1.kind, PerturbationKind::Intensity);
    }

    #[test]
    fn misaligned_grid_is_a_config_error() {
        let r = ExperimentConfig::from_toml_str("horizon = 1.0\n[solver]\ndt = 0.3\n", &[]);
        assert!(matches!(r, Err(Error::Config(_))));
        let r = ExperimentConfig::from_toml_str("[solver]\ndt = 0.1\n[controls]\nf_values = [1.0, 2.0, 3.0]\n", &[]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn stochastic_needs_seed() {
        assert!(ExperimentConfig::default().master_seed().is_err());
    }
}
