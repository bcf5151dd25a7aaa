//! Experiment configuration: one TOML file, every field optional.

use std::path::{Path, PathBuf};

use abf_core::potential::PotentialSpec;
use abf_core::projection::GradientMode;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub potential: PotentialSection,
    pub grid: GridSection,
    pub kernel: KernelSection,
    pub simulate: SimulateSection,
    pub fixed_point: FixedPointSection,
    pub flow: FlowSection,
    pub verify: VerifySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialSection {
    pub family: String,
    pub params: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Nodes per z-axis.
    pub nodes: usize,
    /// Quadrature nodes per y-axis for the free-energy oracle.
    pub y_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Adaptive,
    FrozenZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Distances against the Picard fixed point at the run's `ε`.
    FixedPoint,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub h: f64,
    pub n_steps: u64,
    pub bias_refresh_stride: u64,
    pub snapshot_stride: u64,
    pub replica_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    pub observables: Vec<String>,
    pub gradient_mode: GradientMode,
    pub schedule: Schedule,
    /// Freeze the bias after this step (adaptive schedule only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freeze_after: Option<u64>,
    pub batches: usize,
    pub reference: Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointSection {
    pub epsilons: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub contraction_radius: f64,
    pub contraction_trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowStart {
    Uniform,
    Equilibrium,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    /// Defaults to `kernel.epsilon`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub start: FlowStart,
    pub t_end: f64,
    pub dt: f64,
    pub fit_start: f64,
    pub fit_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub sobolev_p: f64,
    pub oracle_nodes: usize,
    pub force_bound_trials: usize,
    pub contraction_trials: usize,
    pub idempotence_trials: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            output_dir: None,
            potential: PotentialSection::default(),
            grid: GridSection::default(),
            kernel: KernelSection::default(),
            simulate: SimulateSection::default(),
            fixed_point: FixedPointSection::default(),
            flow: FlowSection::default(),
            verify: VerifySection::default(),
        }
    }
}

impl Default for PotentialSection {
    fn default() -> Self {
        PotentialSection {
            family: "coupled_well".into(),
            params: vec![2.0, 1.0, 0.5],
            m: None,
        }
    }
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            nodes: 64,
            y_nodes: 256,
        }
    }
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection { epsilon: 0.2 }
    }
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            h: 1e-3,
            n_steps: 1_000_000,
            bias_refresh_stride: 1,
            snapshot_stride: 10_000,
            replica_count: 1,
            x0: None,
            observables: vec!["one".into(), "cos_z".into()],
            gradient_mode: GradientMode::Spectral,
            schedule: Schedule::Adaptive,
            freeze_after: None,
            batches: 20,
            reference: Reference::FixedPoint,
        }
    }
}

impl Default for FixedPointSection {
    fn default() -> Self {
        FixedPointSection {
            epsilons: vec![0.4, 0.2, 0.1, 0.05, 0.025],
            tol: 1e-12,
            max_iter: 20_000,
            contraction_radius: 1.0,
            contraction_trials: 20,
        }
    }
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            epsilon: None,
            start: FlowStart::Uniform,
            t_end: 20.0,
            dt: 0.01,
            fit_start: 1.0,
            fit_end: 10.0,
        }
    }
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            sobolev_p: 2.0,
            oracle_nodes: 512,
            force_bound_trials: 200,
            contraction_trials: 10,
            idempotence_trials: 20,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text).map_err(|e| match e {
                    CliError::Config(msg) => config_err(format!("{}: {msg}", p.display())),
                    other => other,
                })?
            }
            None => Self::default(),
        };
        let config = base.with_overrides(overrides)?;
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn emit(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Overrides take `section.key=value` or a bare `key=value` that names
    /// exactly one field; values use TOML syntax, with bare words read as
    /// strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: Table = toml::from_str(&self.emit()).expect("emitted config parses");
        let defaults: Table = toml::from_str(&Self::default().emit()).expect("defaults parse");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            let value = parse_value(raw.trim());
            let path = resolve_key(&table, &defaults, key)?;
            set_path(&mut table, &path, value);
        }
        let text = toml::to_string(&table).map_err(|e| config_err(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.potential_spec()?;
        let k = &self.kernel;
        if !(k.epsilon > 0.0 && k.epsilon <= 1.0) {
            return Err(config_err(format!("kernel.epsilon = {} must lie in (0, 1]", k.epsilon)));
        }
        if self.grid.nodes < 4 {
            return Err(config_err("grid.nodes must be at least 4"));
        }
        if self.grid.y_nodes < 32 {
            return Err(config_err("grid.y_nodes must be at least 32"));
        }
        let s = &self.simulate;
        if !(s.h > 0.0) || s.n_steps == 0 || s.bias_refresh_stride == 0 || s.snapshot_stride == 0 {
            return Err(config_err(
                "simulate needs h > 0 and n_steps, bias_refresh_stride, snapshot_stride >= 1",
            ));
        }
        if s.replica_count == 0 || s.batches < 2 {
            return Err(config_err("simulate needs replica_count >= 1 and batches >= 2"));
        }
        let f = &self.fixed_point;
        if f.epsilons.is_empty() {
            return Err(config_err("fixed_point.epsilons must not be empty"));
        }
        if let Some(e) = f.epsilons.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(config_err(format!("fixed_point.epsilons entry {e} must lie in (0, 1]")));
        }
        if !(f.tol > 0.0) || f.max_iter == 0 || !(f.contraction_radius > 0.0) || f.contraction_trials == 0 {
            return Err(config_err(
                "fixed_point needs tol > 0, max_iter >= 1, contraction_radius > 0, contraction_trials >= 1",
            ));
        }
        let fl = &self.flow;
        if let Some(e) = fl.epsilon {
            if !(e > 0.0 && e <= 1.0) {
                return Err(config_err(format!("flow.epsilon = {e} must lie in (0, 1]")));
            }
        }
        if !(fl.dt > 0.0) || !(fl.t_end >= 0.0) || !(fl.fit_start < fl.fit_end) {
            return Err(config_err("flow needs dt > 0, t_end >= 0 and fit_start < fit_end"));
        }
        let v = &self.verify;
        if !(v.sobolev_p >= 2.0) || !v.sobolev_p.is_finite() {
            return Err(config_err(format!(
                "verify.sobolev_p = {} is outside [2, inf)",
                v.sobolev_p
            )));
        }
        if v.oracle_nodes < 16 || v.force_bound_trials == 0 || v.contraction_trials == 0 || v.idempotence_trials == 0 {
            return Err(config_err("verify needs oracle_nodes >= 16 and positive trial counts"));
        }
        Ok(())
    }

    pub fn potential_spec(&self) -> Result<PotentialSpec, CliError> {
        PotentialSpec::from_name(&self.potential.family, &self.potential.params, self.potential.m)
            .map_err(|e| config_err(format!("potential: {e}")))
    }
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Dotted keys are taken as given; a bare key must name exactly one field,
/// at top level or inside one section.
fn resolve_key(table: &Table, defaults: &Table, key: &str) -> Result<Vec<String>, CliError> {
    if key.contains('.') {
        let parts: Vec<String> = key.split('.').map(str::to_string).collect();
        if parts.len() != 2 || !table.get(&parts[0]).is_some_and(Value::is_table) {
            return Err(config_err(format!("unknown config key `{key}`")));
        }
        return Ok(parts);
    }
    let mut hits = Vec::new();
    if table.get(key).is_some_and(|v| !v.is_table()) || defaults.get(key).is_some_and(|v| !v.is_table()) {
        hits.push(vec![key.to_string()]);
    }
    for (name, section) in defaults.iter().chain(table.iter()) {
        if let Value::Table(t) = section {
            let path = vec![name.clone(), key.to_string()];
            if t.contains_key(key) && !hits.contains(&path) {
                hits.push(path);
            }
        }
    }
    match hits.len() {
        1 => Ok(hits.pop().expect("one hit")),
        0 => Err(config_err(format!(
            "unknown config key `{key}`; use section.key for optional fields"
        ))),
        _ => Err(config_err(format!(
            "ambiguous config key `{key}`; qualify it as {}",
            hits.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(" or ")
        ))),
    }
}

fn set_path(table: &mut Table, path: &[String], value: Value) {
    match path {
        [key] => {
            table.insert(key.clone(), value);
        }
        [section, key] => {
            if let Some(Value::Table(t)) = table.get_mut(section) {
                t.insert(key.clone(), value);
            }
        }
        _ => unreachable!("keys are one or two levels deep"),
    }
}
