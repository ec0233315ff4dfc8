//! Run configuration: a TOML document with flat top-level keys and the
//! sections `[solver]`, `[seeds]`, `[exports]`, `[kernel_bench]` and `[custom]`.
//!
//! Parsing rejects unknown keys and fills every default, so the parsed value
//! is already the resolved configuration. Emitting it and parsing the text
//! again gives the same value.

use std::path::PathBuf;

use rfmfg_core::problem::{default_mu_for_c, preset, scaled_sigma};
use rfmfg_core::{
    Experiment, GaussianKernelSpec, InitMode, InitialDistribution, LagrangianSpec, MfgProblem, ObstacleSpec,
    PresetParams, ProxMode, SolverConfig, StepScaling, TerminalSpec,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    A,
    B,
    C,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Zeros,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryFileFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub h_v: f64,
    pub h_a: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub prox_mode: ProxMode,
    pub step_scaling: StepScaling,
    pub control_init: InitKind,
    pub control_init_scale: f64,
    pub dual_init: InitKind,
    pub dual_init_scale: f64,
    pub record_history_every: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            h_v: d.h_v,
            h_a: d.h_a,
            max_iterations: d.max_iterations,
            tolerance: d.tolerance,
            prox_mode: d.prox_mode,
            step_scaling: d.step_scaling,
            control_init: InitKind::Zeros,
            control_init_scale: 0.1,
            dual_init: InitKind::Zeros,
            dual_init_scale: 0.1,
            record_history_every: d.record_history_every,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    pub frequencies: u64,
    pub initial_positions: u64,
    /// Seeds both control and dual random initialization (on separate streams).
    pub init_controls: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportSection {
    pub trajectories: bool,
    pub trajectory_format: TrajectoryFileFormat,
    pub cost_report: bool,
    pub kernel_error_curve: bool,
    pub kernel_slice: bool,
}

impl Default for ExportSection {
    fn default() -> Self {
        Self {
            trajectories: true,
            trajectory_format: TrajectoryFileFormat::Csv,
            cost_report: true,
            kernel_error_curve: false,
            kernel_slice: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelBenchSection {
    pub r_values: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Grid used when the kernel acts on two coordinates.
    pub grid_per_axis: usize,
    pub grid_half_width: f64,
    /// Otherwise, this many centered samples of the initial distribution.
    pub sample_points: usize,
    pub slice_radius: f64,
    pub slice_points: usize,
}

impl Default for KernelBenchSection {
    fn default() -> Self {
        Self {
            r_values: vec![32, 128, 512, 2048],
            seeds: (0..10).collect(),
            grid_per_axis: 51,
            grid_half_width: 2.5,
            sample_points: 2000,
            slice_radius: 2.5,
            slice_points: 201,
        }
    }
}

/// Problem fields for `experiment = "custom"`; the kernel comes from the
/// top-level `mu`, `sigma` and `interaction_dims` here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSection {
    pub centers: Vec<Vec<f64>>,
    #[serde(default = "default_kinetic")]
    pub kinetic_weight: f64,
    #[serde(default = "default_terminal_weight")]
    pub terminal_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interaction_dims: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle_form: Option<[[f64; 2]; 2]>,
}

fn default_kinetic() -> f64 {
    0.5
}

fn default_terminal_weight() -> f64 {
    10.0
}

fn default_d() -> usize {
    2
}

fn default_r() -> usize {
    512
}

fn default_agents() -> usize {
    256
}

fn default_time_steps() -> usize {
    50
}

fn default_horizon() -> f64 {
    1.0
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("rfmfg-output")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_std: Option<f64>,
    #[serde(default = "default_r")]
    pub r: usize,
    #[serde(default = "default_agents")]
    pub agents: usize,
    #[serde(default = "default_time_steps")]
    pub time_steps: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Worker threads; 0 picks the number of CPUs.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub seeds: SeedSection,
    #[serde(default)]
    pub exports: ExportSection,
    #[serde(default)]
    pub kernel_bench: KernelBenchSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<CustomSection>,
}

fn config_error(message: impl Into<String>) -> CliError {
    CliError::Config(message.into())
}

/// Parses, validates and resolves a configuration.
pub fn parse_config(source: &str) -> Result<RunConfig, CliError> {
    let de = toml::Deserializer::parse(source).map_err(|e| config_error(e.to_string()))?;
    let raw: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.message().trim_end().to_string();
        if path == "." {
            config_error(message)
        } else {
            config_error(format!("key `{path}`: {message}"))
        }
    })?;
    raw.resolve()
}

impl RunConfig {
    /// The resolved configuration as TOML.
    pub fn emit(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    fn resolve(mut self) -> Result<Self, CliError> {
        if self.r < 2 || !self.r.is_multiple_of(2) {
            return Err(config_error(format!(
                "key `r`: feature count must be even and at least 2, got {}",
                self.r
            )));
        }
        if self.agents < 1 {
            return Err(config_error("key `agents`: need at least one agent"));
        }
        if self.time_steps < 2 {
            return Err(config_error("key `time_steps`: need at least two time samples"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(config_error("key `horizon`: must be positive"));
        }
        if self.d < 1 {
            return Err(config_error("key `d`: dimension must be at least 1"));
        }
        if self.sigma_hat.is_some() && self.experiment != ExperimentKind::C {
            return Err(config_error("key `sigma_hat`: only experiment c uses a scaled radius"));
        }
        if self.custom.is_some() != (self.experiment == ExperimentKind::Custom) {
            return Err(config_error(
                "section `custom` is required for, and only allowed with, experiment = \"custom\"",
            ));
        }
        match self.experiment {
            ExperimentKind::A => {
                self.mu.get_or_insert(10.0);
                self.sigma.get_or_insert(0.2);
                self.initial_std.get_or_insert(0.1);
            }
            ExperimentKind::B => {
                self.mu.get_or_insert(50.0);
                self.sigma.get_or_insert(1.0);
                self.initial_std.get_or_insert(0.2);
            }
            ExperimentKind::C => {
                let sigma_hat = *self.sigma_hat.get_or_insert(0.2);
                self.mu.get_or_insert(default_mu_for_c(sigma_hat));
                self.sigma.get_or_insert(scaled_sigma(sigma_hat, self.d));
                self.initial_std.get_or_insert(0.1);
            }
            ExperimentKind::Custom => {
                if self.mu.is_none() || self.sigma.is_none() {
                    return Err(config_error("custom experiments need `mu` and `sigma`"));
                }
                self.initial_std.get_or_insert(0.1);
                let d = self.d;
                let custom = self.custom.as_mut().expect("checked above");
                custom.target.get_or_insert_with(|| vec![0.0; d]);
                custom.interaction_dims.get_or_insert(d.min(2));
                if custom.obstacle_weight.is_some() != custom.obstacle_form.is_some() {
                    return Err(config_error(
                        "custom obstacle needs both `obstacle_weight` and `obstacle_form`",
                    ));
                }
            }
        }
        // surface problem and solver errors at parse time
        self.problem()?;
        self.solver_config().validate()?;
        Ok(self)
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.solver;
        let init = |kind: InitKind, scale: f64| match kind {
            InitKind::Zeros => InitMode::Zeros,
            InitKind::Random => InitMode::Random {
                scale,
                seed: self.seeds.init_controls,
            },
        };
        SolverConfig {
            h_v: s.h_v,
            h_a: s.h_a,
            max_iterations: s.max_iterations,
            tolerance: s.tolerance,
            control_init: init(s.control_init, s.control_init_scale),
            dual_init: init(s.dual_init, s.dual_init_scale),
            prox_mode: s.prox_mode,
            step_scaling: s.step_scaling,
            record_history_every: s.record_history_every,
        }
    }

    /// Builds the problem; expects a resolved configuration.
    pub fn problem(&self) -> Result<MfgProblem, CliError> {
        let experiment = match self.experiment {
            ExperimentKind::A => Experiment::A,
            ExperimentKind::B => Experiment::B,
            ExperimentKind::C => Experiment::C,
            ExperimentKind::Custom => return self.custom_problem(),
        };
        let params = PresetParams {
            mu: self.mu,
            sigma: self.sigma,
            sigma_hat: self.sigma_hat,
            initial_std: self.initial_std,
        };
        let mut problem = preset(experiment, self.d, &params)?;
        problem.horizon = self.horizon;
        Ok(problem)
    }

    fn custom_problem(&self) -> Result<MfgProblem, CliError> {
        let custom = self.custom.as_ref().expect("custom section present");
        let obstacle = match (custom.obstacle_weight, custom.obstacle_form) {
            (Some(weight), Some(quadratic_form)) => Some(ObstacleSpec { weight, quadratic_form }),
            _ => None,
        };
        let target = custom.target.clone().unwrap_or_else(|| vec![0.0; self.d]);
        let kernel = GaussianKernelSpec::new(
            self.mu.unwrap_or(0.0),
            self.sigma.unwrap_or(1.0),
            custom.interaction_dims.unwrap_or(self.d.min(2)),
        )?;
        Ok(MfgProblem::new(
            self.d,
            self.horizon,
            LagrangianSpec::new(custom.kinetic_weight, obstacle)?,
            TerminalSpec::new(custom.terminal_weight, target)?,
            InitialDistribution::new(custom.centers.clone(), self.initial_std.unwrap_or(0.1))?,
            kernel,
        )?)
    }
}
