//! Mean-field game instances: costs, initial distributions and the experiment presets.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kernels::GaussianKernelSpec;
use crate::rng::{GaussianSource, Stream};

const MODULE: &str = "problem";

/// Soft wedge obstacle on the first two coordinates:
/// `penalty(x) = weight * max(x'^T Q x', 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleSpec {
    pub weight: f64,
    pub quadratic_form: [[f64; 2]; 2],
}

impl ObstacleSpec {
    /// The wedge used in the obstacle experiment, `5 max(x1^2 - 5 x2^2, 0)`.
    pub fn wedge() -> Self {
        Self {
            weight: 5.0,
            quadratic_form: [[1.0, 0.0], [0.0, -5.0]],
        }
    }

    fn quadratic(&self, x: &[f64]) -> f64 {
        let q = &self.quadratic_form;
        let (a, b) = (x[0], x[1]);
        a * (q[0][0] * a + q[0][1] * b) + b * (q[1][0] * a + q[1][1] * b)
    }

    pub fn penalty(&self, x: &[f64]) -> f64 {
        self.weight * self.quadratic(x).max(0.0)
    }

    /// Adds the penalty gradient into `grad`. Zero on the kink set `x'^T Q x' = 0`.
    pub(crate) fn add_gradient(&self, x: &[f64], grad: &mut [f64]) {
        if self.quadratic(x) > 0.0 {
            let q = &self.quadratic_form;
            let (a, b) = (x[0], x[1]);
            grad[0] += self.weight * ((q[0][0] + q[0][0]) * a + (q[0][1] + q[1][0]) * b);
            grad[1] += self.weight * ((q[1][0] + q[0][1]) * a + (q[1][1] + q[1][1]) * b);
        }
    }
}

/// `L(t, x, v) = kinetic_weight * |v|^2 + obstacle(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagrangianSpec {
    pub kinetic_weight: f64,
    pub obstacle: Option<ObstacleSpec>,
}

impl LagrangianSpec {
    pub fn new(kinetic_weight: f64, obstacle: Option<ObstacleSpec>) -> Result<Self> {
        if !(kinetic_weight > 0.0 && kinetic_weight.is_finite()) {
            return Err(Error::invalid(
                MODULE,
                format!("kinetic weight must be positive, got {kinetic_weight}"),
            ));
        }
        if let Some(o) = &obstacle {
            if !(o.weight >= 0.0 && o.weight.is_finite()) {
                return Err(Error::invalid(MODULE, "obstacle weight must be nonnegative"));
            }
        }
        Ok(Self {
            kinetic_weight,
            obstacle,
        })
    }

    pub fn kinetic(&self, v: &[f64]) -> f64 {
        self.kinetic_weight * v.iter().map(|c| c * c).sum::<f64>()
    }

    pub fn obstacle_penalty(&self, x: &[f64]) -> f64 {
        self.obstacle.map_or(0.0, |o| o.penalty(x))
    }

    pub fn value(&self, _t: f64, x: &[f64], v: &[f64]) -> f64 {
        self.kinetic(v) + self.obstacle_penalty(x)
    }

    /// `(grad_x L, grad_v L)`.
    pub fn gradients(&self, _t: f64, x: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; x.len()];
        self.add_state_gradient(x, &mut gx);
        let gv = v.iter().map(|c| 2.0 * self.kinetic_weight * c).collect();
        (gx, gv)
    }

    pub(crate) fn add_state_gradient(&self, x: &[f64], grad: &mut [f64]) {
        if let Some(o) = &self.obstacle {
            o.add_gradient(x, grad);
        }
    }
}

/// `psi(x) = weight * |x - target|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSpec {
    pub weight: f64,
    pub target: Vec<f64>,
}

impl TerminalSpec {
    pub fn new(weight: f64, target: Vec<f64>) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::invalid(
                MODULE,
                format!("terminal weight must be nonnegative, got {weight}"),
            ));
        }
        Ok(Self { weight, target })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.weight * x.iter().zip(&self.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    pub fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let grad = x
            .iter()
            .zip(&self.target)
            .map(|(a, b)| 2.0 * self.weight * (a - b))
            .collect();
        (self.value(x), grad)
    }
}

/// Equal-weight isotropic Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialDistribution {
    pub centers: Vec<Vec<f64>>,
    pub std: f64,
}

impl InitialDistribution {
    pub fn new(centers: Vec<Vec<f64>>, std: f64) -> Result<Self> {
        let Some(first) = centers.first() else {
            return Err(Error::invalid(MODULE, "initial distribution needs a center"));
        };
        if first.is_empty() || centers.iter().any(|c| c.len() != first.len()) {
            return Err(Error::invalid(MODULE, "mixture centers must share a nonzero dimension"));
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::invalid(MODULE, format!("std must be positive, got {std}")));
        }
        Ok(Self { centers, std })
    }

    pub fn dimension(&self) -> usize {
        self.centers[0].len()
    }

    /// `count` i.i.d. draws: a uniformly chosen component plus isotropic noise.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Array2<f64>> {
        self.sample_stream(count, seed, Stream::InitialPositions)
    }

    fn sample_stream(&self, count: usize, seed: u64, stream: Stream) -> Result<Array2<f64>> {
        if count < 1 {
            return Err(Error::invalid(MODULE, "need at least one sample"));
        }
        let d = self.dimension();
        let mut source = GaussianSource::new(seed, stream);
        let mut out = Array2::zeros((count, d));
        for mut row in out.rows_mut() {
            let center = &self.centers[source.index(self.centers.len())];
            for (x, c) in row.iter_mut().zip(center) {
                *x = source.normal(*c, self.std);
            }
        }
        Ok(out)
    }

    /// Samples minus the first mixture center, truncated to `dims` coordinates.
    /// Used as the evaluation set for kernel errors in many dimensions.
    pub fn centered_samples(&self, count: usize, dims: usize, seed: u64) -> Result<Array2<f64>> {
        if dims > self.dimension() {
            return Err(Error::invalid(
                MODULE,
                "requested more coordinates than the distribution has",
            ));
        }
        let raw = self.sample_stream(count, seed, Stream::EvaluationPoints)?;
        let center = &self.centers[0];
        Ok(Array2::from_shape_fn((count, dims), |(i, k)| raw[[i, k]] - center[k]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfgProblem {
    pub dimension: usize,
    pub horizon: f64,
    pub lagrangian: LagrangianSpec,
    pub terminal: TerminalSpec,
    pub initial: InitialDistribution,
    pub kernel: GaussianKernelSpec,
}

impl MfgProblem {
    pub fn new(
        dimension: usize,
        horizon: f64,
        lagrangian: LagrangianSpec,
        terminal: TerminalSpec,
        initial: InitialDistribution,
        kernel: GaussianKernelSpec,
    ) -> Result<Self> {
        if dimension < 1 {
            return Err(Error::invalid(MODULE, "dimension must be at least 1"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(
                MODULE,
                format!("horizon must be positive, got {horizon}"),
            ));
        }
        if kernel.interaction_dims > dimension {
            return Err(Error::invalid(
                MODULE,
                format!(
                    "kernel acts on {} dims but the state has {dimension}",
                    kernel.interaction_dims
                ),
            ));
        }
        if lagrangian.obstacle.is_some() && dimension < 2 {
            return Err(Error::invalid(MODULE, "the obstacle needs at least two dimensions"));
        }
        if terminal.target.len() != dimension {
            return Err(Error::invalid(MODULE, "terminal target has the wrong dimension"));
        }
        if initial.dimension() != dimension {
            return Err(Error::invalid(MODULE, "initial distribution has the wrong dimension"));
        }
        Ok(Self {
            dimension,
            horizon,
            lagrangian,
            terminal,
            initial,
            kernel,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    /// Octagon mixture to the origin, interaction in the first two coordinates.
    A,
    /// Single Gaussian through a wedge obstacle, interaction in the first two coordinates.
    B,
    /// As A, with a full-dimensional kernel whose radius scales like `sqrt(d / 2)`.
    C,
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Experiment::A),
            "b" => Ok(Experiment::B),
            "c" => Ok(Experiment::C),
            other => Err(Error::invalid(MODULE, format!("unknown experiment `{other}`"))),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::A => "a",
            Experiment::B => "b",
            Experiment::C => "c",
        })
    }
}

/// Optional overrides of preset defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PresetParams {
    pub mu: Option<f64>,
    /// Kernel radius for A and B; for C it replaces the scaled radius.
    pub sigma: Option<f64>,
    /// Dimensionless radius for C.
    pub sigma_hat: Option<f64>,
    pub initial_std: Option<f64>,
}

fn unit_vector(d: usize, index: usize, value: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[index] = value;
    v
}

fn octagon(d: usize) -> Vec<Vec<f64>> {
    (1..=8)
        .map(|j| {
            let angle = std::f64::consts::TAU * j as f64 / 8.0;
            let mut c = vec![0.0; d];
            c[0] = angle.cos();
            c[1] = angle.sin();
            c
        })
        .collect()
}

/// Default `mu` for experiment C: the radius `sigma_hat = 1.25` is paired with `mu = 1`,
/// everything else with `mu = 10`.
pub fn default_mu_for_c(sigma_hat: f64) -> f64 {
    if sigma_hat == 1.25 {
        1.0
    } else {
        10.0
    }
}

/// Radius of the full-dimensional kernel in experiment C.
pub fn scaled_sigma(sigma_hat: f64, d: usize) -> f64 {
    sigma_hat * (d as f64 / 2.0).sqrt()
}

/// Builds one of the three experiment families in dimension `d` with horizon 1.
pub fn preset(experiment: Experiment, d: usize, params: &PresetParams) -> Result<MfgProblem> {
    if d < 2 {
        return Err(Error::invalid(MODULE, format!("presets need d >= 2, got {d}")));
    }
    let horizon = 1.0;
    match experiment {
        Experiment::A | Experiment::C => {
            let initial = InitialDistribution::new(octagon(d), params.initial_std.unwrap_or(0.1))?;
            let lagrangian = LagrangianSpec::new(0.5, None)?;
            let terminal = TerminalSpec::new(10.0, vec![0.0; d])?;
            let kernel = if experiment == Experiment::A {
                GaussianKernelSpec::new(params.mu.unwrap_or(10.0), params.sigma.unwrap_or(0.2), 2)?
            } else {
                let sigma_hat = params.sigma_hat.unwrap_or(0.2);
                GaussianKernelSpec::new(
                    params.mu.unwrap_or_else(|| default_mu_for_c(sigma_hat)),
                    params.sigma.unwrap_or_else(|| scaled_sigma(sigma_hat, d)),
                    d,
                )?
            };
            MfgProblem::new(d, horizon, lagrangian, terminal, initial, kernel)
        }
        Experiment::B => {
            let initial = InitialDistribution::new(vec![unit_vector(d, 1, 1.0)], params.initial_std.unwrap_or(0.2))?;
            let lagrangian = LagrangianSpec::new(0.25, Some(ObstacleSpec::wedge()))?;
            let terminal = TerminalSpec::new(10.0, unit_vector(d, 1, -1.0))?;
            let kernel = GaussianKernelSpec::new(params.mu.unwrap_or(50.0), params.sigma.unwrap_or(1.0), 2)?;
            MfgProblem::new(d, horizon, lagrangian, terminal, initial, kernel)
        }
    }
}
