//! Primal-dual iteration over controls and dual coefficients.
//!
//! Each step performs
//!
//! 1. gradient ascent in the controls, `v+ = v + step * grad_v L(a, v)`;
//! 2. extrapolation, `v_bar = 2 v+ - v`;
//! 3. a proximal update of the duals towards the population feature means of
//!    the trajectories rolled out from `v_bar`.
//!
//! With the identity Gram matrix the dual update is a convex combination
//! `a+ = (1 - h_a) a + h_a mean_m zeta(z_bar[m, l])`. A state where the control
//! gradient vanishes and every `a[., l]` equals the feature mean is a fixed point.

mod oracle;

pub use oracle::{potential, potential_oracle_minimize, potential_oracle_solve, OracleConfig, OracleOutcome};

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::RandomFeatureBasis;
use crate::problem::MfgProblem;
use crate::reporting::{cost_report, CostReport};
use crate::rng::{GaussianSource, Stream};
use crate::transcription::{
    feature_means_unchecked, rollout, rollout_unchecked, saddle_objective, sweep_all, ControlBatch, Discretization,
    DualCoefficients, TrajectoryBatch,
};

const MODULE: &str = "solver";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxMode {
    /// `a+ = (1 - h_a) a + h_a m`.
    PaperLiteral,
    /// Exact minimizer of `(h/2)|a|^2 - h a.m + |a - a_k|^2 / (2 h_a)`.
    ExactProx,
}

/// How the control step is scaled before it is applied to `grad_v L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepScaling {
    /// `v+ = v + h_v grad_v L`.
    Raw,
    /// `v+ = v + h_v (M / h) grad_v L`: each agent climbs its own cost per unit time,
    /// so `h_v` does not depend on the number of agents or time samples.
    PerAgent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    Zeros,
    /// I.i.d. `N(0, scale^2)` entries from the given seed.
    Random {
        scale: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub h_v: f64,
    pub h_a: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub control_init: InitMode,
    pub dual_init: InitMode,
    pub prox_mode: ProxMode,
    pub step_scaling: StepScaling,
    /// History (and progress) is recorded every this many iterations, plus the last one.
    pub record_history_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            h_v: 0.04,
            h_a: 0.5,
            max_iterations: 2000,
            tolerance: 1e-6,
            control_init: InitMode::Zeros,
            dual_init: InitMode::Zeros,
            prox_mode: ProxMode::PaperLiteral,
            step_scaling: StepScaling::PerAgent,
            record_history_every: 10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_v >= 0.0 && self.h_v.is_finite()) {
            return Err(Error::invalid(
                MODULE,
                format!("h_v must be nonnegative, got {}", self.h_v),
            ));
        }
        if !(self.h_a > 0.0 && self.h_a <= 1.0) && self.prox_mode == ProxMode::PaperLiteral {
            return Err(Error::invalid(
                MODULE,
                format!("h_a must lie in (0, 1], got {}", self.h_a),
            ));
        }
        if !(self.h_a > 0.0 && self.h_a.is_finite()) {
            return Err(Error::invalid(
                MODULE,
                format!("h_a must be positive, got {}", self.h_a),
            ));
        }
        if self.max_iterations < 1 {
            return Err(Error::invalid(MODULE, "max_iterations must be at least 1"));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::invalid(MODULE, "tolerance must be positive"));
        }
        if self.record_history_every < 1 {
            return Err(Error::invalid(MODULE, "record_history_every must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleState {
    pub controls: ControlBatch,
    pub controls_prev: ControlBatch,
    pub duals: DualCoefficients,
    pub iteration: usize,
}

impl SaddleState {
    pub fn new(controls: ControlBatch, duals: DualCoefficients) -> Self {
        Self {
            controls_prev: controls.clone(),
            controls,
            duals,
            iteration: 0,
        }
    }

    /// Initial state for `agents` agents according to the configured init modes.
    pub fn initial(config: &SolverConfig, agents: usize, disc: &Discretization, dim: usize, features: usize) -> Self {
        let n = disc.num_steps();
        let controls = match config.control_init {
            InitMode::Zeros => ControlBatch::zeros(agents, n, dim),
            InitMode::Random { scale, seed } => {
                let mut g = GaussianSource::new(seed, Stream::ControlInit);
                ControlBatch::from_array_unchecked(ndarray::Array3::from_shape_simple_fn((agents, n, dim), || {
                    scale * g.standard_normal()
                }))
            }
        };
        let duals = match config.dual_init {
            InitMode::Zeros => DualCoefficients::zeros(features, n),
            InitMode::Random { scale, seed } => {
                let mut g = GaussianSource::new(seed, Stream::DualInit);
                DualCoefficients::new(Array2::from_shape_simple_fn((features, n), || {
                    scale * g.standard_normal()
                }))
                .unwrap_or_else(|_| DualCoefficients::zeros(features, n))
            }
        };
        Self::new(controls, duals)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub residual: f64,
    pub objective: f64,
}

impl HistoryEntry {
    /// Progress line `iter=<k> objective=<float> residual=<float>`.
    pub fn log_line(&self) -> String {
        format!(
            "iter={} objective={:.12e} residual={:.6e}",
            self.iteration, self.objective, self.residual
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub controls: ControlBatch,
    pub trajectories: TrajectoryBatch,
    pub duals: DualCoefficients,
    pub cost_report: CostReport,
    pub residual_history: Vec<HistoryEntry>,
    pub converged: bool,
    pub iterations: usize,
    pub discretization: Discretization,
}

fn check_finite(values: impl IntoIterator<Item = f64>) -> bool {
    values.into_iter().all(f64::is_finite)
}

/// Dual proximal update given the population feature means (`r x N`).
///
/// `step` is the time step `h`, used only by [`ProxMode::ExactProx`].
pub fn prox_duals(
    duals: &DualCoefficients,
    feature_means: ArrayView2<'_, f64>,
    h_a: f64,
    mode: ProxMode,
    step: f64,
) -> Result<DualCoefficients> {
    if feature_means.shape() != duals.values().shape() {
        return Err(Error::invalid(
            MODULE,
            format!(
                "feature means are {:?}, duals are {:?}",
                feature_means.shape(),
                duals.values().shape()
            ),
        ));
    }
    let mut out = duals.values().clone();
    match mode {
        ProxMode::PaperLiteral => {
            if !(h_a > 0.0 && h_a <= 1.0) {
                return Err(Error::invalid(MODULE, format!("h_a must lie in (0, 1], got {h_a}")));
            }
            Zip::from(&mut out)
                .and(feature_means)
                .for_each(|a, &m| *a = (1.0 - h_a) * *a + h_a * m);
        }
        ProxMode::ExactProx => {
            if !(h_a > 0.0 && h_a.is_finite()) {
                return Err(Error::invalid(MODULE, format!("h_a must be positive, got {h_a}")));
            }
            let w = step * h_a;
            Zip::from(&mut out)
                .and(feature_means)
                .for_each(|a, &m| *a = (*a + w * m) / (1.0 + w));
        }
    }
    Ok(DualCoefficients::from_values_unchecked(out))
}

fn sup_norm<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    values.into_iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

fn sup_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// `|v+ - v|_inf / (1 + |v|_inf) + |a+ - a|_inf / (1 + |a|_inf)`.
pub fn residual(prev: &SaddleState, next: &SaddleState) -> Result<f64> {
    if prev.controls.values().shape() != next.controls.values().shape()
        || prev.duals.values().shape() != next.duals.values().shape()
    {
        return Err(Error::invalid(MODULE, "states have different shapes"));
    }
    let pv = prev.controls.values();
    let pa = prev.duals.values();
    let dv = sup_diff(next.controls.values().iter(), pv.iter()) / (1.0 + sup_norm(pv.iter()));
    let da = sup_diff(next.duals.values().iter(), pa.iter()) / (1.0 + sup_norm(pa.iter()));
    Ok(dv + da)
}

fn check_inputs(
    state: &SaddleState,
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    initial_positions: ArrayView2<'_, f64>,
    disc: &Discretization,
) -> Result<()> {
    let c = &state.controls;
    if c.values().shape() != state.controls_prev.values().shape() {
        return Err(Error::invalid(MODULE, "current and previous controls differ in shape"));
    }
    if c.dim() != problem.dimension
        || c.steps() != disc.num_steps()
        || initial_positions.shape() != [c.agents(), c.dim()]
    {
        return Err(Error::invalid(
            MODULE,
            "controls do not match the problem, grid, or initial positions",
        ));
    }
    if state.duals.features() != basis.feature_count() || state.duals.steps() != disc.num_steps() {
        return Err(Error::invalid(
            MODULE,
            "dual coefficients do not match the basis or grid",
        ));
    }
    Ok(())
}

/// One primal-dual iteration.
pub fn pdhg_step(
    state: &SaddleState,
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    initial_positions: ArrayView2<'_, f64>,
    disc: &Discretization,
    config: &SolverConfig,
) -> Result<SaddleState> {
    check_inputs(state, problem, basis, initial_positions, disc)?;
    config.validate()?;
    step_unchecked(state, problem, basis, initial_positions, disc, config)
}

fn step_unchecked(
    state: &SaddleState,
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    initial_positions: ArrayView2<'_, f64>,
    disc: &Discretization,
    config: &SolverConfig,
) -> Result<SaddleState> {
    let agents = state.controls.agents() as f64;
    let (_, dj) = sweep_all(
        problem,
        basis,
        &state.duals,
        initial_positions,
        &state.controls,
        disc,
        true,
    );
    let dj = dj.expect("gradient requested");
    // grad_v L = -(1/M) dJ/dv
    let factor = match config.step_scaling {
        StepScaling::Raw => -config.h_v / agents,
        StepScaling::PerAgent => -config.h_v / disc.step(),
    };
    let v = state.controls.values();
    let mut v_next = v.clone();
    Zip::from(&mut v_next).and(&dj).for_each(|x, &g| *x += factor * g);
    if !check_finite(v_next.iter().copied()) {
        return Err(Error::Diverged {
            iteration: state.iteration + 1,
            objective_trace: Vec::new(),
        });
    }

    let mut v_bar = v_next.clone();
    Zip::from(&mut v_bar).and(v).for_each(|x, &old| *x = 2.0 * *x - old);
    let v_bar = ControlBatch::from_array_unchecked(v_bar);
    let z_bar = rollout_unchecked(initial_positions, &v_bar, disc);
    let means = feature_means_unchecked(basis, &z_bar);
    let duals = prox_duals(&state.duals, means.view(), config.h_a, config.prox_mode, disc.step())?;
    if !check_finite(duals.values().iter().copied()) {
        return Err(Error::Diverged {
            iteration: state.iteration + 1,
            objective_trace: Vec::new(),
        });
    }

    Ok(SaddleState {
        controls: ControlBatch::from_array_unchecked(v_next),
        controls_prev: state.controls.clone(),
        duals,
        iteration: state.iteration + 1,
    })
}

/// Samples `agents` initial positions with `initial_positions_seed` and solves.
pub fn solve(
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    agents: usize,
    disc: &Discretization,
    config: &SolverConfig,
    initial_positions_seed: u64,
) -> Result<Solution> {
    let x0 = problem.initial.sample(agents, initial_positions_seed)?;
    solve_from(problem, basis, x0.view(), disc, config, |_| {})
}

/// Runs the iteration from explicit initial positions.
///
/// `observer` sees every recorded history entry as it is produced.
pub fn solve_from(
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    initial_positions: ArrayView2<'_, f64>,
    disc: &Discretization,
    config: &SolverConfig,
    mut observer: impl FnMut(&HistoryEntry),
) -> Result<Solution> {
    config.validate()?;
    if initial_positions.nrows() < 1 {
        return Err(Error::invalid(MODULE, "need at least one agent"));
    }
    let mut state = SaddleState::initial(
        config,
        initial_positions.nrows(),
        disc,
        problem.dimension,
        basis.feature_count(),
    );
    check_inputs(&state, problem, basis, initial_positions, disc)?;

    let mut history: Vec<HistoryEntry> = Vec::new();
    let mut converged = false;
    let objective_of =
        |s: &SaddleState| saddle_objective(problem, basis, &s.duals, &s.controls, initial_positions, disc);

    for _ in 0..config.max_iterations {
        let next = match step_unchecked(&state, problem, basis, initial_positions, disc, config) {
            Ok(next) => next,
            Err(Error::Diverged { iteration, .. }) => {
                return Err(Error::Diverged {
                    iteration,
                    objective_trace: history.iter().map(|h| h.objective).collect(),
                })
            }
            Err(e) => return Err(e),
        };
        let res = residual(&state, &next)?;
        state = next;
        converged = res < config.tolerance;
        let last = converged || state.iteration == config.max_iterations;
        if state.iteration.is_multiple_of(config.record_history_every) || last {
            let entry = HistoryEntry {
                iteration: state.iteration,
                residual: res,
                objective: objective_of(&state)?,
            };
            if !entry.objective.is_finite() || !res.is_finite() {
                return Err(Error::Diverged {
                    iteration: state.iteration,
                    objective_trace: history.iter().map(|h| h.objective).collect(),
                });
            }
            observer(&entry);
            history.push(entry);
        }
        if converged {
            break;
        }
    }

    let trajectories = rollout(initial_positions, &state.controls, disc)?;
    let report = cost_report(problem, basis, &trajectories, &state.controls, disc)?;
    Ok(Solution {
        controls: state.controls,
        trajectories,
        duals: state.duals,
        cost_report: report,
        residual_history: history,
        converged,
        iterations: state.iteration,
        discretization: *disc,
    })
}

/// Largest `|a[i, l] - mean_m zeta_i(z[m, l])|` at a solution.
pub fn dual_consistency_gap(basis: &RandomFeatureBasis, solution: &Solution) -> f64 {
    let means = feature_means_unchecked(basis, &solution.trajectories);
    sup_diff(solution.duals.values().iter(), means.iter())
}
