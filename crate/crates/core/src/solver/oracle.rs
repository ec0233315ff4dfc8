//! Validation oracle: direct minimization of the population potential.
//!
//! With a symmetric positive-definite kernel the equilibrium is a critical
//! point of
//!
//! ```text
//! P(v) = (1/M) sum_m sum_l h L(t_l, z_m[l], v_m[l])
//!      + (h / (2 M^2)) sum_l |sum_m zeta(z_m[l])|^2
//!      + (1/M) sum_m psi(z_m[N])
//! ```
//!
//! This module minimizes `P` by gradient descent with Armijo backtracking. Its
//! gradient is assembled from explicit feature Jacobians and suffix sums, a code
//! path separate from the adjoint sweep used by the primal-dual solver.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::kernels::RandomFeatureBasis;
use crate::problem::MfgProblem;
use crate::transcription::{rollout, ControlBatch, Discretization, TrajectoryBatch};

const MODULE: &str = "solver";

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub max_iterations: usize,
    /// Stop once `(M / h) |grad P|_inf` drops below this.
    pub gradient_tolerance: f64,
    /// A stalled line search is accepted as convergence below this scaled gradient.
    pub stall_tolerance: f64,
    pub armijo: f64,
    pub initial_step: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200_000,
            gradient_tolerance: 1e-9,
            stall_tolerance: 1e-6,
            armijo: 1e-4,
            initial_step: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub controls: ControlBatch,
    pub trajectories: TrajectoryBatch,
    /// Potential after every accepted step, starting from the initial value.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

fn feature_sums(basis: &RandomFeatureBasis, traj: &TrajectoryBatch) -> Result<Array2<f64>> {
    let (m, n) = (traj.agents(), traj.steps());
    let mut sums = Array2::zeros((n, basis.feature_count()));
    for l in 0..n {
        for agent in 0..m {
            let z = traj.values().slice(ndarray::s![agent, l, ..]).to_vec();
            let f = basis.features(&z)?;
            let mut row = sums.row_mut(l);
            row += &f;
        }
    }
    Ok(sums)
}

/// The population potential `P(v)`.
pub fn potential(
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    initial_positions: ArrayView2<'_, f64>,
    controls: &ControlBatch,
    disc: &Discretization,
) -> Result<f64> {
    let traj = rollout(initial_positions, controls, disc)?;
    evaluate(problem, basis, &traj, controls, disc, false).map(|(p, _)| p)
}

fn evaluate(
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    traj: &TrajectoryBatch,
    controls: &ControlBatch,
    disc: &Discretization,
    with_gradient: bool,
) -> Result<(f64, Option<Array3<f64>>)> {
    let (m, n, d) = (traj.agents(), traj.steps(), traj.dim());
    let h = disc.step();
    let mf = m as f64;
    let sums = feature_sums(basis, traj)?;

    let mut running = 0.0;
    let mut terminal = 0.0;
    for agent in 0..m {
        for l in 0..n {
            let z = traj.values().slice(ndarray::s![agent, l, ..]).to_vec();
            let v = controls.values().slice(ndarray::s![agent, l, ..]).to_vec();
            running += h * problem.lagrangian.value(disc.time(l), &z, &v);
        }
        let last = traj.values().slice(ndarray::s![agent, n - 1, ..]).to_vec();
        terminal += problem.terminal.value(&last);
    }
    let interaction: f64 = sums.iter().map(|s| s * s).sum::<f64>() * h / (2.0 * mf * mf);
    let value = running / mf + interaction + terminal / mf;
    if !with_gradient {
        return Ok((value, None));
    }

    let mut grad = Array3::zeros((m, n, d));
    for agent in 0..m {
        // dP/dz for each time sample of this agent
        let mut dz = Array2::<f64>::zeros((n, d));
        for l in 0..n {
            let z = traj.values().slice(ndarray::s![agent, l, ..]).to_vec();
            let v = controls.values().slice(ndarray::s![agent, l, ..]).to_vec();
            let (gx, gv) = problem.lagrangian.gradients(disc.time(l), &z, &v);
            let jac = basis.feature_gradient(&z)?;
            let coupling = jac.t().dot(&sums.row(l));
            for k in 0..d {
                dz[[l, k]] = h / mf * gx[k] + h / (mf * mf) * coupling[k];
                grad[[agent, l, k]] = h / mf * gv[k];
            }
            if l == n - 1 {
                let (_, gpsi) = problem.terminal.value_and_gradient(&z);
                for k in 0..d {
                    dz[[l, k]] += gpsi[k] / mf;
                }
            }
        }
        // z[l'] depends on v[l] for every l' > l with weight h
        let mut suffix = vec![0.0; d];
        for l in (0..n - 1).rev() {
            for k in 0..d {
                suffix[k] += dz[[l + 1, k]];
                grad[[agent, l, k]] += h * suffix[k];
            }
        }
    }
    Ok((value, Some(grad)))
}

/// Minimizes the potential from zero controls; returns the full outcome.
pub fn potential_oracle_minimize(
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    initial_positions: ArrayView2<'_, f64>,
    disc: &Discretization,
    config: &OracleConfig,
) -> Result<OracleOutcome> {
    let (m, d) = (initial_positions.nrows(), initial_positions.ncols());
    if d != problem.dimension {
        return Err(Error::invalid(
            MODULE,
            "initial positions do not match the problem dimension",
        ));
    }
    let scale = m as f64 / disc.step();
    let mut controls = ControlBatch::zeros(m, disc.num_steps(), d);
    let mut traj = rollout(initial_positions, &controls, disc)?;
    let (mut value, grad) = evaluate(problem, basis, &traj, &controls, disc, true)?;
    let mut grad = grad.expect("gradient requested");
    let mut trace = vec![value];
    let mut step = config.initial_step;

    for iteration in 0..config.max_iterations {
        let gnorm = grad.iter().fold(0.0f64, |a, g| a.max(g.abs())) * scale;
        if gnorm < config.gradient_tolerance {
            return Ok(OracleOutcome {
                controls,
                trajectories: traj,
                objective_trace: trace,
                iterations: iteration,
                gradient_norm: gnorm,
            });
        }
        // descent direction -scale * grad; directional derivative -scale |grad|^2
        let slope = -scale * grad.iter().map(|g| g * g).sum::<f64>();
        let mut accepted = None;
        while step > 1e-16 {
            let trial =
                ControlBatch::new(controls.values() - &(&grad * (step * scale))).map_err(|_| Error::LineSearch {
                    iterations: iteration,
                    objective: value,
                })?;
            let trial_traj = rollout(initial_positions, &trial, disc)?;
            let (trial_value, _) = evaluate(problem, basis, &trial_traj, &trial, disc, false)?;
            // strict: a decrease lost in rounding is not progress
            if trial_value < value + config.armijo * step * slope {
                accepted = Some((trial, trial_traj, trial_value));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, trial_traj, trial_value)) = accepted else {
            if gnorm < config.stall_tolerance {
                return Ok(OracleOutcome {
                    controls,
                    trajectories: traj,
                    objective_trace: trace,
                    iterations: iteration,
                    gradient_norm: gnorm,
                });
            }
            return Err(Error::LineSearch {
                iterations: iteration,
                objective: value,
            });
        };
        controls = trial;
        traj = trial_traj;
        value = trial_value;
        trace.push(value);
        grad = evaluate(problem, basis, &traj, &controls, disc, true)?
            .1
            .expect("gradient requested");
        step = (step * 2.0).min(1.0);
    }
    Err(Error::LineSearch {
        iterations: config.max_iterations,
        objective: value,
    })
}

/// Trajectories minimizing the potential.
pub fn potential_oracle_solve(
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    initial_positions: ArrayView2<'_, f64>,
    disc: &Discretization,
    config: &OracleConfig,
) -> Result<TrajectoryBatch> {
    potential_oracle_minimize(problem, basis, initial_positions, disc, config).map(|o| o.trajectories)
}
