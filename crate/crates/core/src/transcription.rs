//! Direct transcription of the saddle-point problem.
//!
//! Time is sampled at `t_l = (l - 1) h`, `l = 1..N`, with `h = T / (N - 1)`;
//! indices in code are zero-based. States follow explicit Euler,
//! `z[l + 1] = z[l] + h v[l]`, so the last control never moves the state.
//! The running cost is summed over all `N` samples with weight `h`
//! (a rectangle rule whose total weight is `N h`).
//!
//! For dual coefficients `a` (`r x N`) the discrete Lagrangian is
//!
//! ```text
//! L(a, v) = (h / 2) sum_l |a[., l]|^2 - (1 / M) sum_m J_m(a, v_m)
//! J_m     = sum_l h [L(t_l, z_m[l], v_m[l]) + a[., l] . zeta(z_m[l])] + psi(z_m[N])
//! ```
//!
//! and its control gradient is obtained per agent by a reverse (adjoint) sweep.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::RandomFeatureBasis;
use crate::problem::MfgProblem;

const MODULE: &str = "transcription";

/// Uniform time grid with `num_steps` samples spanning `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discretization {
    horizon: f64,
    num_steps: usize,
    step: f64,
}

impl Discretization {
    pub fn new(horizon: f64, num_steps: usize) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::invalid(
                MODULE,
                format!("need at least 2 time samples, got {num_steps}"),
            ));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(
                MODULE,
                format!("horizon must be positive, got {horizon}"),
            ));
        }
        Ok(Self {
            horizon,
            num_steps,
            step: horizon / (num_steps - 1) as f64,
        })
    }

    pub fn for_problem(problem: &MfgProblem, num_steps: usize) -> Result<Self> {
        Self::new(problem.horizon, num_steps)
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Time of the zero-based sample `index`; the last sample is exactly the horizon.
    pub fn time(&self, index: usize) -> f64 {
        if index + 1 == self.num_steps {
            self.horizon
        } else {
            index as f64 * self.step
        }
    }
}

/// Controls `v[m, l, k]`, agent-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBatch(Array3<f64>);

impl ControlBatch {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(MODULE, "controls must be finite"));
        }
        Ok(Self(values.as_standard_layout().into_owned()))
    }

    pub fn zeros(agents: usize, steps: usize, dim: usize) -> Self {
        Self(Array3::zeros((agents, steps, dim)))
    }

    pub fn agents(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }

    pub fn agent(&self, m: usize) -> ArrayView2<'_, f64> {
        self.0.index_axis(Axis(0), m)
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    pub(crate) fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("controls are stored in standard layout")
    }

    pub(crate) fn from_array_unchecked(values: Array3<f64>) -> Self {
        Self(values)
    }
}

/// States `z[m, l, k]`; `z[m, 0, .]` are the initial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    values: Array3<f64>,
}

impl TrajectoryBatch {
    pub fn from_values(values: Array3<f64>) -> Result<Self> {
        if values.shape()[1] < 1 {
            return Err(Error::invalid(MODULE, "trajectories need at least one time sample"));
        }
        Ok(Self {
            values: values.as_standard_layout().into_owned(),
        })
    }

    pub fn agents(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn agent(&self, m: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), m)
    }

    pub fn initial_positions(&self) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(1), 0)
    }

    pub fn final_positions(&self) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(1), self.steps() - 1)
    }

    pub(crate) fn as_slice(&self) -> &[f64] {
        self.values
            .as_slice()
            .expect("trajectories are stored in standard layout")
    }
}

/// Dual coefficients `a[i, l]`, one row per feature, one column per time sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCoefficients(Array2<f64>);

impl DualCoefficients {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(MODULE, "dual coefficients must be finite"));
        }
        Ok(Self(values.as_standard_layout().into_owned()))
    }

    pub fn zeros(features: usize, steps: usize) -> Self {
        Self(Array2::zeros((features, steps)))
    }

    pub fn features(&self) -> usize {
        self.0.nrows()
    }

    pub fn steps(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub(crate) fn from_values_unchecked(values: Array2<f64>) -> Self {
        Self(values)
    }

    /// Time-major copy (`N x r`, contiguous rows) for per-sample access.
    pub(crate) fn time_major(&self) -> Array2<f64> {
        self.0.t().as_standard_layout().into_owned()
    }
}

/// Quadratic form used for the dual term `(h / 2) sum_l a[., l]^T K^-1 a[., l]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum DualMetric {
    /// `K = I`, the random-feature case.
    #[default]
    Identity,
    /// An explicit `r x r` matrix standing for `K^-1`.
    InverseGram(Array2<f64>),
}

fn check_batch(initial: ArrayView2<'_, f64>, controls: &ControlBatch, disc: &Discretization) -> Result<()> {
    if initial.nrows() != controls.agents() || initial.ncols() != controls.dim() {
        return Err(Error::invalid(
            MODULE,
            format!(
                "initial positions are {:?} but controls are {:?}",
                initial.shape(),
                controls.view().shape()
            ),
        ));
    }
    if controls.steps() != disc.num_steps() {
        return Err(Error::invalid(
            MODULE,
            format!(
                "controls have {} time samples, grid has {}",
                controls.steps(),
                disc.num_steps()
            ),
        ));
    }
    Ok(())
}

fn check_duals(basis: &RandomFeatureBasis, duals: &DualCoefficients, disc: &Discretization) -> Result<()> {
    if duals.features() != basis.feature_count() || duals.steps() != disc.num_steps() {
        return Err(Error::invalid(
            MODULE,
            format!(
                "dual coefficients are {}x{}, expected {}x{}",
                duals.features(),
                duals.steps(),
                basis.feature_count(),
                disc.num_steps()
            ),
        ));
    }
    Ok(())
}

fn check_problem(problem: &MfgProblem, basis: &RandomFeatureBasis, dim: usize) -> Result<()> {
    if dim != problem.dimension {
        return Err(Error::invalid(
            MODULE,
            format!(
                "state dimension {dim} does not match problem dimension {}",
                problem.dimension
            ),
        ));
    }
    if basis.interaction_dims() > dim {
        return Err(Error::invalid(
            MODULE,
            "basis acts on more coordinates than the state has",
        ));
    }
    Ok(())
}

fn rollout_agent(x0: &[f64], v: &[f64], h: f64, z: &mut [f64]) {
    let d = x0.len();
    z[..d].copy_from_slice(x0);
    for l in 1..z.len() / d {
        for k in 0..d {
            z[l * d + k] = z[(l - 1) * d + k] + h * v[(l - 1) * d + k];
        }
    }
}

/// Explicit Euler states for every agent.
pub fn rollout(
    initial_positions: ArrayView2<'_, f64>,
    controls: &ControlBatch,
    disc: &Discretization,
) -> Result<TrajectoryBatch> {
    check_batch(initial_positions, controls, disc)?;
    Ok(rollout_unchecked(initial_positions, controls, disc))
}

pub(crate) fn rollout_unchecked(
    initial_positions: ArrayView2<'_, f64>,
    controls: &ControlBatch,
    disc: &Discretization,
) -> TrajectoryBatch {
    let (m, n, d) = (controls.agents(), controls.steps(), controls.dim());
    let mut values = Array3::zeros((m, n, d));
    let h = disc.step();
    values
        .as_slice_mut()
        .expect("fresh array is contiguous")
        .par_chunks_mut(n * d)
        .zip(controls.as_slice().par_chunks(n * d))
        .enumerate()
        .for_each(|(agent, (z, v))| {
            let x0 = initial_positions.row(agent).to_vec();
            rollout_agent(&x0, v, h, z);
        });
    TrajectoryBatch { values }
}

/// Cost `J_m` of one agent's trajectory `z_m` (`N x d`) under controls `v_m`.
pub fn agent_cost(
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    duals: &DualCoefficients,
    trajectory: ArrayView2<'_, f64>,
    controls: ArrayView2<'_, f64>,
    disc: &Discretization,
) -> Result<f64> {
    if trajectory.shape() != controls.shape() || trajectory.nrows() != disc.num_steps() {
        return Err(Error::invalid(MODULE, "trajectory and controls must both be N x d"));
    }
    check_problem(problem, basis, trajectory.ncols())?;
    check_duals(basis, duals, disc)?;
    let h = disc.step();
    let a = duals.time_major();
    let mut features = vec![0.0; basis.feature_count()];
    let mut running = 0.0;
    for (l, (z, v)) in trajectory.rows().into_iter().zip(controls.rows()).enumerate() {
        let z = z.to_vec();
        let v = v.to_vec();
        basis.features_into(&z, &mut features);
        let coupling: f64 = features.iter().zip(a.row(l)).map(|(f, c)| f * c).sum();
        running += h * (problem.lagrangian.value(disc.time(l), &z, &v) + coupling);
    }
    let last = trajectory.row(disc.num_steps() - 1).to_vec();
    Ok(running + problem.terminal.value(&last))
}

/// Per-agent forward rollout plus reverse sweep.
///
/// Returns `J_m` and, when `grad` is given, writes `dJ_m / dv_m` into it
/// (`N x d`, row-major). `duals_tm` is the time-major dual matrix.
#[allow(clippy::too_many_arguments)]
fn agent_sweep(
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    duals_tm: &Array2<f64>,
    x0: &[f64],
    v: &[f64],
    disc: &Discretization,
    z: &mut [f64],
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let d = x0.len();
    let n = disc.num_steps();
    let h = disc.step();
    rollout_agent(x0, v, h, z);

    let last = &z[(n - 1) * d..];
    let (terminal, mut adjoint) = problem.terminal.value_and_gradient(last);
    let mut state_grad = vec![0.0; d];
    let mut running = 0.0;
    let kinetic_scale = 2.0 * problem.lagrangian.kinetic_weight;

    for l in (0..n).rev() {
        let zl = &z[l * d..(l + 1) * d];
        let vl = &v[l * d..(l + 1) * d];
        let coeffs = duals_tm.row(l);
        let coeffs = coeffs.as_slice().expect("time-major duals are contiguous");

        state_grad.iter_mut().for_each(|g| *g = 0.0);
        problem.lagrangian.add_state_gradient(zl, &mut state_grad);
        let coupling = basis.pair_with_gradient(zl, coeffs, &mut state_grad);
        running += h * (problem.lagrangian.value(disc.time(l), zl, vl) + coupling);

        if let Some(g) = grad.as_deref_mut() {
            let gl = &mut g[l * d..(l + 1) * d];
            for k in 0..d {
                gl[k] = h * kinetic_scale * vl[k];
                if l + 1 < n {
                    // adjoint currently holds lambda[l + 1]
                    gl[k] += h * adjoint[k];
                }
            }
        }
        for k in 0..d {
            adjoint[k] += h * state_grad[k];
        }
    }
    running + terminal
}

/// Per-agent costs and (optionally) `dJ/dv`, in agent order.
pub(crate) fn sweep_all(
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    duals: &DualCoefficients,
    initial_positions: ArrayView2<'_, f64>,
    controls: &ControlBatch,
    disc: &Discretization,
    want_gradient: bool,
) -> (Vec<f64>, Option<Array3<f64>>) {
    let (m, n, d) = (controls.agents(), controls.steps(), controls.dim());
    let duals_tm = duals.time_major();
    let x0s: Vec<Vec<f64>> = initial_positions.rows().into_iter().map(|r| r.to_vec()).collect();
    let v = controls.as_slice();

    if want_gradient {
        let mut grad = Array3::zeros((m, n, d));
        let costs = grad
            .as_slice_mut()
            .expect("fresh array is contiguous")
            .par_chunks_mut(n * d)
            .zip(v.par_chunks(n * d))
            .enumerate()
            .map_init(
                || vec![0.0; n * d],
                |z, (agent, (g, vm))| agent_sweep(problem, basis, &duals_tm, &x0s[agent], vm, disc, z, Some(g)),
            )
            .collect();
        (costs, Some(grad))
    } else {
        let costs = v
            .par_chunks(n * d)
            .enumerate()
            .map_init(
                || vec![0.0; n * d],
                |z, (agent, vm)| agent_sweep(problem, basis, &duals_tm, &x0s[agent], vm, disc, z, None),
            )
            .collect();
        (costs, None)
    }
}

fn dual_energy(duals: &DualCoefficients, metric: &DualMetric, h: f64) -> Result<f64> {
    let a = duals.values();
    let sum = match metric {
        DualMetric::Identity => a.iter().map(|x| x * x).sum::<f64>(),
        DualMetric::InverseGram(kinv) => {
            if kinv.shape() != [a.nrows(), a.nrows()] {
                return Err(Error::invalid(MODULE, "inverse Gram matrix has the wrong shape"));
            }
            let ka = kinv.dot(a);
            a.iter().zip(ka.iter()).map(|(x, y)| x * y).sum::<f64>()
        }
    };
    Ok(0.5 * h * sum)
}

/// Discrete saddle Lagrangian with the identity Gram matrix.
pub fn saddle_objective(
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    duals: &DualCoefficients,
    controls: &ControlBatch,
    initial_positions: ArrayView2<'_, f64>,
    disc: &Discretization,
) -> Result<f64> {
    saddle_objective_with_metric(
        problem,
        basis,
        duals,
        controls,
        initial_positions,
        disc,
        &DualMetric::Identity,
    )
}

/// Discrete saddle Lagrangian with an explicit dual metric.
pub fn saddle_objective_with_metric(
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    duals: &DualCoefficients,
    controls: &ControlBatch,
    initial_positions: ArrayView2<'_, f64>,
    disc: &Discretization,
    metric: &DualMetric,
) -> Result<f64> {
    check_batch(initial_positions, controls, disc)?;
    check_problem(problem, basis, controls.dim())?;
    check_duals(basis, duals, disc)?;
    let (costs, _) = sweep_all(problem, basis, duals, initial_positions, controls, disc, false);
    let mean_cost = costs.iter().sum::<f64>() / costs.len() as f64;
    Ok(dual_energy(duals, metric, disc.step())? - mean_cost)
}

/// `grad_v L(a, v) = -(1 / M) dJ/dv`, computed with one adjoint sweep per agent.
pub fn control_gradient(
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    duals: &DualCoefficients,
    initial_positions: ArrayView2<'_, f64>,
    controls: &ControlBatch,
    disc: &Discretization,
) -> Result<ControlBatch> {
    check_batch(initial_positions, controls, disc)?;
    check_problem(problem, basis, controls.dim())?;
    check_duals(basis, duals, disc)?;
    let (_, grad) = sweep_all(problem, basis, duals, initial_positions, controls, disc, true);
    let scale = -1.0 / controls.agents() as f64;
    Ok(ControlBatch(grad.expect("gradient requested") * scale))
}

/// Population feature means `(1 / M) sum_m zeta(z[m, l])` as an `r x N` matrix.
///
/// Sums run over agents in index order for every time sample, independent of
/// how work is split across threads.
pub fn feature_means(basis: &RandomFeatureBasis, trajectories: &TrajectoryBatch) -> Result<Array2<f64>> {
    if basis.interaction_dims() > trajectories.dim() {
        return Err(Error::invalid(
            MODULE,
            "basis acts on more coordinates than the state has",
        ));
    }
    Ok(feature_means_unchecked(basis, trajectories))
}

pub(crate) fn feature_means_unchecked(basis: &RandomFeatureBasis, trajectories: &TrajectoryBatch) -> Array2<f64> {
    let (m, n, d) = (trajectories.agents(), trajectories.steps(), trajectories.dim());
    let r = basis.feature_count();
    let z = trajectories.as_slice();
    let mut time_major = Array2::zeros((n, r));
    time_major
        .as_slice_mut()
        .expect("fresh array is contiguous")
        .par_chunks_mut(r)
        .enumerate()
        .for_each(|(l, acc)| {
            for agent in 0..m {
                let offset = (agent * n + l) * d;
                basis.accumulate_features(&z[offset..offset + d], acc);
            }
            let inv = 1.0 / m as f64;
            acc.iter_mut().for_each(|x| *x *= inv);
        });
    time_major.reversed_axes().as_standard_layout().into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::GaussianKernelSpec;
    use crate::problem::{preset, Experiment, LagrangianSpec, PresetParams, TerminalSpec};
    use crate::rng::{GaussianSource, Stream};
    use approx::assert_relative_eq;
    use ndarray::{s, Array1};

    fn random_array3(shape: (usize, usize, usize), seed: u64, scale: f64) -> Array3<f64> {
        let mut g = GaussianSource::new(seed, Stream::ControlInit);
        Array3::from_shape_simple_fn(shape, || scale * g.standard_normal())
    }

    fn random_array2(shape: (usize, usize), seed: u64, scale: f64) -> Array2<f64> {
        let mut g = GaussianSource::new(seed, Stream::DualInit);
        Array2::from_shape_simple_fn(shape, || scale * g.standard_normal())
    }

    fn setup(exp: Experiment, d: usize, r: usize) -> (MfgProblem, RandomFeatureBasis) {
        let p = preset(exp, d, &PresetParams::default()).unwrap();
        let b = RandomFeatureBasis::sample(&p.kernel, r, 1).unwrap();
        (p, b)
    }

    #[test]
    fn grid_endpoints() {
        let disc = Discretization::new(1.0, 50).unwrap();
        assert_eq!(disc.time(0), 0.0);
        assert_eq!(disc.time(49), 1.0);
        assert_relative_eq!(disc.step() * 49.0, 1.0, max_relative = 1e-15);
        assert!(Discretization::new(1.0, 1).is_err());
    }

    #[test]
    fn zero_controls_are_stationary() {
        let disc = Discretization::new(1.0, 6).unwrap();
        let x0 = random_array2((3, 2), 1, 1.0);
        let traj = rollout(x0.view(), &ControlBatch::zeros(3, 6, 2), &disc).unwrap();
        for l in 0..6 {
            assert_eq!(traj.values().slice(s![.., l, ..]), x0);
        }
    }

    #[test]
    fn constant_controls_move_uniformly() {
        let disc = Discretization::new(2.0, 5).unwrap();
        let x0 = ndarray::array![[1.0, -1.0]];
        let v = Array3::from_shape_fn((1, 5, 2), |(_, _, k)| if k == 0 { 0.5 } else { -2.0 });
        let traj = rollout(x0.view(), &ControlBatch::new(v).unwrap(), &disc).unwrap();
        for l in 0..5 {
            let t = l as f64 * disc.step();
            assert_relative_eq!(traj.values()[[0, l, 0]], 1.0 + 0.5 * t, epsilon = 1e-14);
            assert_relative_eq!(traj.values()[[0, l, 1]], -1.0 - 2.0 * t, epsilon = 1e-14);
        }
    }

    #[test]
    fn rollout_is_affine_in_controls() {
        let disc = Discretization::new(1.0, 7).unwrap();
        let x0 = random_array2((4, 3), 2, 1.0);
        let v1 = random_array3((4, 7, 3), 3, 1.0);
        let v2 = random_array3((4, 7, 3), 4, 1.0);
        let (alpha, beta) = (0.7, -1.3);
        let roll = |v: &Array3<f64>| {
            rollout(x0.view(), &ControlBatch::new(v.clone()).unwrap(), &disc)
                .unwrap()
                .values()
                .clone()
        };
        let base = roll(&Array3::zeros((4, 7, 3)));
        let combined = roll(&(&v1 * alpha + &v2 * beta)) - &base;
        let expected = (roll(&v1) - &base) * alpha + (roll(&v2) - &base) * beta;
        for (a, b) in combined.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_shape_mismatch() {
        let disc = Discretization::new(1.0, 5).unwrap();
        let x0 = Array2::zeros((2, 2));
        assert!(rollout(x0.view(), &ControlBatch::zeros(3, 5, 2), &disc).is_err());
        assert!(rollout(x0.view(), &ControlBatch::zeros(2, 4, 2), &disc).is_err());
        assert!(rollout(x0.view(), &ControlBatch::zeros(2, 5, 3), &disc).is_err());
    }

    #[test]
    fn agent_cost_vanishes_at_rest_on_target() {
        let (p, b) = setup(Experiment::A, 2, 8);
        let disc = Discretization::new(1.0, 5).unwrap();
        let z = Array2::zeros((5, 2));
        let v = Array2::zeros((5, 2));
        let a = DualCoefficients::zeros(8, 5);
        assert_eq!(agent_cost(&p, &b, &a, z.view(), v.view(), &disc).unwrap(), 0.0);
    }

    #[test]
    fn agent_cost_closed_form_for_constant_control() {
        let (p, b) = setup(Experiment::A, 2, 8);
        let disc = Discretization::new(1.0, 9).unwrap();
        let x0 = ndarray::array![[0.4, -0.9]];
        let vel = [0.3, 0.8];
        let v = Array3::from_shape_fn((1, 9, 2), |(_, _, k)| vel[k]);
        let controls = ControlBatch::new(v).unwrap();
        let traj = rollout(x0.view(), &controls, &disc).unwrap();
        let a = DualCoefficients::zeros(8, 9);
        let cost = agent_cost(&p, &b, &a, traj.agent(0), controls.agent(0), &disc).unwrap();
        let h = disc.step();
        let speed2 = vel[0] * vel[0] + vel[1] * vel[1];
        let end = [0.4 + 8.0 * h * vel[0], -0.9 + 8.0 * h * vel[1]];
        let expected = 9.0 * h * speed2 / 2.0 + 10.0 * (end[0] * end[0] + end[1] * end[1]);
        assert_relative_eq!(cost, expected, max_relative = 1e-13);
    }

    /// Literal re-evaluation of the running sum, used as an independent check.
    fn naive_agent_cost(
        p: &MfgProblem,
        b: &RandomFeatureBasis,
        a: &Array2<f64>,
        z: ArrayView2<f64>,
        v: ArrayView2<f64>,
        h: f64,
    ) -> f64 {
        let n = z.nrows();
        let mut total = 0.0;
        for l in 0..n {
            let zl = z.row(l).to_vec();
            let vl = v.row(l).to_vec();
            let zeta: Array1<f64> = b.features(&zl).unwrap();
            let mut coupling = 0.0;
            for i in 0..a.nrows() {
                coupling += a[[i, l]] * zeta[i];
            }
            let kinetic: f64 = vl.iter().map(|x| x * x).sum::<f64>() * p.lagrangian.kinetic_weight;
            total += h * (kinetic + p.lagrangian.obstacle_penalty(&zl) + coupling);
        }
        let last = z.row(n - 1).to_vec();
        let mut psi = 0.0;
        for (x, target) in last.iter().zip(&p.terminal.target) {
            psi += (x - target).powi(2);
        }
        total + p.terminal.weight * psi
    }

    #[test]
    fn agent_cost_matches_naive_sum() {
        for (i, exp) in [Experiment::A, Experiment::B, Experiment::C].into_iter().enumerate() {
            let (p, b) = setup(exp, 3, 16);
            let disc = Discretization::new(1.0, 8).unwrap();
            let x0 = random_array2((2, 3), 10 + i as u64, 1.0);
            let controls = ControlBatch::new(random_array3((2, 8, 3), 20 + i as u64, 1.0)).unwrap();
            let a = DualCoefficients::new(random_array2((16, 8), 30 + i as u64, 0.5)).unwrap();
            let traj = rollout(x0.view(), &controls, &disc).unwrap();
            for m in 0..2 {
                let fast = agent_cost(&p, &b, &a, traj.agent(m), controls.agent(m), &disc).unwrap();
                let slow = naive_agent_cost(&p, &b, a.values(), traj.agent(m), controls.agent(m), disc.step());
                assert_relative_eq!(fast, slow, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn objective_without_duals_is_mean_cost() {
        let (p, b) = setup(Experiment::B, 2, 8);
        let disc = Discretization::new(1.0, 6).unwrap();
        let x0 = random_array2((3, 2), 5, 1.0);
        let controls = ControlBatch::new(random_array3((3, 6, 2), 6, 1.0)).unwrap();
        let a = DualCoefficients::zeros(8, 6);
        let traj = rollout(x0.view(), &controls, &disc).unwrap();
        let mean: f64 = (0..3)
            .map(|m| agent_cost(&p, &b, &a, traj.agent(m), controls.agent(m), &disc).unwrap())
            .sum::<f64>()
            / 3.0;
        let obj = saddle_objective(&p, &b, &a, &controls, x0.view(), &disc).unwrap();
        assert_relative_eq!(obj, -mean, max_relative = 1e-13);
    }

    #[test]
    fn duplicating_agents_leaves_objective_unchanged() {
        let (p, b) = setup(Experiment::A, 2, 8);
        let disc = Discretization::new(1.0, 5).unwrap();
        let x0 = random_array2((3, 2), 7, 1.0);
        let v = random_array3((3, 5, 2), 8, 1.0);
        let a = DualCoefficients::new(random_array2((8, 5), 9, 0.3)).unwrap();
        let x0_twice = ndarray::concatenate![Axis(0), x0, x0];
        let v_twice = ndarray::concatenate![Axis(0), v, v];
        let once = saddle_objective(&p, &b, &a, &ControlBatch::new(v).unwrap(), x0.view(), &disc).unwrap();
        let twice = saddle_objective(&p, &b, &a, &ControlBatch::new(v_twice).unwrap(), x0_twice.view(), &disc).unwrap();
        assert_relative_eq!(once, twice, max_relative = 1e-12);
    }

    #[test]
    fn dual_minimizer_is_feature_mean() {
        // For fixed v the objective is (h/2)|a|^2 - h a.mean + const per time sample;
        // minimize it by plain gradient descent and compare with the feature means.
        let (p, b) = setup(Experiment::A, 2, 8);
        let disc = Discretization::new(1.0, 4).unwrap();
        let x0 = random_array2((5, 2), 11, 1.0);
        let controls = ControlBatch::new(random_array3((5, 4, 2), 12, 1.0)).unwrap();
        let traj = rollout(x0.view(), &controls, &disc).unwrap();
        let means = feature_means(&b, &traj).unwrap();

        let objective = |a: &Array2<f64>| {
            saddle_objective(
                &p,
                &b,
                &DualCoefficients::new(a.clone()).unwrap(),
                &controls,
                x0.view(),
                &disc,
            )
            .unwrap()
        };
        let mut a = Array2::<f64>::zeros((8, 4));
        let eps = 1e-6;
        for _ in 0..400 {
            let mut grad = Array2::zeros((8, 4));
            for i in 0..8 {
                for l in 0..4 {
                    let mut ap = a.clone();
                    let mut am = a.clone();
                    ap[[i, l]] += eps;
                    am[[i, l]] -= eps;
                    grad[[i, l]] = (objective(&ap) - objective(&am)) / (2.0 * eps);
                }
            }
            a = a - grad * (0.5 / disc.step());
        }
        for (x, y) in a.iter().zip(means.iter()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        // Strict convexity: perturbing the minimizer increases the objective.
        let base = objective(&means);
        let bumped = objective(&(&means + 1e-3));
        assert!(bumped > base);
    }

    #[test]
    fn inverse_gram_identity_matches_default() {
        let (p, b) = setup(Experiment::A, 2, 8);
        let disc = Discretization::new(1.0, 4).unwrap();
        let x0 = random_array2((2, 2), 1, 1.0);
        let controls = ControlBatch::new(random_array3((2, 4, 2), 2, 1.0)).unwrap();
        let a = DualCoefficients::new(random_array2((8, 4), 3, 1.0)).unwrap();
        let id = saddle_objective(&p, &b, &a, &controls, x0.view(), &disc).unwrap();
        let explicit = saddle_objective_with_metric(
            &p,
            &b,
            &a,
            &controls,
            x0.view(),
            &disc,
            &DualMetric::InverseGram(Array2::eye(8)),
        )
        .unwrap();
        assert_relative_eq!(id, explicit, max_relative = 1e-14);
        let doubled = saddle_objective_with_metric(
            &p,
            &b,
            &a,
            &controls,
            x0.view(),
            &disc,
            &DualMetric::InverseGram(Array2::eye(8) * 2.0),
        )
        .unwrap();
        let energy = 0.5 * disc.step() * a.values().iter().map(|x| x * x).sum::<f64>();
        assert_relative_eq!(doubled - id, energy, max_relative = 1e-12);
    }

    fn finite_difference_check(p: &MfgProblem, b: &RandomFeatureBasis, seed: u64) {
        let (m, n, d) = (3, 5, p.dimension);
        let disc = Discretization::new(p.horizon, n).unwrap();
        let x0 = p.initial.sample(m, seed).unwrap();
        let controls = ControlBatch::new(random_array3((m, n, d), seed, 1.0)).unwrap();
        let a = DualCoefficients::new(random_array2((b.feature_count(), n), seed, 0.5)).unwrap();
        let grad = control_gradient(p, b, &a, x0.view(), &controls, &disc).unwrap();
        let eps = 1e-6;
        for idx in ndarray::indices((m, n, d)) {
            let (i, j, k) = idx;
            let mut vp = controls.values().clone();
            let mut vm = controls.values().clone();
            vp[[i, j, k]] += eps;
            vm[[i, j, k]] -= eps;
            let fp = saddle_objective(p, b, &a, &ControlBatch::new(vp).unwrap(), x0.view(), &disc).unwrap();
            let fm = saddle_objective(p, b, &a, &ControlBatch::new(vm).unwrap(), x0.view(), &disc).unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            let g = grad.values()[[i, j, k]];
            let err = (g - fd).abs() / g.abs().max(1e-4);
            assert!(err < 1e-5, "({i},{j},{k}) adjoint {g} vs fd {fd}");
        }
    }

    #[test]
    fn control_gradient_matches_finite_differences() {
        for (i, exp) in [Experiment::A, Experiment::C].into_iter().enumerate() {
            let (p, b) = setup(exp, 2, 8);
            finite_difference_check(&p, &b, 100 + i as u64);
        }
    }

    #[test]
    fn pure_quadratic_gradient() {
        let p = MfgProblem::new(
            2,
            1.0,
            LagrangianSpec::new(0.5, None).unwrap(),
            TerminalSpec::new(0.0, vec![0.0, 0.0]).unwrap(),
            crate::problem::InitialDistribution::new(vec![vec![0.0, 0.0]], 1.0).unwrap(),
            GaussianKernelSpec::new(1.0, 1.0, 2).unwrap(),
        )
        .unwrap();
        let b = RandomFeatureBasis::sample(&p.kernel, 8, 0).unwrap();
        let disc = Discretization::new(1.0, 6).unwrap();
        let x0 = random_array2((4, 2), 1, 1.0);
        let v = random_array3((4, 6, 2), 2, 1.0);
        let controls = ControlBatch::new(v.clone()).unwrap();
        let grad = control_gradient(&p, &b, &DualCoefficients::zeros(8, 6), x0.view(), &controls, &disc).unwrap();
        let expected = v * (-disc.step() / 4.0);
        for (g, e) in grad.values().iter().zip(expected.iter()) {
            assert_relative_eq!(*g, *e, max_relative = 1e-14);
        }
    }

    #[test]
    fn agents_decouple_given_duals() {
        let (p, b) = setup(Experiment::B, 2, 8);
        let disc = Discretization::new(1.0, 5).unwrap();
        let x0 = p.initial.sample(3, 1).unwrap();
        let v = random_array3((3, 5, 2), 2, 1.0);
        let a = DualCoefficients::new(random_array2((8, 5), 3, 0.5)).unwrap();
        let g1 = control_gradient(&p, &b, &a, x0.view(), &ControlBatch::new(v.clone()).unwrap(), &disc).unwrap();
        let mut v2 = v;
        v2.slice_mut(s![2, .., ..]).mapv_inplace(|x| x + 3.0);
        let g2 = control_gradient(&p, &b, &a, x0.view(), &ControlBatch::new(v2).unwrap(), &disc).unwrap();
        assert_eq!(g1.values().slice(s![..2, .., ..]), g2.values().slice(s![..2, .., ..]));
    }

    #[test]
    fn feature_means_match_direct_average() {
        let (_, b) = setup(Experiment::A, 2, 8);
        let disc = Discretization::new(1.0, 3).unwrap();
        let x0 = random_array2((4, 2), 1, 1.0);
        let controls = ControlBatch::new(random_array3((4, 3, 2), 2, 1.0)).unwrap();
        let traj = rollout(x0.view(), &controls, &disc).unwrap();
        let means = feature_means(&b, &traj).unwrap();
        assert_eq!(means.shape(), &[8, 3]);
        for l in 0..3 {
            let mut acc = Array1::<f64>::zeros(8);
            for m in 0..4 {
                acc += &b.features(&traj.agent(m).row(l).to_vec()).unwrap();
            }
            acc /= 4.0;
            for i in 0..8 {
                assert_relative_eq!(means[[i, l]], acc[i], epsilon = 1e-14);
            }
        }
    }
}
