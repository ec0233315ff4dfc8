//! Fixtures shared by the benchmarks: preset A with random controls and
//! duals at a chosen size.

use ndarray::Array2;
use rfmfg_core::problem::preset;
use rfmfg_core::transcription::rollout;
use rfmfg_core::{
    Discretization, Experiment, InitMode, MfgProblem, PresetParams, RandomFeatureBasis, SaddleState, SolverConfig,
    TrajectoryBatch,
};

pub struct Fixture {
    pub problem: MfgProblem,
    pub basis: RandomFeatureBasis,
    pub disc: Discretization,
    pub initial_positions: Array2<f64>,
    pub state: SaddleState,
    pub trajectories: TrajectoryBatch,
    pub config: SolverConfig,
}

pub fn fixture(d: usize, agents: usize, steps: usize, features: usize) -> Fixture {
    let problem = preset(Experiment::A, d, &PresetParams::default()).expect("valid preset");
    let basis = RandomFeatureBasis::sample(&problem.kernel, features, 0).expect("even feature count");
    let disc = Discretization::for_problem(&problem, steps).expect("at least two samples");
    let initial_positions = problem.initial.sample(agents, 0).expect("positive count");
    let config = SolverConfig {
        control_init: InitMode::Random { scale: 0.5, seed: 1 },
        dual_init: InitMode::Random { scale: 0.1, seed: 2 },
        ..SolverConfig::default()
    };
    let state = SaddleState::initial(&config, agents, &disc, d, features);
    let trajectories = rollout(initial_positions.view(), &state.controls, &disc).expect("consistent shapes");
    Fixture {
        problem,
        basis,
        disc,
        initial_positions,
        state,
        trajectories,
        config,
    }
}
