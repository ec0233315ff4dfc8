use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rfmfg_core::kernels::grid_points;
use rfmfg_core::reporting::{
    export_kernel_error_curve, export_kernel_slice, export_trajectories, write_residual_history, TrajectoryFormat,
};
use rfmfg_core::rng::{GaussianSource, Stream};
use rfmfg_core::{solver, CostReport, Discretization, MfgProblem, RandomFeatureBasis};

use crate::config::{RunConfig, TrajectoryFileFormat};
use crate::CliError;

/// Command-line overrides applied on top of the configuration file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    /// Suppresses progress lines.
    pub quiet: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub converged: bool,
    pub iterations: usize,
    pub cost_report: CostReport,
    pub output_dir: PathBuf,
}

fn io_error(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_error(path.display().to_string()))
}

fn with_io_context<T>(path: &Path, result: rfmfg_core::Result<T>) -> Result<T, CliError> {
    result.map_err(|e| match e {
        rfmfg_core::Error::Io(source) => CliError::Io {
            context: path.display().to_string(),
            source,
        },
        other => CliError::Core(other),
    })
}

fn apply_overrides(config: &RunConfig, options: &RunOptions) -> RunConfig {
    let mut config = config.clone();
    if let Some(dir) = &options.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(threads) = options.threads {
        config.threads = threads;
    }
    config
}

fn prepare_output(config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir).map_err(io_error(dir.display().to_string()))?;
    write_file(&dir.join("resolved_config.toml"), &config.emit())?;
    Ok(dir)
}

fn in_pool<T: Send>(threads: usize, work: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(work))
}

/// Solves the configured problem and populates the output directory.
pub fn run(config: &RunConfig, options: &RunOptions) -> Result<RunOutcome, CliError> {
    let config = apply_overrides(config, options);
    let problem = config.problem()?;
    let solver_config = config.solver_config();
    solver_config.validate()?;
    let dir = prepare_output(&config)?;
    let quiet = options.quiet;

    let solution = in_pool(config.threads, || -> Result<_, CliError> {
        let basis = RandomFeatureBasis::sample(&problem.kernel, config.r, config.seeds.frequencies)?;
        let disc = Discretization::for_problem(&problem, config.time_steps)?;
        let x0 = problem.initial.sample(config.agents, config.seeds.initial_positions)?;
        let mut stdout = std::io::stdout();
        let solution = solver::solve_from(&problem, &basis, x0.view(), &disc, &solver_config, |entry| {
            if !quiet {
                let _ = writeln!(stdout, "{}", entry.log_line());
            }
        })?;
        Ok(solution)
    })??;

    let report = &solution.cost_report;
    if config.exports.trajectories {
        let format = match config.exports.trajectory_format {
            TrajectoryFileFormat::Csv => TrajectoryFormat::Csv,
            TrajectoryFileFormat::Json => TrajectoryFormat::Json,
        };
        let path = dir.join(format!("trajectories.{}", format.extension()));
        with_io_context(
            &path,
            export_trajectories(&solution.trajectories, &solution.discretization, &path, format),
        )?;
    }
    if config.exports.cost_report {
        let path = dir.join("cost_report.json");
        with_io_context(&path, report.write_json(&path))?;
    }
    let path = dir.join("residual_history.csv");
    with_io_context(&path, write_residual_history(&solution.residual_history, &path))?;
    if config.exports.kernel_error_curve || config.exports.kernel_slice {
        in_pool(config.threads, || {
            kernel_exports(
                &config,
                &problem,
                &dir,
                config.exports.kernel_error_curve,
                config.exports.kernel_slice,
            )
        })??;
    }

    if !quiet {
        println!(
            "{} after {} iterations: running={:.6e} interaction={:.6e} terminal={:.6e} total={:.6e}",
            if solution.converged {
                "converged"
            } else {
                "not converged"
            },
            solution.iterations,
            report.running,
            report.interaction,
            report.terminal,
            report.total
        );
    }
    Ok(RunOutcome {
        converged: solution.converged,
        iterations: solution.iterations,
        cost_report: *report,
        output_dir: dir,
    })
}

/// Writes the kernel error curve and slice for the configured kernel.
pub fn kernel_bench(config: &RunConfig, options: &RunOptions) -> Result<PathBuf, CliError> {
    let config = apply_overrides(config, options);
    let problem = config.problem()?;
    let dir = prepare_output(&config)?;
    in_pool(config.threads, || kernel_exports(&config, &problem, &dir, true, true))??;
    if !options.quiet {
        println!("kernel exports written to {}", dir.display());
    }
    Ok(dir)
}

fn kernel_exports(
    config: &RunConfig,
    problem: &MfgProblem,
    dir: &Path,
    curve: bool,
    slice: bool,
) -> Result<(), CliError> {
    let spec = &problem.kernel;
    let dims = spec.interaction_dims;
    let bench = &config.kernel_bench;
    if curve {
        let points = if dims == 2 {
            grid_points(2, bench.grid_per_axis, bench.grid_half_width)?
        } else {
            problem
                .initial
                .centered_samples(bench.sample_points, dims, config.seeds.initial_positions)?
        };
        let path = dir.join("kernel_error_curve.csv");
        with_io_context(
            &path,
            export_kernel_error_curve(spec, &bench.r_values, &bench.seeds, points.view(), &path),
        )?;
    }
    if slice {
        let basis = RandomFeatureBasis::sample(spec, config.r, config.seeds.frequencies)?;
        let mut rng = GaussianSource::new(config.seeds.frequencies, Stream::EvaluationPoints);
        let direction: Vec<f64> = (0..dims).map(|_| rng.standard_normal()).collect();
        let path = dir.join("kernel_slice.csv");
        with_io_context(
            &path,
            export_kernel_slice(spec, &basis, &direction, bench.slice_radius, bench.slice_points, &path),
        )?;
    }
    Ok(())
}
