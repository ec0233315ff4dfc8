//! Cost decomposition and file exports.
//!
//! All CSV files carry a header row and print floats as `{:.16e}` (17
//! significant digits, `.` as decimal separator), which parses back to the
//! same bits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{approximation_error, GaussianKernelSpec, RandomFeatureBasis};
use crate::problem::MfgProblem;
use crate::solver::HistoryEntry;
use crate::transcription::{feature_means, ControlBatch, Discretization, TrajectoryBatch};

const MODULE: &str = "reporting";

/// Population costs at a solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub running: f64,
    pub interaction: f64,
    pub terminal: f64,
    pub total: f64,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

fn check_shapes(traj: &TrajectoryBatch, controls: &ControlBatch, disc: &Discretization) -> Result<()> {
    if traj.values().shape() != controls.values().shape() || traj.steps() != disc.num_steps() {
        return Err(Error::invalid(
            MODULE,
            format!(
                "trajectories {:?} and controls {:?} disagree (grid has {} samples)",
                traj.values().shape(),
                controls.values().shape(),
                disc.num_steps()
            ),
        ));
    }
    Ok(())
}

/// Interaction cost through features: `(h / (2 M^2)) sum_l |sum_m zeta(z[m, l])|^2`.
///
/// Includes the self-interaction diagonal `m = m'`.
pub fn interaction_cost(basis: &RandomFeatureBasis, traj: &TrajectoryBatch, disc: &Discretization) -> Result<f64> {
    let means = feature_means(basis, traj)?;
    Ok(0.5 * disc.step() * means.iter().map(|x| x * x).sum::<f64>())
}

/// Interaction cost through the pairwise double sum `(h / (2 M^2)) sum_l sum_{m, m'} K_r(z_m, z_m')`.
/// Quadratic in the number of agents.
pub fn interaction_cost_pairwise(
    basis: &RandomFeatureBasis,
    traj: &TrajectoryBatch,
    disc: &Discretization,
) -> Result<f64> {
    let (m, n) = (traj.agents(), traj.steps());
    let dims = basis.interaction_dims();
    if dims > traj.dim() {
        return Err(Error::invalid(
            MODULE,
            "basis acts on more coordinates than the state has",
        ));
    }
    let z = traj.values();
    let mut total = 0.0;
    let mut diff = vec![0.0; dims];
    for l in 0..n {
        for a in 0..m {
            for b in 0..m {
                for k in 0..dims {
                    diff[k] = z[[a, l, k]] - z[[b, l, k]];
                }
                total += basis.approx_shift(&diff)?;
            }
        }
    }
    Ok(total * disc.step() / (2.0 * (m * m) as f64))
}

/// Running, interaction and terminal population costs.
pub fn cost_report(
    problem: &MfgProblem,
    basis: &RandomFeatureBasis,
    traj: &TrajectoryBatch,
    controls: &ControlBatch,
    disc: &Discretization,
) -> Result<CostReport> {
    check_shapes(traj, controls, disc)?;
    let (m, n) = (traj.agents(), traj.steps());
    let h = disc.step();
    let mut running = 0.0;
    let mut terminal = 0.0;
    for agent in 0..m {
        let z = traj.agent(agent);
        let v = controls.agent(agent);
        for l in 0..n {
            let zl = z.row(l).to_vec();
            let vl = v.row(l).to_vec();
            running += problem.lagrangian.value(disc.time(l), &zl, &vl);
        }
        terminal += problem.terminal.value(&z.row(n - 1).to_vec());
    }
    let running = h * running / m as f64;
    let terminal = terminal / m as f64;
    let interaction = interaction_cost(basis, traj, disc)?;
    Ok(CostReport {
        running,
        interaction,
        terminal,
        total: running + interaction + terminal,
    })
}

/// Time-integrated obstacle penalty `(h / M) sum_m sum_l obstacle(z[m, l])`.
pub fn obstacle_cost(problem: &MfgProblem, traj: &TrajectoryBatch, disc: &Discretization) -> f64 {
    let mut total = 0.0;
    for agent in 0..traj.agents() {
        for z in traj.agent(agent).rows() {
            total += problem.lagrangian.obstacle_penalty(&z.to_vec());
        }
    }
    disc.step() * total / traj.agents() as f64
}

/// Largest distance of any state from its agent's start-to-end chord,
/// relative to that chord's length.
pub fn max_chord_deviation(traj: &TrajectoryBatch) -> f64 {
    let mut worst: f64 = 0.0;
    for agent in 0..traj.agents() {
        let z = traj.agent(agent);
        let start = z.row(0);
        let end = z.row(traj.steps() - 1);
        let chord = &end - &start;
        let length = chord.dot(&chord).sqrt();
        if length == 0.0 {
            continue;
        }
        for p in z.rows() {
            let rel = &p - &start;
            let along = rel.dot(&chord) / (length * length);
            let off = &rel - &(&chord * along);
            worst = worst.max(off.dot(&off).sqrt() / length);
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    Csv,
    Json,
}

impl FromStr for TrajectoryFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::invalid(MODULE, format!("unknown trajectory format `{other}`"))),
        }
    }
}

impl TrajectoryFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AgentRecord {
    agent: usize,
    rows: Vec<StepRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StepRecord {
    step: usize,
    t: f64,
    x: Vec<f64>,
}

/// CSV `agent,step,t,x1,...,xd`, one row per agent and time sample, zero-based indices.
pub fn trajectories_to_csv(traj: &TrajectoryBatch, disc: &Discretization) -> String {
    let d = traj.dim();
    let mut out = String::from("agent,step,t");
    for k in 1..=d {
        let _ = write!(out, ",x{k}");
    }
    out.push('\n');
    for agent in 0..traj.agents() {
        for (l, z) in traj.agent(agent).rows().into_iter().enumerate() {
            let _ = write!(out, "{agent},{l},{:.16e}", disc.time(l));
            for x in z {
                let _ = write!(out, ",{x:.16e}");
            }
            out.push('\n');
        }
    }
    out
}

fn trajectories_to_json(traj: &TrajectoryBatch, disc: &Discretization) -> String {
    let records: Vec<AgentRecord> = (0..traj.agents())
        .map(|agent| AgentRecord {
            agent,
            rows: traj
                .agent(agent)
                .rows()
                .into_iter()
                .enumerate()
                .map(|(step, z)| StepRecord {
                    step,
                    t: disc.time(step),
                    x: z.to_vec(),
                })
                .collect(),
        })
        .collect();
    serde_json::to_string(&records).expect("trajectory records serialize")
}

pub fn export_trajectories(
    traj: &TrajectoryBatch,
    disc: &Discretization,
    path: &Path,
    format: TrajectoryFormat,
) -> Result<()> {
    let text = match format {
        TrajectoryFormat::Csv => trajectories_to_csv(traj, disc),
        TrajectoryFormat::Json => trajectories_to_json(traj, disc),
    };
    fs::write(path, text)?;
    Ok(())
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::parse(MODULE, format!("line {line}: `{field}` is not a number")))
}

fn parse_usize(field: &str, line: usize) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::parse(MODULE, format!("line {line}: `{field}` is not an index")))
}

/// Parses the CSV written by [`export_trajectories`]; returns states and the `t` column per step.
pub fn trajectories_from_csv(text: &str) -> Result<(TrajectoryBatch, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::parse(MODULE, e.to_string()))?;
    if header.len() < 4 || header.iter().take(3).ne(["agent", "step", "t"]) {
        return Err(Error::parse(
            MODULE,
            format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let d = header.len() - 3;
    let mut rows: Vec<(usize, usize, f64, Vec<f64>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(MODULE, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let x = record
            .iter()
            .skip(3)
            .map(|f| parse_f64(f, line))
            .collect::<Result<Vec<_>>>()?;
        rows.push((
            parse_usize(&record[0], line)?,
            parse_usize(&record[1], line)?,
            parse_f64(&record[2], line)?,
            x,
        ));
    }
    assemble(rows, d)
}

fn assemble(rows: Vec<(usize, usize, f64, Vec<f64>)>, d: usize) -> Result<(TrajectoryBatch, Vec<f64>)> {
    let m = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let n = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    if m == 0 || n == 0 || rows.len() != m * n {
        return Err(Error::parse(
            MODULE,
            "trajectory rows do not form a complete agent x step grid",
        ));
    }
    let mut values = Array3::from_elem((m, n, d), f64::NAN);
    let mut times = vec![f64::NAN; n];
    for (agent, step, t, x) in rows {
        times[step] = t;
        for (k, v) in x.into_iter().enumerate() {
            values[[agent, step, k]] = v;
        }
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::parse(MODULE, "duplicate or missing trajectory rows"));
    }
    Ok((TrajectoryBatch::from_values(values)?, times))
}

pub fn trajectories_from_json(text: &str) -> Result<(TrajectoryBatch, Vec<f64>)> {
    let records: Vec<AgentRecord> = serde_json::from_str(text).map_err(|e| Error::parse(MODULE, e.to_string()))?;
    let d = records
        .first()
        .and_then(|r| r.rows.first())
        .map(|s| s.x.len())
        .ok_or_else(|| Error::parse(MODULE, "empty trajectory file"))?;
    let mut rows = Vec::new();
    for rec in records {
        for s in rec.rows {
            if s.x.len() != d {
                return Err(Error::parse(MODULE, "inconsistent state dimension"));
            }
            rows.push((rec.agent, s.step, s.t, s.x));
        }
    }
    assemble(rows, d)
}

pub fn read_trajectories(path: &Path, format: TrajectoryFormat) -> Result<(TrajectoryBatch, Vec<f64>)> {
    let text = fs::read_to_string(path)?;
    match format {
        TrajectoryFormat::Csv => trajectories_from_csv(&text),
        TrajectoryFormat::Json => trajectories_from_json(&text),
    }
}

/// CSV `iteration,residual,objective`.
pub fn write_residual_history(history: &[HistoryEntry], path: &Path) -> Result<()> {
    let mut out = String::from("iteration,residual,objective\n");
    for h in history {
        let _ = writeln!(out, "{},{:.16e},{:.16e}", h.iteration, h.residual, h.objective);
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelErrorRow {
    pub r: usize,
    pub seed: u64,
    pub linf: f64,
    pub l2: f64,
}

/// Approximation errors for every `(r, seed)` pair, in that nesting order.
pub fn kernel_error_curve(
    spec: &GaussianKernelSpec,
    r_values: &[usize],
    seeds: &[u64],
    points: ArrayView2<'_, f64>,
) -> Result<Vec<KernelErrorRow>> {
    if r_values.is_empty() || seeds.is_empty() {
        return Err(Error::invalid(MODULE, "need at least one feature count and one seed"));
    }
    let mut rows = Vec::with_capacity(r_values.len() * seeds.len());
    for &r in r_values {
        for &seed in seeds {
            let basis = RandomFeatureBasis::sample(spec, r, seed)?;
            let (linf, l2) = approximation_error(spec, &basis, points)?;
            rows.push(KernelErrorRow { r, seed, linf, l2 });
        }
    }
    Ok(rows)
}

/// Writes `r,seed,linf,l2` to `path` and returns the rows.
pub fn export_kernel_error_curve(
    spec: &GaussianKernelSpec,
    r_values: &[usize],
    seeds: &[u64],
    points: ArrayView2<'_, f64>,
    path: &Path,
) -> Result<Vec<KernelErrorRow>> {
    let rows = kernel_error_curve(spec, r_values, seeds, points)?;
    let mut out = String::from("r,seed,linf,l2\n");
    for row in &rows {
        let _ = writeln!(out, "{},{},{:.16e},{:.16e}", row.r, row.seed, row.linf, row.l2);
    }
    fs::write(path, out)?;
    Ok(rows)
}

/// `K(x, 0)` and `K_r(x, 0)` for `x = s * direction`, `s` uniform on `[-radius, radius]`.
/// The direction is normalized first. Rows are `(s, exact, approx)`.
pub fn kernel_slice(
    spec: &GaussianKernelSpec,
    basis: &RandomFeatureBasis,
    direction: &[f64],
    radius: f64,
    num_points: usize,
) -> Result<Array2<f64>> {
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::invalid(MODULE, "slice direction must be nonzero"));
    }
    if num_points < 2 {
        return Err(Error::invalid(MODULE, "a slice needs at least two points"));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(MODULE, "slice radius must be positive"));
    }
    let unit: Vec<f64> = direction.iter().map(|x| x / norm).collect();
    let origin = vec![0.0; unit.len()];
    let mut out = Array2::zeros((num_points, 3));
    for i in 0..num_points {
        let s = if 2 * i + 1 == num_points {
            0.0
        } else {
            -radius + 2.0 * radius * i as f64 / (num_points - 1) as f64
        };
        let x: Vec<f64> = unit.iter().map(|u| s * u).collect();
        out[[i, 0]] = s;
        out[[i, 1]] = spec.eval(&x, &origin)?;
        out[[i, 2]] = basis.approx(&x, &origin)?;
    }
    Ok(out)
}

/// Writes `s,exact,approx` to `path`.
pub fn export_kernel_slice(
    spec: &GaussianKernelSpec,
    basis: &RandomFeatureBasis,
    direction: &[f64],
    radius: f64,
    num_points: usize,
    path: &Path,
) -> Result<Array2<f64>> {
    let rows = kernel_slice(spec, basis, direction, radius, num_points)?;
    let mut out = String::from("s,exact,approx\n");
    for row in rows.rows() {
        let _ = writeln!(out, "{:.16e},{:.16e},{:.16e}", row[0], row[1], row[2]);
    }
    fs::write(path, out)?;
    Ok(rows)
}
