//! Gaussian interaction kernels and their random Fourier feature expansion.
//!
//! A shift-invariant kernel `K(x - y) = mu * exp(-|x' - y'|^2 / (2 sigma^2))`,
//! where `x'` keeps the first `interaction_dims` coordinates, is the Fourier
//! transform of a Gaussian spectral density with per-coordinate standard
//! deviation `1 / sigma`. Drawing `r / 2` frequencies `omega_j` from that
//! density gives the feature map
//!
//! ```text
//! zeta(x) = sqrt(2 mu / r) * [cos(omega_1 . x'), sin(omega_1 . x'), cos(omega_2 . x'), ...]
//! ```
//!
//! whose inner products `zeta(x) . zeta(y)` approximate `K(x - y)` without bias.
//! Features are laid out as interleaved `(cos, sin)` pairs.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::rng::{GaussianSource, Stream};

const MODULE: &str = "kernels";

/// Gaussian repulsive kernel acting on the leading `interaction_dims` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernelSpec {
    /// Repulsion intensity, equal to `K(0)`.
    pub mu: f64,
    /// Repulsion radius.
    pub sigma: f64,
    pub interaction_dims: usize,
}

impl GaussianKernelSpec {
    pub fn new(mu: f64, sigma: f64, interaction_dims: usize) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::invalid(MODULE, format!("mu must be positive, got {mu}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(MODULE, format!("sigma must be positive, got {sigma}")));
        }
        if interaction_dims < 1 {
            return Err(Error::invalid(MODULE, "interaction_dims must be at least 1"));
        }
        Ok(Self {
            mu,
            sigma,
            interaction_dims,
        })
    }

    /// Exact kernel value `K(x - y)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::invalid(
                MODULE,
                format!("point dimensions differ ({} vs {})", x.len(), y.len()),
            ));
        }
        self.check_len(x.len())?;
        let sq: f64 = x[..self.interaction_dims]
            .iter()
            .zip(&y[..self.interaction_dims])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.profile(sq))
    }

    /// Kernel value as a function of the squared projected distance.
    pub fn profile(&self, squared_distance: f64) -> f64 {
        self.mu * (-squared_distance / (2.0 * self.sigma * self.sigma)).exp()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len < self.interaction_dims {
            return Err(Error::invalid(
                MODULE,
                format!(
                    "point has {len} coordinates but the kernel acts on {}",
                    self.interaction_dims
                ),
            ));
        }
        Ok(())
    }
}

/// Free-function form of [`GaussianKernelSpec::eval`].
pub fn kernel_exact(spec: &GaussianKernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.eval(x, y)
}

/// Sampled frequencies plus amplitude defining the feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomFeatureBasis {
    spec: GaussianKernelSpec,
    /// `(r / 2) x interaction_dims`, one frequency per row.
    frequencies: Array2<f64>,
    amplitude: f64,
    seed: u64,
}

impl RandomFeatureBasis {
    /// Draws `r / 2` frequencies i.i.d. from `N(0, sigma^-2 I)`.
    ///
    /// Rows are filled in row-major order from a single stream, so bases with
    /// the same seed and larger `r` extend smaller ones.
    pub fn sample(spec: &GaussianKernelSpec, r: usize, seed: u64) -> Result<Self> {
        if r < 2 || !r.is_multiple_of(2) {
            return Err(Error::invalid(
                MODULE,
                format!("feature count must be even and at least 2, got {r}"),
            ));
        }
        if spec.interaction_dims < 1 {
            return Err(Error::invalid(MODULE, "interaction_dims must be at least 1"));
        }
        let mut source = GaussianSource::new(seed, Stream::Frequencies);
        let scale = 1.0 / spec.sigma;
        let frequencies =
            Array2::from_shape_simple_fn((r / 2, spec.interaction_dims), || scale * source.standard_normal());
        Ok(Self {
            spec: *spec,
            frequencies,
            amplitude: (2.0 * spec.mu / r as f64).sqrt(),
            seed,
        })
    }

    /// Builds a basis from explicit frequencies (one per row).
    pub fn from_frequencies(spec: &GaussianKernelSpec, frequencies: Array2<f64>, seed: u64) -> Result<Self> {
        if frequencies.nrows() == 0 {
            return Err(Error::invalid(MODULE, "at least one frequency is required"));
        }
        if frequencies.ncols() != spec.interaction_dims {
            return Err(Error::invalid(
                MODULE,
                format!(
                    "frequencies have {} columns, kernel acts on {} dims",
                    frequencies.ncols(),
                    spec.interaction_dims
                ),
            ));
        }
        let r = 2 * frequencies.nrows();
        Ok(Self {
            spec: *spec,
            frequencies: frequencies.as_standard_layout().into_owned(),
            amplitude: (2.0 * spec.mu / r as f64).sqrt(),
            seed,
        })
    }

    /// Same frequencies, zero amplitude: every feature vanishes, which switches
    /// the population interaction off.
    pub fn without_interaction(mut self) -> Self {
        self.amplitude = 0.0;
        self
    }

    pub fn spec(&self) -> &GaussianKernelSpec {
        &self.spec
    }

    pub fn frequencies(&self) -> ArrayView2<'_, f64> {
        self.frequencies.view()
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of features `r`.
    pub fn feature_count(&self) -> usize {
        2 * self.frequencies.nrows()
    }

    pub fn interaction_dims(&self) -> usize {
        self.spec.interaction_dims
    }

    /// Effective `K_r(0) = amplitude^2 * r / 2` (equals `mu` unless silenced).
    pub fn self_interaction(&self) -> f64 {
        self.amplitude * self.amplitude * self.frequencies.nrows() as f64
    }

    fn check_len(&self, len: usize) -> Result<()> {
        self.spec.check_len(len)
    }

    #[inline]
    fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.frequencies
            .as_slice()
            .expect("frequencies are stored in standard layout")
            .chunks_exact(self.spec.interaction_dims)
    }

    #[inline]
    fn phase(omega: &[f64], x: &[f64]) -> f64 {
        omega.iter().zip(x).map(|(w, xi)| w * xi).sum()
    }

    /// Feature vector `zeta(x)`.
    pub fn features(&self, x: &[f64]) -> Result<Array1<f64>> {
        self.check_len(x.len())?;
        let mut out = Array1::zeros(self.feature_count());
        self.features_into(x, out.as_slice_mut().expect("fresh array is contiguous"));
        Ok(out)
    }

    /// Writes `zeta(x)` into `out` (length `r`). Lengths are the caller's responsibility.
    pub(crate) fn features_into(&self, x: &[f64], out: &mut [f64]) {
        for (omega, pair) in self.rows().zip(out.chunks_exact_mut(2)) {
            let (s, c) = Self::phase(omega, x).sin_cos();
            pair[0] = self.amplitude * c;
            pair[1] = self.amplitude * s;
        }
    }

    /// Adds `zeta(x)` into `acc`.
    pub(crate) fn accumulate_features(&self, x: &[f64], acc: &mut [f64]) {
        for (omega, pair) in self.rows().zip(acc.chunks_exact_mut(2)) {
            let (s, c) = Self::phase(omega, x).sin_cos();
            pair[0] += self.amplitude * c;
            pair[1] += self.amplitude * s;
        }
    }

    /// Jacobian of the feature map, `r x len(x)`; columns past `interaction_dims` are zero.
    pub fn feature_gradient(&self, x: &[f64]) -> Result<Array2<f64>> {
        self.check_len(x.len())?;
        let dims = self.spec.interaction_dims;
        let mut out = Array2::zeros((self.feature_count(), x.len()));
        for (j, omega) in self.rows().enumerate() {
            let (s, c) = Self::phase(omega, x).sin_cos();
            for k in 0..dims {
                out[[2 * j, k]] = -self.amplitude * s * omega[k];
                out[[2 * j + 1, k]] = self.amplitude * c * omega[k];
            }
        }
        Ok(out)
    }

    /// Returns `coeffs . zeta(x)` and adds `G(x)^T coeffs` into `grad`.
    ///
    /// This is the per-state work of the adjoint pass; `G` is never formed.
    pub(crate) fn pair_with_gradient(&self, x: &[f64], coeffs: &[f64], grad: &mut [f64]) -> f64 {
        let mut value = 0.0;
        for (omega, a) in self.rows().zip(coeffs.chunks_exact(2)) {
            let (s, c) = Self::phase(omega, x).sin_cos();
            value += c * a[0] + s * a[1];
            let weight = self.amplitude * (c * a[1] - s * a[0]);
            for (g, w) in grad.iter_mut().zip(omega) {
                *g += weight * w;
            }
        }
        self.amplitude * value
    }

    /// Approximate kernel `K_r(x, y) = zeta(x) . zeta(y)`.
    pub fn approx(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::invalid(
                MODULE,
                format!("point dimensions differ ({} vs {})", x.len(), y.len()),
            ));
        }
        self.check_len(x.len())?;
        let zx = self.features(x)?;
        let zy = self.features(y)?;
        Ok(zx.dot(&zy))
    }

    /// Approximate kernel through the angle-difference form
    /// `(2 mu / r) * sum_j cos(omega_j . (x' - y'))`, exactly shift-invariant.
    pub fn approx_shift(&self, diff: &[f64]) -> Result<f64> {
        self.check_len(diff.len())?;
        let sum: f64 = self.rows().map(|omega| Self::phase(omega, diff).cos()).sum();
        Ok(self.amplitude * self.amplitude * sum)
    }

    /// Text record: header, scalar fields, then one frequency row per line.
    /// Floats use Rust's shortest round-trip formatting, so reading back is bit-exact.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# rfmfg random feature basis v1\n");
        let _ = writeln!(out, "mu {:e}", self.spec.mu);
        let _ = writeln!(out, "sigma {:e}", self.spec.sigma);
        let _ = writeln!(out, "interaction_dims {}", self.spec.interaction_dims);
        let _ = writeln!(out, "feature_count {}", self.feature_count());
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "amplitude {:e}", self.amplitude);
        out.push_str("frequencies\n");
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|w| format!("{w:e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let mut field = |name: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(MODULE, format!("missing field `{name}`")))?;
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse(MODULE, format!("bad line `{line}`")))?;
            if key != name {
                return Err(Error::parse(MODULE, format!("expected field `{name}`, found `{key}`")));
            }
            Ok(value.trim().to_string())
        };
        fn num<T: std::str::FromStr>(name: &str, s: String) -> Result<T> {
            s.parse()
                .map_err(|_| Error::parse(MODULE, format!("field `{name}` is not a number: {s}")))
        }
        let mu: f64 = num("mu", field("mu")?)?;
        let sigma: f64 = num("sigma", field("sigma")?)?;
        let dims: usize = num("interaction_dims", field("interaction_dims")?)?;
        let r: usize = num("feature_count", field("feature_count")?)?;
        let seed: u64 = num("seed", field("seed")?)?;
        let amplitude: f64 = num("amplitude", field("amplitude")?)?;
        let spec = GaussianKernelSpec::new(mu, sigma, dims)?;
        if r < 2 || !r.is_multiple_of(2) {
            return Err(Error::parse(MODULE, format!("feature_count {r} is not even")));
        }

        let mut rest = text
            .lines()
            .skip_while(|l| l.trim() != "frequencies")
            .skip(1)
            .filter(|l| !l.trim().is_empty());
        let mut values = Vec::with_capacity(r / 2 * dims);
        for _ in 0..r / 2 {
            let line = rest
                .next()
                .ok_or_else(|| Error::parse(MODULE, "too few frequency rows"))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| num::<f64>("frequencies", t.to_string()))
                .collect::<Result<_>>()?;
            if row.len() != dims {
                return Err(Error::parse(MODULE, "frequency row has wrong length"));
            }
            values.extend(row);
        }
        if rest.next().is_some() {
            return Err(Error::parse(MODULE, "too many frequency rows"));
        }
        let frequencies =
            Array2::from_shape_vec((r / 2, dims), values).map_err(|e| Error::parse(MODULE, e.to_string()))?;
        Ok(Self {
            spec,
            frequencies,
            amplitude,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Free-function form of [`RandomFeatureBasis::sample`].
pub fn sample_frequencies(spec: &GaussianKernelSpec, r: usize, seed: u64) -> Result<RandomFeatureBasis> {
    RandomFeatureBasis::sample(spec, r, seed)
}

/// Free-function form of [`RandomFeatureBasis::approx`].
pub fn kernel_approx(basis: &RandomFeatureBasis, x: &[f64], y: &[f64]) -> Result<f64> {
    basis.approx(x, y)
}

/// `(linf, l2)` of `K(p, 0) - K_r(p, 0)` over the rows of `points`.
///
/// The l2 figure is the root-mean-square over the evaluation set.
pub fn approximation_error(
    spec: &GaussianKernelSpec,
    basis: &RandomFeatureBasis,
    points: ArrayView2<'_, f64>,
) -> Result<(f64, f64)> {
    if points.nrows() == 0 {
        return Err(Error::invalid(MODULE, "evaluation point set is empty"));
    }
    let dims = spec.interaction_dims;
    if points.ncols() < dims {
        return Err(Error::invalid(
            MODULE,
            format!("points have {} coordinates, need {dims}", points.ncols()),
        ));
    }
    let mut linf: f64 = 0.0;
    let mut sum_sq = 0.0;
    let mut buf = vec![0.0; dims];
    for p in points.rows() {
        for (b, v) in buf.iter_mut().zip(p.iter()) {
            *b = *v;
        }
        let sq: f64 = buf.iter().map(|v| v * v).sum();
        let e = spec.profile(sq) - basis.approx_shift(&buf)?;
        linf = linf.max(e.abs());
        sum_sq += e * e;
    }
    Ok((linf, (sum_sq / points.nrows() as f64).sqrt()))
}

/// Uniform tensor grid with `per_axis` points on `[-half_width, half_width]^dims`.
pub fn grid_points(dims: usize, per_axis: usize, half_width: f64) -> Result<Array2<f64>> {
    if dims == 0 || per_axis < 2 {
        return Err(Error::invalid(
            MODULE,
            "grid needs dims >= 1 and at least 2 points per axis",
        ));
    }
    let total = per_axis
        .checked_pow(dims as u32)
        .filter(|&n| n <= 10_000_000)
        .ok_or_else(|| Error::invalid(MODULE, "grid is too large"))?;
    let step = 2.0 * half_width / (per_axis - 1) as f64;
    let mut out = Array2::zeros((total, dims));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let mut rem = i;
        for k in (0..dims).rev() {
            row[k] = -half_width + (rem % per_axis) as f64 * step;
            rem /= per_axis;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvaluationSet {
    Grid,
    Sampled,
}

impl EvaluationSet {
    pub fn tag(&self) -> &'static str {
        match self {
            EvaluationSet::Grid => "grid",
            EvaluationSet::Sampled => "sampled",
        }
    }
}

/// Approximation errors for a sequence of feature counts.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelErrorReport {
    pub feature_counts: Vec<usize>,
    pub linf_errors: Vec<f64>,
    pub l2_errors: Vec<f64>,
    pub evaluation_set: EvaluationSet,
}

impl KernelErrorReport {
    /// Errors for each `r` in `feature_counts`, all bases drawn with `seed`.
    pub fn compute(
        spec: &GaussianKernelSpec,
        feature_counts: &[usize],
        seed: u64,
        points: ArrayView2<'_, f64>,
        evaluation_set: EvaluationSet,
    ) -> Result<Self> {
        let mut report = Self {
            feature_counts: Vec::with_capacity(feature_counts.len()),
            linf_errors: Vec::with_capacity(feature_counts.len()),
            l2_errors: Vec::with_capacity(feature_counts.len()),
            evaluation_set,
        };
        for &r in feature_counts {
            let basis = RandomFeatureBasis::sample(spec, r, seed)?;
            let (linf, l2) = approximation_error(spec, &basis, points)?;
            report.feature_counts.push(r);
            report.linf_errors.push(linf);
            report.l2_errors.push(l2);
        }
        Ok(report)
    }

    /// CSV with header `r,linf,l2`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,linf,l2\n");
        for ((r, linf), l2) in self.feature_counts.iter().zip(&self.linf_errors).zip(&self.l2_errors) {
            let _ = writeln!(out, "{r},{linf:.16e},{l2:.16e}");
        }
        out
    }
}
