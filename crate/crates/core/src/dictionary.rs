//! Sampling grid, spike support, dictionary `G(θ)` with its derivative
//! blocks, and signal synthesis.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, Order};

/// `N` uniformly spaced instants on `[start, end]`, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleGrid {
    pub start: f64,
    pub end: f64,
    pub n_samples: usize,
}

impl SampleGrid {
    pub fn new(start: f64, end: f64, n_samples: usize) -> Result<Self> {
        let grid = SampleGrid {
            start,
            end,
            n_samples,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// The symmetric interval `[−T/2, T/2]`.
    pub fn centered(n_samples: usize, half_width: f64) -> Result<Self> {
        Self::new(-half_width, half_width, n_samples)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::validation("sample grid needs at least 2 instants"));
        }
        if !(self.start.is_finite() && self.end.is_finite() && self.start < self.end) {
            return Err(Error::validation(format!(
                "sample interval [{}, {}] is empty or non-finite",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_samples
    }

    pub fn is_empty(&self) -> bool {
        self.n_samples == 0
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn spacing(&self) -> f64 {
        self.length() / (self.n_samples - 1) as f64
    }

    pub fn instant(&self, s: usize) -> f64 {
        // exactly mirror-symmetric about the midpoint
        let n1 = (self.n_samples - 1) as f64;
        let mid = 0.5 * (self.start + self.end);
        let half = 0.5 * (self.end - self.start);
        mid + half * ((2 * s) as f64 - n1) / n1
    }

    pub fn instants(&self) -> Vec<f64> {
        (0..self.n_samples).map(|s| self.instant(s)).collect()
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }
}

/// Known spike locations, grouped by kernel parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSpec {
    pub groups: Vec<Vec<f64>>,
}

impl SupportSpec {
    pub fn new(groups: Vec<Vec<f64>>) -> Result<Self> {
        let support = SupportSpec { groups };
        support.validate()?;
        Ok(support)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.groups.iter().any(|g| g.is_empty()) {
            return Err(Error::validation("support needs p >= 1 non-empty groups"));
        }
        if self.locations().iter().any(|t| !t.is_finite()) {
            return Err(Error::validation("spike locations must be finite"));
        }
        if self.model_order() > 1 && !(self.min_separation() > 0.0) {
            return Err(Error::validation("duplicate spike locations (minimal separation is 0)"));
        }
        Ok(())
    }

    /// Number of groups `p`.
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Total model order `M = Σ Mᵢ`.
    pub fn model_order(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// All locations, group-major.
    pub fn locations(&self) -> Vec<f64> {
        self.groups.iter().flatten().copied().collect()
    }

    /// Column offset of each group in `G`, plus the total `M` at the end.
    pub fn offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.groups.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for g in &self.groups {
            acc += g.len();
            offsets.push(acc);
        }
        offsets
    }

    /// Minimal pairwise distance `Δ` over all spikes; `+∞` for a single spike.
    pub fn min_separation(&self) -> f64 {
        let mut locs = self.locations();
        locs.sort_by(|a, b| a.total_cmp(b));
        locs.windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Everything needed to build `G(θ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub kernel: KernelFamily,
    pub grid: SampleGrid,
    pub support: SupportSpec,
    /// Append a constant column to `G` (a flat baseline with no shape parameter).
    #[serde(default)]
    pub baseline: bool,
}

impl ProblemSpec {
    pub fn new(kernel: KernelFamily, grid: SampleGrid, support: SupportSpec) -> Result<Self> {
        let spec = ProblemSpec {
            kernel,
            grid,
            support,
            baseline: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_baseline(mut self, baseline: bool) -> Result<Self> {
        self.baseline = baseline;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.grid.validate()?;
        self.support.validate()?;
        if let Some(t) = self.support.locations().into_iter().find(|t| !self.grid.contains(*t)) {
            return Err(Error::validation(format!(
                "spike location {t} outside the sampling interval [{}, {}]",
                self.grid.start, self.grid.end
            )));
        }
        if self.grid.n_samples <= self.n_columns() {
            return Err(Error::validation(format!(
                "need N > M, got N = {} and {} columns",
                self.grid.n_samples,
                self.n_columns()
            )));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.grid.n_samples
    }

    pub fn n_groups(&self) -> usize {
        self.support.n_groups()
    }

    pub fn model_order(&self) -> usize {
        self.support.model_order()
    }

    /// Columns of `G`, including the baseline column when enabled.
    pub fn n_columns(&self) -> usize {
        self.model_order() + usize::from(self.baseline)
    }

    pub fn min_separation(&self) -> f64 {
        self.support.min_separation()
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_groups() {
            return Err(Error::dimension(format!(
                "theta has {} entries for {} groups",
                theta.len(),
                self.n_groups()
            )));
        }
        theta.iter().try_for_each(|&th| self.kernel.check_theta(th))
    }
}

/// Sampled atom `[∂ₐg(θ, u_s − center)]_s`.
pub fn build_atom(spec: &ProblemSpec, theta: f64, center: f64, order: Order) -> Result<DVector<f64>> {
    spec.kernel.check_theta(theta)?;
    if !spec.grid.contains(center) {
        return Err(Error::validation(format!("atom center {center} outside the sampling interval")));
    }
    Ok(atom_unchecked(&spec.kernel, &spec.grid, theta, center, order))
}

pub(crate) fn atom_unchecked(
    kernel: &KernelFamily,
    grid: &SampleGrid,
    theta: f64,
    center: f64,
    order: Order,
) -> DVector<f64> {
    DVector::from_fn(grid.n_samples, |s, _| {
        kernel.eval_unchecked(theta, grid.instant(s) - center, order)
    })
}

fn fill_blocks(spec: &ProblemSpec, theta: &[f64], order: Order, ncols: usize) -> Result<DMatrix<f64>> {
    spec.check_theta(theta)?;
    let n = spec.n_samples();
    let mut g = DMatrix::zeros(n, ncols);
    let mut col = 0;
    for (group, &th) in spec.support.groups.iter().zip(theta) {
        for &t in group {
            for s in 0..n {
                g[(s, col)] = spec.kernel.eval_unchecked(th, spec.grid.instant(s) - t, order);
            }
            col += 1;
        }
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("order-{} dictionary", order.index())));
    }
    Ok(g)
}

/// `G(θ)`: columns ordered group-major then spike-major, plus the optional
/// baseline column last.
pub fn build_dictionary(spec: &ProblemSpec, theta: &[f64]) -> Result<DMatrix<f64>> {
    let mut g = fill_blocks(spec, theta, Order::Zero, spec.n_columns())?;
    if spec.baseline {
        let last = spec.n_columns() - 1;
        g.column_mut(last).fill(1.0);
    }
    Ok(g)
}

/// `G_a = [G_{a,1} … G_{a,p}]` with access to the per-group blocks.
#[derive(Debug, Clone)]
pub struct DerivativeBlocks {
    pub matrix: DMatrix<f64>,
    offsets: Vec<usize>,
}

impl DerivativeBlocks {
    pub fn n_groups(&self) -> usize {
        self.offsets.len() - 1
    }

    /// `G_{a,i}`, an `N × Mᵢ` view.
    pub fn block(&self, i: usize) -> DMatrixView<'_, f64> {
        let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
        self.matrix.columns(lo, hi - lo)
    }

    pub fn group_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// Order-`a` derivative dictionary (no baseline column).
pub fn build_derivative_blocks(spec: &ProblemSpec, theta: &[f64], order: Order) -> Result<DerivativeBlocks> {
    Ok(DerivativeBlocks {
        matrix: fill_blocks(spec, theta, order, spec.model_order())?,
        offsets: spec.support.offsets(),
    })
}

/// How the additive noise is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseSpec {
    None,
    /// White Gaussian noise rescaled so that `10·log₁₀(‖x*‖²/‖w‖²) = snr_db`.
    Gaussian { snr_db: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub theta_star: Vec<f64>,
    pub eta_star: Vec<f64>,
    pub noise: Vec<f64>,
    pub x_star: Vec<f64>,
}

/// Sampled observation `x = G(θ*)η* + w`, with the ground truth when synthetic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub grid: SampleGrid,
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

impl Observation {
    pub fn new(grid: SampleGrid, x: Vec<f64>) -> Result<Self> {
        if x.len() != grid.n_samples {
            return Err(Error::dimension(format!(
                "{} samples for a grid of {}",
                x.len(),
                grid.n_samples
            )));
        }
        Ok(Observation {
            grid,
            x,
            ground_truth: None,
        })
    }

    pub fn x_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x)
    }

    /// Two columns `u,x`, one row per instant.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        self.write_csv_with_header(writer, ["u", "x"])
    }

    pub fn write_csv_with_header<W: Write>(&self, writer: W, header: [&str; 2]) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(header)?;
        for (s, x) in self.x.iter().enumerate() {
            w.write_record([format_float(self.grid.instant(s)), format_float(*x)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the two-column CSV form. The instants must be uniformly spaced.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        Self::read_csv_with_tolerance(reader, 1e-9)
    }

    /// As [`Observation::read_csv`], accepting instants within
    /// `rel_spacing_tol·h` of the uniform grid (for rounded instrument data).
    pub fn read_csv_with_tolerance<R: Read>(reader: R, rel_spacing_tol: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut u = Vec::new();
        let mut x = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k)
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: "expected two columns".into(),
                    })?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse {
                        line,
                        message: e.to_string(),
                    })
            };
            u.push(parse(0)?);
            x.push(parse(1)?);
        }
        if u.len() < 2 {
            return Err(Error::validation("observation CSV needs at least two rows"));
        }
        let grid = SampleGrid::new(u[0], *u.last().unwrap(), u.len())?;
        let tol = rel_spacing_tol * grid.spacing();
        if let Some(s) = (0..u.len()).find(|&s| (u[s] - grid.instant(s)).abs() > tol.max(1e-12 * u[s].abs())) {
            return Err(Error::validation(format!(
                "instants are not uniformly spaced (row {})",
                s + 2
            )));
        }
        Observation::new(grid, x)
    }
}

/// Shortest representation that round-trips exactly.
pub(crate) fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// `η*_{i,ℓ} = 1/‖Σ_{k,ℓ} g_{k,ℓ}‖₂`: equal amplitudes giving a unit-norm
/// noiseless mixture.
pub fn unit_mixture_amplitudes(spec: &ProblemSpec, theta: &[f64]) -> Result<Vec<f64>> {
    let g = fill_blocks(spec, theta, Order::Zero, spec.model_order())?;
    let sum: DVector<f64> = g.column_sum();
    let norm = sum.norm();
    if !(norm > 0.0) {
        return Err(Error::Numeric("unit mixture has zero energy".into()));
    }
    Ok(vec![1.0 / norm; spec.model_order()])
}

/// Draws `n` standard normal samples from a seeded ChaCha8 stream.
pub fn gaussian_samples(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// White noise of exact energy `‖x*‖²·10^(−snr/10)`.
pub fn scaled_noise(x_star_norm: f64, snr_db: f64, seed: u64, n: usize) -> Result<Vec<f64>> {
    if !(x_star_norm > 0.0) {
        return Err(Error::validation("SNR is undefined for a zero noiseless signal"));
    }
    if !snr_db.is_finite() {
        return Err(Error::validation("SNR must be finite"));
    }
    let raw = gaussian_samples(seed, n);
    let raw_norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = x_star_norm * 10f64.powf(-snr_db / 20.0);
    Ok(raw.into_iter().map(|v| v * target / raw_norm).collect())
}

/// Builds `x = G(θ*)η* + w`.
pub fn synthesize(spec: &ProblemSpec, theta_star: &[f64], eta_star: &[f64], noise: NoiseSpec) -> Result<Observation> {
    if eta_star.len() != spec.n_columns() {
        return Err(Error::dimension(format!(
            "eta has {} entries for {} columns",
            eta_star.len(),
            spec.n_columns()
        )));
    }
    let g = build_dictionary(spec, theta_star)?;
    let x_star = &g * DVector::from_column_slice(eta_star);
    let n = spec.n_samples();
    let w = match noise {
        NoiseSpec::None => vec![0.0; n],
        NoiseSpec::Gaussian { snr_db, seed } => scaled_noise(x_star.norm(), snr_db, seed, n)?,
    };
    let x: Vec<f64> = x_star.iter().zip(&w).map(|(a, b)| a + b).collect();
    Ok(Observation {
        grid: spec.grid,
        x,
        ground_truth: Some(GroundTruth {
            theta_star: theta_star.to_vec(),
            eta_star: eta_star.to_vec(),
            noise: w,
            x_star: x_star.iter().copied().collect(),
        }),
    })
}
