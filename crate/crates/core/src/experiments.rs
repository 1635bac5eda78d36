//! Radius maps, Monte Carlo basin probing, and estimation error against the
//! Cramér–Rao bound.
//!
//! Every random draw is keyed by `(seed, tag, indices)`, work items run in
//! parallel and are reduced in index order, so identical configurations
//! produce bit-identical results whatever the thread count.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coherence::{CoherenceCache, LipschitzOptions};
use crate::dictionary::{
    build_dictionary, format_float, scaled_noise, unit_mixture_amplitudes, ProblemSpec, SampleGrid, SupportSpec,
};
use crate::error::{Error, Result};
use crate::kernels::KernelFamily;
use crate::radius::{analyze_instance, TheoremConstants, DIAGONAL_CONVENTION};
use crate::varpro::{evaluate, jacobian_columns, solve, HessianForm, SolverOptions, Termination};

const TAG_NOISE: u64 = 1;
const TAG_START: u64 = 2;
const TAG_PROBE: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream seed for one work item.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// `n` points from `lo` to `hi`, evenly spaced in log scale.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..n)
                .map(|i| {
                    if i == n - 1 {
                        hi
                    } else {
                        10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)
                    }
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisScale {
    #[default]
    Log,
    Linear,
}

/// A one-dimensional sampling axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    #[serde(default)]
    pub scale: AxisScale,
}

impl Axis {
    pub fn log(lo: f64, hi: f64, n: usize) -> Self {
        Axis {
            lo,
            hi,
            n,
            scale: AxisScale::Log,
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.n == 0 {
            return Err(Error::validation(format!("{what}: grid is empty")));
        }
        let positive = self.scale == AxisScale::Linear || self.lo > 0.0;
        if !(self.lo.is_finite() && self.hi.is_finite() && positive && self.lo <= self.hi) {
            return Err(Error::validation(format!(
                "{what}: invalid range [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.n > 1 && self.lo == self.hi {
            return Err(Error::validation(format!("{what}: {} points on a zero-width range", self.n)));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        match self.scale {
            AxisScale::Log => logspace(self.lo, self.hi, self.n),
            AxisScale::Linear if self.n == 1 => vec![self.lo],
            AxisScale::Linear => (0..self.n)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.n - 1) as f64)
                .collect(),
        }
    }
}

fn default_n_samples() -> usize {
    10_000
}
fn default_half_width() -> f64 {
    1.0
}

// ---------------------------------------------------------------------------
// radius maps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusMapConfig {
    pub kernels: Vec<KernelFamily>,
    pub theta_grid: Axis,
    pub delta_grid: Axis,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    /// `None` is the noiseless regime.
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub lipschitz: LipschitzOptions,
}

impl RadiusMapConfig {
    /// 40×40 log grid over `[1e-3, 1] × [1e-2, 1]` for `u ∈ {1, 2, 20}`.
    pub fn reference() -> Self {
        RadiusMapConfig {
            kernels: vec![
                KernelFamily::u_laplace(1.0),
                KernelFamily::u_laplace(2.0),
                KernelFamily::u_laplace(20.0),
            ],
            theta_grid: Axis::log(1e-3, 1.0, 40),
            delta_grid: Axis::log(1e-2, 1.0, 40),
            n_samples: default_n_samples(),
            half_width: default_half_width(),
            snr_db: None,
            lipschitz: LipschitzOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::validation("radius map needs at least one kernel"));
        }
        for k in &self.kernels {
            k.validate()?;
        }
        self.theta_grid.validate("theta_grid")?;
        self.delta_grid.validate("delta_grid")?;
        SampleGrid::centered(self.n_samples, self.half_width)?;
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::validation("snr_db must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStatus {
    Feasible,
    Infeasible,
    Conditioning,
    Invalid,
}

impl CellStatus {
    fn as_str(self) -> &'static str {
        match self {
            CellStatus::Feasible => "feasible",
            CellStatus::Infeasible => "infeasible",
            CellStatus::Conditioning => "conditioning",
            CellStatus::Invalid => "invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusCell {
    pub theta_star: f64,
    pub delta: f64,
    pub epsilon0: f64,
    pub status: CellStatus,
    pub normalized_panel: f64,
    pub normalized_global: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusPanel {
    pub kernel: KernelFamily,
    pub label: String,
    /// Row-major: `θ*` outer, `Δ` inner.
    pub cells: Vec<RadiusCell>,
    pub epsilon_max: f64,
    pub argmax: Option<(f64, f64)>,
    pub well_posed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusMap {
    pub panels: Vec<RadiusPanel>,
    pub global_max: f64,
    pub diagonal_convention: String,
}

/// Two groups of one spike each, at `±Δ/2`.
pub fn two_spike_spec(kernel: KernelFamily, grid: SampleGrid, delta: f64) -> Result<ProblemSpec> {
    let mid = 0.5 * (grid.start + grid.end);
    ProblemSpec::new(
        kernel,
        grid,
        SupportSpec::new(vec![vec![mid - 0.5 * delta], vec![mid + 0.5 * delta]])?,
    )
}

/// Noise norms used for the bound: `‖x*‖ = 1` (unit mixture),
/// `‖w‖ = 10^(−snr/20)`, `‖x‖ = √(‖x*‖² + ‖w‖²)`.
pub fn nominal_norms(snr_db: Option<f64>) -> (f64, f64, f64) {
    let w = snr_db.map_or(0.0, |s| 10f64.powf(-s / 20.0));
    ((1.0 + w * w).sqrt(), w, 1.0)
}

fn radius_row(
    kernel: KernelFamily,
    grid: SampleGrid,
    theta: f64,
    deltas: &[f64],
    config: &RadiusMapConfig,
) -> Vec<(f64, CellStatus)> {
    let cache = CoherenceCache::new(kernel, grid);
    let norms = nominal_norms(config.snr_db);
    deltas
        .iter()
        .map(|&delta| {
            let Ok(spec) = two_spike_spec(kernel, grid, delta) else {
                return (0.0, CellStatus::Invalid);
            };
            match analyze_instance(&cache, &spec, &[theta, theta], &config.lipschitz, norms) {
                Ok(c) if c.epsilon0 > 0.0 => (c.epsilon0, CellStatus::Feasible),
                Ok(_) => (0.0, CellStatus::Infeasible),
                Err(Error::Conditioning { .. } | Error::Singular(_)) => (0.0, CellStatus::Conditioning),
                Err(e) => {
                    log::debug!("radius cell θ*={theta} Δ={delta}: {e}");
                    (0.0, CellStatus::Invalid)
                }
            }
        })
        .collect()
}

pub fn radius_map(config: &RadiusMapConfig) -> Result<RadiusMap> {
    config.validate()?;
    let grid = SampleGrid::centered(config.n_samples, config.half_width)?;
    let thetas = config.theta_grid.values();
    let deltas = config.delta_grid.values();
    let mut panels = Vec::with_capacity(config.kernels.len());
    for &kernel in &config.kernels {
        let rows: Vec<Vec<(f64, CellStatus)>> = thetas
            .par_iter()
            .map(|&theta| {
                if kernel.contains(theta) {
                    radius_row(kernel, grid, theta, &deltas, config)
                } else {
                    vec![(0.0, CellStatus::Invalid); deltas.len()]
                }
            })
            .collect();
        let mut cells = Vec::with_capacity(thetas.len() * deltas.len());
        for (row, &theta) in rows.into_iter().zip(&thetas) {
            for ((eps, status), &delta) in row.into_iter().zip(&deltas) {
                cells.push(RadiusCell {
                    theta_star: theta,
                    delta,
                    epsilon0: eps,
                    status,
                    normalized_panel: 0.0,
                    normalized_global: 0.0,
                });
            }
        }
        let mut epsilon_max = 0.0;
        let mut argmax = None;
        for c in &cells {
            if c.epsilon0 > epsilon_max {
                epsilon_max = c.epsilon0;
                argmax = Some((c.theta_star, c.delta));
            }
        }
        let well_posed = cells.iter().filter(|c| c.epsilon0 > 0.0).count();
        panels.push(RadiusPanel {
            kernel,
            label: kernel.label(),
            cells,
            epsilon_max,
            argmax,
            well_posed,
        });
    }
    let global_max = panels.iter().map(|p| p.epsilon_max).fold(0.0, f64::max);
    for panel in &mut panels {
        let pmax = panel.epsilon_max;
        for c in &mut panel.cells {
            c.normalized_panel = if pmax > 0.0 { c.epsilon0 / pmax } else { 0.0 };
            c.normalized_global = if global_max > 0.0 { c.epsilon0 / global_max } else { 0.0 };
        }
    }
    Ok(RadiusMap {
        panels,
        global_max,
        diagonal_convention: DIAGONAL_CONVENTION.to_string(),
    })
}

pub fn write_radius_panel_csv<W: Write>(panel: &RadiusPanel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["theta_star", "delta", "epsilon0", "normalized_panel", "normalized_global", "status"])?;
    for c in &panel.cells {
        w.write_record([
            format_float(c.theta_star),
            format_float(c.delta),
            format_float(c.epsilon0),
            format_float(c.normalized_panel),
            format_float(c.normalized_global),
            c.status.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Monte Carlo basin probing

fn default_groups() -> Vec<Vec<f64>> {
    vec![vec![-1.0, -0.2, 0.6], vec![-0.6, 0.2, 1.0]]
}
fn default_theta_star() -> Vec<f64> {
    vec![1e-2, 1e-2]
}
fn default_mc_samples() -> usize {
    2_000
}
fn default_snr() -> Option<f64> {
    Some(10.0)
}
fn default_trials() -> usize {
    50
}
fn default_sc_probes() -> usize {
    32
}
fn default_threshold() -> f64 {
    0.5
}
fn default_convergence_tolerance() -> f64 {
    1e-3
}

/// Initial distances `ε`, log-spaced, optionally preceded by `ε = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    #[serde(default)]
    pub include_zero: bool,
}

impl EpsilonGrid {
    pub fn values(&self) -> Vec<f64> {
        let mut v = if self.include_zero { vec![0.0] } else { Vec::new() };
        v.extend(logspace(self.lo, self.hi, self.n));
        v
    }

    pub fn validate(&self) -> Result<()> {
        Axis::log(self.lo, self.hi, self.n).validate("epsilon_grid")?;
        let v = self.values();
        if v.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("epsilon_grid must be strictly increasing"));
        }
        Ok(())
    }
}

/// Two groups of three spikes over `[−1, 1]` with `Δ = 0.4`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub kernel: KernelFamily,
    #[serde(default = "default_mc_samples")]
    pub n_samples: usize,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default = "default_groups")]
    pub groups: Vec<Vec<f64>>,
    #[serde(default = "default_theta_star")]
    pub theta_star: Vec<f64>,
    #[serde(default = "default_snr")]
    pub snr_db: Option<f64>,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    pub epsilon_grid: EpsilonGrid,
    #[serde(default)]
    pub seed: u64,
    /// Interior points of `B∞(θ*, ε)` checked for Hessian definiteness.
    #[serde(default = "default_sc_probes")]
    pub sc_probes: usize,
    /// Empirical radii are the largest `ε` whose rate reaches this value.
    #[serde(default = "default_threshold")]
    pub success_threshold: f64,
    /// Convergence means `‖θ̂ − θ*‖∞ ≤ tolerance·Δ`.
    #[serde(default = "default_convergence_tolerance")]
    pub convergence_tolerance: f64,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub lipschitz: LipschitzOptions,
}

impl MonteCarloConfig {
    /// Scaled-down reference setup: 50 trials, 20 log-spaced `ε`, `N = 2000`.
    pub fn reference(kernel: KernelFamily) -> Self {
        MonteCarloConfig {
            kernel,
            n_samples: default_mc_samples(),
            half_width: default_half_width(),
            groups: default_groups(),
            theta_star: default_theta_star(),
            snr_db: default_snr(),
            n_trials: default_trials(),
            epsilon_grid: EpsilonGrid {
                lo: 1e-5,
                hi: 1e-1,
                n: 20,
                include_zero: false,
            },
            seed: 0,
            sc_probes: default_sc_probes(),
            success_threshold: default_threshold(),
            convergence_tolerance: default_convergence_tolerance(),
            solver: SolverOptions::default(),
            lipschitz: LipschitzOptions::default(),
        }
    }

    pub fn spec(&self) -> Result<ProblemSpec> {
        ProblemSpec::new(
            self.kernel,
            SampleGrid::centered(self.n_samples, self.half_width)?,
            SupportSpec::new(self.groups.clone())?,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        if self.theta_star.len() != spec.n_groups() {
            return Err(Error::dimension(format!(
                "theta_star has {} entries for {} groups",
                self.theta_star.len(),
                spec.n_groups()
            )));
        }
        spec.check_theta(&self.theta_star)?;
        if self.n_trials == 0 {
            return Err(Error::validation("n_trials must be at least 1"));
        }
        self.epsilon_grid.validate()?;
        if !(self.success_threshold > 0.0 && self.success_threshold <= 1.0) {
            return Err(Error::validation("success_threshold must lie in (0, 1]"));
        }
        if !(self.convergence_tolerance > 0.0) {
            return Err(Error::validation("convergence_tolerance must be positive"));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::validation("snr_db must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRates {
    pub epsilon: f64,
    pub convergence_rate: f64,
    pub strong_convexity_rate: f64,
    /// Starts falling outside the kernel domain (counted as failures).
    pub invalid_starts: usize,
    /// Trials whose solve returned an error (counted as failures).
    pub solver_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub label: String,
    pub rates: Vec<EpsilonRates>,
    pub epsilon_c: Option<f64>,
    pub epsilon_sc: Option<f64>,
    pub epsilon0: f64,
    pub constants: TheoremConstants,
    pub n_trials: usize,
}

/// Uniform draw on `{θ : ‖θ − θ*‖∞ = ε}`: a uniform face, then uniform
/// coordinates on it.
pub fn sample_linf_sphere<R: Rng>(rng: &mut R, center: &[f64], eps: f64) -> Vec<f64> {
    let p = center.len();
    let face = rng.random_range(0..p);
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    center
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if i == face {
                c + sign * eps
            } else {
                c + eps * rng.random_range(-1.0..=1.0)
            }
        })
        .collect()
}

pub fn sample_linf_ball<R: Rng>(rng: &mut R, center: &[f64], eps: f64) -> Vec<f64> {
    center.iter().map(|&c| c + eps * rng.random_range(-1.0..=1.0)).collect()
}

fn inf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn positive_definite_at(spec: &ProblemSpec, theta: &[f64], x: &DVector<f64>, form: HessianForm) -> bool {
    if !theta.iter().all(|&t| spec.kernel.contains(t)) {
        return false;
    }
    matches!(evaluate(spec, theta, x, form), Ok(e) if e.min_eigenvalue() > 0.0)
}

struct TrialOutcome {
    converged: bool,
    strongly_convex: bool,
    invalid_start: bool,
    solver_failure: bool,
}

/// Largest grid value whose rate reaches `threshold`.
pub fn empirical_radius(epsilons: &[f64], rates: &[f64], threshold: f64) -> Option<f64> {
    epsilons
        .iter()
        .zip(rates)
        .filter(|(_, r)| **r >= threshold)
        .map(|(e, _)| *e)
        .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |v| v.max(e))))
}

pub fn monte_carlo(config: &MonteCarloConfig) -> Result<MonteCarloResult> {
    config.validate()?;
    let spec = config.spec()?;
    let theta_star = &config.theta_star;
    let eta_star = unit_mixture_amplitudes(&spec, theta_star)?;
    let g = build_dictionary(&spec, theta_star)?;
    let x_star = &g * DVector::from_column_slice(&eta_star);
    let n = spec.n_samples();
    let delta = spec.min_separation();
    let tolerance = config.convergence_tolerance * delta;

    let observations: Vec<DVector<f64>> = (0..config.n_trials)
        .into_par_iter()
        .map(|t| -> Result<DVector<f64>> {
            Ok(match config.snr_db {
                None => x_star.clone(),
                Some(snr) => {
                    let w = scaled_noise(x_star.norm(), snr, derive_seed(config.seed, &[TAG_NOISE, t as u64]), n)?;
                    &x_star + DVector::from_vec(w)
                }
            })
        })
        .collect::<Result<_>>()?;

    let epsilons = config.epsilon_grid.values();
    let items: Vec<(usize, usize)> = (0..epsilons.len())
        .flat_map(|e| (0..config.n_trials).map(move |t| (e, t)))
        .collect();
    let form = config.solver.hessian_form;
    let outcomes: Vec<TrialOutcome> = items
        .par_iter()
        .map(|&(e, t)| {
            let eps = epsilons[e];
            let x = &observations[t];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_START, e as u64, t as u64]));
            let theta0 = sample_linf_sphere(&mut rng, theta_star, eps);
            if !theta0.iter().all(|&v| spec.kernel.contains(v)) {
                return TrialOutcome {
                    converged: false,
                    strongly_convex: false,
                    invalid_start: true,
                    solver_failure: false,
                };
            }
            let (converged, solver_failure) = match solve(&spec, x, &theta0, &config.solver) {
                Ok(r) => (
                    r.theta_hat.iter().all(|v| v.is_finite()) && inf_distance(&r.theta_hat, theta_star) <= tolerance,
                    false,
                ),
                Err(_) => (false, true),
            };
            let mut probe_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_PROBE, e as u64, t as u64]));
            let strongly_convex = positive_definite_at(&spec, &theta0, x, form)
                && (0..config.sc_probes).all(|_| {
                    let th = sample_linf_ball(&mut probe_rng, theta_star, eps);
                    positive_definite_at(&spec, &th, x, form)
                });
            TrialOutcome {
                converged,
                strongly_convex,
                invalid_start: false,
                solver_failure,
            }
        })
        .collect();

    let trials = config.n_trials as f64;
    let rates: Vec<EpsilonRates> = epsilons
        .iter()
        .enumerate()
        .map(|(e, &eps)| {
            let chunk = &outcomes[e * config.n_trials..(e + 1) * config.n_trials];
            EpsilonRates {
                epsilon: eps,
                convergence_rate: chunk.iter().filter(|o| o.converged).count() as f64 / trials,
                strong_convexity_rate: chunk.iter().filter(|o| o.strongly_convex).count() as f64 / trials,
                invalid_starts: chunk.iter().filter(|o| o.invalid_start).count(),
                solver_failures: chunk.iter().filter(|o| o.solver_failure).count(),
            }
        })
        .collect();
    let conv: Vec<f64> = rates.iter().map(|r| r.convergence_rate).collect();
    let sc: Vec<f64> = rates.iter().map(|r| r.strong_convexity_rate).collect();

    let (nx, nw, nxs) = match config.snr_db {
        None => (x_star.norm(), 0.0, x_star.norm()),
        Some(snr) => {
            let nw = x_star.norm() * 10f64.powf(-snr / 20.0);
            ((x_star.norm().powi(2) + nw * nw).sqrt(), nw, x_star.norm())
        }
    };
    let cache = CoherenceCache::for_spec(&spec);
    let constants = analyze_instance(&cache, &spec, theta_star, &config.lipschitz, (nx, nw, nxs))?;

    Ok(MonteCarloResult {
        label: config.kernel.label(),
        epsilon_c: empirical_radius(&epsilons, &conv, config.success_threshold),
        epsilon_sc: empirical_radius(&epsilons, &sc, config.success_threshold),
        epsilon0: constants.epsilon0,
        constants,
        rates,
        n_trials: config.n_trials,
    })
}

pub fn write_monte_carlo_csv<W: Write>(result: &MonteCarloResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "epsilon",
        "convergence_rate",
        "strong_convexity_rate",
        "invalid_starts",
        "solver_failures",
    ])?;
    for r in &result.rates {
        w.write_record([
            format_float(r.epsilon),
            format_float(r.convergence_rate),
            format_float(r.strong_convexity_rate),
            r.invalid_starts.to_string(),
            r.solver_failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Cramér–Rao bound and MSE against SNR

/// `θ`-block of the inverse joint Fisher information `DᵀD/σ²`,
/// `D = [J_θ | G₀]`, for white Gaussian noise of variance `σ²`.
pub fn crb(spec: &ProblemSpec, theta_star: &[f64], eta_star: &[f64], sigma: f64) -> Result<DMatrix<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::validation(format!("sigma must be positive, got {sigma}")));
    }
    let g = build_dictionary(spec, theta_star)?;
    if eta_star.len() != g.ncols() {
        return Err(Error::dimension(format!(
            "eta has {} entries for {} columns",
            eta_star.len(),
            g.ncols()
        )));
    }
    let j = jacobian_columns(spec, theta_star, &DVector::from_column_slice(eta_star))?;
    let p = j.ncols();
    let mut d = DMatrix::zeros(g.nrows(), p + g.ncols());
    d.columns_mut(0, p).copy_from(&j);
    d.columns_mut(p, g.ncols()).copy_from(&g);
    let fisher = d.tr_mul(&d) / (sigma * sigma);
    let chol = fisher
        .cholesky()
        .ok_or_else(|| Error::Singular("Fisher information is not positive definite".into()))?;
    let inv = chol.inverse();
    let block = inv.view((0, 0), (p, p)).into_owned();
    Ok((&block + block.transpose()) * 0.5)
}

fn default_snr_grid() -> Vec<f64> {
    (0..=6).map(|k| 5.0 * k as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseSnrConfig {
    pub kernels: Vec<KernelFamily>,
    #[serde(default = "default_mc_samples")]
    pub n_samples: usize,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default = "default_groups")]
    pub groups: Vec<Vec<f64>>,
    #[serde(default = "default_theta_star")]
    pub theta_star: Vec<f64>,
    #[serde(default = "default_snr_grid")]
    pub snr_grid: Vec<f64>,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl MseSnrConfig {
    /// 50 trials per SNR over `{0, 5, …, 30}` dB for `u ∈ {1, 2, 20}`.
    pub fn reference() -> Self {
        MseSnrConfig {
            kernels: vec![
                KernelFamily::u_laplace(1.0),
                KernelFamily::u_laplace(2.0),
                KernelFamily::u_laplace(20.0),
            ],
            n_samples: default_mc_samples(),
            half_width: default_half_width(),
            groups: default_groups(),
            theta_star: default_theta_star(),
            snr_grid: default_snr_grid(),
            n_trials: default_trials(),
            seed: 0,
            solver: SolverOptions::default(),
        }
    }

    pub fn spec(&self, kernel: KernelFamily) -> Result<ProblemSpec> {
        ProblemSpec::new(
            kernel,
            SampleGrid::centered(self.n_samples, self.half_width)?,
            SupportSpec::new(self.groups.clone())?,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::validation("mse-snr needs at least one kernel"));
        }
        if self.snr_grid.is_empty() {
            return Err(Error::validation("snr_grid is empty"));
        }
        if self.snr_grid.iter().any(|s| !s.is_finite()) {
            return Err(Error::validation("snr_grid entries must be finite"));
        }
        if self.n_trials == 0 {
            return Err(Error::validation("n_trials must be at least 1"));
        }
        for &k in &self.kernels {
            let spec = self.spec(k)?;
            if self.theta_star.len() != spec.n_groups() {
                return Err(Error::dimension(format!(
                    "theta_star has {} entries for {} groups",
                    self.theta_star.len(),
                    spec.n_groups()
                )));
            }
            spec.check_theta(&self.theta_star)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseCell {
    pub mse: f64,
    /// Half-width of the normal 95% confidence interval of the mean.
    pub ci95: f64,
    pub crb_trace: f64,
    pub n_used: usize,
    pub n_outliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseSnrResult {
    pub snr_grid: Vec<f64>,
    pub labels: Vec<String>,
    /// `cells[kernel][snr]`
    pub cells: Vec<Vec<MseCell>>,
    pub initialization: String,
}

fn is_outlier(termination: Termination) -> bool {
    matches!(
        termination,
        Termination::IllConditioned | Termination::MaxIterations | Termination::BoundaryStalled
    )
}

pub fn mse_vs_snr(config: &MseSnrConfig) -> Result<MseSnrResult> {
    config.validate()?;
    let mut cells = Vec::with_capacity(config.kernels.len());
    for (k, &kernel) in config.kernels.iter().enumerate() {
        let spec = config.spec(kernel)?;
        let theta_star = &config.theta_star;
        let eta_star = unit_mixture_amplitudes(&spec, theta_star)?;
        let g = build_dictionary(&spec, theta_star)?;
        let x_star = &g * DVector::from_column_slice(&eta_star);
        let n = spec.n_samples();
        let mut row = Vec::with_capacity(config.snr_grid.len());
        for (s, &snr) in config.snr_grid.iter().enumerate() {
            let errors: Vec<Option<f64>> = (0..config.n_trials)
                .into_par_iter()
                .map(|t| -> Result<Option<f64>> {
                    let seed = derive_seed(config.seed, &[TAG_NOISE, k as u64, s as u64, t as u64]);
                    let w = scaled_noise(x_star.norm(), snr, seed, n)?;
                    let x = &x_star + DVector::from_vec(w);
                    Ok(match solve(&spec, &x, theta_star, &config.solver) {
                        Ok(r) if !is_outlier(r.termination) && r.theta_hat.iter().all(|v| v.is_finite()) => Some(
                            r.theta_hat
                                .iter()
                                .zip(theta_star)
                                .map(|(a, b)| (a - b).powi(2))
                                .sum::<f64>(),
                        ),
                        _ => None,
                    })
                })
                .collect::<Result<_>>()?;
            let used: Vec<f64> = errors.iter().flatten().copied().collect();
            let m = used.len();
            let mse = if m > 0 { used.iter().sum::<f64>() / m as f64 } else { f64::NAN };
            let ci95 = if m > 1 {
                let var = used.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (m - 1) as f64;
                1.96 * (var / m as f64).sqrt()
            } else {
                f64::NAN
            };
            let sigma = x_star.norm() * 10f64.powf(-snr / 20.0) / (n as f64).sqrt();
            let bound = crb(&spec, theta_star, &eta_star, sigma)?;
            row.push(MseCell {
                mse,
                ci95,
                crb_trace: bound.trace(),
                n_used: m,
                n_outliers: config.n_trials - m,
            });
        }
        cells.push(row);
    }
    Ok(MseSnrResult {
        snr_grid: config.snr_grid.clone(),
        labels: config.kernels.iter().map(|k| k.label()).collect(),
        cells,
        initialization: "oracle: solver starts at theta_star".into(),
    })
}

pub fn write_mse_csv<W: Write>(result: &MseSnrResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["snr_db".to_string()];
    for l in &result.labels {
        for col in ["mse", "mse_ci95", "crb", "outliers"] {
            header.push(format!("{l}_{col}"));
        }
    }
    w.write_record(&header)?;
    for (s, &snr) in result.snr_grid.iter().enumerate() {
        let mut rec = vec![format_float(snr)];
        for row in &result.cells {
            let c = &row[s];
            rec.push(format_float(c.mse));
            rec.push(format_float(c.ci95));
            rec.push(format_float(c.crb_trace));
            rec.push(c.n_outliers.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
