//! Coherence `μₐ`, total coherence `𝒞ₐ`, row sums `𝒮ₐ`, Gramian spectrum
//! bounds and numerical Lipschitz constants.
//!
//! All coherences are read off a [`CorrelationTable`]: the inner products
//! `⟨∂ₐg(θᵢ, ·), ∂ₐg(θⱼ, · − kh)⟩` of two sampled atoms at every integer lag
//! `k` with `|k|h ≤ 2T`. Atoms are centered on the grid instant nearest the
//! interval midpoint, so lags line up with spikes placed on grid points.
//! The supremum over `|δ| ≥ Δ` is taken over lags `|k|h ≥ Δ`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dictionary::{build_derivative_blocks, build_dictionary, ProblemSpec, SampleGrid};
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, Order};
use crate::linalg::{self, LeastSquares};

/// Relative size below which total-coherence terms are dropped.
const TRUNCATION_RELATIVE: f64 = 1e-12;

/// Above this many multiply-adds the correlation goes through the FFT.
const DIRECT_WORK_LIMIT: usize = 20_000_000;

/// Lag correlation of two order-`a` atoms, with its suffix maxima.
#[derive(Debug, Clone)]
pub struct CorrelationTable {
    spacing: f64,
    interval: f64,
    /// `c_k` for `k = −K..=K`, stored at index `k + K`.
    values: Vec<f64>,
    /// `max_{|k'| ≥ k} |c_{k'}|` for `k = 0..=K`.
    suffix_max: Vec<f64>,
}

impl CorrelationTable {
    pub fn max_lag(&self) -> usize {
        self.suffix_max.len() - 1
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Inner product at lag `k` (`δ = kh`); zero beyond the table.
    pub fn at_lag(&self, k: i64) -> f64 {
        let kmax = self.max_lag() as i64;
        if k.abs() > kmax {
            0.0
        } else {
            self.values[(k + kmax) as usize]
        }
    }

    fn first_lag(&self, delta: f64) -> usize {
        let q = delta / self.spacing;
        let k = (q - 1e-9 * q.max(1.0)).ceil();
        if k <= 0.0 {
            0
        } else if k > self.max_lag() as f64 {
            usize::MAX
        } else {
            k as usize
        }
    }

    /// `μₐ(θᵢ, θⱼ, Δ) = sup_{|δ| ≥ Δ} |c(δ)|` over grid lags.
    pub fn mu(&self, delta: f64) -> f64 {
        match self.first_lag(delta.max(0.0)) {
            usize::MAX => 0.0,
            k => self.suffix_max[k],
        }
    }

    /// `𝒞ₐ(θᵢ, θⱼ, Δ) = Σ_{m ≠ 0} μₐ(|m|Δ) = 2 Σ_{m ≥ 1} μₐ(mΔ)`.
    pub fn total(&self, delta: f64) -> (f64, usize, f64) {
        if delta.is_infinite() {
            return (0.0, 0, 0.0);
        }
        let cap = 2.0 * self.interval;
        let first = self.mu(delta);
        if first == 0.0 {
            return (0.0, 0, 0.0);
        }
        let mut sum = 0.0;
        let mut terms = 0;
        let mut neglected = 0.0;
        let mut m = 1u64;
        loop {
            let shift = m as f64 * delta;
            if shift > cap {
                break;
            }
            let term = self.mu(shift);
            if term < TRUNCATION_RELATIVE * first {
                neglected = term;
                break;
            }
            sum += term;
            terms += 1;
            m += 1;
        }
        (2.0 * sum, terms, neglected)
    }
}

/// Index of the grid instant closest to the interval midpoint.
fn center_index(grid: &SampleGrid) -> usize {
    (grid.n_samples - 1) / 2
}

fn sampled(kernel: &KernelFamily, theta: f64, order: Order, h: f64, lo: i64, hi: i64) -> Vec<f64> {
    (lo..=hi)
        .map(|m| kernel.eval_unchecked(theta, m as f64 * h, order))
        .collect()
}

fn nonzero_span(v: &[f64]) -> Option<(usize, usize)> {
    let first = v.iter().position(|x| *x != 0.0)?;
    let last = v.iter().rposition(|x| *x != 0.0)?;
    Some((first, last))
}

/// Builds the lag table for `(θᵢ, θⱼ, a)` on the spec's grid.
pub fn correlation_table(spec: &ProblemSpec, theta_i: f64, theta_j: f64, order: Order) -> Result<CorrelationTable> {
    correlation_table_on(&spec.kernel, &spec.grid, theta_i, theta_j, order)
}

pub fn correlation_table_on(
    kernel: &KernelFamily,
    grid: &SampleGrid,
    theta_i: f64,
    theta_j: f64,
    order: Order,
) -> Result<CorrelationTable> {
    kernel.check_theta(theta_i)?;
    kernel.check_theta(theta_j)?;
    let n = grid.n_samples as i64;
    let h = grid.spacing();
    let c = center_index(grid) as i64;
    let kmax = 2 * (n - 1);
    // a_s = ∂g(θᵢ, (s − c)h) for s in [0, N); b_m = ∂g(θⱼ, (m − c)h) for m in [−K, N − 1 + K]
    let a = sampled(kernel, theta_i, order, h, -c, n - 1 - c);
    let b = sampled(kernel, theta_j, order, h, -kmax - c, n - 1 + kmax - c);
    if a.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("order-{} atoms for coherence", order.index())));
    }
    let nk = (2 * kmax + 1) as usize;
    let mut values = vec![0.0; nk];
    if let (Some((a0, a1)), Some((b0, b1))) = (nonzero_span(&a), nonzero_span(&b)) {
        // c_k = Σ_s a_s b_{s−k}; b index j = s − k + K in the stored vector
        let (a0, a1, b0, b1) = (a0 as i64, a1 as i64, b0 as i64, b1 as i64);
        // overlap needs j = s − k + K ∈ [b0, b1] for some s ∈ [a0, a1]
        let k_lo = (a0 + kmax - b1).max(-kmax);
        let k_hi = (a1 + kmax - b0).min(kmax);
        if k_lo <= k_hi {
            let work = (a1 - a0 + 1) as usize * (k_hi - k_lo + 1) as usize;
            if work <= DIRECT_WORK_LIMIT {
                for k in k_lo..=k_hi {
                    let s_lo = a0.max(b0 + k - kmax);
                    let s_hi = a1.min(b1 + k - kmax);
                    let mut acc = 0.0;
                    for s in s_lo..=s_hi {
                        acc += a[s as usize] * b[(s - k + kmax) as usize];
                    }
                    values[(k + kmax) as usize] = acc;
                }
            } else {
                let full = fft_correlation(&a, &b);
                // full[l] = Σ_s a_s b_{s+l}, and c_k = full[K − k]
                for k in k_lo..=k_hi {
                    values[(k + kmax) as usize] = full[(kmax - k) as usize];
                }
            }
        }
    }
    let kmax = kmax as usize;
    let mut suffix_max = vec![0.0; kmax + 1];
    let mut running: f64 = 0.0;
    for k in (0..=kmax).rev() {
        running = running
            .max(values[kmax + k].abs())
            .max(values[kmax - k].abs());
        suffix_max[k] = running;
    }
    Ok(CorrelationTable {
        spacing: h,
        interval: grid.length(),
        values,
        suffix_max,
    })
}

/// `out[l] = Σ_s a_s b_{s+l}` for `l = 0..=len(b) − len(a)`.
fn fft_correlation(a: &[f64], b: &[f64]) -> Vec<f64> {
    let len = (a.len() + b.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut fa: Vec<Complex<f64>> = a.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fa.resize(len, Complex::new(0.0, 0.0));
    let mut fb: Vec<Complex<f64>> = b.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fb.resize(len, Complex::new(0.0, 0.0));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    let mut prod: Vec<Complex<f64>> = fa.iter().zip(&fb).map(|(x, y)| x.conj() * y).collect();
    inv.process(&mut prod);
    let scale = 1.0 / len as f64;
    (0..=(b.len() - a.len())).map(|l| prod[l].re * scale).collect()
}

/// Memoizes correlation tables for one kernel family on one grid.
#[derive(Debug)]
pub struct CoherenceCache {
    kernel: KernelFamily,
    grid: SampleGrid,
    tables: Mutex<HashMap<(u64, u64, usize), Arc<CorrelationTable>>>,
}

impl CoherenceCache {
    pub fn new(kernel: KernelFamily, grid: SampleGrid) -> Self {
        CoherenceCache {
            kernel,
            grid,
            tables: Mutex::new(HashMap::new()),
        }
    }

    pub fn for_spec(spec: &ProblemSpec) -> Self {
        Self::new(spec.kernel, spec.grid)
    }

    pub fn kernel(&self) -> &KernelFamily {
        &self.kernel
    }

    pub fn grid(&self) -> &SampleGrid {
        &self.grid
    }

    pub fn table(&self, theta_i: f64, theta_j: f64, order: Order) -> Result<Arc<CorrelationTable>> {
        let key = (theta_i.to_bits(), theta_j.to_bits(), order.index());
        if let Some(t) = self.tables.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(t));
        }
        let table = Arc::new(correlation_table_on(&self.kernel, &self.grid, theta_i, theta_j, order)?);
        self.tables
            .lock()
            .expect("cache lock")
            .insert(key, Arc::clone(&table));
        Ok(table)
    }

    pub fn mu(&self, theta_i: f64, theta_j: f64, delta: f64, order: Order) -> Result<f64> {
        Ok(self.table(theta_i, theta_j, order)?.mu(delta))
    }

    pub fn total(&self, theta_i: f64, theta_j: f64, delta: f64, order: Order) -> Result<CoherenceReport> {
        check_delta(delta)?;
        let table = self.table(theta_i, theta_j, order)?;
        let (total, terms, bound) = table.total(delta);
        Ok(CoherenceReport {
            mu: table.mu(delta),
            total,
            order,
            truncation_terms: terms,
            truncation_bound: bound,
        })
    }

    /// `𝒮ₐ(θ) = maxᵢ Σⱼ 𝒞ₐ(θᵢ, θⱼ, Δ)`.
    pub fn row_sum(&self, theta: &[f64], delta: f64, order: Order) -> Result<f64> {
        let mut best: f64 = 0.0;
        for &ti in theta {
            let mut row = 0.0;
            for &tj in theta {
                row += self.total(ti, tj, delta, order)?.total;
            }
            best = best.max(row);
        }
        Ok(best)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "delta",
            value: delta,
            lo: 0.0,
            hi: f64::INFINITY,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub mu: f64,
    pub total: f64,
    pub order: Order,
    pub truncation_terms: usize,
    pub truncation_bound: f64,
}

/// `μₐ(θᵢ, θⱼ, Δ)`.
pub fn coherence(spec: &ProblemSpec, theta_i: f64, theta_j: f64, delta: f64, order: Order) -> Result<f64> {
    if delta < 0.0 {
        return Err(Error::Domain {
            what: "delta",
            value: delta,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    Ok(correlation_table(spec, theta_i, theta_j, order)?.mu(delta))
}

/// `𝒞ₐ(θᵢ, θⱼ, Δ)` with truncation metadata.
pub fn total_coherence(spec: &ProblemSpec, theta_i: f64, theta_j: f64, delta: f64, order: Order) -> Result<CoherenceReport> {
    CoherenceCache::for_spec(spec).total(theta_i, theta_j, delta, order)
}

pub fn coherence_row_sum(spec: &ProblemSpec, theta: &[f64], delta: f64, order: Order) -> Result<f64> {
    CoherenceCache::for_spec(spec).row_sum(theta, delta, order)
}

/// Coherence-based bounds on the spectra of `G_{a,i}ᵀG_{a,i}` and `G_aᵀG_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramianBounds {
    pub order: Order,
    pub single_block_min: Vec<f64>,
    pub single_block_max: Vec<f64>,
    pub full_min: f64,
    pub full_max: f64,
}

/// Bounds at the spec's minimal separation.
pub fn gramian_bounds(spec: &ProblemSpec, theta: &[f64], order: Order) -> Result<GramianBounds> {
    gramian_bounds_cached(&CoherenceCache::for_spec(spec), theta, spec.min_separation(), order)
}

pub fn gramian_bounds_cached(cache: &CoherenceCache, theta: &[f64], delta: f64, order: Order) -> Result<GramianBounds> {
    let mut single_block_min = Vec::with_capacity(theta.len());
    let mut single_block_max = Vec::with_capacity(theta.len());
    let mut diag_min = f64::INFINITY;
    let mut diag_max: f64 = 0.0;
    for &t in theta {
        let energy = cache.mu(t, t, 0.0, order)?;
        let total = cache.total(t, t, delta, order)?.total;
        single_block_min.push(0.5 * energy - total);
        single_block_max.push(energy + total);
        diag_min = diag_min.min(energy);
        diag_max = diag_max.max(energy);
    }
    let s = cache.row_sum(theta, delta, order)?;
    Ok(GramianBounds {
        order,
        single_block_min,
        single_block_max,
        full_min: 0.5 * diag_min - s,
        full_max: diag_max + s,
    })
}

/// Extreme eigenvalues of `G_{a,i}ᵀG_{a,i}` (per group) and `G_aᵀG_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramianSpectra {
    pub block_min: Vec<f64>,
    pub block_max: Vec<f64>,
    pub full_min: f64,
    pub full_max: f64,
}

pub fn gramian_spectra(spec: &ProblemSpec, theta: &[f64], order: Order) -> Result<GramianSpectra> {
    let blocks = build_derivative_blocks(spec, theta, order)?;
    let mut block_min = Vec::new();
    let mut block_max = Vec::new();
    for i in 0..blocks.n_groups() {
        let b = blocks.block(i);
        let ev = linalg::symmetric_eigenvalues(&b.tr_mul(&b));
        block_min.push(ev[0]);
        block_max.push(*ev.last().unwrap());
    }
    let ev = linalg::symmetric_eigenvalues(&blocks.matrix.tr_mul(&blocks.matrix));
    Ok(GramianSpectra {
        block_min,
        block_max,
        full_min: ev[0],
        full_max: *ev.last().unwrap(),
    })
}

impl GramianBounds {
    /// Whether the measured spectra respect every bound, up to `rel_tol`
    /// of the diagonal energy scale.
    pub fn contains(&self, spectra: &GramianSpectra, rel_tol: f64) -> bool {
        let scale = self.full_max.abs().max(1e-300);
        let slack = rel_tol * scale;
        let blocks_ok = self
            .single_block_min
            .iter()
            .zip(&spectra.block_min)
            .all(|(b, v)| *v >= b - slack)
            && self
                .single_block_max
                .iter()
                .zip(&spectra.block_max)
                .all(|(b, v)| *v <= b + slack);
        blocks_ok && spectra.full_min >= self.full_min - slack && spectra.full_max <= self.full_max + slack
    }
}

fn default_n_probes() -> usize {
    9
}
fn default_safety_factor() -> f64 {
    1.0
}
fn default_relative_halfwidth() -> f64 {
    0.1
}

/// How Lipschitz constants are probed around `θ*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzOptions {
    /// Probe range is `θ*·[1 − w, 1 + w]` (clipped to the kernel domain).
    #[serde(default = "default_relative_halfwidth")]
    pub relative_halfwidth: f64,
    #[serde(default = "default_n_probes")]
    pub n_probes: usize,
    /// Multiplier applied to the observed slopes before they enter the
    /// theorem constants. Observed slopes can only under-estimate the true
    /// constants; 1 applies them as measured.
    #[serde(default = "default_safety_factor")]
    pub safety_factor: f64,
}

impl Default for LipschitzOptions {
    fn default() -> Self {
        LipschitzOptions {
            relative_halfwidth: default_relative_halfwidth(),
            n_probes: default_n_probes(),
            safety_factor: default_safety_factor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimates {
    pub c_mu_by_order: [f64; 3],
    pub c_delta_by_order: [f64; 3],
    /// `C_μ = maxₐ C_μᵃ`
    pub c_mu: f64,
    /// `C_Δ = maxₐ C_Δᵃ`
    pub c_delta: f64,
    pub c_g: f64,
    pub c_g_plus: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub n_probes: usize,
}

impl LipschitzEstimates {
    pub fn zero() -> Self {
        LipschitzEstimates {
            c_mu_by_order: [0.0; 3],
            c_delta_by_order: [0.0; 3],
            c_mu: 0.0,
            c_delta: 0.0,
            c_g: 0.0,
            c_g_plus: 0.0,
            theta_lo: 0.0,
            theta_hi: 0.0,
            n_probes: 0,
        }
    }

    /// Every constant multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.c_mu_by_order.iter_mut().for_each(|v| *v *= factor);
        out.c_delta_by_order.iter_mut().for_each(|v| *v *= factor);
        out.c_mu *= factor;
        out.c_delta *= factor;
        out.c_g *= factor;
        out.c_g_plus *= factor;
        out
    }
}

/// `n` nested probe points in `[lo, hi]`: both endpoints first, then the
/// base-2 van der Corput sequence. The first `n` points of a longer run are
/// exactly the `n`-point set.
pub fn probe_points(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let mut pts = Vec::with_capacity(n);
    if n >= 1 {
        pts.push(lo);
    }
    if n >= 2 {
        pts.push(hi);
    }
    let mut k = 1u64;
    while pts.len() < n {
        let mut v = 0.0;
        let mut denom = 1.0;
        let mut i = k;
        while i > 0 {
            denom *= 2.0;
            v += (i & 1) as f64 / denom;
            i >>= 1;
        }
        pts.push(lo + (hi - lo) * v);
        k += 1;
    }
    pts
}

/// Largest `|f(x_k) − f(x_l)| / |x_k − x_l|` over all pairs.
pub fn max_pairwise_slope(points: &[(f64, f64)]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, &(xi, fi)) in points.iter().enumerate() {
        for &(xj, fj) in &points[i + 1..] {
            let dx = (xi - xj).abs();
            if dx > 0.0 {
                best = best.max((fi - fj).abs() / dx);
            }
        }
    }
    best
}

/// Largest `‖F(θ_k) − F(θ_l)‖₂ / ‖θ_k − θ_l‖₂` over pairs in each probe line.
fn max_matrix_slope(lines: &[Vec<(Vec<f64>, DMatrix<f64>)>]) -> f64 {
    let mut best: f64 = 0.0;
    for line in lines {
        for (i, (ti, fi)) in line.iter().enumerate() {
            for (tj, fj) in &line[i + 1..] {
                let dt: f64 = ti.iter().zip(tj).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if dt > 0.0 {
                    best = best.max(linalg::spectral_norm(&(fi - fj)) / dt);
                }
            }
        }
    }
    best
}

/// Observed-slope Lipschitz estimates on `θ ∈ [lo, hi]`.
///
/// `C_μᵃ`, `C_Δᵃ` use `θ' = (lo + hi)/2`. `C_g`, `C_g⁺` probe `G(θ)` and
/// `G(θ)⁺` along each coordinate axis through the midpoint and along the
/// diagonal.
pub fn estimate_lipschitz(spec: &ProblemSpec, theta_range: (f64, f64), delta: f64, n_probes: usize) -> Result<LipschitzEstimates> {
    estimate_lipschitz_cached(&CoherenceCache::for_spec(spec), spec, theta_range, delta, n_probes)
}

pub fn estimate_lipschitz_cached(
    cache: &CoherenceCache,
    spec: &ProblemSpec,
    theta_range: (f64, f64),
    delta: f64,
    n_probes: usize,
) -> Result<LipschitzEstimates> {
    let (lo, hi) = theta_range;
    if n_probes < 2 {
        return Err(Error::validation("Lipschitz estimation needs at least 2 probes"));
    }
    if !(lo < hi) {
        return Err(Error::validation(format!("empty theta range [{lo}, {hi}]")));
    }
    spec.kernel.check_theta(lo)?;
    spec.kernel.check_theta(hi)?;
    let probes = probe_points(lo, hi, n_probes);
    let mid = 0.5 * (lo + hi);

    let mut c_mu_by_order = [0.0; 3];
    let mut c_delta_by_order = [0.0; 3];
    for order in Order::ALL {
        let mut mu_pts = Vec::with_capacity(probes.len());
        let mut total_pts = Vec::with_capacity(probes.len());
        for &t in &probes {
            let table = cache.table(t, mid, order)?;
            mu_pts.push((t, table.mu(0.0)));
            let total = if delta > 0.0 { table.total(delta).0 } else { 0.0 };
            total_pts.push((t, total));
        }
        c_mu_by_order[order.index()] = max_pairwise_slope(&mu_pts);
        c_delta_by_order[order.index()] = max_pairwise_slope(&total_pts);
    }

    let p = spec.n_groups();
    let mut directions: Vec<Vec<Vec<f64>>> = Vec::new();
    for i in 0..p {
        directions.push(
            probes
                .iter()
                .map(|&t| {
                    let mut th = vec![mid; p];
                    th[i] = t;
                    th
                })
                .collect(),
        );
    }
    if p > 1 {
        directions.push(probes.iter().map(|&t| vec![t; p]).collect());
    }
    let mut g_lines = Vec::with_capacity(directions.len());
    let mut pinv_lines = Vec::with_capacity(directions.len());
    for line in directions {
        let mut gl = Vec::with_capacity(line.len());
        let mut pl = Vec::with_capacity(line.len());
        for th in line {
            let g = build_dictionary(spec, &th)?;
            let pinv = LeastSquares::new(&g)?.pseudo_inverse();
            gl.push((th.clone(), g));
            pl.push((th, pinv));
        }
        g_lines.push(gl);
        pinv_lines.push(pl);
    }

    let fold = |v: &[f64; 3]| v.iter().copied().fold(0.0_f64, f64::max);
    Ok(LipschitzEstimates {
        c_mu_by_order,
        c_delta_by_order,
        c_mu: fold(&c_mu_by_order),
        c_delta: fold(&c_delta_by_order),
        c_g: max_matrix_slope(&g_lines),
        c_g_plus: max_matrix_slope(&pinv_lines),
        theta_lo: lo,
        theta_hi: hi,
        n_probes,
    })
}
