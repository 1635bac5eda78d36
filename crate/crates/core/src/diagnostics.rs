//! Self-checks behind `psf-unmix check`: derivative accuracy, projector
//! algebra, gradient and Hessian against finite differences, coherence
//! bounds on Gramian spectra and the Weyl split.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coherence::{gramian_bounds, gramian_spectra};
use crate::dictionary::{build_dictionary, synthesize, NoiseSpec, ProblemSpec, SampleGrid, SupportSpec};
use crate::error::Result;
use crate::experiments::derive_seed;
use crate::kernels::{check_derivatives, fd_step, KernelFamily, Order};
use crate::linalg::LeastSquares;
use crate::varpro::{gradient, hessian, loss, weyl_counters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (or violation count for counting checks).
    pub worst: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, worst: f64, tolerance: f64, cases: usize) -> Self {
        CheckOutcome {
            name: name.into(),
            passed: worst <= tolerance,
            worst,
            tolerance,
            cases,
        }
    }
}

/// Floating-point slack for the Gramian bound comparison.
pub const GRAMIAN_REL_TOL: f64 = 1e-9;

pub fn kernel_families() -> Vec<KernelFamily> {
    vec![
        KernelFamily::u_laplace(1.0),
        KernelFamily::u_laplace(2.0),
        KernelFamily::u_laplace(20.0),
        KernelFamily::gaussian(),
        KernelFamily::lorentzian(),
    ]
}

/// A random problem with grid-aligned spikes whose smallest gap is exactly
/// `delta`.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub spec: ProblemSpec,
    pub theta: Vec<f64>,
    pub delta: f64,
}

/// Spikes sit in `[−0.6, 0.6]` of a 1001-sample grid on `[−1, 1]`, widths
/// are `Δ·[0.02, 0.3]` (log-uniform), `p ∈ {1, 2, 3}`.
pub fn random_instance<R: Rng>(rng: &mut R) -> Result<RandomInstance> {
    let families = kernel_families();
    let kernel = families[rng.random_range(0..families.len())];
    let grid = SampleGrid::centered(1001, 1.0)?;
    let h = grid.spacing();
    let lag = rng.random_range(10..=150usize);
    let delta = lag as f64 * h;
    let p = rng.random_range(1..=3usize);
    let max_spikes = ((1.2 / delta) as usize).max(1);
    let m = rng.random_range(p..=(3 * p).max(p)).min(max_spikes.max(p));
    // gaps of Δ plus a few grid steps, the first one exactly Δ
    let mut lags = vec![0usize];
    for k in 1..m {
        let extra = if k == 1 { 0 } else { rng.random_range(0..=lag / 2) };
        lags.push(lags[k - 1] + lag + extra);
    }
    let span = *lags.last().unwrap() as f64 * h;
    let start_idx = ((grid.n_samples - 1) as f64 / 2.0 - span / (2.0 * h)).round() as usize;
    let positions: Vec<f64> = lags.iter().map(|l| grid.instant(start_idx + l)).collect();
    // every group gets at least one spike, the rest are dealt randomly
    let mut owner: Vec<usize> = (0..m).map(|k| if k < p { k } else { rng.random_range(0..p) }).collect();
    for k in (1..m).rev() {
        owner.swap(k, rng.random_range(0..=k));
    }
    let groups: Vec<Vec<f64>> = (0..p)
        .map(|i| positions.iter().zip(&owner).filter(|(_, o)| **o == i).map(|(t, _)| *t).collect())
        .collect();
    let groups: Vec<Vec<f64>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
    let theta = (0..groups.len())
        .map(|_| delta * 10f64.powf(rng.random_range(0.02f64.log10()..0.3f64.log10())))
        .collect();
    let spec = ProblemSpec::new(kernel, grid, SupportSpec::new(groups)?)?;
    Ok(RandomInstance { spec, theta, delta })
}

/// Order-1/2 derivatives against central differences on a 10×10 `(θ, t)`
/// grid for each built-in family.
pub fn check_kernel_derivatives() -> Result<Vec<CheckOutcome>> {
    let thetas: Vec<f64> = (0..10).map(|i| 10f64.powf(-3.0 + 3.0 * i as f64 / 9.0)).collect();
    let ts: Vec<f64> = (0..10).map(|i| -1.0 + 2.0 * i as f64 / 9.0).collect();
    kernel_families()
        .iter()
        .map(|k| {
            let err = check_derivatives(k, &thetas, &ts)?;
            Ok(CheckOutcome::new(format!("derivatives/{}", k.label()), err, 1e-6, 100))
        })
        .collect()
}

/// `P⊥` idempotent, symmetric in action and annihilating `G`.
pub fn check_projector(n_instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for k in 0..n_instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, k as u64]));
        let inst = random_instance(&mut rng)?;
        let g = build_dictionary(&inst.spec, &inst.theta)?;
        let ls = LeastSquares::new(&g)?;
        let n = g.nrows();
        let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let px = ls.project_complement(&x);
        let py = ls.project_complement(&y);
        let idem = (&ls.project_complement(&px) - &px).norm() / x.norm();
        let sym = (px.dot(&y) - x.dot(&py)).abs() / (x.norm() * y.norm());
        let annihilate = (g.tr_mul(&px)).amax() / (g.norm() * x.norm());
        worst = worst.max(idem).max(sym).max(annihilate);
    }
    Ok(CheckOutcome::new("projector", worst, 1e-10, n_instances))
}

fn observation(inst: &RandomInstance, rng: &mut ChaCha8Rng, snr_db: Option<f64>) -> Result<DVector<f64>> {
    let eta: Vec<f64> = (0..inst.spec.n_columns()).map(|_| rng.random_range(0.5..1.5)).collect();
    let noise = match snr_db {
        Some(snr_db) => NoiseSpec::Gaussian {
            snr_db,
            seed: rng.random(),
        },
        None => NoiseSpec::None,
    };
    Ok(synthesize(&inst.spec, &inst.theta, &eta, noise)?.x_vector())
}

/// Central-difference gradient of the loss with the crate-wide step.
pub fn fd_gradient(spec: &ProblemSpec, theta: &[f64], x: &DVector<f64>) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(theta.len());
    for i in 0..theta.len() {
        let h = fd_step(theta[i]);
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[i] += h;
        tm[i] -= h;
        out[i] = (loss(spec, &tp, x)? - loss(spec, &tm, x)?) / (2.0 * h);
    }
    Ok(out)
}

/// Central differences of the analytic gradient, symmetrized.
pub fn fd_hessian(spec: &ProblemSpec, theta: &[f64], x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let p = theta.len();
    let mut h = DMatrix::zeros(p, p);
    for j in 0..p {
        let step = 1e-5 * theta[j];
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[j] += step;
        tm[j] -= step;
        let col = (gradient(spec, &tp, x)? - gradient(spec, &tm, x)?) / (2.0 * step);
        h.set_column(j, &col);
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Gradient against finite differences away from the truth on noisy data,
/// relative to `‖∇ℒ‖∞`.
pub fn check_gradient(n_instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for k in 0..n_instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, k as u64]));
        let inst = random_instance(&mut rng)?;
        let x = observation(&inst, &mut rng, Some(10.0))?;
        let theta: Vec<f64> = inst.theta.iter().map(|t| t * rng.random_range(0.8..1.25)).collect();
        let g = gradient(&inst.spec, &theta, &x)?;
        let fd = fd_gradient(&inst.spec, &theta, &x)?;
        let scale = fd.amax().max(g.amax());
        if scale > 0.0 {
            worst = worst.max((&g - &fd).amax() / scale);
        }
    }
    Ok(CheckOutcome::new("gradient-fd", worst, 1e-6, n_instances))
}

/// Hessian at noiseless truth, where the residual term vanishes.
pub fn check_hessian_at_truth(n_instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for k in 0..n_instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, k as u64]));
        let inst = random_instance(&mut rng)?;
        let x = observation(&inst, &mut rng, None)?;
        let ev = hessian(&inst.spec, &inst.theta, &x)?;
        let fd = fd_hessian(&inst.spec, &inst.theta, &x)?;
        let scale = fd.amax().max(ev.hessian.amax());
        if scale > 0.0 {
            worst = worst.max((&ev.hessian - &fd).amax() / scale);
        }
    }
    Ok(CheckOutcome::new("hessian-at-truth", worst, 1e-4, n_instances))
}

/// Counts random `(instance, order)` pairs whose measured Gramian extremes
/// escape the coherence bounds by more than `1e-9` of the spectral scale.
/// An isolated spike makes the bound an equality, so exact ties are common
/// and only agree to rounding. Only pairs with a positive full lower bound
/// are drawn; returns the outcome and the number of draws rejected.
pub fn check_gramian_bounds(n_instances: usize, seed: u64) -> Result<(CheckOutcome, usize)> {
    let mut violations = 0usize;
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut k = 0u64;
    while accepted < n_instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4, k]));
        k += 1;
        let inst = random_instance(&mut rng)?;
        let order = Order::ALL[rng.random_range(0..3)];
        let bounds = gramian_bounds(&inst.spec, &inst.theta, order)?;
        if !(bounds.full_min > 0.0) {
            rejected += 1;
            continue;
        }
        accepted += 1;
        let spectra = gramian_spectra(&inst.spec, &inst.theta, order)?;
        if !bounds.contains(&spectra, GRAMIAN_REL_TOL) {
            violations += 1;
        }
    }
    Ok((CheckOutcome::new("gramian-bounds", violations as f64, 0.0, n_instances), rejected))
}

/// Weyl split violations recorded by every Hessian evaluation so far.
pub fn check_weyl() -> CheckOutcome {
    let (evaluations, violations) = weyl_counters();
    CheckOutcome::new("weyl-split", violations as f64, 0.0, evaluations)
}

/// The full suite run by `psf-unmix check`.
pub fn run_self_checks(seed: u64, gramian_instances: usize) -> Result<Vec<CheckOutcome>> {
    let mut out = check_kernel_derivatives()?;
    out.push(check_projector(20, seed)?);
    out.push(check_gradient(20, seed)?);
    out.push(check_hessian_at_truth(10, seed)?);
    out.push(check_gramian_bounds(gramian_instances, seed)?.0);
    out.push(check_weyl());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_instances_respect_their_separation() {
        for k in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(k);
            let inst = random_instance(&mut rng).unwrap();
            let sep = inst.spec.min_separation();
            assert!(sep.is_infinite() || (sep - inst.delta).abs() < 1e-9, "{sep} vs {}", inst.delta);
            assert!(inst.spec.support.locations().iter().all(|t| t.abs() <= 0.61));
            inst.spec.check_theta(&inst.theta).unwrap();
        }
    }

    #[test]
    fn suite_passes() {
        let checks = run_self_checks(7, 100).unwrap();
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
    }
}
