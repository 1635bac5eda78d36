//! Theorem constants, the noise feasibility condition and the strong-basin
//! radius bound `ε₀`.
//!
//! The diagonal energies inside `λ_{min,a}`, `λ_{max,a}` and `Λ` are taken as
//! `μₐ(θᵢ*, θᵢ*, 0)`. With `μₐ(θᵢ*, θᵢ*, Δ)` instead, `λ_{min,a}` would always be
//! negative since `𝒞ₐ(θ, θ, Δ) ≥ 2μₐ(θ, θ, Δ)`.

use serde::{Deserialize, Serialize};

use crate::coherence::{estimate_lipschitz_cached, CoherenceCache, LipschitzEstimates, LipschitzOptions};
use crate::dictionary::ProblemSpec;
use crate::error::{Error, Result};
use crate::kernels::Order;

/// Which coherence is used for the diagonal energy terms.
pub const DIAGONAL_CONVENTION: &str = "mu_a(theta_i, theta_i, 0)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub lambda_min: [f64; 3],
    pub lambda_max: [f64; 3],
    pub big_lambda_min: [f64; 3],
    pub big_lambda_max: [f64; 3],
    /// `𝒮ₐ(θ*)`
    pub s: [f64; 3],
    /// `None` when a required denominator is not positive.
    pub alpha_star: Option<f64>,
    pub beta_star: Option<f64>,
    pub gamma_star: Option<f64>,
    /// `γ*·√N`, the sample-size independent part of `γ*`.
    pub gamma_star_sqrt_n: Option<f64>,
    pub denominators_positive: bool,
    pub feasible: bool,
    pub epsilon0: f64,
    pub delta: f64,
    pub n_samples: usize,
    pub n_groups: usize,
    pub norm_x: Option<f64>,
    pub norm_w: Option<f64>,
    pub norm_x_star: Option<f64>,
    pub lipschitz: LipschitzEstimates,
    pub diagonal_convention: String,
}

impl TheoremConstants {
    /// Right-hand side ratio of the feasibility condition:
    /// `‖w‖ < ratio·‖x‖`.
    pub fn noise_ratio_threshold(&self) -> f64 {
        let (lmax0, lmin0, lmax2) = (self.lambda_max[0], self.lambda_min[0], self.lambda_max[2]);
        if !(lmax0 > 0.0 && lmin0 > 0.0 && lmax2 > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.big_lambda_min[1] / lmax0 * (lmin0 / lmax2).sqrt()
    }

    /// Fills in norms, feasibility and `ε₀`.
    pub fn with_norms(mut self, norm_x: f64, norm_w: f64, norm_x_star: f64) -> Self {
        self.feasible = feasibility(&self, norm_x, norm_w);
        self.epsilon0 = radius_bound(&self, norm_x, norm_w, norm_x_star);
        self.norm_x = Some(norm_x);
        self.norm_w = Some(norm_w);
        self.norm_x_star = Some(norm_x_star);
        self
    }
}

/// Constants at `θ*` with `Δ` the spec's minimal separation.
pub fn theorem_constants(spec: &ProblemSpec, theta_star: &[f64], lipschitz: &LipschitzEstimates) -> Result<TheoremConstants> {
    theorem_constants_cached(&CoherenceCache::for_spec(spec), spec, theta_star, spec.min_separation(), lipschitz)
}

pub fn theorem_constants_cached(
    cache: &CoherenceCache,
    spec: &ProblemSpec,
    theta_star: &[f64],
    delta: f64,
    lipschitz: &LipschitzEstimates,
) -> Result<TheoremConstants> {
    spec.check_theta(theta_star)?;
    let mut lambda_min = [0.0; 3];
    let mut lambda_max = [0.0; 3];
    let mut big_lambda_min = [0.0; 3];
    let mut big_lambda_max = [0.0; 3];
    let mut s = [0.0; 3];
    for order in Order::ALL {
        let a = order.index();
        let mut diff_min = f64::INFINITY;
        let mut sum_max = f64::NEG_INFINITY;
        let mut energy_min = f64::INFINITY;
        let mut energy_max = f64::NEG_INFINITY;
        for &t in theta_star {
            let energy = cache.mu(t, t, 0.0, order)?;
            let total = cache.total(t, t, delta, order)?.total;
            diff_min = diff_min.min(energy - total);
            sum_max = sum_max.max(energy + total);
            energy_min = energy_min.min(energy);
            energy_max = energy_max.max(energy);
        }
        s[a] = cache.row_sum(theta_star, delta, order)?;
        lambda_min[a] = 0.5 * diff_min;
        lambda_max[a] = sum_max;
        big_lambda_min[a] = 0.5 * energy_min - s[a];
        big_lambda_max[a] = energy_max + s[a];
    }

    let n = spec.n_samples() as f64;
    let p = theta_star.len() as f64;
    let (lmin0, lmax0, lmin2, lmax2) = (lambda_min[0], lambda_max[0], lambda_min[2], lambda_max[2]);
    let (bmin0, bmin1) = (big_lambda_min[0], big_lambda_min[1]);
    let denominators_positive = lmax0 > 0.0 && lmin0 > 0.0 && lmin2 > 0.0 && bmin0 > 0.0;
    let (cm, cd) = (lipschitz.c_mu, lipschitz.c_delta);
    let (alpha_star, beta_star, gamma_star, gamma_star_sqrt_n) = if denominators_positive {
        let alpha = (lmax0 * (cm + 2.0 * p * cd) + 2.0 * bmin1 * (cm + cd)) / (lmax0 * lmax0);
        let beta = (lmin0 * (cm + cd) + lmax2 * (cm + 2.0 * cd)) / (2.0 * (lmin0.powi(3) * lmin2).sqrt());
        let gamma_root = lipschitz.c_g * lipschitz.c_g_plus * (1.0 + bmin0) * lmax2.sqrt() / (lmin0 * bmin0).sqrt();
        (Some(alpha), Some(beta), Some(gamma_root / n.sqrt()), Some(gamma_root))
    } else {
        (None, None, None, None)
    };

    Ok(TheoremConstants {
        lambda_min,
        lambda_max,
        big_lambda_min,
        big_lambda_max,
        s,
        alpha_star,
        beta_star,
        gamma_star,
        gamma_star_sqrt_n,
        denominators_positive,
        feasible: false,
        epsilon0: 0.0,
        delta,
        n_samples: spec.n_samples(),
        n_groups: theta_star.len(),
        norm_x: None,
        norm_w: None,
        norm_x_star: None,
        lipschitz: lipschitz.clone(),
        diagonal_convention: DIAGONAL_CONVENTION.to_string(),
    })
}

/// Noise feasibility: `‖w‖ < (Λ_{min,1}/λ_{max,0})·√(λ_{min,0}/λ_{max,2})·‖x‖`
/// together with positive denominators.
pub fn feasibility(constants: &TheoremConstants, norm_x: f64, norm_w: f64) -> bool {
    constants.denominators_positive
        && constants.lambda_max[2] > 0.0
        && norm_w < constants.noise_ratio_threshold() * norm_x
}

/// `ε₀`, or 0 when infeasible. A zero denominator with a positive numerator
/// (all Lipschitz constants zero) gives `+∞`.
pub fn radius_bound(constants: &TheoremConstants, norm_x: f64, norm_w: f64, norm_x_star: f64) -> f64 {
    if !feasibility(constants, norm_x, norm_w) {
        return 0.0;
    }
    let (Some(alpha), Some(beta), Some(gamma)) = (constants.alpha_star, constants.beta_star, constants.gamma_star) else {
        return 0.0;
    };
    let lmax0 = constants.lambda_max[0];
    let numerator = constants.big_lambda_min[1] / lmax0 * norm_x * norm_x
        - (constants.lambda_max[2] / constants.lambda_min[0]).sqrt() * norm_x * norm_w;
    let denominator = alpha * norm_x * norm_x + beta * norm_x * norm_w + gamma * norm_x_star;
    if numerator <= 0.0 {
        return 0.0;
    }
    if denominator <= 0.0 {
        log::warn!("radius denominator vanishes (all Lipschitz constants zero); reporting +inf");
        return f64::INFINITY;
    }
    numerator / denominator
}

/// Probe interval for Lipschitz estimation around `θ*`, clipped to the
/// kernel domain.
pub fn lipschitz_range(spec: &ProblemSpec, theta_star: &[f64], options: &LipschitzOptions) -> Result<(f64, f64)> {
    if theta_star.is_empty() {
        return Err(Error::validation("theta_star is empty"));
    }
    let w = options.relative_halfwidth;
    if !(w > 0.0 && w < 1.0) {
        return Err(Error::validation(format!("relative_halfwidth must lie in (0, 1), got {w}")));
    }
    let lo = theta_star.iter().copied().fold(f64::INFINITY, f64::min) * (1.0 - w);
    let hi = theta_star.iter().copied().fold(f64::NEG_INFINITY, f64::max) * (1.0 + w);
    Ok((lo.max(spec.kernel.theta_lo), hi.min(spec.kernel.theta_hi)))
}

/// Lipschitz estimation followed by the theorem constants and `ε₀`.
pub fn analyze_instance(
    cache: &CoherenceCache,
    spec: &ProblemSpec,
    theta_star: &[f64],
    options: &LipschitzOptions,
    norms: (f64, f64, f64),
) -> Result<TheoremConstants> {
    let delta = spec.min_separation();
    let range = lipschitz_range(spec, theta_star, options)?;
    let lipschitz = estimate_lipschitz_cached(cache, spec, range, delta, options.n_probes)?.scaled(options.safety_factor);
    let constants = theorem_constants_cached(cache, spec, theta_star, delta, &lipschitz)?;
    Ok(constants.with_norms(norms.0, norms.1, norms.2))
}
