//! Projected least-squares loss `ℒ(θ) = ‖P⊥_{G(θ)} x‖²/(2N)`, its exact
//! gradient and Hessian, amplitude recovery, and a damped Newton solver.
//!
//! The Hessian is returned as `(E + R)/N` where `E` is a positive
//! semidefinite curvature term and `R` collects everything that is
//! proportional to the projected residual `P⊥x`. Two splits are available:
//!
//! * [`HessianForm::Exact`]: `E = (P⊥J)ᵀ(P⊥J)` and `R` the exact remainder,
//!   so `(E + R)/N` is the true Hessian of the loss everywhere.
//! * [`HessianForm::Unprojected`]: `E = JᵀJ` and `R = diag⟨G_{2,i}η̂ᵢ, P⊥x⟩`,
//!   the block-diagonal model whose `R` bound drives the radius theory.
//!
//! `J` is the `N × p` Jacobian of `θ ↦ G(θ)η̂` with `η̂` frozen; column `i`
//! is `G_{1,i} η̂ᵢ` where `η̂ᵢ` is the group-`i` slice of `η̂ = G⁺x`.

use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::{build_derivative_blocks, build_dictionary, DerivativeBlocks, ProblemSpec};
use crate::error::{Error, Result};
use crate::kernels::Order;
use crate::linalg::{self, LeastSquares};

pub use crate::linalg::min_eigenvalue;

static HESSIAN_EVALUATIONS: AtomicUsize = AtomicUsize::new(0);
static WEYL_VIOLATIONS: AtomicUsize = AtomicUsize::new(0);

/// `(evaluations, violations)` of the Weyl split observed by this process.
pub fn weyl_counters() -> (usize, usize) {
    (
        HESSIAN_EVALUATIONS.load(AtomicOrdering::Relaxed),
        WEYL_VIOLATIONS.load(AtomicOrdering::Relaxed),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianForm {
    #[default]
    Exact,
    Unprojected,
}

#[derive(Debug, Clone)]
pub struct VarProEvaluation {
    pub loss: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub curvature_e: DMatrix<f64>,
    pub residual_r: DMatrix<f64>,
    pub eta_hat: DVector<f64>,
    pub projected_residual: DVector<f64>,
    pub form: HessianForm,
    n_samples: usize,
}

impl VarProEvaluation {
    /// `(λ_min(E) − λ_max(R))/N`, with `λ_max(R)` taken as the spectral
    /// radius of `R` (for a diagonal `R` this is `maxᵢ |R_ii|`).
    pub fn weyl_lower_bound(&self) -> f64 {
        (linalg::min_eigenvalue(&self.curvature_e) - linalg::spectral_radius_sym(&self.residual_r))
            / self.n_samples as f64
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.hessian)
    }

    /// Whether `λ_min(∇²ℒ) ≥ weyl_lower_bound` holds up to `1e-12` relative
    /// to the magnitude of the two terms.
    pub fn weyl_holds(&self) -> bool {
        let n = self.n_samples as f64;
        let scale = 1.0
            + (linalg::spectral_radius_sym(&self.curvature_e)
                + linalg::spectral_radius_sym(&self.residual_r))
                / n;
        self.min_eigenvalue() >= self.weyl_lower_bound() - 1e-12 * scale
    }
}

/// Pieces shared by the loss, gradient and Hessian.
struct Projection {
    ls: LeastSquares,
    eta: DVector<f64>,
    residual: DVector<f64>,
}

fn project(spec: &ProblemSpec, theta: &[f64], x: &DVector<f64>) -> Result<Projection> {
    if x.len() != spec.n_samples() {
        return Err(Error::dimension(format!(
            "observation has {} samples, grid has {}",
            x.len(),
            spec.n_samples()
        )));
    }
    let g = build_dictionary(spec, theta)?;
    let ls = LeastSquares::new(&g)?;
    let eta = ls.solve(x);
    let residual = ls.project_complement(x);
    Ok(Projection { ls, eta, residual })
}

/// `‖P⊥x‖²/(2N)`.
pub fn loss(spec: &ProblemSpec, theta: &[f64], x: &DVector<f64>) -> Result<f64> {
    let p = project(spec, theta, x)?;
    Ok(p.residual.norm_squared() / (2.0 * spec.n_samples() as f64))
}

/// `η̂ = G(θ)⁺x`.
pub fn amplitudes(spec: &ProblemSpec, theta: &[f64], x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(project(spec, theta, x)?.eta)
}

fn jacobian_from_blocks(g1: &DerivativeBlocks, eta_hat: &DVector<f64>) -> DMatrix<f64> {
    let n = g1.matrix.nrows();
    let p = g1.n_groups();
    let mut j = DMatrix::zeros(n, p);
    for i in 0..p {
        let range = g1.group_range(i);
        let eta_i = eta_hat.rows(range.start, range.len());
        j.set_column(i, &(g1.block(i) * eta_i));
    }
    j
}

/// `J` with column `i` equal to `G_{1,i} η̂ᵢ`. `eta_hat` may carry a trailing
/// baseline amplitude, which does not depend on `θ`.
pub fn jacobian_columns(spec: &ProblemSpec, theta: &[f64], eta_hat: &DVector<f64>) -> Result<DMatrix<f64>> {
    if eta_hat.len() != spec.model_order() && eta_hat.len() != spec.n_columns() {
        return Err(Error::dimension(format!(
            "eta has {} entries, model order is {}",
            eta_hat.len(),
            spec.model_order()
        )));
    }
    let g1 = build_derivative_blocks(spec, theta, Order::One)?;
    Ok(jacobian_from_blocks(&g1, eta_hat))
}

/// Entry `i` is `−⟨Jᵢ, P⊥x⟩/N`.
pub fn gradient(spec: &ProblemSpec, theta: &[f64], x: &DVector<f64>) -> Result<DVector<f64>> {
    let p = project(spec, theta, x)?;
    let g1 = build_derivative_blocks(spec, theta, Order::One)?;
    let j = jacobian_from_blocks(&g1, &p.eta);
    Ok(-(j.tr_mul(&p.residual)) / spec.n_samples() as f64)
}

/// Loss, gradient and Hessian with the default exact split.
pub fn hessian(spec: &ProblemSpec, theta: &[f64], x: &DVector<f64>) -> Result<VarProEvaluation> {
    evaluate(spec, theta, x, HessianForm::Exact)
}

/// Loss, gradient and Hessian with the chosen `E`/`R` split.
pub fn evaluate(spec: &ProblemSpec, theta: &[f64], x: &DVector<f64>, form: HessianForm) -> Result<VarProEvaluation> {
    let n = spec.n_samples();
    let nf = n as f64;
    let pr = project(spec, theta, x)?;
    let g1 = build_derivative_blocks(spec, theta, Order::One)?;
    let g2 = build_derivative_blocks(spec, theta, Order::Two)?;
    let p = spec.n_groups();
    let r = &pr.residual;
    let j = jacobian_from_blocks(&g1, &pr.eta);
    let gradient = -(j.tr_mul(r)) / nf;

    // second-derivative term ⟨G_{2,i} η̂ᵢ, P⊥x⟩, diagonal because θᵢ only moves group i
    let second: Vec<f64> = (0..p)
        .map(|i| {
            let range = g2.group_range(i);
            let eta_i = pr.eta.rows(range.start, range.len());
            (g2.block(i) * eta_i).dot(r)
        })
        .collect();

    let (curvature_e, residual_r) = match form {
        HessianForm::Unprojected => {
            let e = j.tr_mul(&j);
            let rr = DMatrix::from_diagonal(&DVector::from_vec(second));
            (e, rr)
        }
        HessianForm::Exact => {
            let mut pj = DMatrix::zeros(n, p);
            for i in 0..p {
                pj.set_column(i, &pr.ls.project_complement(&j.column(i).into_owned()));
            }
            let e = pj.tr_mul(&pj);
            // b_i = A_iᵀ r (A_i = ∂G/∂θ_i), c_i = G⁺ J_i
            let m = spec.n_columns();
            let mut b = DMatrix::zeros(m, p);
            for i in 0..p {
                let range = g1.group_range(i);
                let bi = g1.block(i).tr_mul(r);
                b.view_mut((range.start, i), (range.len(), 1)).copy_from(&bi);
            }
            let c = {
                let mut c = DMatrix::zeros(m, p);
                for i in 0..p {
                    c.set_column(i, &pr.ls.solve(&j.column(i).into_owned()));
                }
                c
            };
            let bc = b.tr_mul(&c); // (b_j · c_i) at (j, i)
            let bgb = b.tr_mul(&(pr.ls.gram_inverse() * &b));
            let rr = DMatrix::from_fn(p, p, |i, jj| {
                let diag = if i == jj { second[i] } else { 0.0 };
                bc[(jj, i)] + bc[(i, jj)] - diag - bgb[(i, jj)]
            });
            (e, (&rr + rr.transpose()) * 0.5)
        }
    };
    let hessian = (&curvature_e + &residual_r) / nf;
    let eval = VarProEvaluation {
        loss: r.norm_squared() / (2.0 * nf),
        gradient,
        hessian,
        curvature_e,
        residual_r,
        eta_hat: pr.eta,
        projected_residual: pr.residual,
        form,
        n_samples: n,
    };
    HESSIAN_EVALUATIONS.fetch_add(1, AtomicOrdering::Relaxed);
    if !eval.weyl_holds() {
        WEYL_VIOLATIONS.fetch_add(1, AtomicOrdering::Relaxed);
        log::error!("Weyl split violated at theta = {theta:?}");
    }
    Ok(eval)
}

fn default_tol_g() -> f64 {
    1e-10
}
fn default_step_tol() -> f64 {
    1e-14
}
fn default_max_iter() -> usize {
    500
}
fn default_armijo_c() -> f64 {
    1e-4
}
fn default_backtrack() -> f64 {
    0.5
}
fn default_max_backtracks() -> usize {
    60
}
fn default_stall_limit() -> usize {
    5
}
fn default_gradient_step() -> f64 {
    0.1
}

/// Solver settings; every field has a config default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    #[serde(default = "default_tol_g")]
    pub tol_g: f64,
    #[serde(default = "default_step_tol")]
    pub step_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_armijo_c")]
    pub armijo_c: f64,
    #[serde(default = "default_backtrack")]
    pub backtrack: f64,
    #[serde(default = "default_max_backtracks")]
    pub max_backtracks: usize,
    /// Consecutive no-progress steps at the box boundary before giving up.
    #[serde(default = "default_stall_limit")]
    pub stall_limit: usize,
    /// Trial length of a gradient step, relative to `‖θ‖∞`.
    #[serde(default = "default_gradient_step")]
    pub gradient_step: f64,
    #[serde(default)]
    pub hessian_form: HessianForm,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_g: default_tol_g(),
            step_tol: default_step_tol(),
            max_iter: default_max_iter(),
            armijo_c: default_armijo_c(),
            backtrack: default_backtrack(),
            max_backtracks: default_max_backtracks(),
            stall_limit: default_stall_limit(),
            gradient_step: default_gradient_step(),
            hessian_form: HessianForm::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    Initial,
    Newton,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
    IllConditioned,
    BoundaryStalled,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub theta: Vec<f64>,
    pub loss: f64,
    pub grad_inf: f64,
    pub step: StepKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub theta_hat: Vec<f64>,
    pub eta_hat: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub termination: Termination,
}

impl SolveResult {
    pub fn final_loss(&self) -> f64 {
        self.iterations.last().map_or(f64::NAN, |r| r.loss)
    }
}

fn clamp_to_domain(spec: &ProblemSpec, theta: &mut [f64]) -> bool {
    let lo = spec.kernel.theta_lo * (1.0 + 1e-9);
    let hi = spec.kernel.theta_hi * (1.0 - 1e-9);
    let mut clipped = false;
    for th in theta.iter_mut() {
        if *th < lo {
            *th = lo;
            clipped = true;
        } else if *th > hi {
            *th = hi;
            clipped = true;
        }
    }
    clipped
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Damped Newton on `ℒ` with Armijo backtracking and projection onto the
/// `θ` domain. Falls back to a scaled gradient step whenever the Hessian is
/// not positive definite or the Newton direction fails the line search.
pub fn solve(spec: &ProblemSpec, x: &DVector<f64>, theta0: &[f64], options: &SolverOptions) -> Result<SolveResult> {
    spec.check_theta(theta0)?;
    let mut theta = theta0.to_vec();
    clamp_to_domain(spec, &mut theta);
    let mut iterations = Vec::new();
    let mut step_kind = StepKind::Initial;
    let mut stalled = 0usize;

    let finish = |theta: Vec<f64>, eta: &DVector<f64>, iterations, converged, termination| SolveResult {
        theta_hat: theta,
        eta_hat: eta.iter().copied().collect(),
        iterations,
        converged,
        termination,
    };

    let mut eval = match evaluate(spec, &theta, x, options.hessian_form) {
        Ok(e) => e,
        Err(Error::Conditioning { .. }) => {
            return Ok(SolveResult {
                theta_hat: theta,
                eta_hat: Vec::new(),
                iterations: vec![IterationRecord {
                    theta: theta0.to_vec(),
                    loss: f64::NAN,
                    grad_inf: f64::NAN,
                    step: StepKind::Initial,
                }],
                converged: false,
                termination: Termination::IllConditioned,
            })
        }
        Err(e) => return Err(e),
    };

    loop {
        let grad_inf = inf_norm(&eval.gradient);
        iterations.push(IterationRecord {
            theta: theta.clone(),
            loss: eval.loss,
            grad_inf,
            step: step_kind,
        });
        if grad_inf < options.tol_g {
            return Ok(finish(theta, &eval.eta_hat, iterations, true, Termination::GradientTolerance));
        }
        if iterations.len() > options.max_iter {
            return Ok(finish(theta, &eval.eta_hat, iterations, false, Termination::MaxIterations));
        }

        let newton = eval
            .hessian
            .clone()
            .cholesky()
            .map(|ch| -ch.solve(&eval.gradient))
            .filter(|d| d.dot(&eval.gradient) < 0.0 && d.iter().all(|v| v.is_finite()));
        let gradient_dir = {
            let scale = options.gradient_step * theta.iter().fold(0.0_f64, |m, t| m.max(t.abs())) / grad_inf;
            -&eval.gradient * scale
        };
        let mut candidates = Vec::with_capacity(2);
        if let Some(d) = newton {
            candidates.push((StepKind::Newton, d));
        }
        candidates.push((StepKind::Gradient, gradient_dir));

        let mut accepted = None;
        'directions: for (kind, dir) in candidates {
            let mut alpha = 1.0;
            for _ in 0..=options.max_backtracks {
                let mut trial: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, d)| t + alpha * d).collect();
                let clipped = clamp_to_domain(spec, &mut trial);
                let delta = DVector::from_iterator(trial.len(), trial.iter().zip(&theta).map(|(a, b)| a - b));
                let predicted = eval.gradient.dot(&delta);
                match loss(spec, &trial, x) {
                    Ok(l) if l.is_finite() && l <= eval.loss + options.armijo_c * predicted => {
                        accepted = Some((kind, trial, delta, clipped, l));
                        break 'directions;
                    }
                    Ok(_) | Err(Error::Conditioning { .. }) => {}
                    Err(e) => return Err(e),
                }
                alpha *= options.backtrack;
            }
        }

        let Some((kind, trial, delta, clipped, trial_loss)) = accepted else {
            return Ok(finish(theta, &eval.eta_hat, iterations, false, Termination::LineSearchFailed));
        };
        let progress = eval.loss - trial_loss;
        let step_norm = delta.norm();

        let next = match evaluate(spec, &trial, x, options.hessian_form) {
            Ok(e) => e,
            Err(Error::Conditioning { .. }) => {
                return Ok(finish(theta, &eval.eta_hat, iterations, false, Termination::IllConditioned));
            }
            Err(e) => return Err(e),
        };
        theta = trial;
        eval = next;
        step_kind = kind;

        if step_norm < options.step_tol {
            let grad_inf = inf_norm(&eval.gradient);
            iterations.push(IterationRecord {
                theta: theta.clone(),
                loss: eval.loss,
                grad_inf,
                step: step_kind,
            });
            let converged = grad_inf < options.tol_g;
            let reason = if converged {
                Termination::GradientTolerance
            } else {
                Termination::StepTolerance
            };
            return Ok(finish(theta, &eval.eta_hat, iterations, converged, reason));
        }
        if clipped && progress <= 1e-15 * eval.loss.abs() {
            stalled += 1;
            if stalled >= options.stall_limit {
                iterations.push(IterationRecord {
                    theta: theta.clone(),
                    loss: eval.loss,
                    grad_inf: inf_norm(&eval.gradient),
                    step: step_kind,
                });
                return Ok(finish(theta, &eval.eta_hat, iterations, false, Termination::BoundaryStalled));
            }
        } else {
            stalled = 0;
        }
    }
}
