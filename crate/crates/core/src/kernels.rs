//! Parametric point spread functions `g(θ, t)` and their derivatives in the
//! shape parameter `θ`.
//!
//! Every family is even in `t`. Derivatives are taken with respect to `θ`
//! only, up to second order, which is all the Hessian blocks need.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponent arguments below this value flush to an exact zero.
const UNDERFLOW_EXPONENT: f64 = -745.0;

/// Shape of a kernel family, selected in config files by its `kernel` id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "kebab-case")]
pub enum KernelShape {
    /// `exp(-(|t|/θ)^u)`; `u` sets how fast the tails decay.
    ULaplace { u: f64 },
    /// `exp(-t²/(2θ²))`
    Gaussian,
    /// `θ²/(θ² + t²)`
    Lorentzian,
}

/// Derivative order in `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Order {
    Zero = 0,
    One = 1,
    Two = 2,
}

impl Order {
    pub const ALL: [Order; 3] = [Order::Zero, Order::One, Order::Two];

    pub fn index(self) -> usize {
        self as usize
    }

    fn lower(self) -> Option<Order> {
        match self {
            Order::Zero => None,
            Order::One => Some(Order::Zero),
            Order::Two => Some(Order::One),
        }
    }
}

impl TryFrom<u8> for Order {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            0 => Ok(Order::Zero),
            1 => Ok(Order::One),
            2 => Ok(Order::Two),
            other => Err(Error::validation(format!(
                "derivative order must be 0, 1 or 2, got {other}"
            ))),
        }
    }
}

fn default_theta_lo() -> f64 {
    1e-6
}

fn default_theta_hi() -> f64 {
    10.0
}

/// A kernel family together with the open interval of admissible `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelFamily {
    #[serde(flatten)]
    pub shape: KernelShape,
    #[serde(default = "default_theta_lo")]
    pub theta_lo: f64,
    #[serde(default = "default_theta_hi")]
    pub theta_hi: f64,
}

impl KernelFamily {
    pub fn new(shape: KernelShape, theta_lo: f64, theta_hi: f64) -> Result<Self> {
        let family = KernelFamily {
            shape,
            theta_lo,
            theta_hi,
        };
        family.validate()?;
        Ok(family)
    }

    pub fn u_laplace(u: f64) -> Self {
        KernelFamily {
            shape: KernelShape::ULaplace { u },
            theta_lo: default_theta_lo(),
            theta_hi: default_theta_hi(),
        }
    }

    pub fn gaussian() -> Self {
        KernelFamily {
            shape: KernelShape::Gaussian,
            theta_lo: default_theta_lo(),
            theta_hi: default_theta_hi(),
        }
    }

    pub fn lorentzian() -> Self {
        KernelFamily {
            shape: KernelShape::Lorentzian,
            theta_lo: default_theta_lo(),
            theta_hi: default_theta_hi(),
        }
    }

    pub fn with_domain(mut self, theta_lo: f64, theta_hi: f64) -> Self {
        self.theta_lo = theta_lo;
        self.theta_hi = theta_hi;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_lo > 0.0 && self.theta_lo < self.theta_hi && self.theta_hi.is_finite()) {
            return Err(Error::validation(format!(
                "theta domain ({}, {}) must satisfy 0 < lo < hi < inf",
                self.theta_lo, self.theta_hi
            )));
        }
        if let KernelShape::ULaplace { u } = self.shape {
            if !(u > 0.0 && u.is_finite()) {
                return Err(Error::validation(format!("u-laplace exponent must be > 0, got {u}")));
            }
        }
        Ok(())
    }

    /// Short label used in file names and tables, e.g. `u-laplace-2`.
    pub fn label(&self) -> String {
        match self.shape {
            KernelShape::ULaplace { u } => format!("u-laplace-{u}"),
            KernelShape::Gaussian => "gaussian".to_string(),
            KernelShape::Lorentzian => "lorentzian".to_string(),
        }
    }

    pub fn contains(&self, theta: f64) -> bool {
        theta > self.theta_lo && theta < self.theta_hi
    }

    pub fn check_theta(&self, theta: f64) -> Result<()> {
        if self.contains(theta) {
            Ok(())
        } else {
            Err(Error::Domain {
                what: "theta",
                value: theta,
                lo: self.theta_lo,
                hi: self.theta_hi,
            })
        }
    }

    /// `∂ᵃg/∂θᵃ (θ, t)`.
    pub fn eval(&self, theta: f64, t: f64, order: Order) -> Result<f64> {
        self.check_theta(theta)?;
        let value = self.eval_unchecked(theta, t, order);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::Numeric(format!(
                "{} kernel at theta={theta}, t={t}, order={}",
                self.label(),
                order.index()
            )))
        }
    }

    /// Same as [`eval`](Self::eval) without the domain check. Used in the hot
    /// loops after `θ` has been validated once.
    pub(crate) fn eval_unchecked(&self, theta: f64, t: f64, order: Order) -> f64 {
        match self.shape {
            KernelShape::ULaplace { u } => power_exp(theta, (t.abs() / theta).powf(u), u, order),
            KernelShape::Gaussian => {
                let r = t / theta;
                power_exp(theta, 0.5 * r * r, 2.0, order)
            }
            KernelShape::Lorentzian => {
                let th2 = theta * theta;
                let t2 = t * t;
                let d = th2 + t2;
                match order {
                    Order::Zero => th2 / d,
                    Order::One => 2.0 * theta * t2 / (d * d),
                    Order::Two => 2.0 * t2 * (t2 - 3.0 * th2) / (d * d * d),
                }
            }
        }
    }

    /// Integral of `g(θ, ·)` over the real line. Converts a peak amplitude into
    /// an integrated line intensity.
    pub fn area(&self, theta: f64) -> f64 {
        match self.shape {
            KernelShape::ULaplace { u } => {
                2.0 * theta * statrs::function::gamma::gamma(1.0 + 1.0 / u)
            }
            KernelShape::Gaussian => theta * (2.0 * std::f64::consts::PI).sqrt(),
            KernelShape::Lorentzian => std::f64::consts::PI * theta,
        }
    }
}

/// `exp(-s)` with `s = c·θ^{-u}` and its `θ` derivatives:
/// `g' = g·u·s/θ`, `g'' = g·u·s·(u·s − u − 1)/θ²`.
fn power_exp(theta: f64, s: f64, u: f64, order: Order) -> f64 {
    if s == 0.0 {
        return match order {
            Order::Zero => 1.0,
            _ => 0.0,
        };
    }
    if -s < UNDERFLOW_EXPONENT {
        return 0.0;
    }
    let g = (-s).exp();
    match order {
        Order::Zero => g,
        Order::One => g * u * s / theta,
        Order::Two => g * u * s * (u * s - u - 1.0) / (theta * theta),
    }
}

/// Finite-difference step used by every derivative check in the crate.
pub fn fd_step(theta: f64) -> f64 {
    1e-6 * theta.max(1e-3)
}

/// Largest relative discrepancy between the analytic order-1/order-2
/// derivatives and central differences of the next-lower order.
///
/// The relative error at a sample is measured against
/// `max(|analytic|, |fd|, 1e-3·peak)`, where `peak` is the largest analytic
/// magnitude of that order over `t_samples` at the same `θ`. The floor keeps
/// zero crossings of the derivative from dominating the metric.
pub fn check_derivatives(
    family: &KernelFamily,
    theta_samples: &[f64],
    t_samples: &[f64],
) -> Result<f64> {
    if theta_samples.is_empty() || t_samples.is_empty() {
        return Err(Error::validation("derivative check needs non-empty sample sets"));
    }
    let mut worst: f64 = 0.0;
    for &theta in theta_samples {
        let h = fd_step(theta);
        family.check_theta(theta - h)?;
        family.check_theta(theta + h)?;
        for order in [Order::One, Order::Two] {
            let lower = order.lower().expect("order >= 1");
            let mut pairs = Vec::with_capacity(t_samples.len());
            for &t in t_samples {
                let analytic = family.eval(theta, t, order)?;
                let fd = (family.eval(theta + h, t, lower)? - family.eval(theta - h, t, lower)?)
                    / (2.0 * h);
                pairs.push((analytic, fd));
            }
            let peak = pairs.iter().fold(0.0_f64, |m, (a, _)| m.max(a.abs()));
            for (analytic, fd) in pairs {
                let denom = analytic.abs().max(fd.abs()).max(1e-3 * peak);
                if denom > 0.0 {
                    worst = worst.max((analytic - fd).abs() / denom);
                }
            }
        }
    }
    Ok(worst)
}
