//! TOML run configuration. Every section is optional; a missing section
//! falls back to the scaled-down reference setup for that subcommand.

use std::path::Path;

use psf_unmix_core::experiments::{Axis, MonteCarloConfig, MseSnrConfig, RadiusMapConfig};
use psf_unmix_core::{KernelFamily, SolverOptions};
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    pub radius_map: Option<RadiusMapConfig>,
    pub monte_carlo: Option<Vec<MonteCarloConfig>>,
    pub mse_snr: Option<MseSnrConfig>,
    pub coherence: Option<CoherenceConfig>,
    pub fit: Option<FitConfig>,
    pub check: Option<CheckConfig>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| Failure::Validation(format!("invalid config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Failure::Validation(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Failure::Validation(m) => Failure::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn radius_map(&self) -> RadiusMapConfig {
        self.radius_map.clone().unwrap_or_else(RadiusMapConfig::reference)
    }

    pub fn monte_carlo(&self) -> Vec<MonteCarloConfig> {
        self.monte_carlo.clone().unwrap_or_else(|| {
            [1.0, 2.0, 20.0]
                .into_iter()
                .map(|u| MonteCarloConfig::reference(KernelFamily::u_laplace(u)))
                .collect()
        })
    }

    pub fn mse_snr(&self) -> MseSnrConfig {
        self.mse_snr.clone().unwrap_or_else(MseSnrConfig::reference)
    }

    pub fn coherence(&self) -> CoherenceConfig {
        self.coherence.clone().unwrap_or_default()
    }

    pub fn fit(&self) -> FitConfig {
        self.fit.clone().unwrap_or_default()
    }

    pub fn check(&self) -> CheckConfig {
        self.check.clone().unwrap_or_default()
    }
}

fn default_kernel() -> KernelFamily {
    KernelFamily::u_laplace(2.0)
}
fn default_theta() -> f64 {
    1e-2
}
fn default_n_samples() -> usize {
    10_000
}
fn default_half_width() -> f64 {
    1.0
}
fn default_delta_grid() -> Axis {
    Axis::log(1e-3, 1.0, 61)
}

/// Coherence and total coherence of one kernel pair over a `Δ` axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoherenceConfig {
    #[serde(default = "default_kernel")]
    pub kernel: KernelFamily,
    #[serde(default = "default_theta")]
    pub theta_i: f64,
    /// Defaults to `theta_i`.
    #[serde(default)]
    pub theta_j: Option<f64>,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    #[serde(default = "default_delta_grid")]
    pub delta_grid: Axis,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        CoherenceConfig {
            kernel: default_kernel(),
            theta_i: default_theta(),
            theta_j: None,
            n_samples: default_n_samples(),
            half_width: default_half_width(),
            delta_grid: default_delta_grid(),
        }
    }
}

fn default_synthetic_samples() -> usize {
    4000
}

/// LIBS fitting options not given on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Initial width for every species; defaults to 20 grid spacings.
    #[serde(default)]
    pub theta0: Option<f64>,
    #[serde(default)]
    pub baseline: bool,
    /// Grid size of the synthetic spectrum.
    #[serde(default = "default_synthetic_samples")]
    pub synthetic_samples: usize,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            theta0: None,
            baseline: false,
            synthetic_samples: default_synthetic_samples(),
            solver: SolverOptions::default(),
        }
    }
}

fn default_check_instances() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    /// Random instances for the Gramian-bound check.
    #[serde(default = "default_check_instances")]
    pub gramian_instances: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            gramian_instances: default_check_instances(),
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_sections_use_defaults() {
        let cfg = ConfigFile::parse("schema_version = 1\n").unwrap();
        assert_eq!(cfg.radius_map(), RadiusMapConfig::reference());
        assert_eq!(cfg.monte_carlo().len(), 3);
        assert_eq!(cfg.mse_snr(), MseSnrConfig::reference());
    }

    #[test]
    fn sections_parse() {
        let text = r#"
schema_version = 1

[radius_map]
kernels = [{ kernel = "u-laplace", u = 2.0 }, { kernel = "gaussian" }]
theta_grid = { lo = 1e-2, hi = 1e-1, n = 3 }
delta_grid = { lo = 0.1, hi = 1.0, n = 4, scale = "linear" }
n_samples = 2000

[[monte_carlo]]
kernel = { kernel = "lorentzian" }
epsilon_grid = { lo = 1e-4, hi = 1e-2, n = 5 }
n_trials = 4

[coherence]
theta_i = 0.02
"#;
        let cfg = ConfigFile::parse(text).unwrap();
        let rm = cfg.radius_map();
        assert_eq!(rm.kernels[1], KernelFamily::gaussian());
        assert_eq!(rm.delta_grid.values().len(), 4);
        assert_eq!(cfg.monte_carlo()[0].n_trials, 4);
        assert_eq!(cfg.coherence().theta_i, 0.02);
        assert_eq!(cfg.coherence().n_samples, 10_000);
    }

    #[test]
    fn bad_configs_are_validation_errors() {
        for text in ["", "schema_version = 2", "schema_version = 1\nbogus = 3", "schema_version = 1\n[radius_map]\n"] {
            assert!(matches!(ConfigFile::parse(text), Err(Failure::Validation(_))), "{text}");
        }
    }
}
