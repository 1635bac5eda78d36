use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use psf_unmix_core::coherence::CoherenceCache;
use psf_unmix_core::diagnostics::{run_self_checks, CheckOutcome};
use psf_unmix_core::experiments::{
    monte_carlo, mse_vs_snr, radius_map, write_monte_carlo_csv, write_mse_csv, write_radius_panel_csv,
    MonteCarloResult,
};
use psf_unmix_core::libs::{
    analyze_spectrum, build_spectrum_spec, load_line_database, read_spectrum_csv, synthesize_spectrum,
    synthetic_alloy_database, synthetic_alloy_plasma, write_fitted_curves_csv, write_spectrum_csv, LineDatabase,
    SyntheticPlasma,
};
use psf_unmix_core::{KernelFamily, NoiseSpec, Observation, Order, SampleGrid};
use serde::Serialize;

use crate::config::{ConfigFile, FitConfig};
use crate::manifest::RunContext;
use crate::{Cli, Command, FitArgs, Failure};

pub fn dispatch(cli: &Cli, ctx: &mut RunContext) -> Result<(), Failure> {
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile {
            schema_version: crate::config::SCHEMA_VERSION,
            ..ConfigFile::default()
        },
    };
    match &cli.command {
        Command::RadiusMap => run_radius_map(&config, ctx),
        Command::MonteCarlo => run_monte_carlo(&config, cli.seed, ctx),
        Command::MseSnr => run_mse_snr(&config, cli.seed, ctx),
        Command::Coherence => run_coherence(&config, ctx),
        Command::Fit(args) => run_fit(&config.fit(), args, cli.seed, ctx),
        Command::Check => run_check(&config, cli.seed, ctx),
    }
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn run_radius_map(config: &ConfigFile, ctx: &mut RunContext) -> Result<(), Failure> {
    let cfg = config.radius_map();
    ctx.set_config(&cfg);
    let map = ctx.timed("radius-map", || radius_map(&cfg))?;

    #[derive(Serialize)]
    struct PanelSummary<'a> {
        label: &'a str,
        kernel: KernelFamily,
        epsilon_max: f64,
        argmax: Option<(f64, f64)>,
        well_posed: usize,
        cells: usize,
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        panels: Vec<PanelSummary<'a>>,
        global_max: f64,
        diagonal_convention: &'a str,
    }
    for panel in &map.panels {
        ctx.write_output(&format!("radius_{}.csv", panel.label), |buf| write_radius_panel_csv(panel, buf))?;
        println!(
            "{:<14} eps_max {:.3e} at {:?}, well-posed cells {}/{}",
            panel.label,
            panel.epsilon_max,
            panel.argmax,
            panel.well_posed,
            panel.cells.len()
        );
    }
    let summary = Summary {
        panels: map
            .panels
            .iter()
            .map(|p| PanelSummary {
                label: &p.label,
                kernel: p.kernel,
                epsilon_max: p.epsilon_max,
                argmax: p.argmax,
                well_posed: p.well_posed,
                cells: p.cells.len(),
            })
            .collect(),
        global_max: map.global_max,
        diagonal_convention: &map.diagonal_convention,
    };
    ctx.write_json("radius_map_summary.json", &summary)?;
    Ok(())
}

fn run_monte_carlo(config: &ConfigFile, seed: Option<u64>, ctx: &mut RunContext) -> Result<(), Failure> {
    let mut cfgs = config.monte_carlo();
    if let Some(s) = seed {
        cfgs.iter_mut().for_each(|c| c.seed = s);
    }
    ctx.set_config(&cfgs);
    let mut results: Vec<MonteCarloResult> = Vec::with_capacity(cfgs.len());
    for cfg in &cfgs {
        let label = cfg.kernel.label();
        let result = ctx.timed(&format!("monte-carlo/{label}"), || monte_carlo(cfg))?;
        println!(
            "{:<14} eps_c {:?}, eps_sc {:?}, eps0 {:.3e}",
            result.label, result.epsilon_c, result.epsilon_sc, result.epsilon0
        );
        ctx.write_output(&format!("monte_carlo_{}.csv", result.label), |buf| write_monte_carlo_csv(&result, buf))?;
        results.push(result);
    }
    ctx.write_json("monte_carlo_summary.json", &results)?;
    Ok(())
}

fn run_mse_snr(config: &ConfigFile, seed: Option<u64>, ctx: &mut RunContext) -> Result<(), Failure> {
    let mut cfg = config.mse_snr();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    ctx.set_config(&cfg);
    let result = ctx.timed("mse-snr", || mse_vs_snr(&cfg))?;
    for (label, row) in result.labels.iter().zip(&result.cells) {
        let mse: Vec<String> = row.iter().map(|c| format!("{:.2e}", c.mse)).collect();
        println!("{label:<14} mse {}", mse.join(" "));
    }
    ctx.write_output("mse_snr.csv", |buf| write_mse_csv(&result, buf))?;
    ctx.write_json("mse_snr.json", &result)?;
    Ok(())
}

fn run_coherence(config: &ConfigFile, ctx: &mut RunContext) -> Result<(), Failure> {
    let cfg = config.coherence();
    ctx.set_config(&cfg);
    cfg.kernel.validate()?;
    cfg.delta_grid.validate("delta_grid")?;
    let theta_j = cfg.theta_j.unwrap_or(cfg.theta_i);
    cfg.kernel.check_theta(cfg.theta_i)?;
    cfg.kernel.check_theta(theta_j)?;
    let grid = SampleGrid::centered(cfg.n_samples, cfg.half_width)?;
    let cache = CoherenceCache::new(cfg.kernel, grid);
    let deltas = cfg.delta_grid.values();
    let rows = ctx.timed("coherence", || {
        deltas
            .iter()
            .map(|&d| {
                let mut row = vec![d];
                for order in Order::ALL {
                    row.push(cache.mu(cfg.theta_i, theta_j, d, order)?);
                }
                for order in Order::ALL {
                    row.push(if d > 0.0 { cache.total(cfg.theta_i, theta_j, d, order)?.total } else { f64::NAN });
                }
                Ok(row)
            })
            .collect::<psf_unmix_core::Result<Vec<Vec<f64>>>>()
    })?;
    ctx.write_output("coherence.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["delta", "mu_0", "mu_1", "mu_2", "total_0", "total_1", "total_2"])?;
        for row in &rows {
            w.write_record(row.iter().map(|v| fmt(*v)))?;
        }
        w.flush()?;
        Ok::<(), Failure>(())
    })?;
    println!("{} rows for {} at theta = ({}, {theta_j})", rows.len(), cfg.kernel.label(), cfg.theta_i);
    Ok(())
}

pub fn parse_window(text: &str) -> Result<(f64, f64), Failure> {
    let bad = || Failure::Validation(format!("--window expects LO:HI in nm, got {text:?}"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

pub fn parse_profile(text: &str) -> Result<KernelFamily, Failure> {
    let family = match text.trim() {
        "lorentzian" => KernelFamily::lorentzian(),
        "gaussian" => KernelFamily::gaussian(),
        other => match other.strip_prefix("u-laplace:").map(str::parse::<f64>) {
            Some(Ok(u)) => KernelFamily::u_laplace(u),
            _ => {
                return Err(Failure::Validation(format!(
                    "unknown profile {other:?}; use lorentzian, gaussian or u-laplace:<u>"
                )))
            }
        },
    };
    family.validate()?;
    Ok(family)
}

/// Samples of `obs` inside `[lo, hi]`.
pub fn crop(obs: &Observation, (lo, hi): (f64, f64)) -> Result<Observation, Failure> {
    let slack = 1e-9 * obs.grid.spacing();
    let idx: Vec<usize> = (0..obs.grid.n_samples)
        .filter(|&k| {
            let t = obs.grid.instant(k);
            t >= lo - slack && t <= hi + slack
        })
        .collect();
    if idx.len() < 2 {
        return Err(Failure::Validation(format!("window [{lo}, {hi}] holds fewer than 2 spectrum samples")));
    }
    let (first, last) = (idx[0], idx[idx.len() - 1]);
    let grid = SampleGrid::new(obs.grid.instant(first), obs.grid.instant(last), idx.len())?;
    Ok(Observation::new(grid, obs.x[first..=last].to_vec())?)
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Validation(format!("cannot open {}: {e}", path.display())))
}

#[derive(Serialize)]
struct LineReport {
    wavelength_nm: f64,
    eta_hat: f64,
    intensity: f64,
    intensity_std: f64,
}

#[derive(Serialize)]
struct SpeciesReport {
    species: String,
    theta_hat: f64,
    concentration: f64,
    boltzmann_intercept: f64,
    boltzmann_residual: f64,
    lines: Vec<LineReport>,
}

#[derive(Serialize)]
struct FitReport {
    temperature_k: f64,
    relative_fit_error: f64,
    termination: String,
    iterations: usize,
    baseline: Option<f64>,
    species: Vec<SpeciesReport>,
    warnings: Vec<String>,
    truth: Option<SyntheticPlasma>,
}

#[derive(Serialize)]
struct FitEcho<'a> {
    spectrum: Option<String>,
    lines: Option<String>,
    partition: Option<String>,
    window: (f64, f64),
    profile: KernelFamily,
    baseline: bool,
    synthetic_snr: Option<f64>,
    theta0: f64,
    fit: &'a FitConfig,
}

fn run_fit(cfg: &FitConfig, args: &FitArgs, seed: Option<u64>, ctx: &mut RunContext) -> Result<(), Failure> {
    let profile = parse_profile(&args.profile)?;
    let window = args.window.as_deref().map(parse_window).transpose()?;
    let baseline = args.baseline || cfg.baseline;

    let (db, obs, truth): (LineDatabase, Observation, Option<SyntheticPlasma>) = match args.synthetic_snr {
        Some(snr_db) => {
            let db = synthetic_alloy_database();
            let window = window.unwrap_or((256.1, 266.5));
            let model = build_spectrum_spec(&db, window, cfg.synthetic_samples, profile, baseline)?;
            let plasma = synthetic_alloy_plasma();
            let noise = NoiseSpec::Gaussian {
                snr_db,
                seed: seed.unwrap_or(0),
            };
            let (obs, _, _) = synthesize_spectrum(&db, &model, &plasma, noise)?;
            ctx.write_output("spectrum.csv", |buf| write_spectrum_csv(&obs, buf))?;
            ctx.write_output("lines.csv", |buf| db.write_lines_csv(buf))?;
            ctx.write_output("partitions.json", |buf| db.write_partition_json(buf))?;
            (db, obs, Some(plasma))
        }
        None => {
            let need = |p: &Option<std::path::PathBuf>, flag: &str| {
                p.clone()
                    .ok_or_else(|| Failure::Validation(format!("fit needs {flag} (or --synthetic-snr)")))
            };
            let spectrum = need(&args.spectrum, "--spectrum")?;
            let lines = need(&args.lines, "--lines")?;
            let partition = need(&args.partition, "--partition")?;
            let db = load_line_database(&lines, &partition)?;
            let obs = read_spectrum_csv(open(&spectrum)?)
                .map_err(|e| Failure::from(e).prefixed(&spectrum.display().to_string()))?;
            let obs = match window {
                Some(w) => crop(&obs, w)?,
                None => obs,
            };
            (db, obs, None)
        }
    };
    let range = (obs.grid.start, obs.grid.end);
    let model = build_spectrum_spec(&db, range, obs.grid.n_samples, profile, baseline)?;
    let theta0_value = cfg.theta0.unwrap_or(20.0 * obs.grid.spacing());
    let theta0 = vec![theta0_value; model.species.len()];
    ctx.set_config(&FitEcho {
        spectrum: args.spectrum.as_ref().map(|p| p.display().to_string()),
        lines: args.lines.as_ref().map(|p| p.display().to_string()),
        partition: args.partition.as_ref().map(|p| p.display().to_string()),
        window: range,
        profile,
        baseline,
        synthetic_snr: args.synthetic_snr,
        theta0: theta0_value,
        fit: cfg,
    });

    let report = ctx.timed("fit", || analyze_spectrum(&obs, &db, &model, &theta0, &cfg.solver))?;
    let species = report
        .species
        .iter()
        .zip(&report.fit.species)
        .map(|(s, f)| SpeciesReport {
            species: s.species.clone(),
            theta_hat: s.theta_hat,
            concentration: s.concentration,
            boltzmann_intercept: s.boltzmann_intercept,
            boltzmann_residual: s.boltzmann_residual,
            lines: f
                .lines
                .iter()
                .enumerate()
                .map(|(k, l)| LineReport {
                    wavelength_nm: l.wavelength_nm,
                    eta_hat: f.eta_hat[k],
                    intensity: f.intensities[k],
                    intensity_std: f.intensity_std[k],
                })
                .collect(),
        })
        .collect();
    let out = FitReport {
        temperature_k: report.temperature_k,
        relative_fit_error: report.relative_fit_error,
        termination: format!("{:?}", report.fit.solve.termination),
        iterations: report.fit.solve.iterations.len(),
        baseline: report.fit.baseline,
        species,
        warnings: report.warnings.clone(),
        truth,
    };
    println!("T = {:.1} K, relative fit error {:.4}", out.temperature_k, out.relative_fit_error);
    for s in &out.species {
        println!("{:<6} theta {:.4e} nm  C = {:.5}", s.species, s.theta_hat, s.concentration);
    }
    ctx.write_json("fit_report.json", &out)?;
    ctx.write_output("fitted_curves.csv", |buf| write_fitted_curves_csv(&obs, &model, &report.fit, buf))?;
    Ok(())
}

fn run_check(config: &ConfigFile, seed: Option<u64>, ctx: &mut RunContext) -> Result<(), Failure> {
    let mut cfg = config.check();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    ctx.set_config(&cfg);
    let checks: Vec<CheckOutcome> = ctx.timed("check", || run_self_checks(cfg.seed, cfg.gramian_instances))?;
    println!("{:<24} {:>6} {:>12} {:>10} {:>7}", "check", "result", "worst", "tolerance", "cases");
    for c in &checks {
        println!(
            "{:<24} {:>6} {:>12.3e} {:>10.1e} {:>7}",
            c.name,
            if c.passed { "pass" } else { "FAIL" },
            c.worst,
            c.tolerance,
            c.cases
        );
    }
    ctx.write_json("check.json", &checks)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}

impl Failure {
    fn prefixed(self, what: &str) -> Self {
        match self {
            Failure::Validation(m) => Failure::Validation(format!("{what}: {m}")),
            Failure::Runtime(m) => Failure::Runtime(format!("{what}: {m}")),
        }
    }
}
