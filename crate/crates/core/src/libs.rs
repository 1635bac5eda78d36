//! Calibration-free LIBS: fit line widths and intensities with the VarPro
//! estimator, then recover the plasma temperature from a pooled Boltzmann
//! plot and concentrations by closure.
//!
//! Line intensity model (optically thin plasma, species `s`, line `ℓ`):
//! `I = F·C_s·g_k·A_ki / (λ·U_s(T)) · exp(−E_k / k_B T)`.
//! Atoms are peak-normalized, so a fitted amplitude `η̂` corresponds to the
//! integrated intensity `η̂·area(θ̂_s)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dictionary::{
    build_dictionary, format_float, NoiseSpec, Observation, ProblemSpec, SampleGrid, SupportSpec,
};
use crate::error::{Error, Result};
use crate::kernels::KernelFamily;
use crate::linalg::LeastSquares;
use crate::varpro::{solve, SolveResult, SolverOptions, Termination};

/// Boltzmann constant in eV/K.
pub const BOLTZMANN_EV_PER_K: f64 = 8.617333262e-5;

const LINE_HEADER: [&str; 5] = ["species", "wavelength_nm", "a_ki", "g_k", "e_k_ev"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub species: String,
    pub wavelength_nm: f64,
    /// Transition probability (1/s).
    pub a_ki: f64,
    /// Upper-level degeneracy.
    pub g_k: f64,
    /// Upper-level energy (eV).
    pub e_k_ev: f64,
}

impl LineRecord {
    pub fn validate(&self) -> Result<()> {
        if self.species.trim().is_empty() {
            return Err(Error::validation("empty species name"));
        }
        if !(self.wavelength_nm > 0.0 && self.wavelength_nm.is_finite()) {
            return Err(Error::validation(format!("wavelength must be positive, got {}", self.wavelength_nm)));
        }
        if !(self.a_ki > 0.0 && self.a_ki.is_finite()) {
            return Err(Error::validation(format!("a_ki must be positive, got {}", self.a_ki)));
        }
        if !(self.g_k >= 1.0 && self.g_k.fract() == 0.0) {
            return Err(Error::validation(format!("g_k must be an integer >= 1, got {}", self.g_k)));
        }
        if !(self.e_k_ev >= 0.0 && self.e_k_ev.is_finite()) {
            return Err(Error::validation(format!("e_k must be non-negative, got {}", self.e_k_ev)));
        }
        Ok(())
    }
}

/// Partition functions `U_s(T) = Σ_k c_k T^k`, valid on `[t_min_k, t_max_k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFunctions {
    pub t_min_k: f64,
    pub t_max_k: f64,
    pub coefficients: BTreeMap<String, Vec<f64>>,
}

impl PartitionFunctions {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_min_k && t <= self.t_max_k
    }

    pub fn eval(&self, species: &str, t: f64) -> Result<f64> {
        let c = self
            .coefficients
            .get(species)
            .ok_or_else(|| Error::validation(format!("no partition function for {species}")))?;
        if !self.contains(t) {
            return Err(Error::Domain {
                what: "temperature",
                value: t,
                lo: self.t_min_k,
                hi: self.t_max_k,
            });
        }
        Ok(c.iter().rev().fold(0.0, |acc, &ck| acc * t + ck))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min_k > 0.0 && self.t_min_k < self.t_max_k && self.t_max_k.is_finite()) {
            return Err(Error::validation(format!(
                "invalid partition-function range [{}, {}] K",
                self.t_min_k, self.t_max_k
            )));
        }
        for (s, c) in &self.coefficients {
            if c.is_empty() {
                return Err(Error::validation(format!("empty partition polynomial for {s}")));
            }
            for k in 0..=200 {
                let t = self.t_min_k + (self.t_max_k - self.t_min_k) * k as f64 / 200.0;
                let u = self.eval(s, t)?;
                if !(u > 0.0 && u.is_finite()) {
                    return Err(Error::validation(format!("partition function of {s} is not positive at {t} K")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineDatabase {
    pub records: Vec<LineRecord>,
    pub partition_functions: PartitionFunctions,
}

impl LineDatabase {
    pub fn new(records: Vec<LineRecord>, partition_functions: PartitionFunctions) -> Result<Self> {
        let db = LineDatabase {
            records,
            partition_functions,
        };
        db.validate()?;
        Ok(db)
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::validation("line database is empty"));
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            r.validate()?;
            if !seen.insert((r.species.clone(), r.wavelength_nm.to_bits())) {
                return Err(Error::validation(format!(
                    "duplicate line {} at {} nm",
                    r.species, r.wavelength_nm
                )));
            }
        }
        for s in self.species() {
            let n = self.lines_of(&s).len();
            if n < 2 {
                return Err(Error::validation(format!("species {s} has {n} line(s); at least 2 are needed")));
            }
            if !self.partition_functions.coefficients.contains_key(&s) {
                return Err(Error::validation(format!("no partition function for {s}")));
            }
        }
        self.partition_functions.validate()
    }

    /// Species names in sorted order.
    pub fn species(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.species.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Lines of one species, by increasing wavelength.
    pub fn lines_of(&self, species: &str) -> Vec<LineRecord> {
        let mut v: Vec<LineRecord> = self.records.iter().filter(|r| r.species == species).cloned().collect();
        v.sort_by(|a, b| a.wavelength_nm.total_cmp(&b.wavelength_nm));
        v
    }

    pub fn read_lines_csv<R: Read>(reader: R) -> Result<Vec<LineRecord>> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        if names != LINE_HEADER {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {}", LINE_HEADER.join(",")),
            });
        }
        let mut records = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            if rec.len() != LINE_HEADER.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", LINE_HEADER.len(), rec.len()),
                });
            }
            let num = |k: usize| -> Result<f64> {
                rec[k].trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("{}: {e}", LINE_HEADER[k]),
                })
            };
            let r = LineRecord {
                species: rec[0].trim().to_string(),
                wavelength_nm: num(1)?,
                a_ki: num(2)?,
                g_k: num(3)?,
                e_k_ev: num(4)?,
            };
            r.validate().map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            records.push(r);
        }
        Ok(records)
    }

    pub fn from_readers<R1: Read, R2: Read>(lines: R1, partition: R2) -> Result<Self> {
        let records = Self::read_lines_csv(lines)?;
        let partition_functions: PartitionFunctions = serde_json::from_reader(partition)?;
        Self::new(records, partition_functions)
    }

    pub fn write_lines_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(LINE_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.species.clone(),
                format_float(r.wavelength_nm),
                format_float(r.a_ki),
                format_float(r.g_k),
                format_float(r.e_k_ev),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_partition_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &self.partition_functions)?;
        Ok(())
    }

    pub fn save(&self, lines_path: &Path, partition_path: &Path) -> Result<()> {
        self.write_lines_csv(BufWriter::new(File::create(lines_path)?))?;
        let mut w = BufWriter::new(File::create(partition_path)?);
        self.write_partition_json(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Reads a `species,wavelength_nm,a_ki,g_k,e_k_ev` CSV and its partition JSON.
pub fn load_line_database(lines_path: &Path, partition_path: &Path) -> Result<LineDatabase> {
    let open = |p: &Path| {
        File::open(p).map_err(|e| Error::validation(format!("cannot open {}: {e}", p.display())))
    };
    LineDatabase::from_readers(BufReader::new(open(lines_path)?), BufReader::new(open(partition_path)?))
}

/// Two-column `wavelength_nm,intensity` spectrum. Wavelengths must be
/// uniformly spaced up to `1e-6` of the spacing.
pub fn read_spectrum_csv<R: Read>(reader: R) -> Result<Observation> {
    Observation::read_csv_with_tolerance(reader, 1e-6)
}

pub fn write_spectrum_csv<W: Write>(observation: &Observation, writer: W) -> Result<()> {
    observation.write_csv_with_header(writer, ["wavelength_nm", "intensity"])
}

/// A spectral window as a VarPro problem: one group per species present,
/// one spike per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumModel {
    pub spec: ProblemSpec,
    pub species: Vec<String>,
    pub lines: Vec<Vec<LineRecord>>,
}

pub fn build_spectrum_spec(
    db: &LineDatabase,
    window: (f64, f64),
    n_samples: usize,
    profile: KernelFamily,
    baseline: bool,
) -> Result<SpectrumModel> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::validation(format!("empty window [{lo}, {hi}] nm")));
    }
    let grid = SampleGrid::new(lo, hi, n_samples)?;
    let mut species = Vec::new();
    let mut lines = Vec::new();
    for s in db.species() {
        let inside: Vec<LineRecord> = db
            .lines_of(&s)
            .into_iter()
            .filter(|r| grid.contains(r.wavelength_nm))
            .collect();
        if !inside.is_empty() {
            species.push(s);
            lines.push(inside);
        }
    }
    if species.is_empty() {
        return Err(Error::validation(format!("no lines inside [{lo}, {hi}] nm")));
    }
    let groups = lines
        .iter()
        .map(|g| g.iter().map(|r| r.wavelength_nm).collect())
        .collect();
    let spec = ProblemSpec::new(profile, grid, SupportSpec::new(groups)?)?.with_baseline(baseline)?;
    Ok(SpectrumModel { spec, species, lines })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesFit {
    pub species: String,
    pub theta_hat: f64,
    pub lines: Vec<LineRecord>,
    /// Peak amplitudes.
    pub eta_hat: Vec<f64>,
    /// Integrated intensities `η̂·area(θ̂)`.
    pub intensities: Vec<f64>,
    /// Standard errors of the integrated intensities (amplitude covariance
    /// at fixed `θ̂`, noise variance from the residual).
    pub intensity_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumFit {
    pub species: Vec<SpeciesFit>,
    pub baseline: Option<f64>,
    /// `‖x − G(θ̂)η̂‖₂ / ‖x‖₂`
    pub relative_fit_error: f64,
    pub fitted: Vec<f64>,
    pub solve: SolveResult,
}

pub fn fit_spectrum(
    observation: &Observation,
    model: &SpectrumModel,
    theta0: &[f64],
    options: &SolverOptions,
) -> Result<SpectrumFit> {
    let spec = &model.spec;
    let g0 = &observation.grid;
    if g0.n_samples != spec.grid.n_samples
        || (g0.start - spec.grid.start).abs() > 1e-6 * spec.grid.spacing()
        || (g0.end - spec.grid.end).abs() > 1e-6 * spec.grid.spacing()
    {
        return Err(Error::dimension("spectrum grid does not match the model window"));
    }
    if theta0.len() != spec.n_groups() {
        return Err(Error::dimension(format!(
            "theta0 has {} entries for {} species",
            theta0.len(),
            spec.n_groups()
        )));
    }
    let x = observation.x_vector();
    let result = solve(spec, &x, theta0, options)?;
    if matches!(
        result.termination,
        Termination::IllConditioned | Termination::MaxIterations | Termination::BoundaryStalled
    ) {
        return Err(Error::SolverFailed {
            termination: format!("{:?}", result.termination),
            iterations: result.iterations.len(),
            theta: result.theta_hat.clone(),
        });
    }
    let theta = &result.theta_hat;
    let g = build_dictionary(spec, theta)?;
    let ls = LeastSquares::new(&g)?;
    let eta = ls.solve(&x);
    let fitted = &g * &eta;
    let residual = &x - &fitted;
    let dof = spec.n_samples().saturating_sub(g.ncols() + theta.len()).max(1);
    let sigma2 = residual.norm_squared() / dof as f64;
    let cov_diag = ls.gram_inverse().diagonal() * sigma2;

    let offsets = spec.support.offsets();
    let species = model
        .species
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let area = spec.kernel.area(theta[i]);
            let range = offsets[i]..offsets[i + 1];
            SpeciesFit {
                species: name.clone(),
                theta_hat: theta[i],
                lines: model.lines[i].clone(),
                eta_hat: eta.rows_range(range.clone()).iter().copied().collect(),
                intensities: eta.rows_range(range.clone()).iter().map(|e| e * area).collect(),
                intensity_std: cov_diag.rows_range(range).iter().map(|v| v.max(0.0).sqrt() * area).collect(),
            }
        })
        .collect();
    let norm_x = x.norm();
    Ok(SpectrumFit {
        species,
        baseline: spec.baseline.then(|| eta[eta.len() - 1]),
        relative_fit_error: if norm_x > 0.0 { residual.norm() / norm_x } else { f64::NAN },
        fitted: fitted.iter().copied().collect(),
        solve: result,
    })
}

/// Per-species inputs of the Boltzmann plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesLines {
    pub species: String,
    pub lines: Vec<LineRecord>,
    pub intensities: Vec<f64>,
    /// Standard errors of the intensities; `None` gives unit weights.
    #[serde(default)]
    pub intensity_std: Option<Vec<f64>>,
}

impl From<&SpeciesFit> for SpeciesLines {
    fn from(f: &SpeciesFit) -> Self {
        SpeciesLines {
            species: f.species.clone(),
            lines: f.lines.clone(),
            intensities: f.intensities.clone(),
            intensity_std: Some(f.intensity_std.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesBoltzmann {
    pub species: String,
    pub intercept: f64,
    /// Weighted RMS of the Boltzmann-plot residuals.
    pub residual: f64,
    pub lines_used: usize,
    pub in_pooled_slope: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoltzmannFit {
    pub temperature_k: f64,
    pub slope: f64,
    pub species: Vec<SpeciesBoltzmann>,
    pub warnings: Vec<String>,
}

impl BoltzmannFit {
    pub fn intercepts(&self) -> Vec<(String, f64)> {
        self.species.iter().map(|s| (s.species.clone(), s.intercept)).collect()
    }
}

/// `y = ln(I·λ/(g_k·A_ki))` against `E_k`, one intercept per species and a
/// shared slope `−1/(k_B T)` from within-species weighted regression.
///
/// Weights are `(I/σ_I)²`, the inverse variance of `y` to first order, when
/// every species carries positive standard errors; unit weights otherwise.
pub fn boltzmann_fit(input: &[SpeciesLines]) -> Result<BoltzmannFit> {
    if input.is_empty() {
        return Err(Error::validation("Boltzmann fit needs at least one species"));
    }
    let use_weights = input.iter().all(|s| {
        s.intensity_std
            .as_ref()
            .is_some_and(|sd| sd.len() == s.intensities.len() && sd.iter().all(|v| *v > 0.0 && v.is_finite()))
    });
    let mut warnings = Vec::new();
    struct Prepared {
        points: Vec<(f64, f64, f64)>,
        e_mean: f64,
        y_mean: f64,
        sxx: f64,
        sxy: f64,
    }
    let mut prepared = Vec::with_capacity(input.len());
    for s in input {
        if s.lines.len() != s.intensities.len() {
            return Err(Error::dimension(format!(
                "{}: {} lines but {} intensities",
                s.species,
                s.lines.len(),
                s.intensities.len()
            )));
        }
        let mut points = Vec::new();
        for (k, (line, &intensity)) in s.lines.iter().zip(&s.intensities).enumerate() {
            if !(intensity > 0.0 && intensity.is_finite()) {
                let msg = format!("{}: line at {} nm has intensity {intensity}; excluded", s.species, line.wavelength_nm);
                log::warn!("{msg}");
                warnings.push(msg);
                continue;
            }
            let y = (intensity * line.wavelength_nm / (line.g_k * line.a_ki)).ln();
            let w = if use_weights {
                let sd = s.intensity_std.as_ref().unwrap()[k];
                (intensity / sd).powi(2)
            } else {
                1.0
            };
            points.push((line.e_k_ev, y, w));
        }
        if points.is_empty() {
            return Err(Error::validation(format!("{}: every line was excluded", s.species)));
        }
        let wsum: f64 = points.iter().map(|p| p.2).sum();
        let e_mean = points.iter().map(|p| p.2 * p.0).sum::<f64>() / wsum;
        let y_mean = points.iter().map(|p| p.2 * p.1).sum::<f64>() / wsum;
        let sxx: f64 = points.iter().map(|p| p.2 * (p.0 - e_mean).powi(2)).sum();
        let sxy: f64 = points.iter().map(|p| p.2 * (p.0 - e_mean) * (p.1 - y_mean)).sum();
        prepared.push(Prepared {
            points,
            e_mean,
            y_mean,
            sxx,
            sxy,
        });
    }

    let spread = |p: &Prepared| {
        let (lo, hi) = p
            .points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), q| (a.min(q.0), b.max(q.0)));
        hi - lo
    };
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut identifiable = Vec::with_capacity(prepared.len());
    for (s, p) in input.iter().zip(&prepared) {
        let ok = p.points.len() >= 2 && spread(p) > 1e-9;
        if ok {
            sxx += p.sxx;
            sxy += p.sxy;
        } else {
            let msg = format!("{}: upper-level energies do not vary; excluded from the pooled slope", s.species);
            log::warn!("{msg}");
            warnings.push(msg);
        }
        identifiable.push(ok);
    }
    if !(sxx > 0.0) {
        return Err(Error::validation("Boltzmann slope is unidentifiable: no species spans distinct energies"));
    }
    let slope = sxy / sxx;
    let temperature_k = -1.0 / (BOLTZMANN_EV_PER_K * slope);
    if !(temperature_k > 0.0 && temperature_k.is_finite()) {
        return Err(Error::Numeric(format!("non-physical temperature {temperature_k} K from slope {slope}")));
    }
    let species = input
        .iter()
        .zip(&prepared)
        .zip(identifiable)
        .map(|((s, p), ok)| {
            let intercept = p.y_mean - slope * p.e_mean;
            let wsum: f64 = p.points.iter().map(|q| q.2).sum();
            let ss: f64 = p.points.iter().map(|q| q.2 * (q.1 - intercept - slope * q.0).powi(2)).sum();
            SpeciesBoltzmann {
                species: s.species.clone(),
                intercept,
                residual: (ss / wsum).sqrt(),
                lines_used: p.points.len(),
                in_pooled_slope: ok,
            }
        })
        .collect();
    Ok(BoltzmannFit {
        temperature_k,
        slope,
        species,
        warnings,
    })
}

/// Closure: `C_s ∝ U_s(T)·exp(q_s)`, normalized to sum to one.
pub fn concentrations(
    intercepts: &[(String, f64)],
    partition: &PartitionFunctions,
    temperature_k: f64,
) -> Result<Vec<(String, f64)>> {
    if intercepts.is_empty() {
        return Err(Error::validation("no species to normalize"));
    }
    let logs: Vec<f64> = intercepts
        .iter()
        .map(|(s, q)| Ok(partition.eval(s, temperature_k)?.ln() + q))
        .collect::<Result<_>>()?;
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::Numeric("concentration intercepts".into()));
    }
    let weights: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(intercepts
        .iter()
        .zip(weights)
        .map(|((s, _), w)| (s.clone(), w / total))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesResult {
    pub species: String,
    pub theta_hat: f64,
    pub intensities: Vec<f64>,
    pub boltzmann_intercept: f64,
    pub boltzmann_residual: f64,
    pub concentration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibsReport {
    pub temperature_k: f64,
    pub relative_fit_error: f64,
    pub species: Vec<SpeciesResult>,
    pub warnings: Vec<String>,
    pub fit: SpectrumFit,
}

/// Fit, Boltzmann plot and closure in one pass.
pub fn analyze_spectrum(
    observation: &Observation,
    db: &LineDatabase,
    model: &SpectrumModel,
    theta0: &[f64],
    options: &SolverOptions,
) -> Result<LibsReport> {
    let fit = fit_spectrum(observation, model, theta0, options)?;
    let input: Vec<SpeciesLines> = fit.species.iter().map(SpeciesLines::from).collect();
    let boltz = boltzmann_fit(&input)?;
    let conc = concentrations(&boltz.intercepts(), &db.partition_functions, boltz.temperature_k)?;
    let species = fit
        .species
        .iter()
        .zip(&boltz.species)
        .zip(&conc)
        .map(|((f, b), (_, c))| SpeciesResult {
            species: f.species.clone(),
            theta_hat: f.theta_hat,
            intensities: f.intensities.clone(),
            boltzmann_intercept: b.intercept,
            boltzmann_residual: b.residual,
            concentration: *c,
        })
        .collect();
    Ok(LibsReport {
        temperature_k: boltz.temperature_k,
        relative_fit_error: fit.relative_fit_error,
        species,
        warnings: boltz.warnings,
        fit,
    })
}

/// Per-species model curves `G_i(θ̂_i)η̂_i` alongside the data, as CSV with
/// columns `wavelength_nm,observed,model,<species>...`.
pub fn write_fitted_curves_csv<W: Write>(
    observation: &Observation,
    model: &SpectrumModel,
    fit: &SpectrumFit,
    writer: W,
) -> Result<()> {
    let spec = &model.spec;
    let theta: Vec<f64> = fit.species.iter().map(|s| s.theta_hat).collect();
    let g = build_dictionary(spec, &theta)?;
    let offsets = spec.support.offsets();
    let mut per_species = Vec::with_capacity(fit.species.len());
    for (i, s) in fit.species.iter().enumerate() {
        let block = g.columns(offsets[i], offsets[i + 1] - offsets[i]);
        per_species.push(block * DVector::from_column_slice(&s.eta_hat));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["wavelength_nm".to_string(), "observed".into(), "model".into()];
    header.extend(fit.species.iter().map(|s| s.species.clone()));
    w.write_record(&header)?;
    for k in 0..spec.n_samples() {
        let mut rec = vec![
            format_float(spec.grid.instant(k)),
            format_float(observation.x[k]),
            format_float(fit.fitted[k]),
        ];
        rec.extend(per_species.iter().map(|c| format_float(c[k])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Integrated intensities from the forward model with `F = 1`.
pub fn forward_intensities(
    db: &LineDatabase,
    lines: &[LineRecord],
    concentration: f64,
    temperature_k: f64,
) -> Result<Vec<f64>> {
    let kt = BOLTZMANN_EV_PER_K * temperature_k;
    lines
        .iter()
        .map(|r| {
            let u = db.partition_functions.eval(&r.species, temperature_k)?;
            Ok(concentration * r.g_k * r.a_ki / (r.wavelength_nm * u) * (-r.e_k_ev / kt).exp())
        })
        .collect()
}

/// Synthetic plasma: composition and temperature plus per-species widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPlasma {
    pub temperature_k: f64,
    pub composition: BTreeMap<String, f64>,
    pub widths: BTreeMap<String, f64>,
}

/// Forward-models a spectrum on the model's window. Returns the
/// observation and the peak amplitudes used.
pub fn synthesize_spectrum(
    db: &LineDatabase,
    model: &SpectrumModel,
    plasma: &SyntheticPlasma,
    noise: NoiseSpec,
) -> Result<(Observation, Vec<f64>, Vec<f64>)> {
    let mut theta = Vec::with_capacity(model.species.len());
    let mut eta = Vec::with_capacity(model.spec.n_columns());
    for (s, lines) in model.species.iter().zip(&model.lines) {
        let c = *plasma
            .composition
            .get(s)
            .ok_or_else(|| Error::validation(format!("no concentration for {s}")))?;
        let w = *plasma
            .widths
            .get(s)
            .ok_or_else(|| Error::validation(format!("no width for {s}")))?;
        let area = model.spec.kernel.area(w);
        theta.push(w);
        eta.extend(forward_intensities(db, lines, c, plasma.temperature_k)?.into_iter().map(|i| i / area));
    }
    if model.spec.baseline {
        eta.push(0.0);
    }
    let obs = crate::dictionary::synthesize(&model.spec, &theta, &eta, noise)?;
    Ok((obs, theta, eta))
}

/// Synthetic four-species line list (invented values, not reference atomic
/// data) with lines inside `[256.1, 266.5]` nm.
pub fn synthetic_alloy_database() -> LineDatabase {
    let line = |s: &str, wl: f64, a: f64, g: f64, e: f64| LineRecord {
        species: s.to_string(),
        wavelength_nm: wl,
        a_ki: a,
        g_k: g,
        e_k_ev: e,
    };
    let records = vec![
        line("Al", 256.80, 2.0e7, 4.0, 3.60),
        line("Al", 259.40, 3.0e7, 6.0, 4.80),
        line("Al", 263.30, 1.5e8, 2.0, 6.10),
        line("Al", 265.80, 6.0e7, 4.0, 5.20),
        line("Cu", 257.90, 4.0e7, 4.0, 3.80),
        line("Cu", 261.80, 3.0e8, 6.0, 4.90),
        line("Cu", 264.70, 1.0e9, 2.0, 5.70),
        line("Fe", 258.60, 3.5e8, 9.0, 4.10),
        line("Fe", 260.70, 6.0e8, 7.0, 5.30),
        line("Fe", 262.80, 2.0e9, 11.0, 6.00),
        line("Mg", 260.10, 5.0e8, 3.0, 4.35),
        line("Mg", 264.00, 8.0e8, 5.0, 5.90),
    ];
    let coefficients = BTreeMap::from([
        ("Al".to_string(), vec![5.6, 2.0e-5]),
        ("Cu".to_string(), vec![2.0, 3.0e-5, 1.0e-9]),
        ("Fe".to_string(), vec![20.0, 1.0e-3]),
        ("Mg".to_string(), vec![1.0, 5.0e-6]),
    ]);
    LineDatabase::new(
        records,
        PartitionFunctions {
            t_min_k: 5_000.0,
            t_max_k: 20_000.0,
            coefficients,
        },
    )
    .expect("built-in line list is valid")
}

/// 91.50% Al, 5.52% Cu, 0.98% Fe, 0.39% Mg (renormalized) at `10⁴` K.
pub fn synthetic_alloy_plasma() -> SyntheticPlasma {
    let raw = [("Al", 91.50), ("Cu", 5.52), ("Fe", 0.98), ("Mg", 0.39)];
    let total: f64 = raw.iter().map(|r| r.1).sum();
    SyntheticPlasma {
        temperature_k: 1.0e4,
        composition: raw.iter().map(|(s, c)| (s.to_string(), c / total)).collect(),
        widths: BTreeMap::from([
            ("Al".to_string(), 0.030),
            ("Cu".to_string(), 0.025),
            ("Fe".to_string(), 0.035),
            ("Mg".to_string(), 0.040),
        ]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_species() -> LineDatabase {
        let line = |s: &str, wl: f64, e: f64| LineRecord {
            species: s.to_string(),
            wavelength_nm: wl,
            a_ki: 1e8,
            g_k: 3.0,
            e_k_ev: e,
        };
        LineDatabase::new(
            vec![line("A", 300.0, 3.0), line("A", 302.0, 4.5), line("B", 301.0, 3.5), line("B", 303.5, 5.0)],
            PartitionFunctions {
                t_min_k: 5_000.0,
                t_max_k: 20_000.0,
                coefficients: BTreeMap::from([("A".to_string(), vec![2.0]), ("B".to_string(), vec![3.0, 1e-4])]),
            },
        )
        .unwrap()
    }

    #[test]
    fn database_round_trip_is_exact() {
        let db = synthetic_alloy_database();
        let mut lines = Vec::new();
        let mut part = Vec::new();
        db.write_lines_csv(&mut lines).unwrap();
        db.write_partition_json(&mut part).unwrap();
        let back = LineDatabase::from_readers(&lines[..], &part[..]).unwrap();
        assert_eq!(back, db);
        assert_eq!(two_species().species(), vec!["A", "B"]);

        let dir = tempfile::tempdir().unwrap();
        let (l, p) = (dir.path().join("lines.csv"), dir.path().join("part.json"));
        db.save(&l, &p).unwrap();
        assert_eq!(load_line_database(&l, &p).unwrap(), db);
    }

    #[test]
    fn database_rejections() {
        let part = br#"{"t_min_k": 5000, "t_max_k": 20000, "coefficients": {"A": [1.0]}}"#;
        let empty = "species,wavelength_nm,a_ki,g_k,e_k_ev\n";
        assert!(LineDatabase::from_readers(empty.as_bytes(), &part[..]).unwrap_err().is_validation());

        let single = "species,wavelength_nm,a_ki,g_k,e_k_ev\nA,300,1e8,3,3.0\n";
        assert!(LineDatabase::from_readers(single.as_bytes(), &part[..]).unwrap_err().is_validation());

        let dup = "species,wavelength_nm,a_ki,g_k,e_k_ev\nA,300,1e8,3,3.0\nA,300,1e8,3,4.0\n";
        assert!(LineDatabase::from_readers(dup.as_bytes(), &part[..]).unwrap_err().is_validation());

        let bad = "species,wavelength_nm,a_ki,g_k,e_k_ev\nA,300,1e8,3,3.0\nA,abc,1e8,3,4.0\n";
        match LineDatabase::from_readers(bad.as_bytes(), &part[..]).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
        let frac = "species,wavelength_nm,a_ki,g_k,e_k_ev\nA,300,1e8,2.5,3.0\nA,301,1e8,3,4.0\n";
        match LineDatabase::from_readers(frac.as_bytes(), &part[..]).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
        let header = "name,wavelength_nm,a_ki,g_k,e_k_ev\nA,300,1e8,3,3.0\nA,301,1e8,3,4.0\n";
        assert!(LineDatabase::from_readers(header.as_bytes(), &part[..]).is_err());

        let negative = br#"{"t_min_k": 5000, "t_max_k": 20000, "coefficients": {"A": [1.0, -1e-3]}}"#;
        let ok = "species,wavelength_nm,a_ki,g_k,e_k_ev\nA,300,1e8,3,3.0\nA,301,1e8,3,4.0\n";
        assert!(LineDatabase::from_readers(ok.as_bytes(), &negative[..]).unwrap_err().is_validation());
        assert!(LineDatabase::from_readers(ok.as_bytes(), &part[..]).is_ok());
    }

    #[test]
    fn window_filter_matches_manual_count() {
        let db = synthetic_alloy_database();
        let window = (258.0, 262.0);
        let m = build_spectrum_spec(&db, window, 1000, KernelFamily::lorentzian(), false).unwrap();
        let manual = db
            .records
            .iter()
            .filter(|r| r.wavelength_nm >= window.0 && r.wavelength_nm <= window.1)
            .count();
        assert_eq!(m.spec.model_order(), manual);
        let species: BTreeSet<&str> = db
            .records
            .iter()
            .filter(|r| r.wavelength_nm >= window.0 && r.wavelength_nm <= window.1)
            .map(|r| r.species.as_str())
            .collect();
        assert_eq!(m.species.len(), species.len());

        let one = build_spectrum_spec(&db, (256.5, 257.0), 200, KernelFamily::lorentzian(), false).unwrap();
        assert_eq!((one.spec.n_groups(), one.spec.model_order()), (1, 1));
        assert!(build_spectrum_spec(&db, (270.0, 280.0), 200, KernelFamily::lorentzian(), false).is_err());
        assert!(build_spectrum_spec(&db, (262.0, 258.0), 200, KernelFamily::lorentzian(), false).is_err());

        let full = build_spectrum_spec(&db, (256.1, 266.5), 2000, KernelFamily::lorentzian(), false).unwrap();
        assert_eq!(full.spec.n_groups(), 4);
        assert_eq!(full.spec.model_order(), db.records.len());
    }

    #[test]
    fn boltzmann_recovers_forward_temperature() {
        let db = synthetic_alloy_database();
        let plasma = synthetic_alloy_plasma();
        let input: Vec<SpeciesLines> = db
            .species()
            .into_iter()
            .map(|s| {
                let lines = db.lines_of(&s);
                let intensities = forward_intensities(&db, &lines, plasma.composition[&s], 1.0e4).unwrap();
                SpeciesLines {
                    species: s,
                    lines,
                    intensities,
                    intensity_std: None,
                }
            })
            .collect();
        let fit = boltzmann_fit(&input).unwrap();
        assert!((fit.temperature_k - 1.0e4).abs() <= 1e-3 * 1.0e4);
        assert!(fit.species.iter().all(|s| s.residual < 1e-10));
        let conc = concentrations(&fit.intercepts(), &db.partition_functions, fit.temperature_k).unwrap();
        for (s, c) in &conc {
            assert!((c - plasma.composition[s]).abs() < 1e-9, "{s}");
        }

        // a global scale shifts every intercept by ln c and leaves T alone
        let scaled: Vec<SpeciesLines> = input
            .iter()
            .map(|s| SpeciesLines {
                intensities: s.intensities.iter().map(|i| i * 7.5).collect(),
                ..s.clone()
            })
            .collect();
        let fit2 = boltzmann_fit(&scaled).unwrap();
        assert!((fit2.temperature_k - fit.temperature_k).abs() <= 1e-9 * fit.temperature_k);
        for (a, b) in fit.species.iter().zip(&fit2.species) {
            assert!((b.intercept - a.intercept - 7.5f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_species_are_excluded_from_the_slope() {
        let db = two_species();
        let mut lines_b = db.lines_of("B");
        for l in &mut lines_b {
            l.e_k_ev = 4.0;
        }
        let lines_a = db.lines_of("A");
        let ia = forward_intensities(&db, &lines_a, 0.5, 9000.0).unwrap();
        let ib = forward_intensities(&db, &lines_b, 0.5, 9000.0).unwrap();
        let fit = boltzmann_fit(&[
            SpeciesLines {
                species: "A".into(),
                lines: lines_a.clone(),
                intensities: ia.clone(),
                intensity_std: None,
            },
            SpeciesLines {
                species: "B".into(),
                lines: lines_b.clone(),
                intensities: ib.clone(),
                intensity_std: None,
            },
        ])
        .unwrap();
        assert!(!fit.species[1].in_pooled_slope);
        assert!(fit.species[0].in_pooled_slope);
        assert_eq!(fit.warnings.len(), 1);
        assert!((fit.temperature_k - 9000.0).abs() < 1e-6 * 9000.0);

        let only_b = [SpeciesLines {
            species: "B".into(),
            lines: lines_b,
            intensities: ib,
            intensity_std: None,
        }];
        assert!(boltzmann_fit(&only_b).is_err());

        let negative = [SpeciesLines {
            species: "A".into(),
            lines: lines_a,
            intensities: vec![-1.0, 0.0],
            intensity_std: None,
        }];
        assert!(boltzmann_fit(&negative).unwrap_err().is_validation());
    }

    #[test]
    fn concentration_edge_cases() {
        let db = two_species();
        let pf = &db.partition_functions;
        let one = concentrations(&[("A".into(), -3.0)], pf, 1e4).unwrap();
        assert_eq!(one[0].1, 1.0);
        let same = PartitionFunctions {
            coefficients: BTreeMap::from([("A".to_string(), vec![2.0]), ("B".to_string(), vec![2.0])]),
            ..pf.clone()
        };
        let u = concentrations(&[("A".into(), 1.0), ("B".into(), 1.0)], &same, 1e4).unwrap();
        assert!((u[0].1 - 0.5).abs() < 1e-15 && (u[1].1 - 0.5).abs() < 1e-15);
        assert!(concentrations(&[("A".into(), 1.0)], pf, 1e5).unwrap_err().is_validation());
    }

    proptest! {
        #[test]
        fn closure_holds(q in prop::collection::vec(-50.0f64..50.0, 2..2 + 1), t in 5_000.0f64..20_000.0) {
            let db = two_species();
            let names = ["A", "B"];
            let ints: Vec<(String, f64)> = names.iter().zip(&q).map(|(s, v)| (s.to_string(), *v)).collect();
            let c = concentrations(&ints, &db.partition_functions, t).unwrap();
            let sum: f64 = c.iter().map(|x| x.1).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-10);
            prop_assert!(c.iter().all(|x| (0.0..=1.0).contains(&x.1)));
        }
    }

    fn alloy_setup(n: usize) -> (LineDatabase, SpectrumModel, SyntheticPlasma) {
        let db = synthetic_alloy_database();
        let model = build_spectrum_spec(&db, (256.1, 266.5), n, KernelFamily::lorentzian(), false).unwrap();
        (db, model, synthetic_alloy_plasma())
    }

    #[test]
    fn noiseless_fit_recovers_everything() {
        let (db, model, plasma) = alloy_setup(2000);
        let (obs, theta, eta) = synthesize_spectrum(&db, &model, &plasma, NoiseSpec::None).unwrap();
        let fit = fit_spectrum(&obs, &model, &[0.05; 4], &SolverOptions::default()).unwrap();
        assert!(fit.relative_fit_error <= 1e-8, "{}", fit.relative_fit_error);
        let eta_hat: Vec<f64> = fit.species.iter().flat_map(|s| s.eta_hat.clone()).collect();
        for (a, b) in eta_hat.iter().zip(&eta) {
            assert!((a - b).abs() <= 1e-6 * b.abs());
        }
        for (s, t) in fit.species.iter().zip(&theta) {
            assert!((s.theta_hat - t).abs() <= 1e-8 * t);
        }
    }

    #[test]
    fn noisy_fit_error_tracks_noise_level() {
        let (db, model, plasma) = alloy_setup(2000);
        let (obs, _, _) = synthesize_spectrum(&db, &model, &plasma, NoiseSpec::Gaussian { snr_db: 20.0, seed: 4 }).unwrap();
        let fit = fit_spectrum(&obs, &model, &[0.05; 4], &SolverOptions::default()).unwrap();
        // residual ≈ noise projected off an (M + p)-dimensional model space
        assert!((fit.relative_fit_error - 0.0995).abs() < 0.01, "{}", fit.relative_fit_error);
    }

    #[test]
    fn scaling_the_spectrum_scales_only_intensities() {
        let (db, model, plasma) = alloy_setup(1500);
        let (obs, _, _) = synthesize_spectrum(&db, &model, &plasma, NoiseSpec::Gaussian { snr_db: 30.0, seed: 8 }).unwrap();
        let mut scaled = obs.clone();
        scaled.x.iter_mut().for_each(|v| *v *= 250.0);
        let a = analyze_spectrum(&obs, &db, &model, &[0.05; 4], &SolverOptions::default()).unwrap();
        let b = analyze_spectrum(&scaled, &db, &model, &[0.05; 4], &SolverOptions::default()).unwrap();
        assert!((a.temperature_k - b.temperature_k).abs() <= 1e-6 * a.temperature_k);
        for (x, y) in a.species.iter().zip(&b.species) {
            assert!((x.theta_hat - y.theta_hat).abs() <= 1e-6 * x.theta_hat);
            assert!((x.concentration - y.concentration).abs() <= 1e-8);
            for (i, j) in x.intensities.iter().zip(&y.intensities) {
                assert!((j - 250.0 * i).abs() <= 1e-6 * j.abs());
            }
        }
        let sum: f64 = a.species.iter().map(|s| s.concentration).sum();
        assert!((sum - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn spectrum_csv_round_trip_and_curves() {
        let (db, model, plasma) = alloy_setup(500);
        let (obs, _, _) = synthesize_spectrum(&db, &model, &plasma, NoiseSpec::None).unwrap();
        let mut buf = Vec::new();
        write_spectrum_csv(&obs, &mut buf).unwrap();
        assert!(buf.starts_with(b"wavelength_nm,intensity\n"));
        let back = read_spectrum_csv(&buf[..]).unwrap();
        assert_eq!(back.x, obs.x);
        let fit = fit_spectrum(&back, &model, &[0.05; 4], &SolverOptions::default()).unwrap();
        let mut curves = Vec::new();
        write_fitted_curves_csv(&back, &model, &fit, &mut curves).unwrap();
        let text = String::from_utf8(curves).unwrap();
        assert!(text.starts_with("wavelength_nm,observed,model,Al,Cu,Fe,Mg\n"));
        assert_eq!(text.lines().count(), 501);
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let (db, model, plasma) = alloy_setup(500);
        let (obs, _, _) = synthesize_spectrum(&db, &model, &plasma, NoiseSpec::None).unwrap();
        let other = build_spectrum_spec(&db, (256.1, 266.5), 600, KernelFamily::lorentzian(), false).unwrap();
        assert!(fit_spectrum(&obs, &other, &[0.05; 4], &SolverOptions::default()).is_err());
        assert!(fit_spectrum(&obs, &model, &[0.05; 3], &SolverOptions::default()).is_err());
    }
}
