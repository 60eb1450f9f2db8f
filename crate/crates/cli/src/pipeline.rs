//! Generate → fit → outage pipeline.
//!
//! Randomness for trial `t` comes from substreams keyed by `(seed, t)` only,
//! so sweep points that share a trial index share their scenario draws and
//! noise variates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nearfar_core::baselines::{somp_fit_with, Dictionary, SompOptions};
use nearfar_core::channel::{
    draw_scenario, mean_channel, sample_channels, ChannelModelParams, ChannelSampleSet, FieldHypothesis, PathParams,
};
use nearfar_core::em::{em_fit, EmResult};
use nearfar_core::io::{self, Num};
use nearfar_core::outage::{dbm_to_watts, outage_curve_analytic, outage_curve_mc, rate_for_energy};
use nearfar_core::rng::StreamKey;
use nearfar_core::steering::{ArrayGeometry, Field};
use nearfar_core::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Scheme};
use crate::error::{CliError, CliResult};
use crate::provenance::OutputDir;

pub const SAMPLES_FILE: &str = "samples.csv";
pub const TRUTH_FILE: &str = "truth.toml";
pub const FIT_STATUS_FILE: &str = "fit_status.csv";
pub const OP_FILE: &str = "op_curves.csv";
pub const EM_REPORT_FILE: &str = "em_report.txt";
pub const EM_TRACE_FILE: &str = "em_trace.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

pub fn fit_file(scheme: Scheme) -> String {
    format!("fit_{}.toml", scheme.as_str())
}

/// Outcome of a command that may partially fail.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    /// `(where, message)` for every scheme or sweep point that failed.
    pub failures: Vec<(String, String)>,
}

impl Outcome {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Path parameters and labels, as stored in `truth.toml` and `fit_*.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamFile {
    pub source: String,
    pub sigma2: f64,
    pub paths: Vec<PathRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathRow {
    pub label: Field,
    pub theta: f64,
    pub phi: f64,
    pub r: f64,
    pub beta_re: f64,
    pub beta_im: f64,
}

impl ParamFile {
    pub fn new(source: &str, params: &ChannelModelParams, z: &FieldHypothesis) -> Self {
        let paths = params
            .paths
            .iter()
            .zip(&z.labels)
            .map(|(p, &label)| PathRow {
                label,
                theta: p.theta,
                phi: p.phi,
                r: p.r,
                beta_re: p.beta.re,
                beta_im: p.beta.im,
            })
            .collect();
        ParamFile { source: source.to_string(), sigma2: params.sigma2, paths }
    }

    pub fn model(&self) -> CliResult<(ChannelModelParams, FieldHypothesis)> {
        let paths = self
            .paths
            .iter()
            .map(|p| PathParams::new(Complex64::new(p.beta_re, p.beta_im), p.theta, p.phi, p.r))
            .collect();
        let params = ChannelModelParams::new(paths, self.sigma2)?;
        Ok((params, FieldHypothesis::new(self.paths.iter().map(|p| p.label).collect())))
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "source = \"{}\"", self.source);
        let _ = writeln!(out, "sigma2 = {}", toml_float(self.sigma2));
        for p in &self.paths {
            let _ = writeln!(out, "\n[[paths]]\nlabel = \"{}\"", p.label.as_str());
            for (k, v) in
                [("theta", p.theta), ("phi", p.phi), ("r", p.r), ("beta_re", p.beta_re), ("beta_im", p.beta_im)]
            {
                let _ = writeln!(out, "{k} = {}", toml_float(v));
            }
        }
        out
    }

    pub fn parse(text: &str, what: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Io(format!("{what}: {e}")))
    }
}

/// Ground truth of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub params: ChannelModelParams,
    pub z: FieldHypothesis,
}

/// Fitted model of one scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub scheme: Scheme,
    pub params: ChannelModelParams,
    pub labels: FieldHypothesis,
}

/// Files produced by a stage, keyed by path relative to the output root.
pub type Artifacts = Vec<(String, String)>;

fn key(cfg: &ExperimentConfig, name: &str) -> StreamKey {
    StreamKey::new(cfg.seed).named(name)
}

pub fn draw_truth(cfg: &ExperimentConfig, trial: u64) -> CliResult<(ArrayGeometry, Truth)> {
    let geom = cfg.geometry()?;
    let scenario = cfg.scenario_config(geom)?;
    let mut rng = key(cfg, "scenario").rng(trial);
    let (params, z) = draw_scenario(&scenario, &mut rng)?;
    Ok((geom, Truth { params, z }))
}

pub fn draw_samples(
    cfg: &ExperimentConfig,
    geom: &ArrayGeometry,
    truth: &Truth,
    trial: u64,
) -> CliResult<ChannelSampleSet> {
    let k = key(cfg, "samples").child(trial);
    Ok(sample_channels(geom, &truth.params, &truth.z, cfg.scenario.samples, k)?)
}

/// Diffuse variance estimate `scatter / (N·(S-1))`, unbiased whatever the
/// mean.
pub fn diffuse_variance(h: &ChannelSampleSet) -> CliResult<f64> {
    if h.len() < 2 {
        return Err(CliError::Core(nearfar_core::Error::Domain(
            "at least two samples are needed to estimate the diffuse variance".into(),
        )));
    }
    let stats = h.stats();
    Ok(stats.scatter / (h.dim() * (h.len() - 1)) as f64)
}

/// Fits one scheme. Returns the fitted model and the scheme's files.
pub fn fit_scheme(
    cfg: &ExperimentConfig,
    geom: &ArrayGeometry,
    h: &ChannelSampleSet,
    scheme: Scheme,
    trial: u64,
) -> CliResult<(Fitted, Artifacts)> {
    let paths = cfg.scenario.paths;
    let mut em_cfg = cfg.em_config(geom)?;
    em_cfg.seed = key(cfg, "em").child(trial).raw();
    let (params, labels, mut files) = match scheme {
        Scheme::Proposed => {
            let sigma2 = diffuse_variance(h)?;
            let res: EmResult = em_fit(geom, h, paths, sigma2, &em_cfg)?;
            let files = vec![(EM_REPORT_FILE.to_string(), res.report()), (EM_TRACE_FILE.to_string(), res.trace_csv())];
            (res.theta_hat, res.map_labels, files)
        }
        Scheme::Far | Scheme::Near => {
            let dict = if scheme == Scheme::Far {
                Dictionary::far(geom, &cfg.far_grid(geom))?
            } else {
                Dictionary::polar(geom, &cfg.polar_grid(geom))?
            };
            let opts = SompOptions { refine: cfg.baselines.refine.then_some(em_cfg) };
            let fit = somp_fit_with(h, &dict, paths, &opts)?;
            if fit.params.is_empty() {
                return Err(CliError::Core(nearfar_core::Error::Domain("no atom could be selected".into())));
            }
            (fit.params, fit.labels, Vec::new())
        }
        Scheme::Mc => unreachable!("mc is not a fitted scheme"),
    };
    if !params.is_finite() {
        return Err(CliError::Core(nearfar_core::Error::NonFinite(format!("{} fit", scheme.as_str()))));
    }
    files.push((fit_file(scheme), ParamFile::new(scheme.as_str(), &params, &labels).to_toml()));
    Ok((Fitted { scheme, params, labels }, files))
}

/// Fits every enabled scheme, isolating failures.
pub fn fit_all(
    cfg: &ExperimentConfig,
    geom: &ArrayGeometry,
    h: &ChannelSampleSet,
    trial: u64,
) -> (Vec<Fitted>, Artifacts, Vec<(Scheme, String)>) {
    let schemes: Vec<Scheme> = fitted_schemes(cfg);
    let results: Vec<_> = schemes.par_iter().map(|&s| (s, fit_scheme(cfg, geom, h, s, trial))).collect();
    let mut fits = Vec::new();
    let mut files = Vec::new();
    let mut failures = Vec::new();
    let mut status = String::from("scheme,status,detail\n");
    for (s, r) in results {
        match r {
            Ok((f, a)) => {
                let _ = writeln!(status, "{},ok,", s.as_str());
                fits.push(f);
                files.extend(a);
            }
            Err(e) => {
                let msg = e.to_string();
                let _ = writeln!(status, "{},failed,{}", s.as_str(), csv_field(&msg));
                failures.push((s, msg));
            }
        }
    }
    files.push((FIT_STATUS_FILE.to_string(), status));
    (fits, files, failures)
}

fn fitted_schemes(cfg: &ExperimentConfig) -> Vec<Scheme> {
    Scheme::FITTED.iter().copied().filter(|s| cfg.schemes.contains(s)).collect()
}

fn toml_float(x: f64) -> String {
    let s = Num(x).to_string();
    if s.contains(['.', 'e', 'N', 'i']) {
        s
    } else {
        format!("{s}.0")
    }
}

fn csv_field(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
}

/// Outage curves of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct OpTable {
    pub rates: Vec<f64>,
    /// Analytic curve of the generating model.
    pub truth: Vec<f64>,
    pub mc: Option<Vec<f64>>,
    /// Analytic curve per fitted scheme; `None` when the scheme failed.
    pub schemes: BTreeMap<Scheme, Option<Vec<f64>>>,
}

impl OpTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r_th,truth");
        if self.mc.is_some() {
            out.push_str(",mc");
        }
        for s in self.schemes.keys() {
            out.push(',');
            out.push_str(s.as_str());
        }
        out.push('\n');
        for (i, r) in self.rates.iter().enumerate() {
            let _ = write!(out, "{},{}", Num(*r), Num(self.truth[i]));
            if let Some(mc) = &self.mc {
                let _ = write!(out, ",{}", Num(mc[i]));
            }
            for c in self.schemes.values() {
                match c {
                    Some(c) => {
                        let _ = write!(out, ",{}", Num(c[i]));
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Integrated absolute deviation of `curve` from the mc column.
    pub fn deviation(&self, curve: &[f64]) -> Option<f64> {
        self.mc.as_ref().map(|mc| integrated_abs_diff(&self.rates, curve, mc))
    }
}

/// Trapezoidal `∫ |a - b| dR` over the rate grid.
pub fn integrated_abs_diff(rates: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    rates.windows(2).zip(d.windows(2)).map(|(r, d)| 0.5 * (r[1] - r[0]) * (d[0] + d[1])).sum()
}

/// Rate grid covering every model's energy distribution to
/// `op.grid_sigmas` standard deviations.
pub fn auto_rates(cfg: &ExperimentConfig, means: &[Vec<Complex64>], sigma2: f64) -> Vec<f64> {
    let p_t = dbm_to_watts(cfg.power.p_t_dbm);
    let noise = dbm_to_watts(cfg.power.noise_dbm);
    let c = cfg.op.grid_sigmas;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for m in means {
        let power: f64 = m.iter().map(|x| x.norm_sqr()).sum();
        let n = m.len() as f64;
        let e = power + n * sigma2;
        let sd = (n * sigma2 * sigma2 + 2.0 * sigma2 * power).sqrt();
        lo = lo.min(rate_for_energy((e - c * sd).max(0.0), p_t, noise));
        hi = hi.max(rate_for_energy(e + c * sd, p_t, noise));
    }
    let k = cfg.op.grid_points;
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

/// Outage curves for the generating model, the mc reference and every
/// fitted scheme. Fitted curves use the generating diffuse variance, so
/// they differ from the truth only through the estimated mean channel.
pub fn op_table(
    cfg: &ExperimentConfig,
    geom: &ArrayGeometry,
    truth: &Truth,
    fits: &[Fitted],
    trial: u64,
) -> CliResult<OpTable> {
    let p_t = dbm_to_watts(cfg.power.p_t_dbm);
    let noise = dbm_to_watts(cfg.power.noise_dbm);
    let sigma2 = truth.params.sigma2;
    let truth_mean = mean_channel(geom, &truth.params, &truth.z)?;
    let mut means = vec![truth_mean.clone()];
    for f in fits {
        means.push(mean_channel(geom, &f.params, &f.labels)?);
    }
    let rates = cfg.op.r_th.clone().unwrap_or_else(|| auto_rates(cfg, &means, sigma2));
    let truth_curve = outage_curve_analytic(&truth_mean, sigma2, &rates, p_t, noise)?;
    let mc = if cfg.schemes.contains(&Scheme::Mc) {
        let k = key(cfg, "mc").child(trial);
        Some(outage_curve_mc(geom, &truth.params, &truth.z, &rates, p_t, noise, cfg.mc_samples, k)?)
    } else {
        None
    };
    let mut schemes: BTreeMap<Scheme, Option<Vec<f64>>> = fitted_schemes(cfg).into_iter().map(|s| (s, None)).collect();
    for (f, m) in fits.iter().zip(&means[1..]) {
        schemes.insert(f.scheme, Some(outage_curve_analytic(m, sigma2, &rates, p_t, noise)?));
    }
    Ok(OpTable { rates, truth: truth_curve, mc, schemes })
}

/// Everything a single trial produces.
#[derive(Debug, Clone)]
pub struct TrialRun {
    pub files: Artifacts,
    pub table: OpTable,
    pub failures: Vec<(Scheme, String)>,
}

/// Runs generate → fit → op in memory. Sample files are not included.
pub fn run_trial(cfg: &ExperimentConfig, trial: u64) -> CliResult<TrialRun> {
    let (geom, truth) = draw_truth(cfg, trial)?;
    let h = draw_samples(cfg, &geom, &truth, trial)?;
    let (fits, mut files, failures) = fit_all(cfg, &geom, &h, trial);
    files.insert(0, (TRUTH_FILE.to_string(), ParamFile::new("truth", &truth.params, &truth.z).to_toml()));
    let table = op_table(cfg, &geom, &truth, &fits, trial)?;
    files.push((OP_FILE.to_string(), table.to_csv()));
    Ok(TrialRun { files, table, failures })
}

fn write_all(out: &mut OutputDir, prefix: &str, files: &Artifacts) -> CliResult<()> {
    for (rel, body) in files {
        out.write(&format!("{prefix}{rel}"), body)?;
    }
    Ok(())
}

/// `generate`: samples and ground truth for trial 0.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &mut OutputDir) -> CliResult<()> {
    let (geom, truth) = draw_truth(cfg, 0)?;
    let h = draw_samples(cfg, &geom, &truth, 0)?;
    out.write(TRUTH_FILE, &ParamFile::new("truth", &truth.params, &truth.z).to_toml())?;
    out.write(SAMPLES_FILE, &io::samples_to_csv(&h))
}

/// `fit`: every enabled scheme on the stored samples.
pub fn cmd_fit(cfg: &ExperimentConfig, out: &mut OutputDir) -> CliResult<Outcome> {
    let geom = cfg.geometry()?;
    let h = io::samples_from_csv(&out.read(SAMPLES_FILE)?)?;
    if h.dim() != geom.len() {
        return Err(CliError::Io(format!(
            "{SAMPLES_FILE} holds {}-element channels, the configured array has {}",
            h.dim(),
            geom.len()
        )));
    }
    let (_, files, failures) = fit_all(cfg, &geom, &h, 0);
    for s in fitted_schemes(cfg) {
        out.remove(&fit_file(s))?;
    }
    if !cfg.schemes.contains(&Scheme::Proposed) || failures.iter().any(|(s, _)| *s == Scheme::Proposed) {
        out.remove(EM_REPORT_FILE)?;
        out.remove(EM_TRACE_FILE)?;
    }
    write_all(out, "", &files)?;
    Ok(Outcome { failures: failures.into_iter().map(|(s, m)| (s.as_str().to_string(), m)).collect() })
}

/// `op`: outage curves from the stored truth and fits.
pub fn cmd_op(cfg: &ExperimentConfig, out: &mut OutputDir) -> CliResult<Outcome> {
    let geom = cfg.geometry()?;
    let (params, z) = ParamFile::parse(&out.read(TRUTH_FILE)?, TRUTH_FILE)?.model()?;
    let truth = Truth { params, z };
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for s in fitted_schemes(cfg) {
        let rel = fit_file(s);
        if !out.exists(&rel) {
            failures.push((s.as_str().to_string(), format!("{rel} not found")));
            continue;
        }
        let (params, labels) = ParamFile::parse(&out.read(&rel)?, &rel)?.model()?;
        fits.push(Fitted { scheme: s, params, labels });
    }
    let table = op_table(cfg, &geom, &truth, &fits, 0)?;
    out.write(OP_FILE, &table.to_csv())?;
    Ok(Outcome { failures })
}

/// Per-point result of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    /// Deviation from mc per scheme, one entry per successful trial.
    /// Includes the analytic curve of the generating model as `truth`.
    pub deviations: BTreeMap<String, Vec<f64>>,
    pub failures: Vec<String>,
}

impl SweepPoint {
    pub fn mean_deviation(&self, scheme: &str) -> Option<f64> {
        let d = self.deviations.get(scheme)?;
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }
}

pub fn point_dir(axis: &str, value: f64) -> String {
    format!("sweep/{axis}={value}/")
}

/// `sweep`: generate → fit → op for every sweep value and trial, then a
/// summary of mean integrated deviations from mc.
pub fn run_sweep(cfg: &ExperimentConfig) -> CliResult<(Vec<SweepPoint>, Artifacts)> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| CliError::Config("no [sweep] section".into()))?;
    let axis = sweep.axis;
    let jobs: Vec<(usize, u64)> =
        (0..sweep.values.len()).flat_map(|p| (0..sweep.trials as u64).map(move |t| (p, t))).collect();
    let runs: Vec<CliResult<TrialRun>> = jobs
        .par_iter()
        .map(|&(p, t)| {
            let point = cfg.at_point(axis, sweep.values[p]);
            point.validate()?;
            run_trial(&point, t)
        })
        .collect();

    let mut points: Vec<SweepPoint> = sweep
        .values
        .iter()
        .map(|&value| SweepPoint { value, deviations: BTreeMap::new(), failures: Vec::new() })
        .collect();
    let mut files = Vec::new();
    for (&(p, t), run) in jobs.iter().zip(runs) {
        let point = &mut points[p];
        let dir = format!("{}trial_{t}/", point_dir(axis.as_str(), point.value));
        match run {
            Ok(run) => {
                let table = &run.table;
                if let Some(d) = table.deviation(&table.truth) {
                    point.deviations.entry("truth".into()).or_default().push(d);
                }
                for (s, c) in &table.schemes {
                    if let Some(d) = c.as_deref().and_then(|c| table.deviation(c)) {
                        point.deviations.entry(s.as_str().into()).or_default().push(d);
                    }
                }
                for (s, m) in run.failures {
                    point.failures.push(format!("trial {t} {}: {m}", s.as_str()));
                }
                files.extend(run.files.into_iter().map(|(rel, body)| (format!("{dir}{rel}"), body)));
            }
            Err(e) => point.failures.push(format!("trial {t}: {e}")),
        }
    }
    files.push((SUMMARY_FILE.to_string(), summary_csv(cfg, axis.as_str(), &points)));
    Ok((points, files))
}

pub fn summary_csv(cfg: &ExperimentConfig, axis: &str, points: &[SweepPoint]) -> String {
    let trials = cfg.sweep.as_ref().map_or(1, |s| s.trials);
    let mut out = String::from("axis,value,scheme,deviation,std_error,trials_ok,trials_failed\n");
    let mut names = vec!["truth".to_string()];
    names.extend(fitted_schemes(cfg).iter().map(|s| s.as_str().to_string()));
    for p in points {
        for name in &names {
            let d = p.deviations.get(name).map(Vec::as_slice).unwrap_or(&[]);
            let n = d.len();
            let (mean, se) = if n == 0 {
                (String::new(), String::new())
            } else {
                let mean = d.iter().sum::<f64>() / n as f64;
                let se = if n > 1 {
                    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                    Num((var / n as f64).sqrt()).to_string()
                } else {
                    String::new()
                };
                (Num(mean).to_string(), se)
            };
            let _ = writeln!(out, "{axis},{},{name},{mean},{se},{n},{}", Num(p.value), trials - n);
        }
    }
    out
}

/// `sweep` command: writes every point's files and the summary.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &mut OutputDir) -> CliResult<(Vec<SweepPoint>, Outcome)> {
    let (points, files) = run_sweep(cfg)?;
    write_all(out, "", &files)?;
    let axis = cfg.sweep.as_ref().map(|s| s.axis.as_str()).unwrap_or_default();
    let failures = points
        .iter()
        .flat_map(|p| p.failures.iter().map(move |m| (format!("{axis}={}", p.value), m.clone())))
        .collect();
    Ok((points, Outcome { failures }))
}
