//! Expectation-maximisation over the hidden near/far label vector.
//!
//! The E-step enumerates all `2^L` label hypotheses in the log domain; the
//! M-step runs projected, preconditioned gradient ascent on the expected
//! complete-data log-likelihood with backtracking Armijo step control.

mod fit;
mod mstep;
mod objective;

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelModelParams, ChannelSampleSet, FieldHypothesis, PathParams};
use crate::error::{Error, Result};
use crate::io::Num;
use crate::steering::{ArrayGeometry, Field};

pub use fit::{em_fit, em_run};
pub use mstep::{m_step, MStepReport};

pub(crate) use mstep::{maximize, Bounds};
pub(crate) use objective::Objective;
use objective::{log_sum_exp, observed_loglik, Basis};

/// Largest path count accepted by the exhaustive E-step.
pub const MAX_ENUMERATED_PATHS: usize = 12;

pub(crate) fn check_paths(paths: usize) -> Result<()> {
    if paths > MAX_ENUMERATED_PATHS {
        return Err(Error::EnumerationCap { paths, cap: MAX_ENUMERATED_PATHS });
    }
    Ok(())
}

/// Posterior over label hypotheses, indexed as in [`FieldHypothesis::index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorZ {
    log_probs: Vec<f64>,
    paths: usize,
}

impl PosteriorZ {
    /// Normalises unnormalised log-weights with log-sum-exp.
    pub fn from_log_weights(weights: Vec<f64>) -> Result<Self> {
        let count = weights.len();
        if count == 0 || !count.is_power_of_two() {
            return Err(Error::DimensionMismatch { expected: count.next_power_of_two().max(1), got: count });
        }
        if weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::NonFinite("hypothesis log-weight".into()));
        }
        let norm = log_sum_exp(&weights);
        if !norm.is_finite() {
            return Err(Error::NonFinite("every hypothesis has zero likelihood".into()));
        }
        let log_probs = weights.into_iter().map(|w| (w - norm).min(0.0)).collect();
        Ok(PosteriorZ { log_probs, paths: count.trailing_zeros() as usize })
    }

    pub fn uniform(paths: usize) -> Result<Self> {
        check_paths(paths)?;
        Self::from_log_weights(vec![0.0; 1 << paths])
    }

    /// All mass on one hypothesis.
    pub fn point_mass(z: &FieldHypothesis) -> Result<Self> {
        check_paths(z.len())?;
        let mut w = vec![f64::NEG_INFINITY; 1 << z.len()];
        w[z.index()] = 0.0;
        Self::from_log_weights(w)
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn prob(&self, z: &FieldHypothesis) -> f64 {
        self.log_probs[z.index()].exp()
    }

    pub fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_probs.iter().map(|l| l.exp())
    }

    /// Marginal probability that path `l` carries `label`.
    pub fn marginal(&self, l: usize, label: Field) -> f64 {
        let bit = label.bit() as usize;
        self.probs().enumerate().filter(|(z, _)| (z >> l) & 1 == bit).map(|(_, p)| p).sum()
    }

    /// Most probable hypothesis; ties go to the lowest index.
    pub fn map(&self) -> FieldHypothesis {
        let mut best = 0;
        for (z, &lp) in self.log_probs.iter().enumerate() {
            if lp > self.log_probs[best] {
                best = z;
            }
        }
        FieldHypothesis::from_index(best, self.paths)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.log_probs.iter().filter(|l| l.is_finite()).map(|&l| -l.exp() * l).sum()
    }
}

/// Estimator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    /// Convergence threshold on the maximum relative parameter change.
    pub delta: f64,
    pub max_em_iters: usize,
    pub max_grad_iters: usize,
    pub armijo_c: f64,
    pub armijo_rho: f64,
    pub max_backtracks: usize,
    pub step0: f64,
    /// Scale gradient steps by the per-path Gauss-Newton block.
    pub precondition: bool,
    pub restarts: usize,
    pub seed: u64,
    pub theta_bounds: (f64, f64),
    pub phi_bounds: (f64, f64),
    /// Range bounds in meters; `None` selects
    /// `[default_min_range(geom), r_RD]`.
    pub r_bounds: Option<(f64, f64)>,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            delta: 1e-6,
            max_em_iters: 100,
            max_grad_iters: 50,
            armijo_c: 1e-4,
            armijo_rho: 0.5,
            max_backtracks: 40,
            step0: 1.0,
            precondition: true,
            restarts: 4,
            seed: 0,
            theta_bounds: (PI / 3.0, 2.0 * PI / 3.0),
            phi_bounds: (-PI / 6.0, PI / 6.0),
            r_bounds: None,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Domain(format!("invalid EM setting: {what}")));
        if !(self.delta > 0.0) {
            return bad("delta must be > 0");
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return bad("armijo_c must lie in (0, 1)");
        }
        if !(self.armijo_rho > 0.0 && self.armijo_rho < 1.0) {
            return bad("armijo_rho must lie in (0, 1)");
        }
        if !(self.step0 > 0.0 && self.step0.is_finite()) {
            return bad("step0 must be positive");
        }
        if self.max_em_iters == 0 || self.max_grad_iters == 0 || self.restarts == 0 {
            return bad("iteration and restart counts must be >= 1");
        }
        let (t0, t1) = self.theta_bounds;
        if !(0.0 < t0 && t0 <= t1 && t1 < PI) {
            return bad("theta_bounds must lie inside (0, pi)");
        }
        let (p0, p1) = self.phi_bounds;
        if !(-PI / 2.0 < p0 && p0 <= p1 && p1 < PI / 2.0) {
            return bad("phi_bounds must lie inside (-pi/2, pi/2)");
        }
        if let Some((r0, r1)) = self.r_bounds {
            if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
                return bad("r_bounds must satisfy 0 < r_min <= r_max < inf");
            }
        }
        Ok(())
    }

    /// Range bounds for `geom`.
    pub fn range_bounds(&self, geom: &ArrayGeometry) -> (f64, f64) {
        self.r_bounds.unwrap_or_else(|| (default_min_range(geom), geom.rayleigh_distance()))
    }
}

/// Smallest range searched by default: 4 m, or a tenth of the Rayleigh
/// distance for arrays whose near-field region is shorter than that.
pub fn default_min_range(geom: &ArrayGeometry) -> f64 {
    4.0f64.min(0.1 * geom.rayleigh_distance())
}

/// One EM iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Q at the new parameters under the posterior used by the M-step.
    pub q: f64,
    /// Observed-data log-likelihood at the new parameters.
    pub loglik: f64,
    pub param_change: f64,
    pub line_search_failed: bool,
}

/// Output of [`em_fit`] or [`em_run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmResult {
    pub theta_hat: ChannelModelParams,
    pub posterior: PosteriorZ,
    pub map_labels: FieldHypothesis,
    pub trace: Vec<TraceRow>,
    /// Observed-data log-likelihood at `theta_hat`.
    pub loglik: f64,
    pub converged: bool,
    /// Index of the restart that produced this result.
    pub restart: usize,
}

impl EmResult {
    /// Plain-text report with per-path estimates, labels and posterior.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "paths = {}", self.theta_hat.len());
        let _ = writeln!(out, "sigma2 = {}", Num(self.theta_hat.sigma2));
        let _ = writeln!(out, "loglik = {}", Num(self.loglik));
        let _ = writeln!(out, "converged = {}", self.converged);
        let _ = writeln!(out, "iterations = {}", self.trace.len());
        let _ = writeln!(out, "restart = {}", self.restart);
        let _ = writeln!(out, "\npath,label,theta,phi,r,beta_re,beta_im,p_near");
        for (l, p) in self.theta_hat.paths.iter().enumerate() {
            let _ = writeln!(
                out,
                "{l},{},{},{},{},{},{},{}",
                self.map_labels.labels[l].as_str(),
                Num(p.theta),
                Num(p.phi),
                Num(p.r),
                Num(p.beta.re),
                Num(p.beta.im),
                Num(self.posterior.marginal(l, Field::Near))
            );
        }
        let _ = writeln!(out, "\nhypothesis,labels,probability");
        for (z, lp) in self.posterior.log_probs().iter().enumerate() {
            let labels: Vec<&str> =
                FieldHypothesis::from_index(z, self.posterior.paths()).labels.iter().map(|f| f.as_str()).collect();
            let _ = writeln!(out, "{z},{},{}", labels.join("|"), Num(lp.exp()));
        }
        out
    }

    /// Trace as CSV with columns `iter,Q,loglik,param_change,line_search_failed`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,Q,loglik,param_change,line_search_failed\n");
        for row in &self.trace {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                row.iter,
                Num(row.q),
                Num(row.loglik),
                Num(row.param_change),
                row.line_search_failed
            );
        }
        out
    }
}

/// Gradient of Q with respect to one path.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PathGradient {
    pub d_theta: f64,
    pub d_phi: f64,
    pub d_r: f64,
    /// `∂Q/∂β`; the steepest-ascent direction for β is its conjugate.
    pub d_beta: Complex64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QGradient {
    pub paths: Vec<PathGradient>,
}

impl QGradient {
    /// Gradient in `(θ, φ, r, Re β, Im β)` coordinates, path by path.
    pub fn to_real(&self) -> Vec<f64> {
        self.paths.iter().flat_map(|g| [g.d_theta, g.d_phi, g.d_r, 2.0 * g.d_beta.re, -2.0 * g.d_beta.im]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.to_real().iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

fn check_dims(geom: &ArrayGeometry, h: &ChannelSampleSet) -> Result<()> {
    if h.dim() != geom.len() {
        return Err(Error::DimensionMismatch { expected: geom.len(), got: h.dim() });
    }
    if h.is_empty() {
        return Err(Error::Domain("sample set is empty".into()));
    }
    Ok(())
}

/// `Σ_s log p(h_s | z, Θ)` under `CN(μ_z, σ² I)`.
pub fn log_likelihood_given_z(
    geom: &ArrayGeometry,
    h: &ChannelSampleSet,
    params: &ChannelModelParams,
    z: &FieldHypothesis,
) -> Result<f64> {
    check_dims(geom, h)?;
    if z.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), got: z.len() });
    }
    let mean = crate::channel::mean_channel(geom, params, z)?;
    let stats = h.stats();
    let obj = Objective::new(geom, &stats, params.sigma2)?;
    let fit: f64 = stats.mean.iter().zip(&mean).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok(obj.log_norm() - stats.count as f64 * fit / params.sigma2)
}

/// Log-likelihood of every hypothesis in canonical order.
pub fn hypothesis_logliks(geom: &ArrayGeometry, h: &ChannelSampleSet, params: &ChannelModelParams) -> Result<Vec<f64>> {
    check_dims(geom, h)?;
    check_paths(params.len())?;
    let stats = h.stats();
    let obj = Objective::new(geom, &stats, params.sigma2)?;
    let basis = Basis::new(geom, &params.paths)?;
    Ok(obj.logliks(&params.paths, &basis))
}

/// `p(z | H, Θ)` under the uniform label prior.
pub fn posterior_z(geom: &ArrayGeometry, h: &ChannelSampleSet, params: &ChannelModelParams) -> Result<PosteriorZ> {
    PosteriorZ::from_log_weights(hypothesis_logliks(geom, h, params)?)
}

/// Observed-data log-likelihood `log Σ_z 2^-L Π_s p(h_s | z, Θ)`.
pub fn observed_log_likelihood(geom: &ArrayGeometry, h: &ChannelSampleSet, params: &ChannelModelParams) -> Result<f64> {
    Ok(observed_loglik(&hypothesis_logliks(geom, h, params)?, params.len()))
}

fn check_posterior(params: &ChannelModelParams, posterior: &PosteriorZ) -> Result<()> {
    if posterior.paths() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), got: posterior.paths() });
    }
    Ok(())
}

/// Expected complete-data log-likelihood of `params` under `posterior`.
pub fn q_function(
    geom: &ArrayGeometry,
    params: &ChannelModelParams,
    posterior: &PosteriorZ,
    h: &ChannelSampleSet,
    sigma2: f64,
) -> Result<f64> {
    check_dims(geom, h)?;
    check_posterior(params, posterior)?;
    let stats = h.stats();
    let obj = Objective::new(geom, &stats, sigma2)?;
    let basis = Basis::new(geom, &params.paths)?;
    let (c, v) = obj.q_parts(&params.paths, &basis, posterior);
    Ok(c + v)
}

/// Analytic gradient of [`q_function`].
pub fn q_gradient(
    geom: &ArrayGeometry,
    params: &ChannelModelParams,
    posterior: &PosteriorZ,
    h: &ChannelSampleSet,
    sigma2: f64,
) -> Result<QGradient> {
    check_dims(geom, h)?;
    check_posterior(params, posterior)?;
    let stats = h.stats();
    let obj = Objective::new(geom, &stats, sigma2)?;
    let basis = Basis::with_gradients(geom, &params.paths)?;
    Ok(obj.gradient(&params.paths, &basis, posterior, false).0)
}

/// Matches estimated paths to reference paths, which EM recovers only up to
/// ordering. Returns `perm` with `est[perm[t]]` paired to `reference[t]`,
/// minimising the summed angular distance `|Δθ| + |Δφ|` over all
/// assignments (exhaustive up to 8 paths, greedy beyond).
pub fn match_paths(reference: &[PathParams], est: &[PathParams]) -> Result<Vec<usize>> {
    if reference.len() != est.len() {
        return Err(Error::DimensionMismatch { expected: reference.len(), got: est.len() });
    }
    let cost = |t: usize, e: usize| (reference[t].theta - est[e].theta).abs() + (reference[t].phi - est[e].phi).abs();
    let l = reference.len();
    if l <= 8 {
        let mut best = (f64::INFINITY, (0..l).collect::<Vec<_>>());
        let mut perm: Vec<usize> = (0..l).collect();
        permute(&mut perm, 0, &mut |p| {
            let c: f64 = p.iter().enumerate().map(|(t, &e)| cost(t, e)).sum();
            if c < best.0 {
                best = (c, p.to_vec());
            }
        });
        return Ok(best.1);
    }
    let mut used = vec![false; l];
    Ok((0..l)
        .map(|t| {
            let e = (0..l).filter(|&e| !used[e]).min_by(|&a, &b| cost(t, a).total_cmp(&cost(t, b))).unwrap_or(0);
            used[e] = true;
            e
        })
        .collect())
}

fn permute(p: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

/// Reference labels re-indexed into the order of the estimated paths.
pub fn aligned_labels(reference: &FieldHypothesis, perm: &[usize]) -> FieldHypothesis {
    let mut labels = reference.labels.clone();
    for (t, &e) in perm.iter().enumerate() {
        labels[e] = reference.labels[t];
    }
    FieldHypothesis::new(labels)
}
