//! EM driver and initialisation.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::baselines::{Dictionary, GridSpec};
use crate::channel::{mean_channel, ChannelModelParams, ChannelSampleSet, FieldHypothesis, PathParams, SampleStats};
use crate::error::{Error, Result};
use crate::linalg::{dot, least_squares};
use crate::rng::StreamKey;
use crate::steering::{steering, ArrayGeometry, Field};

use super::mstep::{maximize, Bounds};
use super::objective::{observed_loglik, Basis, Objective};
use super::{check_dims, check_paths, EmConfig, EmResult, PosteriorZ, TraceRow};

/// Upper limit on the number of distance rings in the initial dictionary.
const MAX_INIT_RINGS: usize = 16;

/// Fits `paths` paths to `h` with known diffuse variance `sigma2`.
///
/// Restart 0 starts from a greedy hybrid-dictionary fit of the sample
/// mean; later restarts draw angles and ranges uniformly inside the bounds
/// and fit gains by least squares. The run with the highest observed-data
/// log-likelihood wins, ties going to the lowest restart index.
pub fn em_fit(
    geom: &ArrayGeometry,
    h: &ChannelSampleSet,
    paths: usize,
    sigma2: f64,
    cfg: &EmConfig,
) -> Result<EmResult> {
    cfg.validate()?;
    check_dims(geom, h)?;
    check_paths(paths)?;
    if paths == 0 {
        return Err(Error::Domain("at least one path is required".into()));
    }
    let stats = h.stats();
    let obj = Objective::new(geom, &stats, sigma2)?;
    let bounds = Bounds::new(cfg, geom);
    let key = StreamKey::new(cfg.seed).named("em-init");
    let runs: Vec<Result<EmResult>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|i| {
            let init = if i == 0 {
                greedy_init(&obj, paths, &bounds, cfg)?
            } else {
                random_init(geom, &stats, paths, sigma2, &bounds, key, i as u64)?
            };
            run(&obj, init, cfg, &bounds, i)
        })
        .collect();
    let mut best: Option<EmResult> = None;
    for r in runs {
        let r = r?;
        if best.as_ref().is_none_or(|b| r.loglik > b.loglik) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::NonFinite("no restart produced a finite likelihood".into()))
}

/// Single EM run from `init`, using `init.sigma2` as the diffuse variance.
pub fn em_run(
    geom: &ArrayGeometry,
    h: &ChannelSampleSet,
    init: &ChannelModelParams,
    cfg: &EmConfig,
) -> Result<EmResult> {
    cfg.validate()?;
    check_dims(geom, h)?;
    check_paths(init.len())?;
    let stats = h.stats();
    let obj = Objective::new(geom, &stats, init.sigma2)?;
    run(&obj, init.clone(), cfg, &Bounds::new(cfg, geom), 0)
}

fn run(
    obj: &Objective<'_>,
    init: ChannelModelParams,
    cfg: &EmConfig,
    bounds: &Bounds,
    restart: usize,
) -> Result<EmResult> {
    let mut params = init;
    let mut logliks = obj.logliks(&params.paths, &Basis::new(obj.geom, &params.paths)?);
    let mut trace = Vec::new();
    let mut converged = false;
    for iter in 1..=cfg.max_em_iters {
        let post = PosteriorZ::from_log_weights(logliks.clone())?;
        let step = maximize(obj, &params, &post, cfg, bounds)?;
        let next = step.params;
        let next_logliks = obj.logliks(&next.paths, &Basis::new(obj.geom, &next.paths)?);
        let change = param_change(&params.paths, &next.paths, bounds.r.1);
        trace.push(TraceRow {
            iter,
            q: step.q_out,
            loglik: observed_loglik(&next_logliks, next.len()),
            param_change: change,
            line_search_failed: step.line_search_failed,
        });
        params = next;
        logliks = next_logliks;
        if change <= cfg.delta {
            converged = true;
            break;
        }
    }
    let loglik = observed_loglik(&logliks, params.len());
    let posterior = PosteriorZ::from_log_weights(logliks)?;
    if !params.is_finite() || !loglik.is_finite() {
        return Err(Error::NonFinite("EM produced non-finite parameters".into()));
    }
    Ok(EmResult { map_labels: posterior.map(), theta_hat: params, posterior, trace, loglik, converged, restart })
}

/// Maximum relative parameter change: angles over π, ranges over `r_max`,
/// gains over `max(|β|, 1e-6)`.
pub(crate) fn param_change(old: &[PathParams], new: &[PathParams], r_max: f64) -> f64 {
    old.iter()
        .zip(new)
        .map(|(a, b)| {
            let angle = ((a.theta - b.theta).abs()).max((a.phi - b.phi).abs()) / PI;
            let range = (a.r - b.r).abs() / r_max;
            let gain = (a.beta - b.beta).norm() / a.beta.norm().max(1e-6);
            angle.max(range).max(gain)
        })
        .fold(0.0, f64::max)
}

/// Rings spaced so the quadratic phase term changes by about π/2 across
/// the aperture between neighbours.
fn init_rings(geom: &ArrayGeometry, bounds: &Bounds) -> usize {
    let (r0, r1) = bounds.r;
    let span = geom.wavenumber() * geom.max_offset_sq() / 2.0 * (1.0 / r0 - 1.0 / r1);
    ((span / (PI / 2.0)).ceil() as usize).clamp(2, MAX_INIT_RINGS)
}

/// Greedy pursuit on the sample mean over a hybrid near/far dictionary.
/// After each selection the chosen paths are polished off-grid under fixed
/// labels, and each label is flipped in turn and kept when the polished
/// likelihood improves.
fn greedy_init(obj: &Objective<'_>, paths: usize, bounds: &Bounds, cfg: &EmConfig) -> Result<ChannelModelParams> {
    let geom = obj.geom;
    let spec = GridSpec {
        n_theta: 2 * geom.n2(),
        n_phi: 2 * geom.n1(),
        n_dist: init_rings(geom, bounds),
        theta_range: bounds.theta,
        phi_range: bounds.phi,
        r_min: bounds.r.0,
        r_max: bounds.r.1,
    };
    let dict = Dictionary::polar(geom, &spec)?;
    let polish_cfg = EmConfig { precondition: true, ..cfg.clone() };
    let mut current = ChannelModelParams { paths: Vec::with_capacity(paths), sigma2: obj.sigma2 };
    let mut labels: Vec<Field> = Vec::with_capacity(paths);
    while current.len() < paths {
        let z = FieldHypothesis::new(labels.clone());
        let model = mean_channel(geom, &current, &z)?;
        let residual: Vec<Complex64> = obj.stats.mean.iter().zip(&model).map(|(a, b)| a - b).collect();
        let Some(m) = dict.best_match(std::slice::from_ref(&residual), &[]) else {
            break;
        };
        let atom = dict.atom_params(m);
        let beta = dot(dict.atom(m), &residual);
        current.paths.push(PathParams::new(beta, atom.theta, atom.phi, atom.r.unwrap_or(bounds.r.1)));
        labels.push(atom.label);
        let (polished, q) = polish(obj, &current, &labels, &polish_cfg, bounds)?;
        current = polished;
        let mut best_q = q;
        for l in 0..labels.len() {
            let mut flipped = labels.clone();
            flipped[l] = match labels[l] {
                Field::Near => Field::Far,
                Field::Far => Field::Near,
            };
            let (cand, q) = polish(obj, &current, &flipped, &polish_cfg, bounds)?;
            if q > best_q {
                best_q = q;
                current = cand;
                labels = flipped;
            }
        }
    }
    // Pad with zero-gain paths when the mean is exhausted early.
    while current.len() < paths {
        let mid = |(a, b): (f64, f64)| 0.5 * (a + b);
        current.paths.push(PathParams::new(Complex64::new(0.0, 0.0), mid(bounds.theta), mid(bounds.phi), bounds.r.1));
    }
    Ok(current)
}

/// M-step under a point-mass posterior; returns the parameters and Q.
fn polish(
    obj: &Objective<'_>,
    params: &ChannelModelParams,
    labels: &[Field],
    cfg: &EmConfig,
    bounds: &Bounds,
) -> Result<(ChannelModelParams, f64)> {
    let post = PosteriorZ::point_mass(&FieldHypothesis::new(labels.to_vec()))?;
    let rep = maximize(obj, params, &post, cfg, bounds)?;
    Ok((rep.params, rep.q_out))
}

fn random_init(
    geom: &ArrayGeometry,
    stats: &SampleStats,
    paths: usize,
    sigma2: f64,
    bounds: &Bounds,
    key: StreamKey,
    restart: u64,
) -> Result<ChannelModelParams> {
    let mut rng = key.rng(restart);
    let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    let mut out = Vec::with_capacity(paths);
    let mut vectors = Vec::with_capacity(paths);
    for _ in 0..paths {
        let theta = draw(bounds.theta);
        let phi = draw(bounds.phi);
        let r = draw(bounds.r);
        let label = if draw((0.0, 1.0)) < 0.5 { Field::Near } else { Field::Far };
        vectors.push(steering(geom, theta, phi, r, label)?.into_inner());
        out.push(PathParams::new(Complex64::new(0.0, 0.0), theta, phi, r));
    }
    let atoms: Vec<&[Complex64]> = vectors.iter().map(|v| v.as_slice()).collect();
    if let Some(beta) = least_squares(&atoms, &stats.mean) {
        for (p, b) in out.iter_mut().zip(beta) {
            p.beta = b;
        }
    }
    Ok(ChannelModelParams { paths: out, sigma2 })
}
