//! Projected gradient ascent on Q with backtracking Armijo steps.

use nalgebra::{Matrix5, Vector5};

use crate::channel::{ChannelModelParams, ChannelSampleSet};
use crate::error::{Error, Result};
use crate::steering::ArrayGeometry;

use super::objective::{from_vector, to_vector, with_paths, Basis, Block, Objective, PATH_DIM};
use super::{check_dims, check_posterior, EmConfig, PosteriorZ};

/// Predicted Q increase (nats) below which the M-step stops.
const STATIONARY_TOL: f64 = 1e-10;
/// Relative Levenberg-Marquardt damping of the Gauss-Newton blocks.
const DAMPING: f64 = 1e-9;

/// Box constraints on `(θ, φ, r)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Bounds {
    pub theta: (f64, f64),
    pub phi: (f64, f64),
    pub r: (f64, f64),
}

impl Bounds {
    pub fn new(cfg: &EmConfig, geom: &ArrayGeometry) -> Self {
        Bounds { theta: cfg.theta_bounds, phi: cfg.phi_bounds, r: cfg.range_bounds(geom) }
    }

    fn interval(&self, i: usize) -> Option<(f64, f64)> {
        match i % PATH_DIM {
            0 => Some(self.theta),
            1 => Some(self.phi),
            2 => Some(self.r),
            _ => None,
        }
    }

    pub fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            if let Some((lo, hi)) = self.interval(i) {
                *v = v.clamp(lo, hi);
            }
        }
    }

    /// Whether coordinate `i` sits on a bound that `g` pushes against.
    fn blocked(&self, x: &[f64], g: &[f64], i: usize) -> bool {
        match self.interval(i) {
            Some((lo, hi)) => {
                let eps = 1e-12 * (hi - lo).abs().max(lo.abs()).max(1e-300);
                (x[i] <= lo + eps && g[i] < 0.0) || (x[i] >= hi - eps && g[i] > 0.0)
            }
            None => false,
        }
    }
}

/// Outcome of one M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStepReport {
    pub params: ChannelModelParams,
    pub iterations: usize,
    pub line_search_failed: bool,
    pub q_in: f64,
    pub q_out: f64,
}

/// Runs the M-step from `params_prev` with the posterior held fixed.
pub fn m_step(
    geom: &ArrayGeometry,
    params_prev: &ChannelModelParams,
    posterior: &PosteriorZ,
    h: &ChannelSampleSet,
    cfg: &EmConfig,
) -> Result<MStepReport> {
    cfg.validate()?;
    check_dims(geom, h)?;
    check_posterior(params_prev, posterior)?;
    let stats = h.stats();
    let obj = Objective::new(geom, &stats, params_prev.sigma2)?;
    maximize(&obj, params_prev, posterior, cfg, &Bounds::new(cfg, geom))
}

pub(crate) fn maximize(
    obj: &Objective<'_>,
    start: &ChannelModelParams,
    post: &PosteriorZ,
    cfg: &EmConfig,
    bounds: &Bounds,
) -> Result<MStepReport> {
    let mut x = to_vector(&start.paths);
    bounds.project(&mut x);
    let mut paths = from_vector(&x);
    let mut basis = Basis::with_gradients(obj.geom, &paths)?;
    let (constant, mut qv) = obj.q_parts(&paths, &basis, post);
    let q_in = constant + qv;
    let mut iterations = 0;
    let mut failed = false;
    for _ in 0..cfg.max_grad_iters {
        let (grad, blocks) = obj.gradient(&paths, &basis, post, cfg.precondition);
        let mut g = grad.to_real();
        for i in 0..g.len() {
            if bounds.blocked(&x, &g, i) {
                g[i] = 0.0;
            }
        }
        let d = if cfg.precondition { precondition(&blocks, &g) } else { g.clone() };
        let predicted: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        if !(predicted > STATIONARY_TOL) {
            break;
        }
        let mut step = cfg.step0;
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            bounds.project(&mut trial);
            let gain: f64 = g.iter().zip(trial.iter().zip(&x)).map(|(gi, (t, xi))| gi * (t - xi)).sum();
            if gain > 0.0 {
                let trial_paths = from_vector(&trial);
                let trial_basis = Basis::new(obj.geom, &trial_paths)?;
                let (_, q_trial) = obj.q_parts(&trial_paths, &trial_basis, post);
                if q_trial.is_finite() && q_trial >= qv + cfg.armijo_c * gain {
                    accepted = Some((trial, trial_paths, q_trial));
                    break;
                }
            }
            step *= cfg.armijo_rho;
        }
        match accepted {
            Some((trial, trial_paths, q_trial)) => {
                x = trial;
                basis = Basis::with_gradients(obj.geom, &trial_paths)?;
                paths = trial_paths;
                qv = q_trial;
                iterations += 1;
            }
            None => {
                failed = true;
                break;
            }
        }
    }
    let params = with_paths(start, paths);
    if !params.is_finite() {
        return Err(Error::NonFinite("M-step produced non-finite parameters".into()));
    }
    Ok(MStepReport { params, iterations, line_search_failed: failed, q_in, q_out: constant + qv })
}

/// Solves each damped Gauss-Newton block against its slice of `g`; falls
/// back to diagonal scaling when a block is not positive definite.
fn precondition(blocks: &[Block], g: &[f64]) -> Vec<f64> {
    let mut d = vec![0.0; g.len()];
    for (l, block) in blocks.iter().enumerate() {
        let gl = &g[l * PATH_DIM..(l + 1) * PATH_DIM];
        let mut m = Matrix5::from_fn(|i, j| block[i][j]);
        for i in 0..PATH_DIM {
            if gl[i] == 0.0 {
                for j in 0..PATH_DIM {
                    m[(i, j)] = 0.0;
                    m[(j, i)] = 0.0;
                }
            }
            let diag = m[(i, i)];
            m[(i, i)] = if diag > 0.0 { diag * (1.0 + DAMPING) } else { 1.0 };
        }
        let rhs = Vector5::from_column_slice(gl);
        let sol = match m.cholesky() {
            Some(c) => c.solve(&rhs),
            None => Vector5::from_fn(|i, _| rhs[i] / m[(i, i)]),
        };
        for i in 0..PATH_DIM {
            d[l * PATH_DIM + i] = if gl[i] == 0.0 { 0.0 } else { sol[i] };
        }
    }
    d
}
