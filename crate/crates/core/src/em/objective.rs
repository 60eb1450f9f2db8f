//! Likelihood, expected complete-data log-likelihood and its gradient.
//!
//! Under `h_s ~ CN(μ_z, σ² I)` the data enter only through the sample mean
//! `h̄` and the scatter `T = Σ_s ‖h_s - h̄‖²`:
//!
//! `Σ_s log p(h_s | z, Θ) = -S·N·ln(πσ²) - (T + S‖h̄ - μ_z‖²)/σ²`.
//!
//! Everything here works on those statistics, so cost is independent of `S`.

use std::f64::consts::{LN_2, PI};

use num_complex::Complex64;

use crate::channel::{ChannelModelParams, PathParams, SampleStats};
use crate::error::{Error, Result};
use crate::steering::{steering, steering_with_gradients, ArrayGeometry, Field, SteeringGradients};

use super::{PathGradient, PosteriorZ, QGradient};

/// Parameters per path in the real coordinate system used by the M-step:
/// `(θ, φ, r, Re β, Im β)`.
pub(crate) const PATH_DIM: usize = 5;

pub(crate) type Block = [[f64; PATH_DIM]; PATH_DIM];

/// Steering vectors of every path under both labels.
pub(crate) struct Basis {
    pub near: Vec<Vec<Complex64>>,
    pub far: Vec<Vec<Complex64>>,
    pub near_grad: Vec<SteeringGradients>,
    pub far_grad: Vec<SteeringGradients>,
}

impl Basis {
    pub fn new(geom: &ArrayGeometry, paths: &[PathParams]) -> Result<Self> {
        let mut near = Vec::with_capacity(paths.len());
        let mut far = Vec::with_capacity(paths.len());
        for p in paths {
            near.push(steering(geom, p.theta, p.phi, p.r, Field::Near)?.into_inner());
            far.push(steering(geom, p.theta, p.phi, p.r, Field::Far)?.into_inner());
        }
        Ok(Basis { near, far, near_grad: Vec::new(), far_grad: Vec::new() })
    }

    pub fn with_gradients(geom: &ArrayGeometry, paths: &[PathParams]) -> Result<Self> {
        let mut b = Basis { near: vec![], far: vec![], near_grad: vec![], far_grad: vec![] };
        for p in paths {
            let (s, g) = steering_with_gradients(geom, p.theta, p.phi, p.r, Field::Near)?;
            b.near.push(s.into_inner());
            b.near_grad.push(g);
            let (s, g) = steering_with_gradients(geom, p.theta, p.phi, p.r, Field::Far)?;
            b.far.push(s.into_inner());
            b.far_grad.push(g);
        }
        Ok(b)
    }

    fn vector(&self, l: usize, label: Field) -> &[Complex64] {
        match label {
            Field::Near => &self.near[l],
            Field::Far => &self.far[l],
        }
    }

    fn grads(&self, l: usize, label: Field) -> &SteeringGradients {
        match label {
            Field::Near => &self.near_grad[l],
            Field::Far => &self.far_grad[l],
        }
    }
}

fn label_of(z: usize, l: usize) -> Field {
    Field::from_bit(((z >> l) & 1) as u8)
}

/// Data-side constants of the likelihood for one sample set.
pub(crate) struct Objective<'a> {
    pub geom: &'a ArrayGeometry,
    pub stats: &'a SampleStats,
    pub sigma2: f64,
}

impl<'a> Objective<'a> {
    pub fn new(geom: &'a ArrayGeometry, stats: &'a SampleStats, sigma2: f64) -> Result<Self> {
        if stats.mean.len() != geom.len() {
            return Err(Error::DimensionMismatch { expected: geom.len(), got: stats.mean.len() });
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Domain(format!("diffuse variance must be positive, got {sigma2}")));
        }
        Ok(Objective { geom, stats, sigma2 })
    }

    fn count(&self) -> f64 {
        self.stats.count as f64
    }

    /// Parameter-independent part of `Σ_s log p(h_s | z, Θ)`.
    pub fn log_norm(&self) -> f64 {
        let n = self.geom.len() as f64;
        -self.count() * n * (PI * self.sigma2).ln() - self.stats.scatter / self.sigma2
    }

    /// Residual `h̄ - μ_z`.
    fn residual(&self, paths: &[PathParams], basis: &Basis, z: usize) -> Vec<Complex64> {
        let mut r = self.stats.mean.clone();
        for (l, p) in paths.iter().enumerate() {
            for (x, s) in r.iter_mut().zip(basis.vector(l, label_of(z, l))) {
                *x -= p.beta * s;
            }
        }
        r
    }

    /// `-S‖h̄ - μ_z‖²/σ²`, the parameter-dependent part of the likelihood.
    fn fit_term(&self, paths: &[PathParams], basis: &Basis, z: usize) -> f64 {
        let r = self.residual(paths, basis, z);
        -self.count() * r.iter().map(|x| x.norm_sqr()).sum::<f64>() / self.sigma2
    }

    /// `Σ_s log p(h_s | z, Θ)` for every hypothesis in canonical order.
    pub fn logliks(&self, paths: &[PathParams], basis: &Basis) -> Vec<f64> {
        let c = self.log_norm();
        (0..1usize << paths.len()).map(|z| c + self.fit_term(paths, basis, z)).collect()
    }

    /// `Σ_z p(z) [Σ_s log p(h_s | z, Θ) + log 2^-L]`, split into the
    /// constant part and the parameter-dependent part so that line searches
    /// compare the small varying term directly.
    pub fn q_parts(&self, paths: &[PathParams], basis: &Basis, post: &PosteriorZ) -> (f64, f64) {
        let constant = self.log_norm() - paths.len() as f64 * LN_2;
        let varying =
            post.probs().enumerate().filter(|(_, p)| *p > 0.0).map(|(z, p)| p * self.fit_term(paths, basis, z)).sum();
        (constant, varying)
    }

    /// Gradient of Q and, optionally, the Gauss-Newton curvature block of
    /// each path in `(θ, φ, r, Re β, Im β)` coordinates.
    pub fn gradient(
        &self,
        paths: &[PathParams],
        basis: &Basis,
        post: &PosteriorZ,
        curvature: bool,
    ) -> (QGradient, Vec<Block>) {
        let l_count = paths.len();
        let scale = self.count() / self.sigma2;
        let mut grads = vec![PathGradient::default(); l_count];
        for (z, p) in post.probs().enumerate() {
            if p == 0.0 {
                continue;
            }
            let r = self.residual(paths, basis, z);
            for (l, path) in paths.iter().enumerate() {
                let label = label_of(z, l);
                let s = basis.vector(l, label);
                let g = basis.grads(l, label);
                let beta_c = path.beta.conj();
                let proj = |d: &[Complex64]| -> f64 {
                    let inner: Complex64 = d.iter().zip(&r).map(|(a, b)| a.conj() * b).sum();
                    (beta_c * inner).re
                };
                grads[l].d_theta += p * 2.0 * scale * proj(&g.d_theta);
                grads[l].d_phi += p * 2.0 * scale * proj(&g.d_phi);
                if label == Field::Near {
                    grads[l].d_r += p * 2.0 * scale * proj(&g.d_r);
                }
                let rs: Complex64 = r.iter().zip(s).map(|(a, b)| a.conj() * b).sum();
                grads[l].d_beta += rs * (p * scale);
            }
        }
        let blocks = if curvature {
            (0..l_count)
                .map(|l| {
                    let p_near = post.marginal(l, Field::Near);
                    let mut block = [[0.0; PATH_DIM]; PATH_DIM];
                    for (label, w) in [(Field::Near, p_near), (Field::Far, 1.0 - p_near)] {
                        if w > 0.0 {
                            let b = self.gauss_newton_block(&paths[l], basis, l, label);
                            for i in 0..PATH_DIM {
                                for j in 0..PATH_DIM {
                                    block[i][j] += w * b[i][j];
                                }
                            }
                        }
                    }
                    block
                })
                .collect()
        } else {
            Vec::new()
        };
        (QGradient { paths: grads }, blocks)
    }

    /// `(2S/σ²)·Re(JᴴJ)` with `J = [β∂θs, β∂φs, β∂rs, s, js]`.
    fn gauss_newton_block(&self, path: &PathParams, basis: &Basis, l: usize, label: Field) -> Block {
        let s = basis.vector(l, label);
        let g = basis.grads(l, label);
        let j = Complex64::new(0.0, 1.0);
        let cols: [Vec<Complex64>; PATH_DIM] = [
            g.d_theta.iter().map(|x| path.beta * x).collect(),
            g.d_phi.iter().map(|x| path.beta * x).collect(),
            g.d_r.iter().map(|x| path.beta * x).collect(),
            s.to_vec(),
            s.iter().map(|x| j * x).collect(),
        ];
        let scale = 2.0 * self.count() / self.sigma2;
        let mut out = [[0.0; PATH_DIM]; PATH_DIM];
        for a in 0..PATH_DIM {
            for b in a..PATH_DIM {
                let v: f64 = cols[a].iter().zip(&cols[b]).map(|(x, y)| (x.conj() * y).re).sum::<f64>() * scale;
                out[a][b] = v;
                out[b][a] = v;
            }
        }
        out
    }
}

/// Observed-data log-likelihood `log Σ_z p(z) Π_s p(h_s | z, Θ)` from the
/// per-hypothesis values, with the uniform prior `2^-L`.
pub(crate) fn observed_loglik(logliks: &[f64], paths: usize) -> f64 {
    log_sum_exp(logliks) - paths as f64 * LN_2
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Flattens paths into `(θ, φ, r, Re β, Im β)` blocks.
pub(crate) fn to_vector(paths: &[PathParams]) -> Vec<f64> {
    paths.iter().flat_map(|p| [p.theta, p.phi, p.r, p.beta.re, p.beta.im]).collect()
}

pub(crate) fn from_vector(x: &[f64]) -> Vec<PathParams> {
    x.chunks_exact(PATH_DIM).map(|c| PathParams::new(Complex64::new(c[3], c[4]), c[0], c[1], c[2])).collect()
}

pub(crate) fn with_paths(params: &ChannelModelParams, paths: Vec<PathParams>) -> ChannelModelParams {
    ChannelModelParams { paths, sigma2: params.sigma2 }
}
