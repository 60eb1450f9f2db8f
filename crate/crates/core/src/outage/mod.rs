//! Outage probability of the single-user link.
//!
//! With `h ~ CN(μ, σ² I)`, the normalised energy `2‖h‖²/σ²` is non-central
//! chi-squared with `2N` degrees of freedom and non-centrality
//! `‖μ‖²/(σ²/2)`. The outage event `log2(1 + P_T‖h‖²/σ̂²) < R_th` is the
//! event that this energy falls below `(2^R_th - 1)σ̂²/(P_T σ²/2)`.

mod special;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use num_complex::Complex64;

use crate::channel::{complex_normal, mean_channel, ChannelModelParams, FieldHypothesis};
use crate::error::{domain, Result};
use crate::rng::StreamKey;
use crate::steering::ArrayGeometry;

pub use special::{
    gamma, ln_gamma, lower_incomplete_gamma, regularized_gamma_pq, regularized_lower_gamma, upper_incomplete_gamma,
};

/// Poisson tail mass below which the mixture series is truncated.
const TAIL_MASS: f64 = 1e-15;

/// Rate target and link budget, all in linear units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpQuery {
    /// Target rate, bits/s/Hz.
    pub r_th: f64,
    /// Transmit power, watts.
    pub p_t: f64,
    /// Receiver noise variance, watts.
    pub noise_var: f64,
}

impl OpQuery {
    pub fn new(r_th: f64, p_t: f64, noise_var: f64) -> Result<Self> {
        let q = OpQuery { r_th, p_t, noise_var };
        q.validate()?;
        Ok(q)
    }

    pub fn from_dbm(r_th: f64, p_t_dbm: f64, noise_dbm: f64) -> Result<Self> {
        Self::new(r_th, dbm_to_watts(p_t_dbm), dbm_to_watts(noise_dbm))
    }

    pub fn with_rate(self, r_th: f64) -> Self {
        OpQuery { r_th, ..self }
    }

    fn validate(&self) -> Result<()> {
        if !(self.r_th >= 0.0 && self.r_th.is_finite()) {
            return domain(format!("target rate must be >= 0, got {}", self.r_th));
        }
        if !(self.p_t > 0.0) || !(self.noise_var > 0.0) {
            return domain("transmit power and noise variance must be positive");
        }
        Ok(())
    }

    /// `P_T/σ̂²`.
    pub fn snr_scale(&self) -> f64 {
        self.p_t / self.noise_var
    }

    /// Channel energy `‖h‖²` at which the rate equals `r_th`.
    pub fn energy_threshold(&self) -> f64 {
        (self.r_th * std::f64::consts::LN_2).exp_m1() / self.snr_scale()
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Rate `log2(1 + P_T‖h‖²/σ̂²)` for a given channel energy.
pub fn rate_for_energy(energy: f64, p_t: f64, noise_var: f64) -> f64 {
    (p_t / noise_var * energy).ln_1p() / std::f64::consts::LN_2
}

/// Non-centrality `‖μ‖²/(σ²/2)`.
pub fn noncentrality(mean: &[Complex64], sigma2: f64) -> f64 {
    mean.iter().map(|z| z.norm_sqr()).sum::<f64>() / (sigma2 / 2.0)
}

/// CDF of the non-central chi-squared distribution with `k` degrees of
/// freedom and non-centrality `lambda`.
///
/// Evaluated as the Poisson(λ/2) mixture of central CDFs
/// `P((k + 2t)/2, x/2)`. Summation starts at the Poisson mode and walks
/// outwards until the geometric bound on the remaining weight drops below
/// `1e-15`, so large `lambda` never underflows the leading terms.
pub fn noncentral_chi2_cdf(x: f64, k: f64, lambda: f64) -> Result<f64> {
    if !(k > 0.0 && k.is_finite()) {
        return domain(format!("degrees of freedom must be positive, got {k}"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return domain(format!("non-centrality must be >= 0, got {lambda}"));
    }
    if x.is_nan() || x < 0.0 {
        return domain(format!("chi-squared argument must be >= 0, got {x}"));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    let half_x = x / 2.0;
    if lambda == 0.0 {
        return regularized_lower_gamma(k / 2.0, half_x);
    }
    let mu = lambda / 2.0;
    let log_weight = |t: f64| -mu + t * mu.ln() - ln_gamma(t + 1.0);
    let mode = mu.floor();
    let mut total = 0.0;

    // Upward from the mode: w_{t+1}/w_t = mu/(t+1) <= 1.
    let mut t = mode;
    loop {
        let w = log_weight(t).exp();
        let p = regularized_lower_gamma(k / 2.0 + t, half_x)?;
        total += w * p;
        let ratio = mu / (t + 1.0);
        // P is non-increasing in t, so the remaining mass is bounded by
        // w·p·ratio/(1 - ratio).
        let bound = if ratio < 1.0 { w * p * ratio / (1.0 - ratio) } else { f64::INFINITY };
        if bound < TAIL_MASS || (w * p == 0.0 && t > mode) {
            break;
        }
        t += 1.0;
    }

    // Downward: w_{t-1}/w_t = t/mu < 1, P <= 1.
    let mut t = mode - 1.0;
    while t >= 0.0 {
        let w = log_weight(t).exp();
        let p = regularized_lower_gamma(k / 2.0 + t, half_x)?;
        total += w * p;
        let ratio = t / mu;
        let bound = if ratio < 1.0 { w * ratio / (1.0 - ratio) } else { f64::INFINITY };
        if bound < TAIL_MASS {
            break;
        }
        t -= 1.0;
    }
    Ok(total.clamp(0.0, 1.0))
}

/// Analytic outage probability for `h ~ CN(mean, σ² I)`.
pub fn outage_probability_analytic(mean: &[Complex64], sigma2: f64, q: &OpQuery) -> Result<f64> {
    q.validate()?;
    if !(sigma2 > 0.0) {
        return domain("diffuse variance must be positive");
    }
    let x = q.energy_threshold() / (sigma2 / 2.0);
    noncentral_chi2_cdf(x, 2.0 * mean.len() as f64, noncentrality(mean, sigma2))
}

/// Outage curve over a list of rate targets.
pub fn outage_curve_analytic(
    mean: &[Complex64],
    sigma2: f64,
    rates: &[f64],
    p_t: f64,
    noise_var: f64,
) -> Result<Vec<f64>> {
    rates.iter().map(|&r| outage_probability_analytic(mean, sigma2, &OpQuery::new(r, p_t, noise_var)?)).collect()
}

/// Draws per Monte Carlo batch; batch `b` uses substream `b`.
pub const MC_BATCH: usize = 2048;

/// Monte Carlo outage curve: one set of `n_samples` channel draws is shared
/// by every rate target. Draws are generated batch by batch and never held
/// all at once; outage counts are integers, so the parallel reduction is
/// exact.
pub fn outage_curve_mc(
    geom: &ArrayGeometry,
    params: &ChannelModelParams,
    z: &FieldHypothesis,
    rates: &[f64],
    p_t: f64,
    noise_var: f64,
    n_samples: usize,
    key: StreamKey,
) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return domain("Monte Carlo sample count must be >= 1");
    }
    let thresholds =
        rates.iter().map(|&r| Ok(OpQuery::new(r, p_t, noise_var)?.energy_threshold())).collect::<Result<Vec<f64>>>()?;
    let mean = mean_channel(geom, params, z)?;
    let sigma2 = params.sigma2;
    let batches = n_samples.div_ceil(MC_BATCH);
    let counts = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = key.rng(b as u64);
            let size = MC_BATCH.min(n_samples - b * MC_BATCH);
            let mut counts = vec![0u64; thresholds.len()];
            for _ in 0..size {
                let energy: f64 = mean.iter().map(|m| (m + complex_normal(&mut rng, sigma2)).norm_sqr()).sum();
                for (c, &t) in counts.iter_mut().zip(&thresholds) {
                    // rate < r_th  <=>  energy < threshold
                    if energy < t {
                        *c += 1;
                    }
                }
            }
            counts
        })
        .reduce(
            || vec![0u64; thresholds.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    Ok(counts.into_iter().map(|c| c as f64 / n_samples as f64).collect())
}

/// Monte Carlo outage probability at a single rate target.
pub fn outage_probability_mc(
    geom: &ArrayGeometry,
    params: &ChannelModelParams,
    z: &FieldHypothesis,
    q: &OpQuery,
    n_samples: usize,
    key: StreamKey,
) -> Result<f64> {
    q.validate()?;
    Ok(outage_curve_mc(geom, params, z, &[q.r_th], q.p_t, q.noise_var, n_samples, key)?[0])
}
