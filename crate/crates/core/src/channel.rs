//! Generative near/far-field channel model.
//!
//! A channel realisation is `h = Σ_l β_l s(θ_l, φ_l, r_l | z_l) + Z` with
//! `Z ~ CN(0, σ² I)`; the label `z_l` selects the spherical (near) or planar
//! (far) steering kernel for path `l`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::rng::StreamKey;
use crate::steering::{steering, ArrayGeometry, Field};

/// One deterministic path: complex gain, elevation, azimuth and range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub beta: Complex64,
    pub theta: f64,
    pub phi: f64,
    pub r: f64,
}

impl PathParams {
    pub fn new(beta: Complex64, theta: f64, phi: f64, r: f64) -> Self {
        PathParams { beta, theta, phi, r }
    }
}

/// Near/far label per path.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldHypothesis {
    pub labels: Vec<Field>,
}

impl FieldHypothesis {
    pub fn new(labels: Vec<Field>) -> Self {
        FieldHypothesis { labels }
    }

    pub fn uniform(len: usize, label: Field) -> Self {
        FieldHypothesis { labels: vec![label; len] }
    }

    /// Decodes the canonical index, path 0 in the least-significant bit.
    pub fn from_index(index: usize, len: usize) -> Self {
        FieldHypothesis { labels: (0..len).map(|l| Field::from_bit(((index >> l) & 1) as u8)).collect() }
    }

    pub fn index(&self) -> usize {
        self.labels.iter().enumerate().map(|(l, f)| (f.bit() as usize) << l).sum()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count(&self, label: Field) -> usize {
        self.labels.iter().filter(|&&f| f == label).count()
    }
}

/// Paths plus the diffuse-component variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModelParams {
    pub paths: Vec<PathParams>,
    pub sigma2: f64,
}

impl ChannelModelParams {
    pub fn new(paths: Vec<PathParams>, sigma2: f64) -> Result<Self> {
        if paths.is_empty() {
            return domain("at least one path is required");
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return domain(format!("diffuse variance must be positive, got {sigma2}"));
        }
        Ok(ChannelModelParams { paths, sigma2 })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.sigma2.is_finite()
            && self.paths.iter().all(|p| {
                p.beta.re.is_finite()
                    && p.beta.im.is_finite()
                    && p.theta.is_finite()
                    && p.phi.is_finite()
                    && p.r.is_finite()
            })
    }
}

/// `S` channel observations of common length `N`, stored sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSampleSet {
    n: usize,
    data: Vec<Complex64>,
}

impl ChannelSampleSet {
    pub fn from_samples(samples: Vec<Vec<Complex64>>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return domain("sample set must contain at least one sample");
        };
        let n = first.len();
        if n == 0 {
            return domain("samples must be non-empty");
        }
        let mut data = Vec::with_capacity(n * samples.len());
        for s in &samples {
            if s.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: s.len() });
            }
            data.extend_from_slice(s);
        }
        Ok(ChannelSampleSet { n, data })
    }

    pub fn from_flat(n: usize, data: Vec<Complex64>) -> Result<Self> {
        if n == 0 || data.is_empty() || !data.len().is_multiple_of(n) {
            return Err(Error::Format(format!("{} values do not form samples of length {n}", data.len())));
        }
        Ok(ChannelSampleSet { n, data })
    }

    /// Number of samples `S`.
    pub fn len(&self) -> usize {
        self.data.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Per-sample length `N`.
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn sample(&self, s: usize) -> &[Complex64] {
        &self.data[s * self.n..(s + 1) * self.n]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[Complex64]> {
        self.data.chunks_exact(self.n)
    }

    pub fn as_flat(&self) -> &[Complex64] {
        &self.data
    }

    /// Sample mean and total scatter `Σ_s ‖h_s - h̄‖²`.
    pub fn stats(&self) -> SampleStats {
        let s = self.len();
        let mut mean = vec![Complex64::new(0.0, 0.0); self.n];
        for h in self.iter() {
            for (m, x) in mean.iter_mut().zip(h) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= s as f64;
        }
        let scatter = self.iter().map(|h| h.iter().zip(&mean).map(|(x, m)| (x - m).norm_sqr()).sum::<f64>()).sum();
        SampleStats { count: s, mean, scatter }
    }
}

/// Sufficient statistics of a sample set under an isotropic Gaussian model:
/// `Σ_s ‖h_s - μ‖² = scatter + S·‖h̄ - μ‖²` for any `μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStats {
    pub count: usize,
    pub mean: Vec<Complex64>,
    pub scatter: f64,
}

/// Scenario description for [`draw_scenario`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub geometry: ArrayGeometry,
    pub paths: usize,
    /// Ratio of near-field to far-field path counts; `inf` means all near.
    pub gamma: f64,
    pub k_db: f64,
    pub theta_range: (f64, f64),
    pub phi_range: (f64, f64),
    /// Lower end of the near-field range draw, meters.
    pub r_min: f64,
    /// Far-field ranges are drawn from `[r_RD, far_range_factor · r_RD]`.
    pub far_range_factor: f64,
    /// Reject `gamma` values that do not map to an integer near count.
    pub strict_gamma: bool,
}

impl ScenarioConfig {
    /// Near-path count `round(L·γ/(1+γ))`.
    pub fn near_count(&self) -> Result<usize> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Infeasible(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        let l = self.paths as f64;
        let exact = if self.gamma.is_infinite() { l } else { l * self.gamma / (1.0 + self.gamma) };
        let near = exact.round();
        if self.strict_gamma && (exact - near).abs() > 1e-9 {
            return Err(Error::Infeasible(format!(
                "gamma = {} cannot be realised with {} paths ({exact} near paths)",
                self.gamma, self.paths
            )));
        }
        Ok(near as usize)
    }

    fn validate(&self) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::Infeasible("scenario needs at least one path".into()));
        }
        if !self.k_db.is_finite() {
            return Err(Error::Infeasible(format!("K = {} dB is not finite", self.k_db)));
        }
        let (t0, t1) = self.theta_range;
        let (p0, p1) = self.phi_range;
        if !(0.0 < t0 && t0 <= t1 && t1 < PI) {
            return Err(Error::Infeasible(format!("elevation range ({t0}, {t1}) outside (0, pi)")));
        }
        if !(-PI / 2.0 < p0 && p0 <= p1 && p1 < PI / 2.0) {
            return Err(Error::Infeasible(format!("azimuth range ({p0}, {p1}) outside (-pi/2, pi/2)")));
        }
        let rd = self.geometry.rayleigh_distance();
        if !(self.r_min > 0.0 && self.r_min < rd) {
            return Err(Error::Infeasible(format!(
                "near-field range [{}, {rd}] m is empty for this array",
                self.r_min
            )));
        }
        if !(self.far_range_factor >= 1.0) {
            return Err(Error::Infeasible("far range factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// Deterministic component `Σ_l β_l s(θ_l, φ_l, r_l | z_l)`.
pub fn mean_channel(geom: &ArrayGeometry, params: &ChannelModelParams, z: &FieldHypothesis) -> Result<Vec<Complex64>> {
    if z.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), got: z.len() });
    }
    let mut out = vec![Complex64::new(0.0, 0.0); geom.len()];
    for (p, &label) in params.paths.iter().zip(&z.labels) {
        let s = steering(geom, p.theta, p.phi, p.r, label)?;
        for (o, x) in out.iter_mut().zip(s.iter()) {
            *o += p.beta * x;
        }
    }
    Ok(out)
}

/// Diffuse variance giving a deterministic-to-diffuse power ratio of
/// `k_db`, using `E‖Z‖² = N·σ²`.
pub fn sigma2_for_k(mean: &[Complex64], k_db: f64, n: usize) -> Result<f64> {
    let power: f64 = mean.iter().map(|z| z.norm_sqr()).sum();
    if power <= 0.0 || !power.is_finite() {
        return domain("deterministic component has zero power");
    }
    if n == 0 || !k_db.is_finite() {
        return domain("element count must be >= 1 and K finite");
    }
    Ok(power / (n as f64 * 10f64.powf(k_db / 10.0)))
}

/// Circularly-symmetric complex normal with variance `var`.
pub(crate) fn complex_normal<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let sd = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(sd * re, sd * im)
}

/// Draws `count` i.i.d. channels `mean + CN(0, σ² I)`. Sample `s` uses
/// substream `s` of `key`, so the output does not depend on thread count.
pub fn sample_channels(
    geom: &ArrayGeometry,
    params: &ChannelModelParams,
    z: &FieldHypothesis,
    count: usize,
    key: StreamKey,
) -> Result<ChannelSampleSet> {
    if count == 0 {
        return domain("sample count must be >= 1");
    }
    if !(params.sigma2 > 0.0) {
        return domain("diffuse variance must be positive");
    }
    let mean = mean_channel(geom, params, z)?;
    let n = mean.len();
    let sigma2 = params.sigma2;
    let mut data = vec![Complex64::new(0.0, 0.0); n * count];
    data.par_chunks_mut(n).enumerate().for_each(|(s, row)| {
        let mut rng = key.rng(s as u64);
        for (x, m) in row.iter_mut().zip(&mean) {
            *x = m + complex_normal(&mut rng, sigma2);
        }
    });
    Ok(ChannelSampleSet { n, data })
}

/// Draws path parameters and labels for a scenario.
///
/// The first `round(L·γ/(1+γ))` paths are near-field. Every path consumes
/// the same five variates in the same order (θ, φ, a range quantile, and the
/// two gain components), so scenarios that differ only in `gamma` or `k_db`
/// share their angles and gains under a common stream.
pub fn draw_scenario<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<(ChannelModelParams, FieldHypothesis)> {
    cfg.validate()?;
    let near = cfg.near_count()?;
    let geom = &cfg.geometry;
    let rd = geom.rayleigh_distance();
    let lambda = geom.wavelength();
    let mut paths = Vec::with_capacity(cfg.paths);
    let mut labels = Vec::with_capacity(cfg.paths);
    for l in 0..cfg.paths {
        let theta = uniform(rng, cfg.theta_range);
        let phi = uniform(rng, cfg.phi_range);
        let q: f64 = rng.random();
        let gain = complex_normal(rng, 1.0);
        let (label, r) = if l < near {
            (Field::Near, cfg.r_min + q * (rd - cfg.r_min))
        } else {
            (Field::Far, rd * (1.0 + q * (cfg.far_range_factor - 1.0)))
        };
        paths.push(PathParams::new(gain * (lambda / (4.0 * PI * r)), theta, phi, r));
        labels.push(label);
    }
    let z = FieldHypothesis::new(labels);
    let mut params = ChannelModelParams { paths, sigma2: 1.0 };
    let mean = mean_channel(geom, &params, &z)?;
    params.sigma2 = sigma2_for_k(&mean, cfg.k_db, geom.len())?;
    Ok((params, z))
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
