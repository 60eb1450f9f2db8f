//! Grid-dictionary benchmark estimators: far-field OMP and polar-domain
//! simultaneous OMP.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelModelParams, ChannelSampleSet, FieldHypothesis, PathParams};
use crate::em::{self, Bounds, EmConfig, Objective, PosteriorZ};
use crate::error::{Error, Result};
use crate::linalg::{norm_sqr, Projector};
use crate::steering::{steering, ArrayGeometry, Field};

/// Grid layout shared by both dictionary kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_theta: usize,
    pub n_phi: usize,
    /// Number of near-field distance rings (polar dictionaries only).
    pub n_dist: usize,
    pub theta_range: (f64, f64),
    pub phi_range: (f64, f64),
    /// Innermost ring, meters.
    pub r_min: f64,
    /// Outermost ring, meters; far-field atoms report this range.
    pub r_max: f64,
}

impl GridSpec {
    /// `N2 × N1` angle grid with three rings, giving `M = 4N` polar atoms.
    pub fn for_geometry(geom: &ArrayGeometry) -> Self {
        GridSpec {
            n_theta: geom.n2(),
            n_phi: geom.n1(),
            n_dist: 3,
            theta_range: (PI / 3.0, 2.0 * PI / 3.0),
            phi_range: (-PI / 6.0, PI / 6.0),
            r_min: em::default_min_range(geom),
            r_max: geom.rayleigh_distance(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_theta == 0 || self.n_phi == 0 {
            return Err(Error::Domain("grid counts must be >= 1".into()));
        }
        if !(self.r_min > 0.0 && self.r_min <= self.r_max && self.r_max.is_finite()) {
            return Err(Error::Domain(format!("invalid ring range [{}, {}]", self.r_min, self.r_max)));
        }
        Ok(())
    }

    /// Ring ranges, uniform in `1/r` from `1/r_max` to `1/r_min`.
    pub fn rings(&self) -> Vec<f64> {
        let (lo, hi) = (1.0 / self.r_max, 1.0 / self.r_min);
        match self.n_dist {
            0 => Vec::new(),
            1 => vec![self.r_max],
            n => (0..n).map(|i| 1.0 / (lo + (hi - lo) * i as f64 / (n - 1) as f64)).collect(),
        }
    }
}

fn grid(count: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    if count == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}

/// Location of one dictionary atom; `r` is `None` for planar atoms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomParams {
    pub theta: f64,
    pub phi: f64,
    pub r: Option<f64>,
    pub label: Field,
}

/// Unit-norm steering atoms stored contiguously, one per column.
#[derive(Debug, Clone)]
pub struct Dictionary {
    geom: ArrayGeometry,
    atoms: Vec<Complex64>,
    params: Vec<AtomParams>,
    far_range: f64,
}

impl Dictionary {
    fn build(geom: &ArrayGeometry, params: Vec<AtomParams>, far_range: f64) -> Result<Self> {
        let n = geom.len();
        let mut atoms = vec![Complex64::new(0.0, 0.0); n * params.len()];
        atoms.par_chunks_mut(n).zip(params.par_iter()).try_for_each(|(out, a)| -> Result<()> {
            let s = steering(geom, a.theta, a.phi, a.r.unwrap_or(far_range), a.label)?;
            out.copy_from_slice(&s);
            Ok(())
        })?;
        Ok(Dictionary { geom: *geom, atoms, params, far_range })
    }

    /// Planar atoms on the angle grid of `spec`.
    pub fn far(geom: &ArrayGeometry, spec: &GridSpec) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::with_capacity(spec.n_theta * spec.n_phi);
        for &theta in &grid(spec.n_theta, spec.theta_range) {
            for &phi in &grid(spec.n_phi, spec.phi_range) {
                params.push(AtomParams { theta, phi, r: None, label: Field::Far });
            }
        }
        Self::build(geom, params, spec.r_max)
    }

    /// Spherical atoms on the angle grid times each ring, plus the planar
    /// atom for every angle pair.
    pub fn polar(geom: &ArrayGeometry, spec: &GridSpec) -> Result<Self> {
        spec.validate()?;
        let rings = spec.rings();
        let mut params = Vec::with_capacity(spec.n_theta * spec.n_phi * (rings.len() + 1));
        for &theta in &grid(spec.n_theta, spec.theta_range) {
            for &phi in &grid(spec.n_phi, spec.phi_range) {
                for &r in &rings {
                    params.push(AtomParams { theta, phi, r: Some(r), label: Field::Near });
                }
                params.push(AtomParams { theta, phi, r: None, label: Field::Far });
            }
        }
        Self::build(geom, params, spec.r_max)
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geom
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn atom(&self, m: usize) -> &[Complex64] {
        let n = self.geom.len();
        &self.atoms[m * n..(m + 1) * n]
    }

    pub fn atom_params(&self, m: usize) -> &AtomParams {
        &self.params[m]
    }

    /// Range reported for planar atoms.
    pub fn far_range(&self) -> f64 {
        self.far_range
    }

    /// Atom maximising `Σ_s |aᴴ r_s|²`, skipping `exclude`; ties resolve to
    /// the lowest index. `None` when every score vanishes.
    pub(crate) fn best_match(&self, residuals: &[Vec<Complex64>], exclude: &[usize]) -> Option<usize> {
        let n = self.geom.len();
        let scores: Vec<f64> = self
            .atoms
            .par_chunks(n)
            .map(|a| {
                residuals.iter().map(|r| a.iter().zip(r).map(|(x, y)| x.conj() * y).sum::<Complex64>().norm_sqr()).sum()
            })
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (m, &s) in scores.iter().enumerate() {
            if exclude.contains(&m) || !(s > 0.0) {
                continue;
            }
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((m, s));
            }
        }
        best.map(|(m, _)| m)
    }
}

/// Far-field dictionary over the default angle ranges.
pub fn build_far_dictionary(geom: &ArrayGeometry, n_theta: usize, n_phi: usize) -> Result<Dictionary> {
    Dictionary::far(geom, &GridSpec { n_theta, n_phi, ..GridSpec::for_geometry(geom) })
}

/// Polar dictionary over the default angle and range limits.
pub fn build_polar_dictionary(geom: &ArrayGeometry, n_theta: usize, n_phi: usize, n_dist: usize) -> Result<Dictionary> {
    Dictionary::polar(geom, &GridSpec { n_theta, n_phi, n_dist, ..GridSpec::for_geometry(geom) })
}

/// Result of [`somp_fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct SompFit {
    /// Estimated paths; `sigma2` is the mean residual power per element.
    pub params: ChannelModelParams,
    pub labels: FieldHypothesis,
    /// Selected atom indices in selection order.
    pub atoms: Vec<usize>,
    /// `Σ_s ‖residual_s‖²` after each selection.
    pub residual_energy: Vec<f64>,
    /// Selection stopped early because the next atom was linearly dependent
    /// on those already chosen.
    pub rank_deficient: bool,
}

/// Options for [`somp_fit_with`].
#[derive(Debug, Clone, Default)]
pub struct SompOptions {
    /// Polish the selected atoms off-grid with the EM M-step under the
    /// selected labels.
    pub refine: Option<EmConfig>,
}

/// Greedy simultaneous OMP selecting `paths` atoms.
pub fn somp_fit(h: &ChannelSampleSet, dict: &Dictionary, paths: usize) -> Result<SompFit> {
    somp_fit_with(h, dict, paths, &SompOptions::default())
}

pub fn somp_fit_with(h: &ChannelSampleSet, dict: &Dictionary, paths: usize, opts: &SompOptions) -> Result<SompFit> {
    let n = dict.geom.len();
    if h.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: h.dim() });
    }
    if h.is_empty() {
        return Err(Error::Domain("sample set is empty".into()));
    }
    if paths > dict.len() {
        return Err(Error::Domain(format!("{paths} paths requested from {} atoms", dict.len())));
    }
    let samples: Vec<&[Complex64]> = h.iter().collect();
    let mut residuals: Vec<Vec<Complex64>> = samples.iter().map(|s| s.to_vec()).collect();
    let mut selected: Vec<usize> = Vec::with_capacity(paths);
    let mut energy = Vec::with_capacity(paths);
    let mut rank_deficient = false;
    while selected.len() < paths {
        let Some(best) = dict.best_match(&residuals, &selected) else {
            rank_deficient = true;
            break;
        };
        let mut trial = selected.clone();
        trial.push(best);
        let atoms: Vec<&[Complex64]> = trial.iter().map(|&m| dict.atom(m)).collect();
        let Some(proj) = Projector::new(&atoms) else {
            rank_deficient = true;
            break;
        };
        residuals = samples.iter().map(|s| proj.residual(s)).collect();
        energy.push(residuals.iter().map(|r| norm_sqr(r)).sum());
        selected = trial;
    }

    let stats = h.stats();
    let atoms: Vec<&[Complex64]> = selected.iter().map(|&m| dict.atom(m)).collect();
    let beta = Projector::new(&atoms).map(|p| p.coefficients(&stats.mean)).unwrap_or_default();
    let mut path_params = Vec::with_capacity(selected.len());
    let mut labels = Vec::with_capacity(selected.len());
    for (&m, &b) in selected.iter().zip(&beta) {
        let a = dict.atom_params(m);
        path_params.push(PathParams::new(b, a.theta, a.phi, a.r.unwrap_or(dict.far_range)));
        labels.push(a.label);
    }
    let residual_total: f64 = energy.last().copied().unwrap_or_else(|| samples.iter().map(|s| norm_sqr(s)).sum());
    let sigma2 = (residual_total / (h.len() * n) as f64).max(f64::MIN_POSITIVE);
    let mut params = ChannelModelParams { paths: path_params, sigma2 };
    let labels = FieldHypothesis::new(labels);

    if let Some(cfg) = &opts.refine {
        if !params.is_empty() {
            let post = PosteriorZ::point_mass(&labels)?;
            let obj = Objective::new(&dict.geom, &stats, sigma2)?;
            let mut bounds = Bounds::new(cfg, &dict.geom);
            bounds.r = (bounds.r.0.min(dict.far_range), bounds.r.1.max(dict.far_range));
            params = em::maximize(&obj, &params, &post, cfg, &bounds)?.params;
        }
    }
    Ok(SompFit { params, labels, atoms: selected, residual_energy: energy, rank_deficient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{mean_channel, ChannelSampleSet};
    use crate::linalg::dot;

    fn geom() -> ArrayGeometry {
        ArrayGeometry::half_wavelength(32, 8, 0.01).unwrap()
    }

    #[test]
    fn grid_cardinalities() {
        let g = geom();
        assert_eq!(build_far_dictionary(&g, 5, 7).unwrap().len(), 35);
        assert_eq!(build_polar_dictionary(&g, 4, 6, 3).unwrap().len(), 4 * 6 * 4);
        let single = build_far_dictionary(&g, 1, 1).unwrap();
        let a = single.atom_params(0);
        assert!((a.theta - PI / 2.0).abs() < 1e-15 && a.phi.abs() < 1e-15);
    }

    #[test]
    fn atoms_are_unit_norm() {
        let d = build_polar_dictionary(&geom(), 4, 8, 3).unwrap();
        for m in 0..d.len() {
            assert!((norm_sqr(d.atom(m)).sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn single_ring_sits_on_far_field_boundary() {
        let g = geom();
        let d = build_polar_dictionary(&g, 2, 3, 1).unwrap();
        for m in (0..d.len()).step_by(2) {
            assert_eq!(d.atom_params(m).r, Some(g.rayleigh_distance()));
            assert_eq!(d.atom_params(m + 1).label, Field::Far);
            assert!(dot(d.atom(m), d.atom(m + 1)).norm() > 0.9);
        }
    }

    #[test]
    fn adjacent_rings_are_distinct() {
        let d = build_polar_dictionary(&geom(), 1, 1, 4).unwrap();
        for m in 0..3 {
            assert!(dot(d.atom(m), d.atom(m + 1)).norm() < 1.0 - 1e-3);
        }
    }

    fn noiseless(dict: &Dictionary, picks: &[(usize, Complex64)], copies: usize) -> ChannelSampleSet {
        let n = dict.geometry().len();
        let mut h = vec![Complex64::new(0.0, 0.0); n];
        for &(m, b) in picks {
            for (x, a) in h.iter_mut().zip(dict.atom(m)) {
                *x += b * a;
            }
        }
        ChannelSampleSet::from_samples(vec![h; copies]).unwrap()
    }

    #[test]
    fn recovers_single_atom_exactly() {
        let d = build_polar_dictionary(&geom(), 4, 8, 3).unwrap();
        let b = Complex64::new(1e-3, -2e-3);
        let fit = somp_fit(&noiseless(&d, &[(37, b)], 3), &d, 1).unwrap();
        assert_eq!(fit.atoms, vec![37]);
        assert!((fit.params.paths[0].beta - b).norm() / b.norm() < 1e-10);
        assert_eq!(fit.labels.labels[0], d.atom_params(37).label);
    }

    #[test]
    fn recovers_orthogonal_pair() {
        // Broadside-elevation far atoms at the two azimuth extremes of a
        // 32-wide grid are nearly orthogonal.
        let d = build_far_dictionary(&geom(), 1, 9).unwrap();
        let (a, b) = (0, 8);
        assert!(dot(d.atom(a), d.atom(b)).norm() < 0.5);
        let fit = somp_fit(&noiseless(&d, &[(a, Complex64::new(0.4, 0.1)), (b, Complex64::new(-0.5, 0.3))], 2), &d, 2)
            .unwrap();
        let mut got = fit.atoms.clone();
        got.sort();
        assert_eq!(got, vec![a, b]);
    }

    #[test]
    fn residual_energy_is_non_increasing() {
        let g = geom();
        let d = build_polar_dictionary(&g, 8, 16, 3).unwrap();
        let params = ChannelModelParams::new(
            vec![
                PathParams::new(Complex64::new(1.0, 0.5), 1.4, 0.2, 1.3),
                PathParams::new(Complex64::new(-0.3, 0.8), 1.9, -0.35, 12.0),
                PathParams::new(Complex64::new(0.2, 0.2), 1.2, 0.05, 3.0),
            ],
            0.1,
        )
        .unwrap();
        let z = FieldHypothesis::new(vec![Field::Near, Field::Far, Field::Near]);
        let mean = mean_channel(&g, &params, &z).unwrap();
        let h = ChannelSampleSet::from_samples(vec![mean]).unwrap();
        let fit = somp_fit(&h, &d, 6).unwrap();
        assert_eq!(fit.residual_energy.len(), 6);
        for w in fit.residual_energy.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn zero_signal_stops_early() {
        let d = build_far_dictionary(&geom(), 2, 2).unwrap();
        let h = ChannelSampleSet::from_samples(vec![vec![Complex64::new(0.0, 0.0); 256]]).unwrap();
        let fit = somp_fit(&h, &d, 2).unwrap();
        assert!(fit.rank_deficient && fit.atoms.is_empty());
    }

    #[test]
    fn refinement_moves_off_grid() {
        let g = geom();
        let d = build_far_dictionary(&g, 8, 16).unwrap();
        let truth = ChannelModelParams::new(vec![PathParams::new(Complex64::new(2e-3, 1e-3), 1.61, 0.071, 10.0)], 1e-9)
            .unwrap();
        let z = FieldHypothesis::uniform(1, Field::Far);
        let h = ChannelSampleSet::from_samples(vec![mean_channel(&g, &truth, &z).unwrap()]).unwrap();
        let plain = somp_fit(&h, &d, 1).unwrap();
        let refined = somp_fit_with(&h, &d, 1, &SompOptions { refine: Some(EmConfig::default()) }).unwrap();
        let err = |f: &SompFit| (f.params.paths[0].theta - 1.61).abs() + (f.params.paths[0].phi - 0.071).abs();
        assert!(err(&refined) < 1e-6 && err(&refined) < err(&plain));
    }
}
