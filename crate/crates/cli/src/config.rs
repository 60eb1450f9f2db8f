//! Experiment configuration.
//!
//! A config file is TOML. Every key is optional and falls back to the
//! selected profile; unknown keys are rejected with the offending line.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use nearfar_core::baselines::GridSpec;
use nearfar_core::channel::ScenarioConfig;
use nearfar_core::em::{self, EmConfig};
use nearfar_core::steering::ArrayGeometry;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Built-in default sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-scale 256 × 16 array.
    Paper,
    /// 32 × 8 array that runs in seconds.
    Desk,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(format!("unknown profile `{other}` (expected paper or desk)")),
        }
    }
}

/// Estimation or reference scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// EM over near/far labels.
    Proposed,
    /// OMP on a far-field dictionary.
    Far,
    /// Simultaneous OMP on a polar dictionary.
    Near,
    /// Monte Carlo on the generating model.
    Mc,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Proposed => "proposed",
            Scheme::Far => "far",
            Scheme::Near => "near",
            Scheme::Mc => "mc",
        }
    }

    pub const FITTED: [Scheme; 3] = [Scheme::Proposed, Scheme::Far, Scheme::Near];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArraySection {
    pub n1: usize,
    pub n2: usize,
    pub wavelength_mm: f64,
    /// Element spacing; half a wavelength when absent.
    pub spacing_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub paths: usize,
    pub gamma: f64,
    pub k_db: f64,
    pub samples: usize,
    pub theta_deg: [f64; 2],
    pub phi_deg: [f64; 2],
    pub r_min_m: f64,
    pub far_range_factor: f64,
    pub strict_gamma: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerSection {
    pub p_t_dbm: f64,
    pub noise_dbm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpSection {
    /// Explicit target rates, bits/s/Hz; derived per scenario when absent.
    pub r_th: Option<Vec<f64>>,
    /// Size of the derived grid.
    pub grid_points: usize,
    /// Half-width of the derived grid in standard deviations of the
    /// normal approximation to the channel energy.
    pub grid_sigmas: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmSection {
    pub delta: f64,
    pub max_em_iters: usize,
    pub max_grad_iters: usize,
    pub armijo_c: f64,
    pub armijo_rho: f64,
    pub max_backtracks: usize,
    pub step0: f64,
    pub precondition: bool,
    pub restarts: usize,
    /// Range search interval; `r_min_m` defaults to the smaller of the
    /// scenario's `r_min_m` and the estimator default, `r_max_m` to r_RD.
    pub r_min_m: Option<f64>,
    pub r_max_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    /// `[n_theta, n_phi]`; `[2·N2, 2·N1]` when absent.
    pub far_grid: Option<[usize; 2]>,
    /// `[n_theta, n_phi, n_dist]`; `[N2, N1, 3]` when absent.
    pub polar_grid: Option<[usize; 3]>,
    /// Off-grid polish of the selected atoms.
    pub refine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    KDb,
    N1,
    Gamma,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::KDb => "k_db",
            SweepAxis::N1 => "n1",
            SweepAxis::Gamma => "gamma",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Independent scenarios averaged per sweep point.
    #[serde(default = "one")]
    pub trials: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Where outputs go; not part of the hashed configuration.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    pub schemes: Vec<Scheme>,
    pub mc_samples: usize,
    pub array: ArraySection,
    pub scenario: ScenarioSection,
    pub power: PowerSection,
    pub op: OpSection,
    pub em: EmSection,
    pub baselines: BaselineSection,
    pub sweep: Option<SweepSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            profile: Profile::Desk,
            seed: 1,
            output_dir: PathBuf::from("nearfar-out"),
            schemes: vec![Scheme::Proposed, Scheme::Far, Scheme::Near, Scheme::Mc],
            mc_samples: 100_000,
            array: ArraySection { n1: 32, n2: 8, wavelength_mm: 10.0, spacing_mm: None },
            scenario: ScenarioSection {
                paths: 4,
                gamma: 1.0,
                k_db: 5.0,
                samples: 100,
                theta_deg: [60.0, 120.0],
                phi_deg: [-30.0, 30.0],
                r_min_m: 1.0,
                far_range_factor: 4.0,
                strict_gamma: false,
            },
            power: PowerSection { p_t_dbm: 40.0, noise_dbm: -96.0 },
            op: OpSection { r_th: None, grid_points: 41, grid_sigmas: 5.0 },
            em: EmSection {
                delta: 1e-6,
                max_em_iters: 100,
                max_grad_iters: 50,
                armijo_c: 1e-4,
                armijo_rho: 0.5,
                max_backtracks: 40,
                step0: 1.0,
                precondition: true,
                restarts: 4,
                r_min_m: None,
                r_max_m: None,
            },
            baselines: BaselineSection { far_grid: None, polar_grid: None, refine: false },
            sweep: None,
        }
    }

    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.profile = Profile::Paper;
        cfg.array.n1 = 256;
        cfg.array.n2 = 16;
        cfg.scenario.r_min_m = 4.0;
        cfg
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Parses `text` over the profile named in the file, or `profile` when
    /// given, or the desk profile.
    pub fn from_toml(text: &str, profile: Option<Profile>) -> Result<Self, CliError> {
        // Parsing against the typed schema first gives line-precise errors
        // for unknown keys and wrong types.
        let checked: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let user: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let profile = profile.unwrap_or(if user.contains_key("profile") { checked.profile } else { Profile::Desk });
        let mut base =
            toml::Table::try_from(Self::for_profile(profile)).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut base, user);
        base.insert("profile".into(), toml::Value::String(format!("{profile:?}").to_lowercase()));
        let cfg: ExperimentConfig = base.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, profile).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML text; hashed for provenance.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configuration is always serialisable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.array.n1 == 0 || self.array.n2 == 0 {
            return bad("array.n1 and array.n2 must be >= 1".into());
        }
        if !(self.array.wavelength_mm > 0.0) || self.array.spacing_mm.is_some_and(|d| !(d > 0.0)) {
            return bad("array.wavelength_mm and array.spacing_mm must be positive".into());
        }
        if self.scenario.paths == 0 || self.scenario.paths > em::MAX_ENUMERATED_PATHS {
            return bad(format!("scenario.paths must lie in 1..={}", em::MAX_ENUMERATED_PATHS));
        }
        if self.scenario.samples == 0 {
            return bad("scenario.samples must be >= 1".into());
        }
        if self.schemes.is_empty() {
            return bad("schemes must not be empty".into());
        }
        if self.schemes.contains(&Scheme::Mc) && self.mc_samples < 1000 {
            return bad(format!("mc_samples must be >= 1000 when the mc scheme is enabled, got {}", self.mc_samples));
        }
        if let Some(r) = &self.op.r_th {
            if r.is_empty() || r.windows(2).any(|w| !(w[0] < w[1])) || r.iter().any(|x| !(*x >= 0.0)) {
                return bad("op.r_th must be non-empty, non-negative and strictly increasing".into());
            }
        }
        if self.op.grid_points < 2 || !(self.op.grid_sigmas > 0.0) {
            return bad("op.grid_points must be >= 2 and op.grid_sigmas > 0".into());
        }
        if let Some(s) = &self.sweep {
            if !self.schemes.contains(&Scheme::Mc) {
                return bad("a sweep needs the mc scheme as its reference".into());
            }
            if s.values.is_empty() || s.trials == 0 {
                return bad("sweep.values must be non-empty and sweep.trials >= 1".into());
            }
            if s.axis == SweepAxis::N1 && s.values.iter().any(|v| !(*v >= 1.0 && v.fract() == 0.0)) {
                return bad("sweep values for n1 must be positive integers".into());
            }
        }
        self.em_config(&self.geometry()?)?.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.scenario_config(self.geometry()?)?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<ArrayGeometry, CliError> {
        let lambda = self.array.wavelength_mm * 1e-3;
        let d = self.array.spacing_mm.map_or(lambda / 2.0, |d| d * 1e-3);
        ArrayGeometry::new(self.array.n1, self.array.n2, d, lambda).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn scenario_config(&self, geometry: ArrayGeometry) -> Result<ScenarioConfig, CliError> {
        let s = &self.scenario;
        let rd = geometry.rayleigh_distance();
        if !(s.r_min_m > 0.0 && s.r_min_m < rd) {
            return Err(CliError::Config(format!(
                "scenario.r_min_m = {} m must be below the Rayleigh distance {rd:.4} m of a {}x{} array",
                s.r_min_m,
                geometry.n1(),
                geometry.n2()
            )));
        }
        Ok(ScenarioConfig {
            geometry,
            paths: s.paths,
            gamma: s.gamma,
            k_db: s.k_db,
            theta_range: (s.theta_deg[0].to_radians(), s.theta_deg[1].to_radians()),
            phi_range: (s.phi_deg[0].to_radians(), s.phi_deg[1].to_radians()),
            r_min: s.r_min_m,
            far_range_factor: s.far_range_factor,
            strict_gamma: s.strict_gamma,
        })
    }

    pub fn em_config(&self, geom: &ArrayGeometry) -> Result<EmConfig, CliError> {
        let e = &self.em;
        let (r_min, r_max) = self.range_bounds(geom);
        Ok(EmConfig {
            delta: e.delta,
            max_em_iters: e.max_em_iters,
            max_grad_iters: e.max_grad_iters,
            armijo_c: e.armijo_c,
            armijo_rho: e.armijo_rho,
            max_backtracks: e.max_backtracks,
            step0: e.step0,
            precondition: e.precondition,
            restarts: e.restarts,
            seed: 0,
            theta_bounds: (self.scenario.theta_deg[0].to_radians(), self.scenario.theta_deg[1].to_radians()),
            phi_bounds: (self.scenario.phi_deg[0].to_radians(), self.scenario.phi_deg[1].to_radians()),
            r_bounds: Some((r_min, r_max)),
        })
    }

    /// Range search interval shared by the estimator and the polar grid.
    pub fn range_bounds(&self, geom: &ArrayGeometry) -> (f64, f64) {
        let r_min = self.em.r_min_m.unwrap_or_else(|| self.scenario.r_min_m.min(em::default_min_range(geom)));
        (r_min, self.em.r_max_m.unwrap_or_else(|| geom.rayleigh_distance()))
    }

    pub fn far_grid(&self, geom: &ArrayGeometry) -> GridSpec {
        let [n_theta, n_phi] = self.baselines.far_grid.unwrap_or([2 * geom.n2(), 2 * geom.n1()]);
        GridSpec { n_theta, n_phi, n_dist: 0, ..self.polar_grid(geom) }
    }

    pub fn polar_grid(&self, geom: &ArrayGeometry) -> GridSpec {
        let [n_theta, n_phi, n_dist] = self.baselines.polar_grid.unwrap_or([geom.n2(), geom.n1(), 3]);
        GridSpec {
            n_theta,
            n_phi,
            n_dist,
            theta_range: (self.scenario.theta_deg[0].to_radians(), self.scenario.theta_deg[1].to_radians()),
            phi_range: (self.scenario.phi_deg[0].to_radians(), self.scenario.phi_deg[1].to_radians()),
            r_min: self.range_bounds(geom).0,
            r_max: geom.rayleigh_distance(),
        }
    }

    /// Copy with one sweep axis set to `value`.
    pub fn at_point(&self, axis: SweepAxis, value: f64) -> Self {
        let mut cfg = self.clone();
        match axis {
            SweepAxis::KDb => cfg.scenario.k_db = value,
            SweepAxis::N1 => cfg.array.n1 = value as usize,
            SweepAxis::Gamma => cfg.scenario.gamma = value,
        }
        cfg
    }
}

impl Default for ArraySection {
    fn default() -> Self {
        ExperimentConfig::desk().array
    }
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ExperimentConfig::desk().scenario
    }
}

impl Default for PowerSection {
    fn default() -> Self {
        ExperimentConfig::desk().power
    }
}

impl Default for OpSection {
    fn default() -> Self {
        ExperimentConfig::desk().op
    }
}

impl Default for EmSection {
    fn default() -> Self {
        ExperimentConfig::desk().em
    }
}

impl Default for BaselineSection {
    fn default() -> Self {
        ExperimentConfig::desk().baselines
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
