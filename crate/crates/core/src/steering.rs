//! Uniform planar array geometry and steering kernels.
//!
//! Elements sit on the y-z plane at `(0, n1·d, n2·d)` with element `(0, 0)`
//! at the origin. A source at elevation `theta`, azimuth `phi` and range `r`
//! is located at `r·(sinθ cosφ, sinθ sinφ, cosθ)`.
//!
//! Both kernels lay out entry `(n1, n2)` at flat index `n2·N1 + n1`, i.e. the
//! Kronecker product `a_z(θ) ⊗ a_y(θ, φ)`, and carry a `1/√N` scale so the
//! returned vectors have unit norm. The near-field kernel applies the phase
//! `-k·(r⁽ⁿ¹'ⁿ²⁾ - r)`; the far-field kernel is its plane-wave limit,
//! `+k·(n1·d·sinφ sinθ + n2·d·cosθ)`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::Deref;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Uniform planar array with `n1 × n2` elements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    n1: usize,
    n2: usize,
    spacing: f64,
    wavelength: f64,
}

impl ArrayGeometry {
    pub fn new(n1: usize, n2: usize, spacing: f64, wavelength: f64) -> Result<Self> {
        if n1 == 0 || n2 == 0 {
            return domain(format!("array dimensions must be >= 1, got {n1}x{n2}"));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return domain(format!("element spacing must be positive, got {spacing}"));
        }
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            return domain(format!("wavelength must be positive, got {wavelength}"));
        }
        Ok(ArrayGeometry { n1, n2, spacing, wavelength })
    }

    /// Half-wavelength spaced array.
    pub fn half_wavelength(n1: usize, n2: usize, wavelength: f64) -> Result<Self> {
        Self::new(n1, n2, wavelength / 2.0, wavelength)
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    /// Total element count `N = N1·N2`.
    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Flat index of element `(n1, n2)`.
    pub fn flat_index(&self, n1: usize, n2: usize) -> usize {
        n2 * self.n1 + n1
    }

    /// `2(N1² + N2²)d²/λ`, the conventional near/far-field boundary.
    pub fn rayleigh_distance(&self) -> f64 {
        let (a, b) = (self.n1 as f64, self.n2 as f64);
        2.0 * (a * a + b * b) * self.spacing * self.spacing / self.wavelength
    }

    /// Largest squared element offset from the reference element.
    pub fn max_offset_sq(&self) -> f64 {
        let (a, b) = ((self.n1 - 1) as f64, (self.n2 - 1) as f64);
        (a * a + b * b) * self.spacing * self.spacing
    }
}

/// Propagation regime of a path. The binary encoding is `0 = near`,
/// `1 = far`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Near,
    Far,
}

impl Field {
    pub fn from_bit(bit: u8) -> Self {
        if bit == 0 {
            Field::Near
        } else {
            Field::Far
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Field::Near => 0,
            Field::Far => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Field::Near => "near",
            Field::Far => "far",
        }
    }
}

impl std::str::FromStr for Field {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "near" | "0" => Ok(Field::Near),
            "far" | "1" => Ok(Field::Far),
            other => Err(crate::Error::Format(format!("unknown field label `{other}`"))),
        }
    }
}

/// Unit-norm array response.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector(Vec<Complex64>);

impl SteeringVector {
    pub fn into_inner(self) -> Vec<Complex64> {
        self.0
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

impl Deref for SteeringVector {
    type Target = [Complex64];

    fn deref(&self) -> &[Complex64] {
        &self.0
    }
}

/// Partial derivatives of a steering vector, one entry per element.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringGradients {
    pub d_theta: Vec<Complex64>,
    pub d_phi: Vec<Complex64>,
    pub d_r: Vec<Complex64>,
}

pub(crate) fn check_angles(theta: f64, phi: f64) -> Result<()> {
    if !(theta > 0.0 && theta < PI) {
        return domain(format!("elevation {theta} outside (0, pi)"));
    }
    if !(phi > -FRAC_PI_2 && phi < FRAC_PI_2) {
        return domain(format!("azimuth {phi} outside (-pi/2, pi/2)"));
    }
    Ok(())
}

fn check_range(r: f64) -> Result<()> {
    if !(r > 0.0 && r.is_finite()) {
        return domain(format!("range must be positive and finite, got {r}"));
    }
    Ok(())
}

/// Projection of the element offset onto the arrival direction,
/// `n1·d·sinθ sinφ + n2·d·cosθ`, and its angle derivatives.
#[derive(Clone, Copy)]
struct Direction {
    /// d·sinθ sinφ
    y: f64,
    /// d·cosθ
    z: f64,
    /// d·cosθ sinφ
    y_dtheta: f64,
    /// -d·sinθ
    z_dtheta: f64,
    /// d·sinθ cosφ
    y_dphi: f64,
}

impl Direction {
    fn new(geom: &ArrayGeometry, theta: f64, phi: f64) -> Self {
        let d = geom.spacing;
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        Direction { y: d * st * sp, z: d * ct, y_dtheta: d * ct * sp, z_dtheta: -d * st, y_dphi: d * st * cp }
    }

    fn proj(&self, n1: usize, n2: usize) -> f64 {
        n1 as f64 * self.y + n2 as f64 * self.z
    }
}

/// Range from element `(n1, n2)` minus the reference range `r`, computed
/// without cancellation as `(ρ² - r²)/(ρ + r)`.
fn range_offset(geom: &ArrayGeometry, dir: &Direction, r: f64, n1: usize, n2: usize) -> (f64, f64) {
    let d = geom.spacing;
    let (a, b) = (n1 as f64 * d, n2 as f64 * d);
    let proj = dir.proj(n1, n2);
    let diff_sq = -2.0 * r * proj + a * a + b * b;
    let rho = (r * r + diff_sq).max(0.0).sqrt();
    (rho, diff_sq / (rho + r))
}

/// Plane-wave steering vector.
pub fn far_field_steering(geom: &ArrayGeometry, theta: f64, phi: f64) -> Result<SteeringVector> {
    check_angles(theta, phi)?;
    let k = geom.wavenumber();
    let scale = 1.0 / (geom.len() as f64).sqrt();
    let dir = Direction::new(geom, theta, phi);
    let mut out = Vec::with_capacity(geom.len());
    for n2 in 0..geom.n2 {
        for n1 in 0..geom.n1 {
            out.push(Complex64::from_polar(scale, k * dir.proj(n1, n2)));
        }
    }
    Ok(SteeringVector(out))
}

/// Distance from element `(n1, n2)` to a source at `(theta, phi, r)`.
pub fn element_distance(geom: &ArrayGeometry, theta: f64, phi: f64, r: f64, n1: usize, n2: usize) -> Result<f64> {
    check_range(r)?;
    if n1 >= geom.n1 || n2 >= geom.n2 {
        return domain(format!("element ({n1}, {n2}) outside {}x{} array", geom.n1, geom.n2));
    }
    let d = geom.spacing;
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let x = r * st * cp;
    let y = r * st * sp - n1 as f64 * d;
    let z = r * ct - n2 as f64 * d;
    Ok((x * x + y * y + z * z).sqrt())
}

/// Spherical-wave steering vector referenced to element `(0, 0)`.
pub fn near_field_steering(geom: &ArrayGeometry, theta: f64, phi: f64, r: f64) -> Result<SteeringVector> {
    check_angles(theta, phi)?;
    check_range(r)?;
    let k = geom.wavenumber();
    let scale = 1.0 / (geom.len() as f64).sqrt();
    let dir = Direction::new(geom, theta, phi);
    let mut out = Vec::with_capacity(geom.len());
    for n2 in 0..geom.n2 {
        for n1 in 0..geom.n1 {
            let (_, offset) = range_offset(geom, &dir, r, n1, n2);
            out.push(Complex64::from_polar(scale, -k * offset));
        }
    }
    Ok(SteeringVector(out))
}

/// Dispatches to the kernel selected by `label`; `r` is ignored for
/// far-field paths.
pub fn steering(geom: &ArrayGeometry, theta: f64, phi: f64, r: f64, label: Field) -> Result<SteeringVector> {
    match label {
        Field::Far => far_field_steering(geom, theta, phi),
        Field::Near => near_field_steering(geom, theta, phi, r),
    }
}

/// Steering vector together with its derivatives in `theta`, `phi`, `r`.
pub fn steering_with_gradients(
    geom: &ArrayGeometry,
    theta: f64,
    phi: f64,
    r: f64,
    label: Field,
) -> Result<(SteeringVector, SteeringGradients)> {
    check_angles(theta, phi)?;
    if label == Field::Near {
        check_range(r)?;
    }
    let n = geom.len();
    let k = geom.wavenumber();
    let scale = 1.0 / (n as f64).sqrt();
    let dir = Direction::new(geom, theta, phi);
    let mut s = Vec::with_capacity(n);
    let mut d_theta = Vec::with_capacity(n);
    let mut d_phi = Vec::with_capacity(n);
    let mut d_r = Vec::with_capacity(n);
    for n2 in 0..geom.n2 {
        for n1 in 0..geom.n1 {
            let proj = dir.proj(n1, n2);
            let proj_dtheta = n1 as f64 * dir.y_dtheta + n2 as f64 * dir.z_dtheta;
            let proj_dphi = n1 as f64 * dir.y_dphi;
            // Phase derivatives of the entry e^{j psi}.
            let (psi, psi_theta, psi_phi, psi_r) = match label {
                Field::Far => (k * proj, k * proj_dtheta, k * proj_dphi, 0.0),
                Field::Near => {
                    let (rho, offset) = range_offset(geom, &dir, r, n1, n2);
                    let ratio = r / rho;
                    (-k * offset, k * ratio * proj_dtheta, k * ratio * proj_dphi, k * (offset + proj) / rho)
                }
            };
            let entry = Complex64::from_polar(scale, psi);
            let j_entry = Complex64::new(-entry.im, entry.re);
            s.push(entry);
            d_theta.push(j_entry * psi_theta);
            d_phi.push(j_entry * psi_phi);
            d_r.push(j_entry * psi_r);
        }
    }
    Ok((SteeringVector(s), SteeringGradients { d_theta, d_phi, d_r }))
}

/// Analytic partial derivatives of the steering vector.
pub fn steering_gradients(
    geom: &ArrayGeometry,
    theta: f64,
    phi: f64,
    r: f64,
    label: Field,
) -> Result<SteeringGradients> {
    steering_with_gradients(geom, theta, phi, r, label).map(|(_, g)| g)
}

/// Free-function form of [`ArrayGeometry::rayleigh_distance`].
pub fn rayleigh_distance(geom: &ArrayGeometry) -> f64 {
    geom.rayleigh_distance()
}
