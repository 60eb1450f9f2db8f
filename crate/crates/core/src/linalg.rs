//! Small dense complex least-squares helpers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Relative pivot below which a Gram matrix is treated as singular.
const RANK_TOL: f64 = 1e-10;

pub(crate) fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub(crate) fn norm_sqr(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum()
}

/// Cholesky factorisation of the Gram matrix of a set of atoms, reusable
/// across several targets.
pub(crate) struct Projector<'a> {
    atoms: Vec<&'a [Complex64]>,
    chol: Option<nalgebra::Cholesky<Complex64, nalgebra::Dyn>>,
}

impl<'a> Projector<'a> {
    /// `None` when the atoms are numerically dependent.
    pub fn new(atoms: &[&'a [Complex64]]) -> Option<Self> {
        let m = atoms.len();
        if m == 0 {
            return Some(Projector { atoms: Vec::new(), chol: None });
        }
        let gram = DMatrix::from_fn(m, m, |i, j| dot(atoms[i], atoms[j]));
        let chol = gram.clone().cholesky()?;
        let l = chol.l();
        for i in 0..m {
            if l[(i, i)].norm_sqr() < RANK_TOL * gram[(i, i)].re {
                return None;
            }
        }
        Some(Projector { atoms: atoms.to_vec(), chol: Some(chol) })
    }

    /// Coefficients `c` minimising `‖target - Σ_i c_i atoms_i‖`.
    pub fn coefficients(&self, target: &[Complex64]) -> Vec<Complex64> {
        match &self.chol {
            None => Vec::new(),
            Some(chol) => {
                let rhs = DVector::from_iterator(self.atoms.len(), self.atoms.iter().map(|a| dot(a, target)));
                chol.solve(&rhs).iter().copied().collect()
            }
        }
    }

    pub fn residual(&self, target: &[Complex64]) -> Vec<Complex64> {
        residual(&self.atoms, &self.coefficients(target), target)
    }
}

/// Coefficients `c` minimising `‖target - Σ_i c_i atoms_i‖`, or `None`
/// when the atoms are numerically dependent.
pub(crate) fn least_squares(atoms: &[&[Complex64]], target: &[Complex64]) -> Option<Vec<Complex64>> {
    Projector::new(atoms).map(|p| p.coefficients(target))
}

/// `target - Σ_i c_i atoms_i`.
pub(crate) fn residual(atoms: &[&[Complex64]], coeffs: &[Complex64], target: &[Complex64]) -> Vec<Complex64> {
    let mut out = target.to_vec();
    for (a, c) in atoms.iter().zip(coeffs) {
        for (o, x) in out.iter_mut().zip(a.iter()) {
            *o -= c * x;
        }
    }
    out
}
