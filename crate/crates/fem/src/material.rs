//! Compressible Neo-Hookean material.
//!
//! Strain energy per unit reference volume
//!
//! ```text
//! W(F) = μ/2 (Ic − 3 − 2 ln J) + λ/4 (J² − 1 − 2 ln J)
//! ```
//!
//! with `J = det F` and `Ic = tr(FᵀF)`. The first Piola-Kirchhoff stress
//! is `P = ∂W/∂F = μ (F − F⁻ᵀ) + λ/2 (J² − 1) F⁻ᵀ`.

use crate::kinematics::DeformationState;
use crate::tensor3::{self, Mat3};
use crate::{FemError, Result};

/// Fourth-order material tangent `A[i][J][k][L] = ∂P_iJ / ∂F_kL`.
pub type Tangent4 = [[[[f64; 3]; 3]; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    /// Young's modulus, Pa.
    pub youngs_modulus: f64,
    /// Poisson's ratio.
    pub poisson_ratio: f64,
    /// First Lamé parameter, Pa.
    pub lambda: f64,
    /// Shear modulus, Pa.
    pub mu: f64,
}

impl Material {
    pub fn new(youngs_modulus: f64, poisson_ratio: f64) -> Result<Self> {
        let (lambda, mu) = lame_from_e_nu(youngs_modulus, poisson_ratio)?;
        Ok(Self {
            youngs_modulus,
            poisson_ratio,
            lambda,
            mu,
        })
    }
}

/// Lamé parameters from Young's modulus and Poisson's ratio.
pub fn lame_from_e_nu(e: f64, nu: f64) -> Result<(f64, f64)> {
    if !(e > 0.0) || !e.is_finite() {
        return Err(FemError::InvalidMaterial(format!(
            "Young's modulus must be positive, got {e}"
        )));
    }
    if !(0.0..0.5).contains(&nu) {
        return Err(FemError::InvalidMaterial(format!(
            "Poisson's ratio must satisfy 0 <= nu < 0.5, got {nu}"
        )));
    }
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    Ok((lambda, mu))
}

fn check_volume(state: &DeformationState) -> Result<()> {
    if state.j > 0.0 && state.j.is_finite() {
        Ok(())
    } else {
        Err(FemError::NonPositiveJacobian(state.j))
    }
}

pub fn strain_energy(state: &DeformationState, mat: &Material) -> Result<f64> {
    check_volume(state)?;
    let ln_j = state.j.ln();
    Ok(0.5 * mat.mu * (state.ic - 3.0 - 2.0 * ln_j)
        + 0.25 * mat.lambda * (state.j * state.j - 1.0 - 2.0 * ln_j))
}

pub fn pk1_stress(state: &DeformationState, mat: &Material) -> Result<Mat3> {
    check_volume(state)?;
    let f_inv_t = inverse_transpose(&state.f)?;
    let vol = 0.5 * mat.lambda * (state.j * state.j - 1.0);
    let mut p = [[0.0; 3]; 3];
    for i in 0..3 {
        for a in 0..3 {
            p[i][a] = mat.mu * (state.f[i][a] - f_inv_t[i][a]) + vol * f_inv_t[i][a];
        }
    }
    Ok(p)
}

/// Derivative of [`pk1_stress`] with respect to `F`.
pub fn material_tangent(state: &DeformationState, mat: &Material) -> Result<Tangent4> {
    check_volume(state)?;
    let h = inverse_transpose(&state.f)?;
    let j2 = state.j * state.j;
    let shear = mat.mu;
    let soften = mat.mu - 0.5 * mat.lambda * (j2 - 1.0);
    let mut a = [[[[0.0; 3]; 3]; 3]; 3];
    for i in 0..3 {
        for jj in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    let delta = if i == k && jj == l { shear } else { 0.0 };
                    a[i][jj][k][l] =
                        delta + soften * h[k][jj] * h[i][l] + mat.lambda * j2 * h[k][l] * h[i][jj];
                }
            }
        }
    }
    Ok(a)
}

fn inverse_transpose(f: &Mat3) -> Result<Mat3> {
    tensor3::inverse(f)
        .map(|inv| tensor3::transpose(&inv))
        .ok_or(FemError::SingularDeformation)
}
