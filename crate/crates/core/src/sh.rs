//! Degree-0/1 real spherical harmonics for view-dependent color.

use crate::geometry::Vec3;

pub const SH_COEFFS: usize = 4;
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Number of active coefficients for a given degree (0 or 1).
#[inline]
pub fn active_coeffs(degree: usize) -> usize {
    if degree == 0 {
        1
    } else {
        SH_COEFFS
    }
}

/// Basis values for unit view direction `d`.
#[inline]
pub fn basis(d: &Vec3) -> [f64; SH_COEFFS] {
    [SH_C0, -SH_C1 * d.y, SH_C1 * d.z, -SH_C1 * d.x]
}

/// Derivative of each basis function with respect to the direction.
#[inline]
pub fn basis_gradient() -> [Vec3; SH_COEFFS] {
    [Vec3::zeros(), Vec3::new(0.0, -SH_C1, 0.0), Vec3::new(0.0, 0.0, SH_C1), Vec3::new(-SH_C1, 0.0, 0.0)]
}

/// Unclamped color `sum_k b_k c_k + 0.5`.
pub fn eval_raw(coeffs: &[Vec3; SH_COEFFS], d: &Vec3, degree: usize) -> Vec3 {
    let b = basis(d);
    let mut c = Vec3::repeat(0.5);
    for k in 0..active_coeffs(degree) {
        c += coeffs[k] * b[k];
    }
    c
}

pub fn rgb_to_dc(rgb: &Vec3) -> Vec3 {
    (rgb - Vec3::repeat(0.5)) / SH_C0
}

pub fn dc_to_rgb(dc: &Vec3) -> Vec3 {
    dc * SH_C0 + Vec3::repeat(0.5)
}
