//! Geman-McClure robust penalty on 2D reprojection residuals.
//!
//! `rho(r) = sigma^2 * |r|^2 / (|r|^2 + sigma^2)`, bounded by `sigma^2`.
//! The helpers below work on the squared norm `s = |r|^2`.

use nalgebra::Vector2;

/// Geman-McClure penalty of a 2D residual.
pub fn geman_mcclure(residual: &Vector2<f64>, sigma: f64) -> f64 {
    geman_mcclure_sq(residual.norm_squared(), sigma)
}

/// Penalty as a function of the squared residual norm.
#[inline]
pub fn geman_mcclure_sq(s: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    s2 * s / (s + s2)
}

/// `d rho / d s`; the gradient with respect to `r` is `2 * weight * r`.
#[inline]
pub fn geman_mcclure_weight(s: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let d = s + s2;
    s2 * s2 / (d * d)
}
