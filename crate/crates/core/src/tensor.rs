//! Array helpers shared by the samplers and objectives.

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

/// A latent (or pixel) array of arbitrary shape.
pub type Latent = ArrayD<f64>;

pub fn zeros_like(x: &Latent) -> Latent {
    ArrayD::zeros(IxDyn(x.shape()))
}

/// Frobenius norm over the flattened array.
pub fn frobenius(x: &Latent) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &Latent, b: &Latent) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Frobenius distance between two arrays of the same shape.
pub fn distance(a: &Latent, b: &Latent) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

pub fn same_shape(a: &Latent, b: &Latent) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn ensure_finite(x: &Latent, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericGuard(format!("{what} has non-finite entries")))
    }
}

pub fn ensure_finite_scalar(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericGuard(format!("{what} is {v}")))
    }
}

/// Gradient of `‖a − b‖_F` with respect to `a`.
///
/// Zero when the two arrays coincide up to round-off: at that scale the
/// direction `(a − b)/‖a − b‖` is noise, and the subgradient at the kink is
/// taken as zero.
pub fn distance_grad(a: &Latent, b: &Latent, dist: f64) -> Latent {
    let scale = a.iter().chain(b.iter()).fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
    let noise = 16.0 * f64::EPSILON * scale * (a.len().max(1) as f64).sqrt();
    if dist > noise {
        (a - b) / dist
    } else {
        zeros_like(a)
    }
}

/// Largest relative deviation between two arrays, `max|a−b| / max(max|b|, floor)`.
pub fn max_relative_error(a: &Latent, b: &Latent, floor: f64) -> f64 {
    let scale = b.iter().fold(floor, |m, v| m.max(v.abs()));
    a.iter().zip(b.iter()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())) / scale
}
