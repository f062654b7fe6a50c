use std::f64::consts::PI;

use rand::Rng;

use crate::error::SpectralError;

use super::spectrum::center;

/// Unit-norm real plane whose spectrum is supported on shifted bin `(i, j)`
/// and its conjugate partner: a cosine grating at that frequency.
pub fn fourier_basis(h: usize, w: usize, i: usize, j: usize) -> Result<Vec<f64>, SpectralError> {
    if i >= h || j >= w {
        return Err(SpectralError::BinOutOfRange { i, j, h, w });
    }
    let fy = i as f64 - center(h) as f64;
    let fx = j as f64 - center(w) as f64;
    let mut plane: Vec<f64> = (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            (2.0 * PI * (fy * y / h as f64 + fx * x / w as f64)).cos()
        })
        .collect();
    let norm = plane.iter().map(|v| v * v).sum::<f64>().sqrt();
    plane.iter_mut().for_each(|v| *v /= norm);
    Ok(plane)
}

/// [`fourier_basis`] scaled to `l2_norm` with a random sign drawn from `signs`.
pub fn fourier_basis_noise<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    i: usize,
    j: usize,
    l2_norm: f64,
    signs: &mut R,
) -> Result<Vec<f64>, SpectralError> {
    if !(l2_norm >= 0.0) {
        return Err(SpectralError::InvalidArgument(format!(
            "noise norm must be non-negative, got {l2_norm}"
        )));
    }
    let sign = if signs.gen::<bool>() { 1.0 } else { -1.0 };
    Ok(fourier_basis(h, w, i, j)?
        .into_iter()
        .map(|v| v * l2_norm * sign)
        .collect())
}
