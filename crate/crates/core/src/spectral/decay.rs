//! Repeated application of a row-stochastic matrix as a low-pass filter.

use num_complex::Complex64;

use crate::error::SpectralError;

use super::fft::{dft1d, Direction};

/// For `k = 1..=k_max`, the ratio `||high(A^k v)|| / ||low(A^k v)||` where, in
/// the shifted 1-D spectrum, the low mask keeps only the center (DC) bin and
/// the high mask keeps every other bin. The ratio is taken on spectral norms,
/// which equals the ratio of the filtered signals' norms. A vanishing DC
/// component yields `+inf`.
pub fn attention_lowpass_decay(a: &[f64], v: &[f64], k_max: usize) -> Result<Vec<f64>, SpectralError> {
    let n = v.len();
    if n == 0 || a.len() != n * n {
        return Err(SpectralError::InvalidArgument(format!(
            "matrix of {} entries vs vector of {n}",
            a.len()
        )));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Err(SpectralError::InvalidArgument("v must be nonzero".into()));
    }
    for (r, row) in a.chunks(n).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(SpectralError::NotRowStochastic(format!("row {r} sums to {sum}")));
        }
        if row.iter().any(|&x| !(x > 0.0)) {
            return Err(SpectralError::NotRowStochastic(format!(
                "row {r} has a non-positive entry"
            )));
        }
    }
    let mut u = v.to_vec();
    let mut ratios = Vec::with_capacity(k_max);
    for _ in 0..k_max {
        u = a
            .chunks(n)
            .map(|row| row.iter().zip(&u).map(|(x, y)| x * y).sum())
            .collect();
        let mut spec: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        dft1d(&mut spec, Direction::Forward);
        // Natural index 0 is the shifted center bin.
        let low = spec[0].norm();
        let high = spec[1..].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        ratios.push(if low == 0.0 { f64::INFINITY } else { high / low });
    }
    Ok(ratios)
}
