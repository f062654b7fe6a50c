use crate::error::SpectralError;
use crate::tensor::{Real, Tensor};

use super::mask::{make_mask, MaskVariant, PassMode};
use super::spectrum::dft2;

fn plane_dims<T: Real>(image: &Tensor<T>) -> Result<(usize, usize), SpectralError> {
    let s = image.shape();
    if s.len() < 2 {
        return Err(SpectralError::InvalidArgument(format!(
            "expected [.., H, W], got {s:?}"
        )));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// Fraction of spectral energy kept by the high-pass mask of size `size`,
/// averaged over the planes (channels) of `image` that carry any energy.
pub fn highfreq_energy_ratio<T: Real>(image: &Tensor<T>, size: f64) -> Result<f64, SpectralError> {
    let (h, w) = plane_dims(image)?;
    if !(size > 0.0 && size < h.min(w) as f64) {
        return Err(SpectralError::FilterSize { size, max: h.min(w) });
    }
    let mask = make_mask(h, w, size, PassMode::High, MaskVariant::AsWritten)?;
    let mut total = 0.0;
    let mut planes = 0usize;
    for plane in image.data().chunks(h * w) {
        let spec = dft2(plane, h, w)?;
        let energy = spec.energy();
        if energy == 0.0 {
            continue;
        }
        let kept: f64 = spec
            .data()
            .iter()
            .zip(mask.grid())
            .filter(|(_, &m)| m == 1)
            .map(|(c, _)| c.norm_sqr())
            .sum();
        total += kept / energy;
        planes += 1;
    }
    if planes == 0 {
        return Err(SpectralError::UndefinedRatio);
    }
    Ok(total / planes as f64)
}

/// Per-bin `log(1 + |F(x)|)` averaged over images and channels of an
/// `N x C x H x W` batch, in shifted layout (row-major `H x W`).
pub fn spectrum_energy_map<T: Real>(batch: &Tensor<T>) -> Result<Vec<f64>, SpectralError> {
    if batch.rank() != 4 {
        return Err(SpectralError::InvalidArgument(format!(
            "expected N x C x H x W, got {:?}",
            batch.shape()
        )));
    }
    let (h, w) = plane_dims(batch)?;
    let planes = batch.len() / (h * w);
    if planes == 0 {
        return Err(SpectralError::InvalidArgument("empty batch".into()));
    }
    let mut map = vec![0.0; h * w];
    for plane in batch.data().chunks(h * w) {
        let spec = dft2(plane, h, w)?;
        for (acc, c) in map.iter_mut().zip(spec.data()) {
            *acc += c.norm().ln_1p();
        }
    }
    map.iter_mut().for_each(|v| *v /= planes as f64);
    Ok(map)
}
