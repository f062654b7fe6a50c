use num_complex::Complex64;

use crate::error::SpectralError;
use crate::tensor::Real;

use super::fft::{dft2d, Direction};

/// Where the zero-frequency bin sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// DC at index (0, 0).
    Natural,
    /// DC at (floor(H/2), floor(W/2)).
    Shifted,
}

/// Complex spectrum of one `h x w` channel plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    h: usize,
    w: usize,
    layout: Layout,
    data: Vec<Complex64>,
}

/// Center index of the shifted layout along an axis of length `n`.
pub fn center(n: usize) -> usize {
    n / 2
}

fn roll(data: &[Complex64], h: usize, w: usize, dy: usize, dx: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for i in 0..h {
        for j in 0..w {
            out[((i + dy) % h) * w + (j + dx) % w] = data[i * w + j];
        }
    }
    out
}

impl ComplexSpectrum {
    pub fn new(h: usize, w: usize, layout: Layout, data: Vec<Complex64>) -> Result<Self, SpectralError> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(SpectralError::InvalidArgument(format!(
                "spectrum of {} values cannot be {h}x{w}",
                data.len()
            )));
        }
        Ok(ComplexSpectrum { h, w, layout, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.w + j]
    }

    /// Moves DC to the center. Identity if already shifted.
    pub fn shift(&self) -> Self {
        match self.layout {
            Layout::Shifted => self.clone(),
            Layout::Natural => ComplexSpectrum {
                data: roll(&self.data, self.h, self.w, center(self.h), center(self.w)),
                layout: Layout::Shifted,
                ..*self
            },
        }
    }

    /// Moves DC back to index (0, 0). Identity if already natural.
    pub fn unshift(&self) -> Self {
        match self.layout {
            Layout::Natural => self.clone(),
            Layout::Shifted => ComplexSpectrum {
                data: roll(
                    &self.data,
                    self.h,
                    self.w,
                    self.h - center(self.h),
                    self.w - center(self.w),
                ),
                layout: Layout::Natural,
                ..*self
            },
        }
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Forward 2-D DFT of a row-major `h x w` plane, returned in shifted layout.
pub fn dft2<T: Real>(plane: &[T], h: usize, w: usize) -> Result<ComplexSpectrum, SpectralError> {
    if h == 0 || w == 0 || plane.len() != h * w {
        return Err(SpectralError::InvalidArgument(format!(
            "plane of {} values is not {h}x{w}",
            plane.len()
        )));
    }
    let mut data: Vec<Complex64> = Vec::with_capacity(h * w);
    for v in plane {
        let v = v.to_f64().unwrap_or(f64::NAN);
        if !v.is_finite() {
            return Err(SpectralError::NonFinite("dft2"));
        }
        data.push(Complex64::new(v, 0.0));
    }
    dft2d(&mut data, h, w, Direction::Forward);
    Ok(ComplexSpectrum {
        h,
        w,
        layout: Layout::Natural,
        data,
    }
    .shift())
}

/// Imaginary-residue tolerance for a real inverse at precision `T`.
pub fn residue_tolerance<T: Real>() -> f64 {
    if T::BITS <= 32 {
        1e-5
    } else {
        1e-10
    }
}

/// Inverse 2-D DFT to a real plane. The imaginary part must vanish (relative to
/// the larger of 1 and the largest real magnitude) within the precision's
/// tolerance; it is then discarded.
pub fn idft2<T: Real>(spectrum: &ComplexSpectrum) -> Result<Vec<T>, SpectralError> {
    if spectrum.data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(SpectralError::NonFinite("idft2"));
    }
    let (h, w) = spectrum.dims();
    let mut data = spectrum.unshift().data;
    dft2d(&mut data, h, w, Direction::Inverse);
    let residue = data.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
    let scale = data.iter().fold(1.0f64, |m, c| m.max(c.re.abs()));
    let tol = residue_tolerance::<T>();
    if residue > tol * scale {
        return Err(SpectralError::SymmetryViolation { residue, tol });
    }
    Ok(data.into_iter().map(|c| T::lit(c.re)).collect())
}
