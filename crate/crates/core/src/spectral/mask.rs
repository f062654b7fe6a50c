//! Low- and high-pass frequency masks and the filters built on them.
//!
//! Masks live in the shifted layout. With `c_H = floor(H/2)`, `c_W = floor(W/2)`
//! and `d(i, j) = min(|i - c_H|, |j - c_W|)`:
//!
//! * low-pass keeps `(i, j)` iff `d(i, j) <= S/2`,
//! * high-pass drops `(i, j)` iff `d(i, j) <= (min(H, W) - S)/2`,
//!
//! so `low(S)` and `high(min(H, W) - S)` partition the grid. The `Square`
//! variant swaps `min` for `max` in the low-pass rule only.

use serde::{Deserialize, Serialize};

use crate::error::SpectralError;
use crate::tensor::{Real, Tensor};

use super::spectrum::{center, dft2, idft2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PassMode {
    Low,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskVariant {
    #[default]
    AsWritten,
    Square,
}

impl std::fmt::Display for PassMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PassMode::Low => "low",
            PassMode::High => "high",
        })
    }
}

impl std::fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskVariant::AsWritten => "as-written",
            MaskVariant::Square => "square",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMask {
    h: usize,
    w: usize,
    size: f64,
    mode: PassMode,
    variant: MaskVariant,
    grid: Vec<u8>,
}

impl FrequencyMask {
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn size(&self) -> f64 {
        self.size
    }

    pub fn mode(&self) -> PassMode {
        self.mode
    }

    pub fn variant(&self) -> MaskVariant {
        self.variant
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.grid[i * self.w + j] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.grid.iter().map(|&v| v as usize).sum()
    }

    pub fn is_all_ones(&self) -> bool {
        self.grid.iter().all(|&v| v == 1)
    }

    pub fn is_all_zeros(&self) -> bool {
        self.grid.iter().all(|&v| v == 0)
    }
}

/// Builds the `h x w` mask with filter size `size` (frequency-index units,
/// compared in real arithmetic).
pub fn make_mask(
    h: usize,
    w: usize,
    size: f64,
    mode: PassMode,
    variant: MaskVariant,
) -> Result<FrequencyMask, SpectralError> {
    let max = h.min(w);
    if h == 0 || w == 0 || !(0.0..=max as f64).contains(&size) {
        return Err(SpectralError::FilterSize { size, max });
    }
    let (ch, cw) = (center(h) as f64, center(w) as f64);
    let mut grid = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let di = (i as f64 - ch).abs();
            let dj = (j as f64 - cw).abs();
            let keep = match (mode, variant) {
                (PassMode::Low, MaskVariant::AsWritten) => di.min(dj) <= size / 2.0,
                (PassMode::Low, MaskVariant::Square) => di.max(dj) <= size / 2.0,
                (PassMode::High, _) => di.min(dj) > (max as f64 - size) / 2.0,
            };
            grid.push(keep as u8);
        }
    }
    Ok(FrequencyMask {
        h,
        w,
        size,
        mode,
        variant,
        grid,
    })
}

/// Applies `mask` to one `h x w` plane: `F^-1(mask ⊙ F(x))`.
pub fn filter_plane<T: Real>(plane: &[T], mask: &FrequencyMask) -> Result<Vec<T>, SpectralError> {
    let (h, w) = mask.dims();
    if plane.len() != h * w {
        return Err(SpectralError::Extent {
            expected: (h, w),
            got: (plane.len() / w.max(1), w),
        });
    }
    if mask.is_all_ones() {
        return Ok(plane.to_vec());
    }
    if mask.is_all_zeros() {
        return Ok(vec![T::zero(); plane.len()]);
    }
    let mut spec = dft2(plane, h, w)?;
    for (c, &m) in spec.data_mut().iter_mut().zip(mask.grid()) {
        if m == 0 {
            *c = num_complex::Complex64::new(0.0, 0.0);
        }
    }
    idft2(&spec)
}

/// Filters every channel plane of a tensor whose last two axes are `H x W`.
pub fn filter_image<T: Real>(image: &Tensor<T>, mask: &FrequencyMask) -> Result<Tensor<T>, SpectralError> {
    let shape = image.shape();
    let (h, w) = mask.dims();
    let r = shape.len();
    if r < 2 || shape[r - 2] != h || shape[r - 1] != w {
        let got = if r >= 2 { (shape[r - 2], shape[r - 1]) } else { (0, 0) };
        return Err(SpectralError::Extent { expected: (h, w), got });
    }
    let mut out = Vec::with_capacity(image.len());
    for plane in image.data().chunks(h * w) {
        out.extend(filter_plane(plane, mask)?);
    }
    Ok(Tensor::new(shape.to_vec(), out).expect("shape preserved"))
}

/// Conjugate partner of shifted bin `(i, j)`: the bin holding frequency `-f`.
pub fn conjugate_partner(h: usize, w: usize, i: usize, j: usize) -> (usize, usize) {
    let flip = |k: usize, n: usize| {
        let c = center(n) as isize;
        let f = k as isize - c;
        ((-f + c).rem_euclid(n as isize)) as usize
    };
    (flip(i, h), flip(j, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force reading of the mask definitions.
    fn enumerate(h: usize, w: usize, s: f64, mode: PassMode, variant: MaskVariant) -> usize {
        let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
        let mut n = 0;
        for i in 0..h {
            for j in 0..w {
                let a = (i as f64 - ch).abs();
                let b = (j as f64 - cw).abs();
                let on = match (mode, variant) {
                    (PassMode::Low, MaskVariant::AsWritten) => a.min(b) <= s / 2.0,
                    (PassMode::Low, MaskVariant::Square) => a.max(b) <= s / 2.0,
                    (PassMode::High, _) => !(a.min(b) <= (h.min(w) as f64 - s) / 2.0),
                };
                n += on as usize;
            }
        }
        n
    }

    #[test]
    fn cardinalities_8x8_size_4() {
        let low = make_mask(8, 8, 4.0, PassMode::Low, MaskVariant::AsWritten).unwrap();
        let sq = make_mask(8, 8, 4.0, PassMode::Low, MaskVariant::Square).unwrap();
        let high = make_mask(8, 8, 4.0, PassMode::High, MaskVariant::AsWritten).unwrap();
        assert_eq!(low.count_ones(), 55);
        assert_eq!(sq.count_ones(), 25);
        assert_eq!(high.count_ones(), 9);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(sq.get(i, j), (2..=6).contains(&i) && (2..=6).contains(&j));
                let edge = |k: usize| [0, 1, 7].contains(&k);
                assert_eq!(high.get(i, j), edge(i) && edge(j));
            }
        }
        assert_eq!(enumerate(8, 8, 4.0, PassMode::Low, MaskVariant::AsWritten), 55);
    }

    #[test]
    fn size_out_of_range() {
        assert!(matches!(
            make_mask(8, 8, 9.0, PassMode::Low, MaskVariant::AsWritten),
            Err(SpectralError::FilterSize { .. })
        ));
        assert!(make_mask(8, 8, -1.0, PassMode::High, MaskVariant::AsWritten).is_err());
    }

    #[test]
    fn as_written_masks_are_complements() {
        for (h, w) in [(8, 8), (7, 9), (32, 32), (6, 10)] {
            let m = h.min(w);
            for s in 0..=m {
                let low = make_mask(h, w, s as f64, PassMode::Low, MaskVariant::AsWritten).unwrap();
                let high = make_mask(h, w, (m - s) as f64, PassMode::High, MaskVariant::AsWritten).unwrap();
                assert!(low.grid().iter().zip(high.grid()).all(|(a, b)| a + b == 1));
                assert_eq!(
                    low.count_ones(),
                    enumerate(h, w, s as f64, PassMode::Low, MaskVariant::AsWritten)
                );
            }
        }
    }

    #[test]
    fn masks_are_conjugate_symmetric() {
        for (h, w) in [(8, 8), (7, 9), (6, 5)] {
            for s in 0..=h.min(w) {
                for mode in [PassMode::Low, PassMode::High] {
                    for variant in [MaskVariant::AsWritten, MaskVariant::Square] {
                        let m = make_mask(h, w, s as f64, mode, variant).unwrap();
                        for i in 0..h {
                            for j in 0..w {
                                let (pi, pj) = conjugate_partner(h, w, i, j);
                                assert_eq!(m.get(i, j), m.get(pi, pj));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn filter_extent_mismatch() {
        let m = make_mask(8, 8, 4.0, PassMode::Low, MaskVariant::AsWritten).unwrap();
        let img = Tensor::<f64>::zeros(vec![1, 8, 6]);
        assert!(matches!(filter_image(&img, &m), Err(SpectralError::Extent { .. })));
    }
}
