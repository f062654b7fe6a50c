//! One- and two-dimensional discrete Fourier transforms.
//!
//! Power-of-two lengths use an iterative radix-2 transform; any other length
//! falls back to direct O(n^2) summation. Both are unnormalized in the forward
//! direction and scaled by `1/n` in the inverse direction.

use std::f64::consts::PI;

use num_complex::Complex64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        }
    }
}

/// In-place 1-D transform of `buf`.
pub fn dft1d(buf: &mut [Complex64], dir: Direction) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, dir);
    } else {
        direct(buf, dir);
    }
    if dir == Direction::Inverse {
        let inv = 1.0 / n as f64;
        buf.iter_mut().for_each(|v| *v *= inv);
    }
}

fn radix2(buf: &mut [Complex64], dir: Direction) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = dir.sign() * 2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = Complex64::from_polar(1.0, step * k as f64);
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len *= 2;
    }
}

fn direct(buf: &mut [Complex64], dir: Direction) {
    let n = buf.len();
    let src = buf.to_vec();
    let step = dir.sign() * 2.0 * PI / n as f64;
    for (k, out) in buf.iter_mut().enumerate() {
        *out = src
            .iter()
            .enumerate()
            // (k * t) mod n keeps the angle argument small for accuracy.
            .map(|(t, &v)| v * Complex64::from_polar(1.0, step * ((k * t) % n) as f64))
            .sum();
    }
}

/// Row-major 2-D transform of an `h x w` grid (natural layout).
pub fn dft2d(data: &mut [Complex64], h: usize, w: usize, dir: Direction) {
    assert_eq!(data.len(), h * w);
    for row in data.chunks_mut(w) {
        dft1d(row, dir);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = data[i * w + j];
        }
        dft1d(&mut col, dir);
        for i in 0..h {
            data[i * w + j] = col[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| v * Complex64::from_polar(1.0, -2.0 * PI * (k * t) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn both_paths_match_naive_sum() {
        for n in [1usize, 2, 3, 5, 8, 12, 16, 31, 64] {
            let x: Vec<Complex64> = (0..n)
                .map(|i| Complex64::new((i as f64 * 1.3).sin(), (i as f64 * 0.4).cos()))
                .collect();
            let mut y = x.clone();
            dft1d(&mut y, Direction::Forward);
            for (a, b) in y.iter().zip(naive(&x)) {
                assert!((a - b).norm() < 1e-10, "n={n}");
            }
            dft1d(&mut y, Direction::Inverse);
            for (a, b) in y.iter().zip(&x) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_input_has_exactly_zero_ac_bins_on_power_of_two() {
        let mut y = vec![Complex64::new(0.37, 0.0); 64];
        dft1d(&mut y, Direction::Forward);
        assert!(y[1..].iter().all(|v| v.norm() == 0.0));
    }
}
