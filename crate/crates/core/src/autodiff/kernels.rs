//! Slice-level numeric kernels shared by forward and backward rules.

use crate::tensor::{axis_split, gemm, MatView, Real};

/// Softmax (or log-softmax) along `axis` with max subtraction.
pub fn softmax<T: Real>(x: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| x[at(l)]).fold(T::neg_infinity(), T::max);
            let denom: T = (0..len).map(|l| (x[at(l)] - max).exp()).sum();
            if log {
                let lse = denom.ln();
                for l in 0..len {
                    out[at(l)] = x[at(l)] - max - lse;
                }
            } else {
                for l in 0..len {
                    out[at(l)] = (x[at(l)] - max).exp() / denom;
                }
            }
        }
    }
    out
}

/// Standardizes each contiguous row of length `d`; returns (xhat, per-row 1/std).
pub fn normalize_rows<T: Real>(x: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize(d).unwrap();
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / d);
    for row in x.chunks(d) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        // An overflowed variance must surface as non-finite, not as zeros.
        let r = if var.is_finite() {
            T::one() / (var + eps).sqrt()
        } else {
            T::nan()
        };
        xhat.extend(row.iter().map(|&v| (v - mean) * r));
        rstd.push(r);
    }
    (xhat, rstd)
}

pub fn normalize_rows_backward<T: Real>(gxhat: &[T], xhat: &[T], rstd: &[T], d: usize) -> Vec<T> {
    let n = T::from_usize(d).unwrap();
    let mut gx = Vec::with_capacity(gxhat.len());
    for ((g, xh), &r) in gxhat.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
        let mean_g = g.iter().copied().sum::<T>() / n;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        gx.extend(g.iter().zip(xh).map(|(&gv, &xv)| r * (gv - mean_g - xv * mean_gx)));
    }
    gx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_K) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[derive(Clone, Debug)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
        let (o, kh, kw) = (w[0], w[2], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return None;
        }
        Some(ConvGeometry {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate for output position (oy, ox) and kernel tap (ky, kx).
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let l = self.positions();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            cols[row * l + oy * self.ow + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => img[(ch * self.h + y) * self.w + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let l = self.positions();
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                img[(ch * self.h + y) * self.w + x] += cols[row * l + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], geo: &ConvGeometry) -> Vec<T> {
    let (p, l) = (geo.patch(), geo.positions());
    let img = geo.c * geo.h * geo.w;
    let mut cols = vec![T::zero(); p * l];
    let mut out = vec![T::zero(); geo.n * geo.o * l];
    for i in 0..geo.n {
        geo.im2col(&x[i * img..(i + 1) * img], &mut cols);
        gemm(
            T::one(),
            w,
            MatView::row_major(geo.o, p),
            &cols,
            MatView::row_major(p, l),
            T::zero(),
            &mut out[i * geo.o * l..(i + 1) * geo.o * l],
        );
    }
    out
}

/// Returns (grad wrt input, grad wrt weights).
pub fn conv2d_backward<T: Real>(x: &[T], w: &[T], g: &[T], geo: &ConvGeometry) -> (Vec<T>, Vec<T>) {
    let (p, l) = (geo.patch(), geo.positions());
    let img = geo.c * geo.h * geo.w;
    let mut cols = vec![T::zero(); p * l];
    let mut gcols = vec![T::zero(); p * l];
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    for i in 0..geo.n {
        let gi = &g[i * geo.o * l..(i + 1) * geo.o * l];
        geo.im2col(&x[i * img..(i + 1) * img], &mut cols);
        gemm(
            T::one(),
            gi,
            MatView::row_major(geo.o, l),
            &cols,
            MatView::transposed(p, l),
            T::one(),
            &mut gw,
        );
        gemm(
            T::one(),
            w,
            MatView::transposed(geo.o, p),
            gi,
            MatView::row_major(geo.o, l),
            T::zero(),
            &mut gcols,
        );
        geo.col2im(&gcols, &mut gx[i * img..(i + 1) * img]);
    }
    (gx, gw)
}
