use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::EvalError;
use crate::parallel::pool;
use crate::seed::{digest_hex, SeedStream};
use crate::spectral::fourier_basis;
use crate::tensor::Tensor;

use super::accuracy::{accuracy_of, Classifier, EVAL_BATCH};

/// Noise norm of the reference protocol at 224-pixel resolution.
pub const REFERENCE_NOISE_NORM: f64 = 15.7;
pub const REFERENCE_IMAGE_SIZE: f64 = 224.0;
/// Images in the fixed evaluation subset.
pub const HEATMAP_SUBSET: usize = 1000;

/// Reference noise norm scaled by the image-side ratio.
pub fn scaled_noise_norm(image_size: usize) -> f64 {
    REFERENCE_NOISE_NORM * image_size as f64 / REFERENCE_IMAGE_SIZE
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapConfig {
    /// ℓ2 norm of the additive noise in `[0, 1]` pixel units, per channel.
    pub l2_norm: f64,
    /// Largest frequency offset covered; `None` means `floor(min(H, W) / 2)`.
    pub radius: Option<usize>,
    /// Size of the evaluation subset (capped at the dataset size).
    pub subset: usize,
    pub seed: u64,
    /// Evaluate one cell per conjugate pair and copy it to its partner.
    pub reuse_symmetry: bool,
}

impl HeatmapConfig {
    pub fn for_image_size(image_size: usize, seed: u64) -> Self {
        HeatmapConfig {
            l2_norm: scaled_noise_norm(image_size),
            radius: None,
            subset: HEATMAP_SUBSET,
            seed,
            reuse_symmetry: true,
        }
    }
}

/// Error rates on a `(2r + 1) x (2r + 1)` grid of signed frequency offsets.
/// Cell `(a, b)` holds frequency `(a - r, b - r)`, so the center is DC.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierHeatMap {
    pub radius: usize,
    pub errors: Vec<f64>,
    pub l2_norm: f64,
    /// Dataset indices of the evaluation subset, in evaluation order.
    pub subset: Vec<usize>,
    pub clean_error: f64,
}

pub const HEATMAP_HEADER: &str = "i,j,error_rate";

impl FourierHeatMap {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Error at signed frequency offset `(fy, fx)`.
    pub fn at(&self, fy: isize, fx: isize) -> f64 {
        let r = self.radius as isize;
        self.errors[((fy + r) * (2 * r + 1) + fx + r) as usize]
    }

    pub fn subset_digest(&self) -> String {
        digest_hex(&format!("{:?}", self.subset))
    }

    pub fn to_csv(&self, tag: &str) -> String {
        let mut s = format!(
            "# {tag} l2_norm={} subset={} n={}\n{HEATMAP_HEADER}\n",
            self.l2_norm,
            self.subset_digest(),
            self.subset.len()
        );
        let side = self.side();
        for (k, e) in self.errors.iter().enumerate() {
            writeln!(s, "{},{},{}", k / side, k % side, e).unwrap();
        }
        s
    }
}

fn classify_seq<M: Classifier + ?Sized>(model: &M, images: &Tensor<f32>) -> Result<Vec<usize>, EvalError> {
    let s = images.shape();
    let per = images.len() / s[0];
    let mut out = Vec::with_capacity(s[0]);
    for a in (0..s[0]).step_by(EVAL_BATCH) {
        let b = (a + EVAL_BATCH).min(s[0]);
        let mut shape = s.to_vec();
        shape[0] = b - a;
        out.extend(model.classify(&Tensor::new(shape, images.data()[a * per..b * per].to_vec())?)?);
    }
    Ok(out)
}

/// Seed-chosen evaluation subset, in ascending index order.
pub fn heatmap_subset(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = SeedStream::new(seed).child("heatmap-subset").rng();
    let mut idx = sample(&mut rng, n, size.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Error rate of `model` under Fourier basis noise at each frequency of the
/// grid. Each image and channel receives its own random sign; signs come
/// from a stream keyed by the cell's signed frequency.
pub fn fourier_heatmap<M: Classifier + ?Sized>(
    model: &M,
    data: &Dataset,
    cfg: &HeatmapConfig,
) -> Result<FourierHeatMap, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    if !(cfg.l2_norm >= 0.0) || cfg.subset == 0 {
        return Err(EvalError::Invalid(format!(
            "noise norm {} and subset {} invalid",
            cfg.l2_norm, cfg.subset
        )));
    }
    let [c, h, w] = data.image_shape();
    let nyquist = h.min(w) / 2;
    let radius = cfg.radius.unwrap_or(nyquist);
    if radius > nyquist {
        return Err(EvalError::Invalid(format!("radius {radius} beyond Nyquist {nyquist}")));
    }
    let subset = heatmap_subset(data.len(), cfg.subset, cfg.seed);
    let (images, labels) = data.batch(&subset);
    let clean_error = 1.0 - accuracy_of(&classify_seq(model, &images)?, &labels)?;
    let r = radius as isize;
    let side = 2 * radius + 1;
    let cells: Vec<(isize, isize)> = (-r..=r).flat_map(|fy| (-r..=r).map(move |fx| (fy, fx))).collect();
    let bin = |f: isize, n: usize| (f + (n / 2) as isize).rem_euclid(n as isize) as usize;
    // With symmetry reuse, only the lexicographically larger of each pair of
    // offsets (f, -f) is evaluated.
    let evaluate = |&(fy, fx): &(isize, isize)| -> bool { !cfg.reuse_symmetry || (fy, fx) >= (-fy, -fx) };
    let std = data.std();
    let per = c * h * w;
    let stream = SeedStream::new(cfg.seed).child("heatmap-signs");
    let run_cell = |&(fy, fx): &(isize, isize)| -> Result<f64, EvalError> {
        let basis = fourier_basis(h, w, bin(fy, h), bin(fx, w))?;
        let mut rng = stream.child(&format!("{fy},{fx}")).rng();
        let mut noisy = images.clone();
        for img in noisy.data_mut().chunks_mut(per) {
            for (ch, plane) in img.chunks_mut(h * w).enumerate() {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let scale = sign * cfg.l2_norm / std[ch] as f64;
                for (v, b) in plane.iter_mut().zip(&basis) {
                    *v += (scale * b) as f32;
                }
            }
        }
        Ok(1.0 - accuracy_of(&classify_seq(model, &noisy)?, &labels)?)
    };
    let todo: Vec<(isize, isize)> = cells.iter().copied().filter(|c| evaluate(c)).collect();
    let results: Vec<Result<f64, EvalError>> = pool().install(|| todo.par_iter().map(run_cell).collect());
    let mut errors = vec![f64::NAN; side * side];
    let index = |fy: isize, fx: isize| ((fy + r) as usize) * side + (fx + r) as usize;
    for (&(fy, fx), res) in todo.iter().zip(results) {
        errors[index(fy, fx)] = res?;
    }
    if cfg.reuse_symmetry {
        for &(fy, fx) in &cells {
            if !evaluate(&(fy, fx)) {
                errors[index(fy, fx)] = errors[index(-fy, -fx)];
            }
        }
    }
    Ok(FourierHeatMap {
        radius,
        errors,
        l2_norm: cfg.l2_norm,
        subset,
        clean_error,
    })
}
