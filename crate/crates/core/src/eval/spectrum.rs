use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{EvalError, SpectralError};
use crate::models::Model;
use crate::spectral::{filter_image, highfreq_energy_ratio, make_mask, spectrum_energy_map};
use crate::tensor::{Real, Tensor};
use crate::train::{hat_minibatch, HatConfig, StepInputs, Targets};

/// Images per PGD batch when crafting perturbations.
pub const CRAFT_BATCH: usize = 64;

/// Paired spectra of natural images and their PGD perturbations.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub h: usize,
    pub w: usize,
    /// Shifted-layout mean `log(1 + |F|)` of the pixel-space images.
    pub natural: Vec<f64>,
    /// The same for the perturbations, in pixel units.
    pub perturbation: Vec<f64>,
    /// High-pass size used for the energy-ratio summaries.
    pub size: f64,
    /// Mean high-frequency energy ratio over images with nonzero energy.
    pub natural_ratio: f64,
    pub perturbation_ratio: f64,
    pub natural_ratios: Vec<f64>,
    pub perturbation_ratios: Vec<f64>,
    pub n: usize,
}

pub const SPECTRUM_HEADER: &str = "i,j,natural_energy,perturbation_energy";

impl SpectrumReport {
    pub fn to_csv(&self, tag: &str) -> String {
        let mut s = format!(
            "# {tag} n={} S={} natural_ratio={} perturbation_ratio={}\n{SPECTRUM_HEADER}\n",
            self.n, self.size, self.natural_ratio, self.perturbation_ratio
        );
        for (k, (a, b)) in self.natural.iter().zip(&self.perturbation).enumerate() {
            writeln!(s, "{},{},{},{}", k / self.w, k % self.w, a, b).unwrap();
        }
        s
    }
}

fn ratios(batch: &Tensor<f32>, size: f64) -> Result<Vec<f64>, EvalError> {
    let n = batch.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        match highfreq_energy_ratio(&batch.index_outer(i), size) {
            Ok(r) => out.push(r),
            Err(SpectralError::UndefinedRatio) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Crafts PGD perturbations (`cfg.k` steps; zero steps leaves them at zero)
/// for the first `n` images of `data` and compares their spectra with the
/// images'. Both are taken in pixel units. In a frequency-constrained mode
/// the filtered perturbation is reported, since that is what reaches the
/// model.
pub fn perturbation_spectrum_report<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    cfg: &HatConfig,
    n: usize,
    size: f64,
) -> Result<SpectrumReport, EvalError> {
    if data.is_empty() || n == 0 {
        return Err(EvalError::Empty);
    }
    let n = n.min(data.len());
    let [c, h, w] = data.image_shape();
    let std: Vec<f64> = data.std().iter().map(|&s| s as f64).collect();
    let mut deltas: Vec<f32> = Vec::with_capacity(n * c * h * w);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(CRAFT_BATCH) {
        let (x, labels) = data.batch(chunk);
        if cfg.k == 0 {
            deltas.extend(std::iter::repeat(0.0).take(x.len()));
            continue;
        }
        let xt = x.cast::<T>();
        let targets = Targets::Hard(labels);
        let inp = StepInputs {
            model: &model.config,
            params: &model.params,
            x: &xt,
            targets: &targets,
            teacher: None,
        };
        let step = hat_minibatch(&inp, cfg, &std)?;
        let delta = match cfg.freq_mode.band() {
            Some((mode, s)) => filter_image(&step.delta, &make_mask(h, w, s, mode, cfg.mask_variant)?)?,
            None => step.delta,
        };
        // Standardized units back to pixel units: multiply by the divisor.
        let hw = h * w;
        deltas.extend(
            delta
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| (v.to_f64().unwrap() * std[(i / hw) % c]) as f32),
        );
    }
    let delta = Tensor::new(vec![n, c, h, w], deltas)?;
    let (x, _) = data.batch(&idx);
    let pixels = data.destandardize(&x);
    let natural_ratios = ratios(&pixels, size)?;
    let perturbation_ratios = ratios(&delta, size)?;
    Ok(SpectrumReport {
        h,
        w,
        natural: spectrum_energy_map(&pixels)?,
        perturbation: spectrum_energy_map(&delta)?,
        size,
        natural_ratio: mean(&natural_ratios),
        perturbation_ratio: mean(&perturbation_ratios),
        natural_ratios,
        perturbation_ratios,
        n,
    })
}
