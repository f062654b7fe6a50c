use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::EvalError;
use crate::spectral::{filter_image, make_mask, FrequencyMask, MaskVariant, PassMode};
use crate::tensor::Tensor;

use super::accuracy::{accuracy_of, predictions, Classifier};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecord {
    pub size: f64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub model_id: String,
    pub mode: PassMode,
    pub variant: MaskVariant,
    pub records: Vec<SweepRecord>,
}

pub const SWEEP_HEADER: &str = "mode,variant,S,accuracy,n";

impl SweepReport {
    pub fn to_csv(&self, tag: &str) -> String {
        let mut s = format!("# {tag} model={}\n{SWEEP_HEADER}\n", self.model_id);
        for r in &self.records {
            writeln!(s, "{},{},{},{},{}", self.mode, self.variant, r.size, r.accuracy, r.n).unwrap();
        }
        s
    }
}

/// Standardized images of `data` after filtering their pixel values with
/// `mask`. An all-pass mask returns the stored images untouched.
pub fn filtered_images(data: &Dataset, mask: &FrequencyMask) -> Result<Tensor<f32>, EvalError> {
    if mask.is_all_ones() {
        return Ok(data.images().clone());
    }
    let pixels = data.destandardize(data.images());
    let filtered = filter_image(&pixels, mask)?;
    Ok(data.standardize(&filtered))
}

/// Accuracy on low- or high-pass filtered copies of `data` for each filter
/// size in `sizes` (strictly increasing, within `[0, min(H, W)]`).
pub fn filtered_accuracy_sweep<M: Classifier + ?Sized>(
    model: &M,
    data: &Dataset,
    mode: PassMode,
    sizes: &[f64],
    variant: MaskVariant,
    model_id: &str,
) -> Result<SweepReport, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    if model.num_classes() != data.num_classes() {
        return Err(EvalError::ClassMismatch {
            model: model.num_classes(),
            data: data.num_classes(),
        });
    }
    if sizes.is_empty() || sizes.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(EvalError::Invalid(format!(
            "filter sizes must be non-empty and strictly increasing: {sizes:?}"
        )));
    }
    let [_, h, w] = data.image_shape();
    let mut records = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mask = make_mask(h, w, size, mode, variant)?;
        let images = filtered_images(data, &mask)?;
        let pred = predictions(model, &images)?;
        records.push(SweepRecord {
            size,
            accuracy: accuracy_of(&pred, data.labels())?,
            n: data.len(),
        });
    }
    Ok(SweepReport {
        model_id: model_id.into(),
        mode,
        variant,
        records,
    })
}
