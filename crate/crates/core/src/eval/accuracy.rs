use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::EvalError;
use crate::models::Model;
use crate::parallel::pool;
use crate::tensor::{Real, Tensor};
use crate::train::argmax_rows;

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 128;

/// Anything that maps a standardized `N x C x H x W` batch to class indices.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    /// Predicted class per image; ties go to the lowest class index.
    fn classify(&self, batch: &Tensor<f32>) -> Result<Vec<usize>, EvalError>;
}

impl<T: Real> Classifier for Model<T> {
    fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    fn classify(&self, batch: &Tensor<f32>) -> Result<Vec<usize>, EvalError> {
        let logits = self.logits(&batch.cast::<T>())?;
        Ok(argmax_rows(logits.data(), self.num_classes()))
    }
}

/// Predictions for every image of `images`, evaluated in parallel batches.
pub fn predictions<M: Classifier + ?Sized>(model: &M, images: &Tensor<f32>) -> Result<Vec<usize>, EvalError> {
    let s = images.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(EvalError::Empty);
    }
    let n = s[0];
    let per = images.len() / n;
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(EVAL_BATCH)
        .map(|a| (a, (a + EVAL_BATCH).min(n)))
        .collect();
    let parts: Vec<Result<Vec<usize>, EvalError>> = pool().install(|| {
        chunks
            .par_iter()
            .map(|&(a, b)| {
                let mut shape = s.to_vec();
                shape[0] = b - a;
                let batch = Tensor::new(shape, images.data()[a * per..b * per].to_vec())?;
                model.classify(&batch)
            })
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Fraction of `labels` matched by `predicted`.
pub fn accuracy_of(predicted: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    if predicted.len() != labels.len() {
        return Err(EvalError::Invalid(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Top-1 accuracy of `model` on `data`.
pub fn evaluate_accuracy<M: Classifier + ?Sized>(model: &M, data: &Dataset) -> Result<f64, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    if model.num_classes() != data.num_classes() {
        return Err(EvalError::ClassMismatch {
            model: model.num_classes(),
            data: data.num_classes(),
        });
    }
    accuracy_of(&predictions(model, data.images())?, data.labels())
}
