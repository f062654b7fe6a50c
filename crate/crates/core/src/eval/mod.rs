//! Accuracy, frequency-filtered sweeps, Fourier heat maps and perturbation
//! spectra.

mod accuracy;
mod heatmap;
mod spectrum;
mod sweep;

pub use accuracy::{accuracy_of, evaluate_accuracy, predictions, Classifier, EVAL_BATCH};
pub use heatmap::{
    fourier_heatmap, heatmap_subset, scaled_noise_norm, FourierHeatMap, HeatmapConfig, HEATMAP_HEADER, HEATMAP_SUBSET,
    REFERENCE_IMAGE_SIZE, REFERENCE_NOISE_NORM,
};
pub use spectrum::{perturbation_spectrum_report, SpectrumReport, CRAFT_BATCH, SPECTRUM_HEADER};
pub use sweep::{filtered_accuracy_sweep, filtered_images, SweepRecord, SweepReport, SWEEP_HEADER};
