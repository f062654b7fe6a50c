//! 2-D Fourier analysis of image planes: transforms, low/high-pass masks,
//! Fourier basis noise, spectrum statistics, and the attention low-pass decay
//! experiment.

mod decay;
pub mod fft;
mod mask;
mod noise;
mod spectrum;
mod stats;

pub use decay::attention_lowpass_decay;
pub use mask::{conjugate_partner, filter_image, filter_plane, make_mask, FrequencyMask, MaskVariant, PassMode};
pub use noise::{fourier_basis, fourier_basis_noise};
pub use spectrum::{center, dft2, idft2, residue_tolerance, ComplexSpectrum, Layout};
pub use stats::{highfreq_energy_ratio, spectrum_energy_map};
