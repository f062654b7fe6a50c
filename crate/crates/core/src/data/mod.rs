//! Datasets, CIFAR-10 ingestion and batch augmentations.

mod augment;
mod dataset;

pub use augment::{
    augment_basic, crop_flip, cutmix, cutmix_with, derangement, hflip, mixup, mixup_with, CropFlip, CutBox,
    SoftLabelBatch, CROP_PAD, MIXUP_ALPHA,
};
pub use dataset::{
    channel_stats, destandardize, load_cifar10, load_cifar10_file, load_raw, parse_cifar10_records, save_raw,
    standardize, synthetic, synthetic_split, Dataset, SyntheticSpec, CIFAR10_MEAN, CIFAR10_RECORD,
    CIFAR10_RECORDS_PER_FILE, CIFAR10_STD,
};
