use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::models::{decode, encode};
use crate::tensor::Tensor;

/// Per-channel mean of CIFAR-10 training pixels in `[0, 1]`.
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
/// Per-channel standard deviation of CIFAR-10 training pixels in `[0, 1]`.
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

pub const CIFAR10_RECORD: usize = 3073;
pub const CIFAR10_RECORDS_PER_FILE: usize = 10_000;

/// Labelled images stored standardized per channel: `(pixel - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    mean: Vec<f32>,
    std: Vec<f32>,
    split: String,
}

impl Dataset {
    /// Builds a dataset from already-standardized `N x C x H x W` images.
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        mean: Vec<f32>,
        std: Vec<f32>,
        split: impl Into<String>,
    ) -> Result<Self, DataError> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(DataError::Invalid(format!("images must be N x C x H x W, got {s:?}")));
        }
        if labels.len() != s[0] {
            return Err(DataError::Invalid(format!(
                "{} labels for {} images",
                labels.len(),
                s[0]
            )));
        }
        if mean.len() != s[1] || std.len() != s[1] {
            return Err(DataError::Invalid(format!(
                "standardization constants must have {} channels",
                s[1]
            )));
        }
        if std.iter().any(|&v| !(v > 0.0)) {
            return Err(DataError::Invalid("standard deviations must be positive".into()));
        }
        if let Some((record, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::Label {
                record,
                label,
                classes: num_classes,
            });
        }
        if !images.is_finite() {
            return Err(DataError::Invalid("non-finite pixel".into()));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            mean,
            std,
            split: split.into(),
        })
    }

    /// Standardizes `[0, 1]` pixel images with the given constants.
    pub fn from_pixels(
        pixels: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        mean: Vec<f32>,
        std: Vec<f32>,
        split: impl Into<String>,
    ) -> Result<Self, DataError> {
        if pixels.rank() != 4 || mean.len() != pixels.shape()[1] || std.len() != pixels.shape()[1] {
            return Err(DataError::Invalid(format!(
                "pixels {:?} vs {} channel constants",
                pixels.shape(),
                mean.len()
            )));
        }
        let images = standardize(&pixels, &mean, &std);
        Dataset::new(images, labels, num_classes, mean, std, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn std(&self) -> &[f32] {
        &self.std
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new(vec![indices.len(), c, h, w], data).expect("non-empty batch"),
            labels,
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        if indices.is_empty() || indices.iter().any(|&i| i >= self.len()) {
            return Err(DataError::Invalid("subset indices empty or out of range".into()));
        }
        let (images, labels) = self.batch(indices);
        Ok(Dataset {
            images,
            labels,
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Tensor::zeros(vec![1]),
            labels: Vec::new(),
            num_classes: self.num_classes,
            mean: self.mean.clone(),
            std: self.std.clone(),
            split: self.split.clone(),
        }
    }

    /// Pixel-space copy of standardized `batch` (which must use this
    /// dataset's channel layout).
    pub fn destandardize(&self, batch: &Tensor<f32>) -> Tensor<f32> {
        destandardize(batch, &self.mean, &self.std)
    }

    pub fn standardize(&self, pixels: &Tensor<f32>) -> Tensor<f32> {
        standardize(pixels, &self.mean, &self.std)
    }

    /// The same pixels re-expressed under other standardization constants,
    /// e.g. to evaluate a test split with the training statistics.
    pub fn restandardized(&self, mean: &[f32], std: &[f32]) -> Result<Dataset, DataError> {
        let pixels = self.destandardize(&self.images);
        Dataset::from_pixels(
            pixels,
            self.labels.clone(),
            self.num_classes,
            mean.to_vec(),
            std.to_vec(),
            self.split.clone(),
        )
    }
}

fn per_channel(t: &Tensor<f32>, f: impl Fn(f32, usize) -> f32) -> Tensor<f32> {
    let s = t.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let data = t.data().iter().enumerate().map(|(i, &v)| f(v, (i / hw) % c)).collect();
    Tensor::new(s.to_vec(), data).expect("same shape")
}

pub fn standardize(pixels: &Tensor<f32>, mean: &[f32], std: &[f32]) -> Tensor<f32> {
    per_channel(pixels, |v, c| (v - mean[c]) / std[c])
}

pub fn destandardize(images: &Tensor<f32>, mean: &[f32], std: &[f32]) -> Tensor<f32> {
    per_channel(images, |v, c| v * std[c] + mean[c])
}

/// Decodes CIFAR-10 binary records into `[0, 1]` pixels and labels.
pub fn parse_cifar10_records(bytes: &[u8], path: &str) -> Result<(Vec<f32>, Vec<usize>), DataError> {
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
        return Err(DataError::FileSize {
            path: path.into(),
            size: bytes.len(),
            record: CIFAR10_RECORD,
        });
    }
    let n = bytes.len() / CIFAR10_RECORD;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (record, chunk) in bytes.chunks(CIFAR10_RECORD).enumerate() {
        let label = chunk[0] as usize;
        if label > 9 {
            return Err(DataError::Label {
                record,
                label,
                classes: 10,
            });
        }
        labels.push(label);
        pixels.extend(chunk[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads one CIFAR-10 binary file of any positive number of records.
pub fn load_cifar10_file(path: impl AsRef<Path>, split: &str) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let (pixels, labels) = parse_cifar10_records(&read(path)?, &path.display().to_string())?;
    let pixels = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::from_pixels(pixels, labels, 10, CIFAR10_MEAN.to_vec(), CIFAR10_STD.to_vec(), split)
}

/// Loads the standard CIFAR-10 binary distribution: `data_batch_1..5.bin`
/// for `train`, `test_batch.bin` for `test`. Each file must hold exactly
/// 10000 records.
pub fn load_cifar10(dir: impl AsRef<Path>, split: &str) -> Result<Dataset, DataError> {
    let names: Vec<String> = match split {
        "train" => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        "test" => vec!["test_batch.bin".into()],
        other => return Err(DataError::Invalid(format!("unknown CIFAR-10 split `{other}`"))),
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let path = dir.as_ref().join(name);
        let bytes = read(&path)?;
        if bytes.len() != CIFAR10_RECORD * CIFAR10_RECORDS_PER_FILE {
            return Err(DataError::FileSize {
                path: path.display().to_string(),
                size: bytes.len(),
                record: CIFAR10_RECORD,
            });
        }
        let (p, l) = parse_cifar10_records(&bytes, &path.display().to_string())?;
        pixels.extend(p);
        labels.extend(l);
    }
    let pixels = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::from_pixels(pixels, labels, 10, CIFAR10_MEAN.to_vec(), CIFAR10_STD.to_vec(), split)
}

/// Writes `[0, 1]` pixel images and labels in the checkpoint container
/// under the names `images` and `labels`.
pub fn save_raw(path: impl AsRef<Path>, pixels: &Tensor<f32>, labels: &[usize]) -> Result<(), DataError> {
    let l = Tensor::new(vec![labels.len()], labels.iter().map(|&v| v as f32).collect())?;
    let path = path.as_ref();
    std::fs::write(path, encode([("images", pixels), ("labels", &l)])).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a container written by [`save_raw`]. Pixels are standardized with
/// their own per-channel mean and standard deviation.
pub fn load_raw(path: impl AsRef<Path>, num_classes: usize, split: &str) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let entries = decode(&read(path)?)?;
    let find = |name: &str| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| DataError::Invalid(format!("{}: missing tensor `{name}`", path.display())))
    };
    let pixels = find("images")?;
    let raw_labels = find("labels")?;
    let mut labels = Vec::with_capacity(raw_labels.len());
    for (record, &v) in raw_labels.data().iter().enumerate() {
        if !(v >= 0.0 && v.fract() == 0.0) {
            return Err(DataError::Invalid(format!(
                "record {record}: label {v} is not a class index"
            )));
        }
        labels.push(v as usize);
    }
    if pixels.rank() != 4 {
        return Err(DataError::Invalid(format!(
            "images must be N x C x H x W, got {:?}",
            pixels.shape()
        )));
    }
    let (mean, std) = channel_stats(&pixels);
    Dataset::from_pixels(pixels, labels, num_classes, mean, std, split)
}

/// Per-channel mean and (population) standard deviation, with a floor so
/// constant channels stay invertible.
pub fn channel_stats(pixels: &Tensor<f32>) -> (Vec<f32>, Vec<f32>) {
    let s = pixels.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for (i, &v) in pixels.data().iter().enumerate() {
        let ch = (i / hw) % c;
        sum[ch] += v as f64;
        sq[ch] += (v as f64) * (v as f64);
    }
    let count = (pixels.len() / c) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / count - m * m).max(0.0).sqrt().max(1e-3)) as f32)
        .collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

/// Parameters of the synthetic smooth-image classification task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// Smooth, low-frequency-dominated images whose class is carried by a
/// per-class pattern of low-frequency cosines. Every image adds a random
/// smooth nuisance field and faint pixel noise. The class prototypes depend
/// only on `seed`, so train and test sets built with the same seed and
/// different `sample_seed` share the task.
pub fn synthetic(spec: &SyntheticSpec, sample_seed: u64, split: &str) -> Result<Dataset, DataError> {
    let SyntheticSpec {
        n,
        num_classes,
        channels,
        image_size: side,
        seed,
    } = *spec;
    if n == 0 || num_classes < 2 || channels == 0 || side < 4 {
        return Err(DataError::Invalid(format!("bad synthetic spec {spec:?}")));
    }
    let tau = std::f64::consts::TAU;
    let wave = |fy: f64, fx: f64, ph: f64, y: usize, x: usize| {
        (tau * (fy * y as f64 + fx * x as f64) / side as f64 + ph).cos()
    };
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    // Three cosine components per (class, channel): (fy, fx, phase, amplitude).
    let protos: Vec<Vec<[f64; 4]>> = (0..num_classes * channels)
        .map(|_| {
            (0..3)
                .map(|_| {
                    [
                        proto_rng.gen_range(0..3) as f64,
                        proto_rng.gen_range(0..3) as f64,
                        proto_rng.gen_range(0.0..tau),
                        proto_rng.gen_range(0.1..0.2),
                    ]
                })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let plane = side * side;
    let mut pixels = Vec::with_capacity(n * channels * plane);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..num_classes);
        labels.push(label);
        let gain = rng.gen_range(0.6..1.2);
        for ch in 0..channels {
            let nuisance = [
                rng.gen_range(0..2) as f64,
                rng.gen_range(0..2) as f64,
                rng.gen_range(0.0..tau),
            ];
            let n_amp = rng.gen_range(0.0..0.08);
            let base = rng.gen_range(0.4..0.6);
            for y in 0..side {
                for x in 0..side {
                    let mut v = base + n_amp * wave(nuisance[0], nuisance[1], nuisance[2], y, x);
                    for &[fy, fx, ph, amp] in &protos[label * channels + ch] {
                        v += gain * amp * wave(fy, fx, ph, y, x);
                    }
                    v += rng.gen_range(-0.01..0.01);
                    pixels.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let pixels = Tensor::new(vec![n, channels, side, side], pixels)?;
    let (mean, std) = channel_stats(&pixels);
    Dataset::from_pixels(pixels, labels, num_classes, mean, std, split)
}

/// Train and test splits of one synthetic task; the test split is
/// standardized with the training statistics.
pub fn synthetic_split(spec: &SyntheticSpec, n_test: usize) -> Result<(Dataset, Dataset), DataError> {
    let train = synthetic(spec, spec.seed.wrapping_add(1), "train")?;
    let test = synthetic(
        &SyntheticSpec {
            n: n_test,
            ..spec.clone()
        },
        spec.seed.wrapping_add(2),
        "test",
    )?;
    let test = test.restandardized(train.mean(), train.std())?;
    Ok((train, test))
}
