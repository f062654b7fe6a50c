use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::DataError;
use crate::tensor::Tensor;

/// Reflect padding used by the random crop.
pub const CROP_PAD: usize = 4;
/// Default mixup Beta parameter.
pub const MIXUP_ALPHA: f64 = 0.8;

/// Rows of class probabilities, one per image.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelBatch {
    num_classes: usize,
    data: Vec<f64>,
}

impl SoftLabelBatch {
    pub fn new(num_classes: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if num_classes == 0 || data.is_empty() || data.len() % num_classes != 0 {
            return Err(DataError::Invalid(format!(
                "{} soft-label entries for {num_classes} classes",
                data.len()
            )));
        }
        for (r, row) in data.chunks(num_classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(DataError::Invalid(format!(
                    "soft-label row {r} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(SoftLabelBatch { num_classes, data })
    }

    pub fn from_hard(labels: &[usize], num_classes: usize) -> Result<Self, DataError> {
        let mut data = vec![0.0; labels.len() * num_classes];
        for (r, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(DataError::Label {
                    record: r,
                    label: l,
                    classes: num_classes,
                });
            }
            data[r * num_classes + l] = 1.0;
        }
        SoftLabelBatch::new(num_classes, data)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn mix(&self, partner: &[usize], weight_self: f64) -> SoftLabelBatch {
        let c = self.num_classes;
        let mut data = Vec::with_capacity(self.data.len());
        for (i, &j) in partner.iter().enumerate() {
            for k in 0..c {
                data.push(weight_self * self.data[i * c + k] + (1.0 - weight_self) * self.data[j * c + k]);
            }
        }
        SoftLabelBatch { num_classes: c, data }
    }
}

/// Crop offset into the padded image and whether to mirror horizontally.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropFlip {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

fn dims(batch: &Tensor<f32>) -> Result<[usize; 4], DataError> {
    match *batch.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(DataError::Augment(format!("expected N x C x H x W, got {s:?}"))),
    }
}

/// Reflect-pads each image by `pad`, takes the `H x W` window at the given
/// offset, then mirrors it if requested. Offset `(pad, pad)` without flip is
/// the identity.
pub fn crop_flip(batch: &Tensor<f32>, pad: usize, params: &[CropFlip]) -> Result<Tensor<f32>, DataError> {
    let [n, c, h, w] = dims(batch)?;
    if params.len() != n {
        return Err(DataError::Augment(format!(
            "{} crop parameters for {n} images",
            params.len()
        )));
    }
    if pad >= h || pad >= w {
        return Err(DataError::Augment(format!(
            "reflect pad {pad} needs images larger than {h}x{w}"
        )));
    }
    if let Some(p) = params.iter().find(|p| p.dy > 2 * pad || p.dx > 2 * pad) {
        return Err(DataError::Augment(format!(
            "crop offset {p:?} outside [0, {}]",
            2 * pad
        )));
    }
    let src = batch.data();
    let mut out = Vec::with_capacity(src.len());
    for (img, p) in params.iter().enumerate() {
        for ch in 0..c {
            let plane = &src[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
            for y in 0..h {
                let sy = reflect(y as isize + p.dy as isize - pad as isize, h);
                for x in 0..w {
                    let xx = if p.flip { w - 1 - x } else { x };
                    let sx = reflect(xx as isize + p.dx as isize - pad as isize, w);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
    }
    Ok(Tensor::new(batch.shape().to_vec(), out)?)
}

pub fn hflip(batch: &Tensor<f32>) -> Result<Tensor<f32>, DataError> {
    let n = dims(batch)?[0];
    crop_flip(
        batch,
        0,
        &vec![
            CropFlip {
                dy: 0,
                dx: 0,
                flip: true
            };
            n
        ],
    )
}

/// Random 4-pixel reflect-padded crop plus random horizontal flip.
pub fn augment_basic(batch: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>, DataError> {
    let n = dims(batch)?[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<CropFlip> = (0..n)
        .map(|_| CropFlip {
            dy: rng.gen_range(0..=2 * CROP_PAD),
            dx: rng.gen_range(0..=2 * CROP_PAD),
            flip: rng.gen(),
        })
        .collect();
    crop_flip(batch, CROP_PAD, &params)
}

/// A uniformly random permutation of `0..n` without fixed points.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>, DataError> {
    if n < 2 {
        return Err(DataError::Augment(format!("pairing needs at least 2 images, got {n}")));
    }
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return Ok(p);
        }
    }
}

fn check_pairing(batch: &Tensor<f32>, labels: &SoftLabelBatch, partner: &[usize]) -> Result<usize, DataError> {
    let n = dims(batch)?[0];
    if n < 2 {
        return Err(DataError::Augment("mixing needs a batch of at least 2".into()));
    }
    if labels.len() != n || partner.len() != n || partner.iter().any(|&j| j >= n) {
        return Err(DataError::Augment(format!(
            "batch {n}, labels {}, pairing {:?}",
            labels.len(),
            partner
        )));
    }
    Ok(n)
}

/// `x_i <- lambda x_i + (1 - lambda) x_partner(i)`, labels likewise.
pub fn mixup_with(
    batch: &Tensor<f32>,
    labels: &SoftLabelBatch,
    lambda: f64,
    partner: &[usize],
) -> Result<(Tensor<f32>, SoftLabelBatch), DataError> {
    let n = check_pairing(batch, labels, partner)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DataError::Augment(format!("mixing weight {lambda} outside [0, 1]")));
    }
    let per = batch.len() / n;
    let src = batch.data();
    let (l, r) = (lambda as f32, (1.0 - lambda) as f32);
    let mut out = Vec::with_capacity(src.len());
    for (i, &j) in partner.iter().enumerate() {
        let (a, b) = (&src[i * per..(i + 1) * per], &src[j * per..(j + 1) * per]);
        // Clamping keeps rounding from leaving the convex hull of the pair.
        out.extend(
            a.iter()
                .zip(b)
                .map(|(&x, &y)| (l * x + r * y).clamp(x.min(y), x.max(y))),
        );
    }
    Ok((Tensor::new(batch.shape().to_vec(), out)?, labels.mix(partner, lambda)))
}

/// Mixup with `lambda ~ Beta(a, a)` and a random derangement pairing.
pub fn mixup(
    batch: &Tensor<f32>,
    labels: &SoftLabelBatch,
    a: f64,
    seed: u64,
) -> Result<(Tensor<f32>, SoftLabelBatch), DataError> {
    if !(a > 0.0) {
        return Err(DataError::Augment(format!("Beta parameter must be positive, got {a}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partner = derangement(dims(batch)?[0], &mut rng)?;
    let lambda = Beta::new(a, a).expect("positive parameters").sample(&mut rng);
    mixup_with(batch, labels, lambda, &partner)
}

/// Half-open pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    /// Box of area about `(1 - lambda) H W` centered at `(cy, cx)`, clipped
    /// to the image.
    pub fn from_lambda(h: usize, w: usize, lambda: f64, cy: usize, cx: usize) -> CutBox {
        let r = (1.0 - lambda).clamp(0.0, 1.0).sqrt();
        let (ch, cw) = ((h as f64 * r).round() as isize, (w as f64 * r).round() as isize);
        let clip = |v: isize, n: usize| v.clamp(0, n as isize) as usize;
        let (cy, cx) = (cy as isize, cx as isize);
        CutBox {
            y0: clip(cy - ch / 2, h),
            y1: clip(cy - ch / 2 + ch, h),
            x0: clip(cx - cw / 2, w),
            x1: clip(cx - cw / 2 + cw, w),
        }
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// Pastes `cut` from each partner image; labels are weighted by the pasted
/// pixel fraction.
pub fn cutmix_with(
    batch: &Tensor<f32>,
    labels: &SoftLabelBatch,
    cut: CutBox,
    partner: &[usize],
) -> Result<(Tensor<f32>, SoftLabelBatch), DataError> {
    let n = check_pairing(batch, labels, partner)?;
    let [_, c, h, w] = dims(batch)?;
    if cut.y0 > cut.y1 || cut.x0 > cut.x1 || cut.y1 > h || cut.x1 > w {
        return Err(DataError::Augment(format!("box {cut:?} outside {h}x{w}")));
    }
    let src = batch.data();
    let mut out = src.to_vec();
    let per = c * h * w;
    for (i, &j) in partner.iter().enumerate().take(n) {
        for ch in 0..c {
            for y in cut.y0..cut.y1 {
                let row = ch * h * w + y * w;
                out[i * per + row + cut.x0..i * per + row + cut.x1]
                    .copy_from_slice(&src[j * per + row + cut.x0..j * per + row + cut.x1]);
            }
        }
    }
    let pasted = cut.area() as f64 / (h * w) as f64;
    Ok((
        Tensor::new(batch.shape().to_vec(), out)?,
        labels.mix(partner, 1.0 - pasted),
    ))
}

/// CutMix with `lambda ~ Beta(1, 1)`, a uniform box center and a random
/// derangement pairing.
pub fn cutmix(
    batch: &Tensor<f32>,
    labels: &SoftLabelBatch,
    seed: u64,
) -> Result<(Tensor<f32>, SoftLabelBatch), DataError> {
    let [n, _, h, w] = dims(batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partner = derangement(n, &mut rng)?;
    let lambda: f64 = Beta::new(1.0, 1.0).expect("positive parameters").sample(&mut rng);
    let cut = CutBox::from_lambda(h, w, lambda, rng.gen_range(0..h), rng.gen_range(0..w));
    cutmix_with(batch, labels, cut, &partner)
}
