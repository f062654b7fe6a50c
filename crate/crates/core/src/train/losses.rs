use crate::autodiff::{Graph, Var};
use crate::data::SoftLabelBatch;
use crate::error::TrainError;
use crate::tensor::{Real, Tensor};

/// Tolerance on soft-label row sums accepted by [`ce_loss`].
pub const SOFT_LABEL_TOL: f64 = 1e-4;

/// Classification targets for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Hard(Vec<usize>),
    /// Row-major `N x num_classes` probabilities.
    Soft {
        num_classes: usize,
        rows: Vec<f64>,
    },
}

impl From<SoftLabelBatch> for Targets {
    fn from(s: SoftLabelBatch) -> Self {
        Targets::Soft {
            num_classes: s.num_classes(),
            rows: s.data().to_vec(),
        }
    }
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Hard(l) => l.len(),
            Targets::Soft { num_classes, rows } => rows.len() / (*num_classes).max(1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dense `N x num_classes` target tensor, validated against `n x c`.
    pub fn dense<T: Real>(&self, n: usize, c: usize) -> Result<Tensor<T>, TrainError> {
        match self {
            Targets::Hard(labels) => {
                if labels.len() != n {
                    return Err(TrainError::Labels(format!(
                        "{} labels for {n} logit rows",
                        labels.len()
                    )));
                }
                if let Some(&l) = labels.iter().find(|&&l| l >= c) {
                    return Err(TrainError::Labels(format!("label {l} outside [0, {c})")));
                }
                Ok(Tensor::from_fn(vec![n, c], |i| {
                    if labels[i / c] == i % c {
                        T::one()
                    } else {
                        T::zero()
                    }
                }))
            }
            Targets::Soft { num_classes, rows } => {
                if *num_classes != c || rows.len() != n * c {
                    return Err(TrainError::Labels(format!(
                        "{} soft-label entries over {num_classes} classes for {n} x {c} logits",
                        rows.len()
                    )));
                }
                for (r, row) in rows.chunks(c).enumerate() {
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > SOFT_LABEL_TOL || row.iter().any(|&v| !(v >= 0.0)) {
                        return Err(TrainError::Labels(format!("soft-label row {r} sums to {sum}")));
                    }
                }
                Ok(Tensor::from_fn(vec![n, c], |i| T::lit(rows[i])))
            }
        }
    }
}

fn logit_dims<T: Real>(g: &Graph<T>, logits: Var) -> Result<(usize, usize), TrainError> {
    match *g.shape(logits) {
        [n, c] => Ok((n, c)),
        ref s => Err(TrainError::Labels(format!("logits must be N x C, got {s:?}"))),
    }
}

/// Mean over the batch of `-sum_c y_c log softmax(logits)_c`.
pub fn ce_loss<T: Real>(g: &mut Graph<T>, logits: Var, targets: &Targets) -> Result<Var, TrainError> {
    let (n, c) = logit_dims(g, logits)?;
    let y = g.constant(targets.dense(n, c)?)?;
    let lp = g.log_softmax(logits, 1)?;
    let picked = g.mul(lp, y)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, -1.0 / n as f64)?)
}

/// Mean over the batch of `0.5 [KL(p || q) + KL(q || p)]` for the softmax
/// distributions of the two logit sets, written as
/// `0.5 sum_c (p_c - q_c)(log p_c - log q_c)`.
pub fn symmetric_kl<T: Real>(g: &mut Graph<T>, logits_p: Var, logits_q: Var) -> Result<Var, TrainError> {
    let (n, _) = logit_dims(g, logits_p)?;
    if g.shape(logits_p) != g.shape(logits_q) {
        return Err(TrainError::Labels(format!(
            "{:?} vs {:?}",
            g.shape(logits_p),
            g.shape(logits_q)
        )));
    }
    let p = g.softmax(logits_p, 1)?;
    let q = g.softmax(logits_q, 1)?;
    let lp = g.log_softmax(logits_p, 1)?;
    let lq = g.log_softmax(logits_q, 1)?;
    let dp = g.sub(p, q)?;
    let dl = g.sub(lp, lq)?;
    let prod = g.mul(dp, dl)?;
    let total = g.sum(prod)?;
    Ok(g.scale(total, 0.5 / n as f64)?)
}

/// Row-wise argmax; the lowest index wins ties.
pub fn argmax_rows<T: Real>(logits: &[T], num_classes: usize) -> Vec<usize> {
    logits
        .chunks(num_classes)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// `0.5 CE(student, labels) + 0.5 CE(student, argmax(teacher))`.
pub fn distill_loss<T: Real>(
    g: &mut Graph<T>,
    student: Var,
    labels: &Targets,
    teacher_logits: &Tensor<T>,
) -> Result<Var, TrainError> {
    let (n, c) = logit_dims(g, student)?;
    if teacher_logits.shape() != [n, c] {
        return Err(TrainError::Labels(format!(
            "teacher logits {:?} vs student {:?}",
            teacher_logits.shape(),
            [n, c]
        )));
    }
    let decision = Targets::Hard(argmax_rows(teacher_logits.data(), c));
    let a = ce_loss(g, student, labels)?;
    let b = ce_loss(g, student, &decision)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5)?)
}
