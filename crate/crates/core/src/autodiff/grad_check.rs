//! Central finite-difference validation of autodiff gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::tensor::{Real, Tensor};

use super::{Graph, Var};

/// Denominator floor for the relative error, so that coordinates whose true
/// derivative is numerically zero are judged on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Which coordinates of the input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    Sampled { count: usize, seed: u64 },
}

/// Compares the autodiff gradient of `f` at `x` against
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`. Passes iff the maximum relative error
/// is strictly below `tol`, so `tol = 0` always fails.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64, tol: f64, coords: Coords) -> Result<GradCheckReport, TensorError>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var, TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            detail: format!("step must be positive, got {h}"),
        });
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone())?;
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get(xv).expect("input is a differentiable leaf").clone();

    let eval = |probe: Tensor<T>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.constant(probe)?;
        let out = f(&mut g, v)?;
        let val = g.value(out).item().and_then(|v| v.to_f64()).unwrap_or(f64::NAN);
        if !val.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check probe" });
        }
        Ok(val)
    };

    let indices: Vec<usize> = match coords {
        Coords::All => (0..x.len()).collect(),
        Coords::Sampled { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, x.len(), count.min(x.len())).into_vec()
        }
    };

    let hs = T::lit(h);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: indices.first().copied().unwrap_or(0),
        checked: indices.len(),
        tol,
        passed: false,
    };
    for &i in &indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += hs;
        let mut minus = x.clone();
        minus.data_mut()[i] -= hs;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let auto = analytic.data()[i].to_f64().unwrap();
        let abs = (auto - numeric).abs();
        let rel = abs / auto.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
