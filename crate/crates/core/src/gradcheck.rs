//! Central-difference verification of tape gradients.
//!
//! The checker runs the model closure once on the tape, then re-evaluates it
//! with each trainable element nudged ±eps inside a detached scope. Forward
//! values are identical on and off the tape, so the comparison isolates the
//! backward rules. Precision is forced to f64 by the signature.

use crate::engine::{Engine, EngineError};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("eps must be positive, got {0}")]
    BadEps(f64),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FdStatus {
    Checked,
    /// Frozen parameters receive no gradient and are not perturbed.
    SkippedFrozen,
}

impl std::fmt::Display for FdStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FdStatus::Checked => write!(f, "checked"),
            FdStatus::SkippedFrozen => write!(f, "no gradient, skipped"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub status: FdStatus,
}

/// Outcome of one finite-difference run over a parameter store.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl FdReport {
    pub fn checked_entries(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.status == FdStatus::Checked)
            .count()
    }
}

/// rel(a, b) with a floor so zero-gradient entries compare absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-4);
    (a - b).abs() / denom
}

/// Compare tape gradients against central differences for every trainable
/// element of `store`. `forward` must build a scalar loss from the store's
/// current values; it is re-run 2·n times for the perturbations.
pub fn finite_diff_check<Fwd>(
    store: &mut ParamStore<f64>,
    eps: f64,
    tol: f64,
    mut forward: Fwd,
) -> Result<FdReport, GradCheckError>
where
    Fwd: FnMut(&mut Engine<f64>, &ParamStore<f64>) -> crate::engine::Result<Tensor<f64>>,
{
    if eps <= 0.0 {
        return Err(GradCheckError::BadEps(eps));
    }

    // Tape pass.
    store.zero_grads();
    let mut engine = Engine::<f64>::new();
    let loss = forward(&mut engine, store)?;
    let loss_value = loss.item();
    if !loss_value.is_finite() {
        return Err(GradCheckError::NonFiniteLoss(loss_value));
    }
    engine.backward(&loss)?;

    let mut eval = |store: &ParamStore<f64>| -> Result<f64, GradCheckError> {
        let mut e = Engine::<f64>::new();
        let out = e.detached(|e| forward(e, store))?;
        let v = out.item();
        if !v.is_finite() {
            return Err(GradCheckError::NonFiniteLoss(v));
        }
        Ok(v)
    };

    let names: Vec<String> = store.names().cloned().collect();
    let mut entries = Vec::with_capacity(names.len());
    let mut max_rel = 0.0f64;
    for name in names {
        if store.entry(&name).frozen {
            entries.push(FdEntry {
                name,
                max_rel_err: 0.0,
                status: FdStatus::SkippedFrozen,
            });
            continue;
        }
        let numel = store.entry(&name).numel();
        let tape_grad: Vec<f64> = store.entry(&name).grad().clone();
        let mut entry_max = 0.0f64;
        for i in 0..numel {
            let orig = store.entry(&name).value()[i];
            store.set_element(&name, i, orig + eps);
            let plus = eval(store)?;
            store.set_element(&name, i, orig - eps);
            let minus = eval(store)?;
            store.set_element(&name, i, orig);
            let fd = (plus - minus) / (2.0 * eps);
            entry_max = entry_max.max(rel_err(tape_grad[i], fd));
        }
        max_rel = max_rel.max(entry_max);
        entries.push(FdEntry {
            name,
            max_rel_err: entry_max,
            status: FdStatus::Checked,
        });
    }

    Ok(FdReport {
        entries,
        max_rel_err: max_rel,
        tol,
        pass: max_rel < tol,
    })
}

/// Scalar loss `mean(t ⊙ c) · 1`: distinct constant weights make the check
/// sensitive to element misrouting in the backward rules.
pub fn weighted_mean_loss(
    engine: &mut Engine<f64>,
    t: &Tensor<f64>,
    weights: &Tensor<f64>,
) -> crate::engine::Result<Tensor<f64>> {
    let prod = engine.mul(t, weights)?;
    let m0 = engine.mean_over_axis(&prod, 0)?;
    let m1 = engine.mean_over_axis(&m0, 1)?;
    engine.reshape(&m1, vec![1])
}
