//! The selective switch: the confidence gate, top-K patch selection, the
//! model that owns every parameter, its forward passes, and the losses.

mod forward;
mod loss;
mod model;

use crate::data::DataError;
use crate::nets::checkpoint::CheckpointError;
use crate::numerics::{argmax, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};

pub use forward::{
    hrn_forward, image_features, infer, lrn_forward, policy_forward, sos_infer, HrnOutput, Inference, PatchChoice,
};
pub use loss::{
    loss_cross_entropy, loss_hesitation, loss_hubristic, loss_paradoxical, loss_total, LossBreakdown, LossConfig,
};
pub use model::{FusionMode, HrnParams, ModelConfig, PolicyParams, SosModel, Variant};

#[derive(Debug, thiserror::Error)]
pub enum SosError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Usage(String),
}

/// Raw scalar `θ` behind the threshold `c = sigmoid(θ)`.
#[derive(Clone, Copy, Debug)]
pub struct ThresholdParam {
    pub theta: ParamId,
}

impl ThresholdParam {
    pub fn init(store: &mut ParamStore, name: &str) -> Self {
        Self {
            theta: store.add(name, Tensor::scalar(0.0)),
        }
    }

    pub fn value(&self, store: &ParamStore) -> f64 {
        crate::numerics::sigmoid(store.value(self.theta).item())
    }

    /// `c` on the tape, so losses can move `θ`.
    pub fn var(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let theta = tape.param(store, self.theta);
        tape.sigmoid(theta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pathway {
    LowRes,
    HighRes,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpuDecision {
    pub pathway: Pathway,
    pub confidence: f64,
    pub threshold: f64,
    /// Known immediately on the low-resolution path; filled in after the
    /// high-resolution pass otherwise.
    pub predicted_label: Option<usize>,
}

fn check_distribution(dist: &[f64]) -> Result<(), NumericsError> {
    if dist.is_empty() {
        return Err(NumericsError::Domain("empty distribution".into()));
    }
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(NumericsError::Domain(format!("{dist:?} is not a distribution")));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(NumericsError::Domain(format!("distribution sums to {total}")));
    }
    Ok(())
}

/// Takes the low-resolution answer iff `max(dist) > c`.
///
/// `c` may sit on either closed end so that a saturated threshold can force
/// one pathway.
pub fn epu_switch(dist: &[f64], c: f64) -> Result<EpuDecision, NumericsError> {
    check_distribution(dist)?;
    if !(0.0..=1.0).contains(&c) {
        return Err(NumericsError::Domain(format!("threshold {c} outside [0, 1]")));
    }
    let q = argmax(dist);
    let confidence = dist[q];
    let low = confidence > c;
    Ok(EpuDecision {
        pathway: if low { Pathway::LowRes } else { Pathway::HighRes },
        confidence,
        threshold: c,
        predicted_label: low.then_some(q),
    })
}

/// Indices of the `k` most probable patches, most probable first, ties to
/// the lower index.
pub fn select_patches(attention: &[f64], k: usize) -> Result<Vec<usize>, SosError> {
    if k == 0 || k > attention.len() {
        return Err(SosError::Usage(format!(
            "cannot select {k} of {} patches",
            attention.len()
        )));
    }
    let mut order: Vec<usize> = (0..attention.len()).collect();
    order.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}
