//! Policy-gradient pieces of the reinforced multi-scale baseline.

use crate::data::GrayImage;
use crate::numerics::{OptimizerState, Tape, Var};
use crate::sos::{policy_forward, SosError, SosModel};

use super::TrainError;

/// Floor applied to the low-resolution loss in the reward denominator.
pub const REWARD_FLOOR: f64 = 1e-12;

/// `R = a · (l_ce2 − l_ce1) / l_ce1`. The flag reports whether `l_ce1` hit the floor.
pub fn rdms_reward(action: usize, l_ce1: f64, l_ce2: f64) -> (f64, bool) {
    if action == 0 {
        return (0.0, false);
    }
    let clamped = l_ce1 < REWARD_FLOOR;
    let denom = l_ce1.max(REWARD_FLOOR);
    (action as f64 * (l_ce2 - l_ce1) / denom, clamped)
}

/// One observation: the action taken and the reward it earned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Episode {
    pub action: usize,
    pub reward: f64,
}

/// `(1/B) Σ −R · log π(a | s)` with `R` held constant.
pub fn rdms_policy_loss(tape: &mut Tape, policies: &[Var], episodes: &[Episode]) -> Result<Var, SosError> {
    if policies.is_empty() || policies.len() != episodes.len() {
        return Err(SosError::Usage(format!(
            "{} policy outputs for {} episodes",
            policies.len(),
            episodes.len()
        )));
    }
    let mut terms = Vec::with_capacity(episodes.len());
    for (&pi, ep) in policies.iter().zip(episodes) {
        let p = tape.index(pi, ep.action)?;
        let p = tape.clamp_min(p, 1e-12);
        let lp = tape.log(p)?;
        terms.push(tape.scale(lp, -ep.reward));
    }
    let total = tape.sum_scalars(&terms)?;
    Ok(tape.scale(total, 1.0 / episodes.len() as f64))
}

/// A REINFORCE step on the policy alone.
pub fn rdms_update(
    model: &mut SosModel,
    optimizer: &mut OptimizerState,
    images: &[&GrayImage],
    episodes: &[Episode],
) -> Result<f64, TrainError> {
    model.store.zero_grads();
    let mut tape = Tape::new();
    let policies = images
        .iter()
        .map(|img| policy_forward(&mut tape, model, img))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = rdms_policy_loss(&mut tape, &policies, episodes)?;
    let value = tape.item(loss);
    if tape.requires_grad(loss) {
        tape.backward_into(loss, &mut model.store)?;
    }
    optimizer.step(&mut model.store)?;
    model.store.zero_grads();
    Ok(value)
}
