//! Training objective: cross-entropy on both pathways, the paradoxical
//! hinge, and the threshold calibration terms (hesitation and hubris).

use crate::numerics::{argmax, Tape, Tensor, Var};

use super::SosError;

const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    pub enable_l2: bool,
    pub enable_l3: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 1.0,
            epsilon: 1e-3,
            enable_l2: true,
            enable_l3: true,
        }
    }
}

/// Values of every term for one batch. Disabled terms are reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_ce1: f64,
    pub l_ce2: f64,
    pub l1: f64,
    pub l2: f64,
    pub l_he: f64,
    pub l_hu: f64,
    pub l3: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 8] = ["l_ce1", "l_ce2", "l1", "l2", "l_he", "l_hu", "l3", "l_total"];

    pub fn values(&self) -> [f64; 8] {
        [
            self.l_ce1, self.l_ce2, self.l1, self.l2, self.l_he, self.l_hu, self.l3, self.l_total,
        ]
    }
}

fn check_batch(tape: &Tape, dists: &[&[Var]], labels: &[usize]) -> Result<usize, SosError> {
    if labels.is_empty() {
        return Err(SosError::Usage("empty batch".into()));
    }
    for d in dists {
        if d.len() != labels.len() {
            return Err(SosError::Usage(format!(
                "{} distributions for {} labels",
                d.len(),
                labels.len()
            )));
        }
    }
    for (i, &y) in labels.iter().enumerate() {
        for d in dists {
            let n = tape.value(d[i]).numel();
            if y >= n {
                return Err(SosError::Usage(format!("label {y} out of range for {n} classes")));
            }
        }
    }
    Ok(labels.len())
}

fn is_correct(tape: &Tape, dist: Var, label: usize) -> bool {
    argmax(tape.value(dist).data()) == label
}

fn mean(tape: &mut Tape, terms: &[Var]) -> Result<Var, SosError> {
    let total = tape.sum_scalars(terms)?;
    Ok(tape.scale(total, 1.0 / terms.len() as f64))
}

fn sum_or_zero(tape: &mut Tape, terms: &[Var]) -> Result<Var, SosError> {
    if terms.is_empty() {
        Ok(tape.constant(Tensor::scalar(0.0)))
    } else {
        Ok(tape.sum_scalars(terms)?)
    }
}

/// `(1/B) Σ −log max(p_true, 1e-12)`.
pub fn loss_cross_entropy(tape: &mut Tape, dists: &[Var], labels: &[usize]) -> Result<Var, SosError> {
    check_batch(tape, &[dists], labels)?;
    let mut terms = Vec::with_capacity(labels.len());
    for (&d, &y) in dists.iter().zip(labels) {
        let p = tape.index(d, y)?;
        let p = tape.clamp_min(p, LOG_FLOOR);
        let lp = tape.log(p)?;
        terms.push(tape.neg(lp));
    }
    mean(tape, &terms)
}

/// `(1/B) Σ max(N_s[y] − N_h[y], 0)`.
pub fn loss_paradoxical(tape: &mut Tape, ns: &[Var], nh: &[Var], labels: &[usize]) -> Result<Var, SosError> {
    check_batch(tape, &[ns, nh], labels)?;
    let mut terms = Vec::with_capacity(labels.len());
    for ((&s, &h), &y) in ns.iter().zip(nh).zip(labels) {
        let ps = tape.index(s, y)?;
        let ph = tape.index(h, y)?;
        let gap = tape.sub(ps, ph)?;
        terms.push(tape.relu(gap));
    }
    mean(tape, &terms)
}

/// `Σ y_s · max(c + ε − max N_s, 0)`, summed over the batch. `y_s` is a constant.
pub fn loss_hesitation(
    tape: &mut Tape,
    ns: &[Var],
    labels: &[usize],
    c: Var,
    epsilon: f64,
) -> Result<Var, SosError> {
    check_batch(tape, &[ns], labels)?;
    let margin = tape.offset(c, epsilon);
    let mut terms = Vec::new();
    for (&s, &y) in ns.iter().zip(labels) {
        if !is_correct(tape, s, y) {
            continue;
        }
        let conf = tape.max(s);
        let gap = tape.sub(margin, conf)?;
        terms.push(tape.relu(gap));
    }
    sum_or_zero(tape, &terms)
}

/// `Σ y_h · (1 − y_s) · max(max N_s − c, 0)`, summed over the batch.
pub fn loss_hubristic(tape: &mut Tape, ns: &[Var], nh: &[Var], labels: &[usize], c: Var) -> Result<Var, SosError> {
    check_batch(tape, &[ns, nh], labels)?;
    let mut terms = Vec::new();
    for ((&s, &h), &y) in ns.iter().zip(nh).zip(labels) {
        if is_correct(tape, s, y) || !is_correct(tape, h, y) {
            continue;
        }
        let conf = tape.max(s);
        let gap = tape.sub(conf, c)?;
        terms.push(tape.relu(gap));
    }
    sum_or_zero(tape, &terms)
}

/// `L1 + L2 + L3` with `L3 = (λ1 L_he + λ2 L_hu) / B`.
pub fn loss_total(
    tape: &mut Tape,
    ns: &[Var],
    nh: &[Var],
    labels: &[usize],
    c: Var,
    config: &LossConfig,
) -> Result<(Var, LossBreakdown), SosError> {
    let b = check_batch(tape, &[ns, nh], labels)?;
    let ce1 = loss_cross_entropy(tape, ns, labels)?;
    let ce2 = loss_cross_entropy(tape, nh, labels)?;
    let l1 = tape.add(ce1, ce2)?;
    let mut total = l1;
    let mut out = LossBreakdown {
        l_ce1: tape.item(ce1),
        l_ce2: tape.item(ce2),
        l1: tape.item(l1),
        lambda1: config.lambda1,
        lambda2: config.lambda2,
        epsilon: config.epsilon,
        batch_size: b,
        ..LossBreakdown::default()
    };
    if config.enable_l2 {
        let l2 = loss_paradoxical(tape, ns, nh, labels)?;
        out.l2 = tape.item(l2);
        total = tape.add(total, l2)?;
    }
    if config.enable_l3 {
        let he = loss_hesitation(tape, ns, labels, c, config.epsilon)?;
        let hu = loss_hubristic(tape, ns, nh, labels, c)?;
        let he_w = tape.scale(he, config.lambda1);
        let hu_w = tape.scale(hu, config.lambda2);
        let l3 = tape.add(he_w, hu_w)?;
        let l3 = tape.scale(l3, 1.0 / b as f64);
        out.l_he = tape.item(he);
        out.l_hu = tape.item(hu);
        out.l3 = tape.item(l3);
        total = tape.add(total, l3)?;
    }
    out.l_total = tape.item(total);
    Ok((total, out))
}
