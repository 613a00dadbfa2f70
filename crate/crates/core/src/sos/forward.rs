use std::time::{Duration, Instant};

use crate::data::{GrayImage, SlideView};
use crate::nets::{
    attention_distribution, classify_highres, classify_lowres, extract, fuse_pool, gru_fuse, pool_features,
    ExtractorParams, PoolMode,
};
use crate::numerics::{argmax, ParamStore, Tape, Tensor, Var};

use super::model::{FusionMode, SosModel, Variant};
use super::{epu_switch, select_patches, EpuDecision, Pathway, SosError};

/// How the high-resolution pathway picks its patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PatchChoice {
    /// The `K` most attended patches, weighted by renormalized attention.
    TopK,
    /// A fixed list, weighted uniformly. Used to isolate the fusion path in tests.
    Pinned(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct HrnOutput {
    pub dist: Var,
    pub attention: Var,
    pub chosen: Vec<usize>,
}

/// Feature vector of `image` under `extractor`.
pub fn image_features(
    tape: &mut Tape,
    store: &ParamStore,
    extractor: &ExtractorParams,
    image: &GrayImage,
) -> Result<Var, SosError> {
    let x = tape.constant(image.to_tensor());
    Ok(extract(tape, store, extractor, x)?)
}

/// `𝒩_s` from the image-level features `v`.
pub fn lrn_forward(tape: &mut Tape, model: &SosModel, v: Var) -> Result<Var, SosError> {
    let head = model
        .lowres_head
        .as_ref()
        .ok_or_else(|| SosError::Usage(format!("{} model has no low-resolution head", model.variant())))?;
    Ok(classify_lowres(tape, &model.store, head, v)?)
}

/// `π(a | s)` of an RDMS model.
pub fn policy_forward(tape: &mut Tape, model: &SosModel, image: &GrayImage) -> Result<Var, SosError> {
    let policy = model
        .policy
        .as_ref()
        .ok_or_else(|| SosError::Usage(format!("{} model has no policy", model.variant())))?;
    let u = image_features(tape, &model.store, &policy.extractor, image)?;
    Ok(policy.head.distribution(tape, &model.store, u)?)
}

/// Attention, patch selection, patch features, fusion and classification.
/// Only the chosen patches are read from `slide`.
pub fn hrn_forward(
    tape: &mut Tape,
    model: &SosModel,
    v: Var,
    slide: &dyn SlideView,
    choice: &PatchChoice,
) -> Result<HrnOutput, SosError> {
    let store = &model.store;
    let hrn = model
        .hrn
        .as_ref()
        .ok_or_else(|| SosError::Usage(format!("{} model has no high-resolution pathway", model.variant())))?;
    if slide.patch_count() != model.config.patch_count {
        return Err(SosError::Usage(format!(
            "slide {} has {} patches, model expects {}",
            slide.slide_id(),
            slide.patch_count(),
            model.config.patch_count
        )));
    }
    let attention = attention_distribution(tape, store, &hrn.attention, v)?;

    let (chosen, weights) = match choice {
        PatchChoice::TopK => {
            let chosen = select_patches(tape.value(attention).data(), model.config.k)?;
            let picked = chosen
                .iter()
                .map(|&i| tape.index(attention, i))
                .collect::<Result<Vec<_>, _>>()?;
            let total = tape.sum_scalars(&picked)?;
            let weights = picked
                .into_iter()
                .map(|p| tape.div(p, total))
                .collect::<Result<Vec<_>, _>>()?;
            (chosen, weights)
        }
        PatchChoice::Pinned(list) => {
            if list.is_empty() || list.iter().any(|&i| i >= slide.patch_count()) {
                return Err(SosError::Usage(format!("invalid pinned patches {list:?}")));
            }
            let w = tape.constant(Tensor::scalar(1.0 / list.len() as f64));
            (list.clone(), vec![w; list.len()])
        }
    };

    let mut features = Vec::with_capacity(chosen.len());
    for (&i, &w) in chosen.iter().zip(&weights) {
        let patch = slide.patch(i)?;
        let f = image_features(tape, store, &hrn.patch, &patch)?;
        features.push(tape.mul(f, w)?);
    }

    let m = match (model.config.fusion, hrn.residual) {
        (FusionMode::Gru, true) => gru_fuse(tape, store, hrn.gru.as_ref().expect("gru fusion"), v, &features)?,
        (FusionMode::Gru, false) => {
            let h0 = tape.constant(Tensor::zeros(&[model.config.feature_dim()]));
            hrn.gru.as_ref().expect("gru fusion").run(tape, store, h0, &features)?
        }
        (mode, residual) => {
            let mode = if mode == FusionMode::Max {
                PoolMode::Max
            } else {
                PoolMode::Average
            };
            if residual {
                fuse_pool(tape, mode, v, &features)?
            } else {
                pool_features(tape, mode, &features)?
            }
        }
    };
    let dist = classify_highres(tape, store, &hrn.head, m)?;
    Ok(HrnOutput {
        dist,
        attention,
        chosen,
    })
}

/// Outcome of classifying one slide.
#[derive(Clone, Debug)]
pub struct Inference {
    pub predicted: usize,
    pub pathway: Pathway,
    /// Present for gated models.
    pub decision: Option<EpuDecision>,
    pub chosen: Vec<usize>,
    /// Number of patches passed through the patch extractor.
    pub patch_reads: usize,
    pub elapsed: Duration,
}

/// The gated protocol: low-resolution pass, gate, and the high-resolution
/// pass only when the gate fails. `threshold` overrides the learned `c`.
pub fn sos_infer(model: &SosModel, slide: &dyn SlideView, threshold: Option<f64>) -> Result<Inference, SosError> {
    let start = Instant::now();
    let c = match threshold.or_else(|| model.threshold_value()) {
        Some(c) => c,
        None => return Err(SosError::Usage(format!("{} model has no threshold", model.variant()))),
    };
    let mut tape = Tape::new();
    let v = image_features(&mut tape, &model.store, &model.lowres, slide.lowres())?;
    let ns = lrn_forward(&mut tape, model, v)?;
    let mut decision = epu_switch(tape.value(ns).data(), c)?;
    let (predicted, chosen) = match decision.predicted_label {
        Some(q) => (q, Vec::new()),
        None => {
            let out = hrn_forward(&mut tape, model, v, slide, &PatchChoice::TopK)?;
            let q = argmax(tape.value(out.dist).data());
            decision.predicted_label = Some(q);
            (q, out.chosen)
        }
    };
    Ok(Inference {
        predicted,
        pathway: decision.pathway,
        decision: Some(decision),
        patch_reads: chosen.len(),
        chosen,
        elapsed: start.elapsed(),
    })
}

/// Test-time behaviour of every variant.
///
/// MultiScale runs the gated protocol with `c = 1`, which no confidence can
/// exceed. RDMS follows the most probable policy action.
pub fn infer(model: &SosModel, slide: &dyn SlideView) -> Result<Inference, SosError> {
    match model.variant() {
        Variant::Sos => sos_infer(model, slide, None),
        Variant::MultiScale => sos_infer(model, slide, Some(1.0)),
        Variant::ImageLevel | Variant::PatchLevel | Variant::Rdms => {
            let start = Instant::now();
            let mut tape = Tape::new();
            let zoom = match model.variant() {
                Variant::ImageLevel => false,
                Variant::PatchLevel => true,
                _ => {
                    let pi = policy_forward(&mut tape, model, slide.lowres())?;
                    argmax(tape.value(pi).data()) == 1
                }
            };
            let v = image_features(&mut tape, &model.store, &model.lowres, slide.lowres())?;
            let (predicted, pathway, chosen) = if zoom {
                let out = hrn_forward(&mut tape, model, v, slide, &PatchChoice::TopK)?;
                (argmax(tape.value(out.dist).data()), Pathway::HighRes, out.chosen)
            } else {
                let ns = lrn_forward(&mut tape, model, v)?;
                (argmax(tape.value(ns).data()), Pathway::LowRes, Vec::new())
            };
            Ok(Inference {
                predicted,
                pathway,
                decision: None,
                patch_reads: chosen.len(),
                chosen,
                elapsed: start.elapsed(),
            })
        }
    }
}
