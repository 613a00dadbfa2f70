//! Checks shared by the integration tests and the acceptance binary.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sos_core::data::{
    generate_synthetic_dataset, load_manifest, pgm, preprocess_slide, DataError, GrayImage, Geometry, PreparedSlide,
    SlideRecord, SynthConfig, SyntheticSlides, MANIFEST_FILE,
};
use sos_core::nets::checkpoint::{Checkpoint, CheckpointError};
use sos_core::numerics::{
    finite_difference_check, softmax_values, ParamId, ParamStore, NumericsError, Tape, Tensor, Var,
};
use sos_core::sos::{
    epu_switch, hrn_forward, image_features, loss_cross_entropy, loss_hesitation, loss_hubristic, loss_paradoxical,
    loss_total, lrn_forward, FusionMode, LossConfig, ModelConfig, PatchChoice, Pathway, SosModel, Variant,
};
use sos_core::train::rdms_policy_loss;

pub const GRAD_TOL: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
pub const SEEDS: u64 = 5;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub fn assert_all(outcomes: &[Outcome]) {
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).collect();
    assert!(failed.is_empty(), "failed checks: {failed:#?}");
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Like `uniform` but keeps every value at least `margin` from `kink`.
fn off_kink(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, kink: f64, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if (v - kink).abs() >= margin {
                break v;
            }
        })
        .collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(out ⊙ r)` for a fixed random `r`, so every output element matters.
fn project(t: &mut Tape, out: Var, seed: u64) -> Result<Var, NumericsError> {
    let shape = t.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let r = t.constant(tensor(&shape, uniform(&mut rng, n, -1.0, 1.0)));
    let y = t.mul(out, r)?;
    Ok(t.sum(y))
}

type Unary = fn(&mut Tape, Var) -> Result<Var, NumericsError>;

fn check_over_seeds(name: &str, mut case: impl FnMut(u64) -> Result<f64, NumericsError>) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        match case(seed) {
            Ok(e) if e.is_finite() => worst = worst.max(e),
            Ok(e) => return Outcome::new(name, false, format!("seed {seed}: error {e}")),
            Err(e) => return Outcome::new(name, false, format!("seed {seed}: {e}")),
        }
    }
    Outcome::new(name, worst < GRAD_TOL, format!("max rel err {worst:.2e}"))
}

fn unary_case(name: &str, shape: &[usize], lo: f64, hi: f64, kink: Option<f64>, op: Unary) -> Outcome {
    let shape = shape.to_vec();
    check_over_seeds(name, move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = match kink {
            Some(k) => off_kink(&mut rng, n, lo, hi, k, 1e-3),
            None => uniform(&mut rng, n, lo, hi),
        };
        finite_difference_check(
            |t, x| {
                let y = op(t, x)?;
                project(t, y, seed)
            },
            &tensor(&shape, data),
            STEP,
        )
    })
}

type Binary = fn(&mut Tape, Var, Var) -> Result<Var, NumericsError>;

/// Checks the gradient with respect to each operand in turn.
fn binary_case(name: &str, sa: &[usize], sb: &[usize], b_range: (f64, f64), op: Binary) -> Vec<Outcome> {
    let (sa, sb) = (sa.to_vec(), sb.to_vec());
    let make = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = tensor(&sa, uniform(&mut rng, sa.iter().product(), -1.5, 1.5));
        let b = tensor(&sb, uniform(&mut rng, sb.iter().product(), b_range.0, b_range.1));
        (a, b)
    };
    vec![
        check_over_seeds(&format!("{name} (lhs)"), |seed| {
            let (a, b) = make(seed);
            finite_difference_check(
                |t, x| {
                    let c = t.constant(b.clone());
                    let y = op(t, x, c)?;
                    project(t, y, seed)
                },
                &a,
                STEP,
            )
        }),
        check_over_seeds(&format!("{name} (rhs)"), |seed| {
            let (a, b) = make(seed);
            finite_difference_check(
                |t, x| {
                    let c = t.constant(a.clone());
                    let y = op(t, c, x)?;
                    project(t, y, seed)
                },
                &b,
                STEP,
            )
        }),
    ]
}

fn split_rows(t: &mut Tape, x: Var, rows: usize, cols: usize, offset: usize) -> Result<Vec<Var>, NumericsError> {
    (0..rows)
        .map(|r| {
            let parts = (0..cols)
                .map(|c| t.index(x, offset + r * cols + c))
                .collect::<Result<Vec<_>, _>>()?;
            t.concat(&parts)
        })
        .collect()
}

fn softmax_rows(t: &mut Tape, x: Var, rows: usize, cols: usize, offset: usize) -> Result<Vec<Var>, NumericsError> {
    split_rows(t, x, rows, cols, offset)?
        .into_iter()
        .map(|r| t.softmax(r))
        .collect()
}

fn sos_err(e: sos_core::sos::SosError) -> NumericsError {
    match e {
        sos_core::sos::SosError::Numerics(n) => n,
        other => NumericsError::Usage(other.to_string()),
    }
}

fn argmax(v: &[f64]) -> usize {
    sos_core::numerics::argmax(v)
}

/// Every primitive and every loss against central differences.
pub fn gradient_suite() -> Vec<Outcome> {
    let mut out = vec![
        unary_case("relu", &[12], -2.0, 2.0, Some(0.0), |t, x| Ok(t.relu(x))),
        unary_case("sigmoid", &[12], -4.0, 4.0, None, |t, x| Ok(t.sigmoid(x))),
        unary_case("tanh", &[12], -2.0, 2.0, None, |t, x| Ok(t.tanh(x))),
        unary_case("log", &[12], 0.1, 3.0, None, |t, x| t.log(x)),
        unary_case("neg", &[12], -2.0, 2.0, None, |t, x| Ok(t.neg(x))),
        unary_case("scale", &[12], -2.0, 2.0, None, |t, x| Ok(t.scale(x, -1.7))),
        unary_case("offset", &[12], -2.0, 2.0, None, |t, x| Ok(t.offset(x, 0.3))),
        unary_case("clamp_min", &[12], -1.0, 1.0, Some(0.2), |t, x| Ok(t.clamp_min(x, 0.2))),
        unary_case("softmax", &[7], -3.0, 3.0, None, |t, x| t.softmax(x)),
        unary_case("sum", &[16], -2.0, 2.0, None, |t, x| Ok(t.sum(x))),
        unary_case("index", &[9], -2.0, 2.0, None, |t, x| t.index(x, 4)),
        unary_case("max", &[9], -2.0, 2.0, None, |t, x| Ok(t.max(x))),
        unary_case("reshape", &[2, 6], -2.0, 2.0, None, |t, x| t.reshape(x, &[3, 4])),
        unary_case("global_avg_pool", &[2, 2, 3], -2.0, 2.0, None, |t, x| t.global_avg_pool(x)),
        unary_case("concat", &[6], -2.0, 2.0, None, |t, x| {
            let c = t.constant(Tensor::vector(&[0.5, -0.5]));
            let y = t.concat(&[x, c, x])?;
            Ok(y)
        }),
        unary_case("elementwise_max", &[12], -2.0, 2.0, None, |t, x| {
            let a = t.reshape(x, &[12])?;
            let b = t.scale(a, -1.0);
            let c = t.offset(a, 0.37);
            t.elementwise_max(&[a, b, c])
        }),
    ];
    out.extend(binary_case("add", &[4, 3], &[4, 3], (-1.5, 1.5), |t, a, b| t.add(a, b)));
    out.extend(binary_case("sub", &[4, 3], &[4, 3], (-1.5, 1.5), |t, a, b| t.sub(a, b)));
    out.extend(binary_case("mul", &[4, 3], &[4, 3], (-1.5, 1.5), |t, a, b| t.mul(a, b)));
    out.extend(binary_case("div", &[4, 3], &[4, 3], (0.5, 2.0), |t, a, b| t.div(a, b)));
    out.extend(binary_case("mul by scalar", &[6], &[1], (-1.5, 1.5), |t, a, b| t.mul(a, b)));
    out.extend(binary_case("div by scalar", &[6], &[1], (0.5, 2.0), |t, a, b| t.div(a, b)));
    out.extend(binary_case("matmul", &[2, 3], &[3, 4], (-1.5, 1.5), |t, a, b| t.matmul(a, b)));
    out.extend(binary_case("affine weight/input", &[3, 4], &[4], (-1.5, 1.5), |t, w, x| {
        let b = t.constant(Tensor::vector(&[0.1, -0.2, 0.3]));
        t.affine(w, x, b)
    }));
    out.push(unary_case("affine bias", &[3], -1.0, 1.0, None, |t, b| {
        let w = t.constant(tensor(&[3, 2], vec![0.5, -1.0, 0.25, 2.0, -0.7, 0.1]));
        let x = t.constant(Tensor::vector(&[0.3, -0.6]));
        t.affine(w, x, b)
    }));
    out.extend(binary_case("conv2d input/weight s2p1", &[1, 4, 4], &[1, 1, 3, 3], (-1.0, 1.0), |t, x, w| {
        let b = t.constant(Tensor::vector(&[0.05]));
        t.conv2d(x, w, b, 2, 1)
    }));
    out.extend(binary_case("conv2d input/weight s1p0", &[2, 3, 3], &[2, 2, 2, 2], (-1.0, 1.0), |t, x, w| {
        let b = t.constant(Tensor::vector(&[0.05, -0.1]));
        t.conv2d(x, w, b, 1, 0)
    }));
    out.push(unary_case("conv2d bias", &[2], -1.0, 1.0, None, |t, b| {
        let x = t.constant(tensor(&[1, 3, 3], (0..9).map(|i| i as f64 * 0.1 - 0.4).collect()));
        let w = t.constant(tensor(&[2, 1, 2, 2], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.6, -0.3]));
        t.conv2d(x, w, b, 1, 1)
    }));
    out.extend(loss_gradients());
    out.push(composite_model_gradient());
    out
}

fn loss_gradients() -> Vec<Outcome> {
    let mut out = Vec::new();

    out.push(check_over_seeds("loss: cross entropy", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::vector(&uniform(&mut rng, 12, -2.0, 2.0));
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
        finite_difference_check(
            |t, x| {
                let d = softmax_rows(t, x, 3, 4, 0)?;
                loss_cross_entropy(t, &d, &labels).map_err(sos_err)
            },
            &x,
            STEP,
        )
    }));

    out.push(check_over_seeds("loss: paradoxical", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, labels) = loop {
            let x = uniform(&mut rng, 16, -2.0, 2.0);
            let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..4)).collect();
            let inside = (0..2).all(|o| {
                let s = softmax_values(&x[o * 4..o * 4 + 4]);
                let h = softmax_values(&x[8 + o * 4..8 + o * 4 + 4]);
                (s[labels[o]] - h[labels[o]]).abs() > 1e-4
            });
            if inside {
                break (x, labels);
            }
        };
        finite_difference_check(
            |t, x| {
                let ns = softmax_rows(t, x, 2, 4, 0)?;
                let nh = softmax_rows(t, x, 2, 4, 8)?;
                loss_paradoxical(t, &ns, &nh, &labels).map_err(sos_err)
            },
            &Tensor::vector(&x),
            STEP,
        )
    }));

    out.push(check_over_seeds("loss: hesitation (logits and theta)", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = 1e-3;
        let (x, labels) = loop {
            let mut x = uniform(&mut rng, 13, -1.5, 1.5);
            x[12] = rng.random_range(-1.0..1.0);
            let c = sos_core::numerics::sigmoid(x[12]);
            let mut labels = Vec::new();
            let mut ok = true;
            for o in 0..3 {
                let s = softmax_values(&x[o * 4..o * 4 + 4]);
                let q = argmax(&s);
                // two correct observations, one wrong
                labels.push(if o < 2 { q } else { (q + 1) % 4 });
                ok &= (c + eps - s[q]).abs() > 1e-4;
            }
            if ok {
                break (x, labels);
            }
        };
        finite_difference_check(
            |t, x| {
                let ns = softmax_rows(t, x, 3, 4, 0)?;
                let theta = t.index(x, 12)?;
                let c = t.sigmoid(theta);
                loss_hesitation(t, &ns, &labels, c, eps).map_err(sos_err)
            },
            &Tensor::vector(&x),
            STEP,
        )
    }));

    out.push(check_over_seeds("loss: hubristic (logits)", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 0.3;
        let (x, labels) = loop {
            let x = uniform(&mut rng, 16, -2.0, 2.0);
            let mut labels = Vec::new();
            let mut ok = true;
            for o in 0..2 {
                let s = softmax_values(&x[o * 4..o * 4 + 4]);
                let h = softmax_values(&x[8 + o * 4..8 + o * 4 + 4]);
                let y = argmax(&h);
                labels.push(y);
                ok &= argmax(&s) != y && (s[argmax(&s)] - c).abs() > 1e-4;
            }
            if ok {
                break (x, labels);
            }
        };
        finite_difference_check(
            |t, x| {
                let ns = softmax_rows(t, x, 2, 4, 0)?;
                let nh = softmax_rows(t, x, 2, 4, 8)?;
                let c = t.constant(Tensor::scalar(c));
                loss_hubristic(t, &ns, &nh, &labels, c).map_err(sos_err)
            },
            &Tensor::vector(&x),
            STEP,
        )
    }));

    out.push(check_over_seeds("loss: hubristic (theta)", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ns = [0.7, 0.2, 0.1];
        let nh = [0.1, 0.8, 0.1];
        let theta = rng.random_range(-1.5..0.5);
        finite_difference_check(
            |t, x| {
                let s = t.constant(Tensor::vector(&ns));
                let h = t.constant(Tensor::vector(&nh));
                let c = t.sigmoid(x);
                loss_hubristic(t, &[s], &[h], &[1], c).map_err(sos_err)
            },
            &Tensor::scalar(theta),
            STEP,
        )
    }));

    out.push(check_over_seeds("loss: total", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = LossConfig::default();
        let (x, labels) = loop {
            let x = uniform(&mut rng, 13, -2.0, 2.0);
            let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
            let c = sos_core::numerics::sigmoid(x[12]);
            let ok = (0..2).all(|o| {
                let s = softmax_values(&x[o * 3..o * 3 + 3]);
                let h = softmax_values(&x[6 + o * 3..6 + o * 3 + 3]);
                let m = s[argmax(&s)];
                let y = labels[o];
                (s[y] - h[y]).abs() > 1e-4 && (c + cfg.epsilon - m).abs() > 1e-4 && (m - c).abs() > 1e-4
            });
            if ok {
                break (x, labels);
            }
        };
        finite_difference_check(
            |t, x| {
                let ns = softmax_rows(t, x, 2, 3, 0)?;
                let nh = softmax_rows(t, x, 2, 3, 6)?;
                let theta = t.index(x, 12)?;
                let c = t.sigmoid(theta);
                loss_total(t, &ns, &nh, &labels, c, &cfg).map(|r| r.0).map_err(sos_err)
            },
            &Tensor::vector(&x),
            STEP,
        )
    }));

    out.push(check_over_seeds("loss: policy surrogate", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::vector(&uniform(&mut rng, 6, -2.0, 2.0));
        let episodes: Vec<_> = (0..3)
            .map(|_| sos_core::train::Episode {
                action: rng.random_range(0..2),
                reward: rng.random_range(-1.0..1.0),
            })
            .collect();
        finite_difference_check(
            |t, x| {
                let pis = softmax_rows(t, x, 3, 2, 0)?;
                rdms_policy_loss(t, &pis, &episodes).map_err(sos_err)
            },
            &x,
            STEP,
        )
    }));
    out
}

/// A tiny gated model on noise slides, whose selected patches are stable
/// under the probe step.
pub fn tiny_model(variant: Variant, fusion: FusionMode, seed: u64) -> SosModel {
    let mut c = ModelConfig::new(variant, 3, 4, 2, fusion, 3);
    c.channels = vec![2, 3];
    let mut m = SosModel::new(c, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        let name = m.store.get(id).name.clone();
        if name.ends_with("bias") || name.contains(".b_") {
            for v in m.store.value_mut(id).data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
    m
}

pub fn noise_slide(seed: u64, side: usize, grid: usize, label: usize) -> PreparedSlide {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = || GrayImage::new(side, side, uniform(&mut rng, side * side, 0.0, 1.0)).unwrap();
    PreparedSlide {
        slide_id: format!("noise{seed}"),
        lowres: img(),
        patches: (0..grid * grid).map(|_| img()).collect(),
        label,
        grid_side: grid,
    }
}

fn composite_model_gradient() -> Outcome {
    check_over_seeds("composite model loss (all parameters)", |seed| {
        let model = tiny_model(Variant::Sos, FusionMode::Gru, seed);
        let slides: Vec<PreparedSlide> = (0..2).map(|i| noise_slide(seed * 10 + i, 8, 2, i as usize)).collect();
        // top-K order must survive the probe
        for s in &slides {
            let mut t = Tape::new();
            let v = image_features(&mut t, &model.store, &model.lowres, &s.lowres).map_err(sos_err)?;
            let out = hrn_forward(&mut t, &model, v, s, &PatchChoice::TopK).map_err(sos_err)?;
            let mut a = t.value(out.attention).data().to_vec();
            a.sort_by(|x, y| y.total_cmp(x));
            if a.windows(2).any(|w| (w[0] - w[1]).abs() < 1e-6) {
                return Ok(0.0);
            }
        }
        let labels: Vec<usize> = slides.iter().map(|s| s.label).collect();
        let ids: Vec<_> = model.store.ids().collect();
        let mut store = model.store.clone();
        let cfg = LossConfig::default();
        param_check(
            &mut store,
            &ids,
            |t, st| {
                let m = SosModel {
                    store: st.clone(),
                    ..model.clone()
                };
                let mut ns = Vec::new();
                let mut nh = Vec::new();
                for s in &slides {
                    let v = image_features(t, &m.store, &m.lowres, &s.lowres).map_err(sos_err)?;
                    ns.push(lrn_forward(t, &m, v).map_err(sos_err)?);
                    nh.push(hrn_forward(t, &m, v, s, &PatchChoice::TopK).map_err(sos_err)?.dist);
                }
                let c = m.threshold.unwrap().var(t, &m.store);
                let ce1 = loss_cross_entropy(t, &ns, &labels).map_err(sos_err)?;
                let ce2 = loss_cross_entropy(t, &nh, &labels).map_err(sos_err)?;
                let l1 = t.add(ce1, ce2)?;
                let l3 = loss_total(t, &ns, &nh, &labels, c, &cfg).map_err(sos_err)?.0;
                t.add(l1, l3)
            },
        )
    })
}

/// Central differences over every element of `ids`. Gradients below 1e-6 are
/// compared absolutely: deep in the network they sit at the difference noise.
fn param_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: impl Fn(&mut Tape, &ParamStore) -> Result<Var, NumericsError>,
) -> Result<f64, NumericsError> {
    store.zero_grads();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward_into(out, store)?;
    let mut worst: f64 = 0.0;
    let mut scratch = store.clone();
    for &id in ids {
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            let mut eval = |x: f64| -> Result<f64, NumericsError> {
                scratch.value_mut(id).data_mut()[i] = x;
                let mut t = Tape::new();
                let v = f(&mut t, &scratch)?;
                Ok(t.item(v))
            };
            let numeric = (eval(orig + STEP)? - eval(orig - STEP)?) / (2.0 * STEP);
            eval(orig)?;
            let analytic = store.grad(id).data()[i];
            worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1e-6));
        }
    }
    Ok(worst)
}

/// The hand-computable loss values.
pub fn loss_identities() -> Vec<Outcome> {
    let mut t = Tape::new();
    let vec = |t: &mut Tape, v: &[f64]| t.constant(Tensor::vector(v));
    let mut out = Vec::new();
    let mut close = |name: &str, got: f64, want: f64| {
        out.push(Outcome::new(
            name,
            (got - want).abs() <= 1e-12,
            format!("got {got:.15}, want {want}"),
        ));
    };

    let ns = vec(&mut t, &[0.9, 0.05, 0.05]);
    let nh = vec(&mut t, &[0.6, 0.3, 0.1]);
    let l2 = loss_paradoxical(&mut t, &[ns], &[nh], &[0]).unwrap();
    close("paradoxical 0.9 vs 0.6", t.item(l2), 0.3);
    let ns2 = vec(&mut t, &[0.3, 0.7, 0.0]);
    let nh2 = vec(&mut t, &[0.8, 0.1, 0.1]);
    let l2 = loss_paradoxical(&mut t, &[ns2], &[nh2], &[0]).unwrap();
    close("paradoxical hinge at 0.3 vs 0.8", t.item(l2), 0.0);
    let l2 = loss_paradoxical(&mut t, &[ns, ns2], &[nh, nh2], &[0, 0]).unwrap();
    close("paradoxical batch of two", t.item(l2), 0.15);

    let c = t.constant(Tensor::scalar(0.62));
    let s = vec(&mut t, &[0.5, 0.3, 0.2]);
    let he = loss_hesitation(&mut t, &[s], &[0], c, 1e-3).unwrap();
    close("hesitation 0.621 - 0.5", t.item(he), 0.121);
    let he = loss_hesitation(&mut t, &[s], &[2], c, 1e-3).unwrap();
    close("hesitation wrong LRN", t.item(he), 0.0);
    let s7 = vec(&mut t, &[0.7, 0.2, 0.1]);
    let he = loss_hesitation(&mut t, &[s7], &[0], c, 1e-3).unwrap();
    close("hesitation above c + eps", t.item(he), 0.0);

    let s8 = vec(&mut t, &[0.8, 0.1, 0.1]);
    let h = vec(&mut t, &[0.1, 0.8, 0.1]);
    let hu = loss_hubristic(&mut t, &[s8], &[h], &[1], c).unwrap();
    close("hubristic 0.8 - 0.62", t.item(hu), 0.18);
    let hu = loss_hubristic(&mut t, &[s8], &[h], &[0], c).unwrap();
    close("hubristic correct LRN", t.item(hu), 0.0);
    let hu = loss_hubristic(&mut t, &[s8], &[h], &[2], c).unwrap();
    close("hubristic both wrong", t.item(hu), 0.0);

    let cfg = LossConfig::default();
    let l3 = (cfg.lambda1 * 0.2 + cfg.lambda2 * 0.1) / 4.0;
    close("l3 from l_he 0.2, l_hu 0.1, B 4", l3, 0.05);

    // full breakdown against a composition of the scalar oracles
    let batch = [
        ([0.5, 0.3, 0.2], [0.2, 0.7, 0.1], 0usize),
        ([0.8, 0.1, 0.1], [0.1, 0.8, 0.1], 1),
        ([0.2, 0.2, 0.6], [0.1, 0.1, 0.8], 2),
        ([0.9, 0.05, 0.05], [0.6, 0.3, 0.1], 0),
    ];
    let ns: Vec<Var> = batch.iter().map(|b| vec(&mut t, &b.0)).collect();
    let nh: Vec<Var> = batch.iter().map(|b| vec(&mut t, &b.1)).collect();
    let labels: Vec<usize> = batch.iter().map(|b| b.2).collect();
    let (total, br) = loss_total(&mut t, &ns, &nh, &labels, c, &cfg).unwrap();
    let (mut ce1, mut ce2, mut l2, mut he, mut hu) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (s, h, y) in &batch {
        ce1 -= s[*y].ln();
        ce2 -= h[*y].ln();
        l2 += (s[*y] - h[*y]).max(0.0);
        let q = argmax(s);
        let qh = argmax(h);
        if q == *y {
            he += (0.62 + 1e-3 - s[q]).max(0.0);
        } else if qh == *y {
            hu += (s[q] - 0.62).max(0.0);
        }
    }
    let want = (ce1 + ce2) / 4.0 + l2 / 4.0 + (0.5 * he + hu) / 4.0;
    close("total on a seeded batch", t.item(total), want);
    close("breakdown sums", br.l1 + br.l2 + br.l3, br.l_total);
    out
}

/// `epu_switch` against an exhaustive grid of (max prob, c) in steps of 0.05.
pub fn gate_truth_table() -> Outcome {
    let mut cases = 0;
    for i in 0..=20 {
        for j in 0..=20 {
            // exact decimal grid so boundary equality is exact
            let m = i as f64 / 20.0;
            let c = j as f64 / 20.0;
            let dist = if m >= 0.5 {
                vec![m, 1.0 - m]
            } else {
                // max must stay m: spread the rest over enough classes
                let k = (1.0 / m.max(0.05)).ceil() as usize;
                let mut d = vec![m; k.max(2)];
                let rest = 1.0 - m * (d.len() - 1) as f64;
                *d.last_mut().unwrap() = rest;
                if rest > m || rest < 0.0 {
                    continue;
                }
                d
            };
            let max = dist.iter().cloned().fold(f64::MIN, f64::max);
            let oracle = if max > c { Pathway::LowRes } else { Pathway::HighRes };
            let d = match epu_switch(&dist, c) {
                Ok(d) => d,
                Err(e) => return Outcome::new("gate truth table", false, format!("{dist:?}, c={c}: {e}")),
            };
            let low_label_ok = match d.pathway {
                Pathway::LowRes => d.predicted_label == Some(argmax(&dist)),
                Pathway::HighRes => d.predicted_label.is_none(),
            };
            if d.pathway != oracle || !low_label_ok || d.confidence != max {
                return Outcome::new("gate truth table", false, format!("{dist:?}, c={c}: {d:?}"));
            }
            cases += 1;
        }
    }
    let boundary = epu_switch(&[0.6, 0.4], 0.6).map(|d| d.pathway == Pathway::HighRes).unwrap_or(false);
    Outcome::new(
        "gate truth table",
        boundary && cases > 400,
        format!("{cases} grid cases agree; equality routes to HighRes: {boundary}"),
    )
}

/// Paper-scale arithmetic and desk-scale bit-exact reconstruction.
pub fn preprocessing() -> Vec<Outcome> {
    let mut out = Vec::new();
    let paper = Geometry::new(40000, 40).unwrap();
    out.push(Outcome::new(
        "paper geometry 40000 / 40",
        paper.lowres_side == 1000 && paper.patch_side == 1000 && paper.patch_count == 1600,
        format!(
            "s = {0}x{0}, P = {1}, patch {2}x{2}",
            paper.lowres_side, paper.patch_count, paper.patch_side
        ),
    ));
    let desk = Geometry::new(256, 8).unwrap();
    out.push(Outcome::new(
        "desk geometry 256 / 8",
        desk.lowres_side == 32 && desk.patch_count == 64 && desk.patch_side == 32,
        format!("s = {0}x{0}, P = {1}", desk.lowres_side, desk.patch_count),
    ));
    out.push(Outcome::new(
        "non-divisible factor rejected",
        matches!(Geometry::new(256, 7), Err(DataError::Usage(_))),
        "256 / 7",
    ));

    let cfg = SynthConfig {
        train_counts: [2, 2, 2, 2],
        test_counts: [1, 1, 1, 1],
        ..SynthConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut exact = true;
    let mut count = 0;
    for (_, record) in SyntheticSlides::new(&cfg, 42).unwrap() {
        let p = preprocess_slide(&record, 8).unwrap();
        exact &= p.patches.len() == 64 && p.stitch().unwrap() == record.full_image;
        exact &= p.patches.iter().all(|q| q.height() == 32 && q.width() == 32);
        let again = p.stitch().unwrap().block_mean(8).unwrap();
        for (a, b) in again.data().iter().zip(p.lowres.data()) {
            worst = worst.max((a - b).abs());
        }
        count += 1;
    }
    out.push(Outcome::new(
        "desk stitch reconstruction",
        exact,
        format!("{count} slides stitched bit-exactly: {exact}"),
    ));
    out.push(Outcome::new(
        "desk downscale consistency",
        worst <= 1e-12,
        format!("max |block_mean(stitch) - s| = {worst:.1e}"),
    ));
    let constant = SlideRecord {
        slide_id: "c".into(),
        full_image: GrayImage::filled(64, 64, 0.75),
        label: 0,
    };
    let p = preprocess_slide(&constant, 8).unwrap();
    let flat = p.lowres.data().iter().chain(p.patches.iter().flat_map(|q| q.data())).all(|&v| v == 0.75);
    out.push(Outcome::new("constant image stays constant", flat, "value 0.75"));
    out
}

/// Round-trips and corruption handling for checkpoints and manifests.
pub fn persistence(dir: &Path) -> Vec<Outcome> {
    let mut out = Vec::new();

    let model = tiny_model(Variant::Rdms, FusionMode::Gru, 9);
    let path = dir.join("model.bin");
    model.save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let back = SosModel::load(&path).unwrap();
    let bits = |m: &SosModel| -> Vec<u64> {
        m.store
            .iter()
            .flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    out.push(Outcome::new(
        "checkpoint round trip",
        bits(&back) == bits(&model) && back.checkpoint().encode() == bytes,
        format!("{} bytes", bytes.len()),
    ));

    let corrupt = |mutate: &dyn Fn(&mut Vec<u8>)| {
        let mut b = bytes.clone();
        mutate(&mut b);
        Checkpoint::decode(&b)
    };
    out.push(Outcome::new(
        "checkpoint bad magic",
        matches!(corrupt(&|b| b[0] ^= 0xFF), Err(CheckpointError::BadMagic)),
        "first byte flipped",
    ));
    out.push(Outcome::new(
        "checkpoint unknown version",
        matches!(corrupt(&|b| b[8] = 7), Err(CheckpointError::UnsupportedVersion(7))),
        "version 7",
    ));
    out.push(Outcome::new(
        "checkpoint truncated",
        matches!(corrupt(&|b| b.truncate(b.len() / 2)), Err(CheckpointError::Truncated)),
        "half the file",
    ));
    let other = tiny_model(Variant::Sos, FusionMode::Gru, 9);
    let mut store = other.store.clone();
    out.push(Outcome::new(
        "checkpoint into wrong model",
        matches!(model.checkpoint().load_into(&mut store), Err(CheckpointError::Mismatch(_))),
        "rdms tensors into sos store",
    ));
    out.push(Outcome::new(
        "checkpoint missing file",
        matches!(SosModel::load(&dir.join("absent.bin")), Err(CheckpointError::Io { .. })),
        "absent.bin",
    ));

    let root = dir.join("data");
    let cfg = SynthConfig {
        train_counts: [1, 1, 1, 1],
        test_counts: [1, 0, 0, 1],
        full_side: 64,
        factor: 4,
        ..SynthConfig::default()
    };
    let written = generate_synthetic_dataset(&cfg, 5, &root).unwrap();
    let loaded = load_manifest(&root);
    out.push(Outcome::new(
        "manifest round trip",
        loaded.as_ref().map(|m| *m == written).unwrap_or(false),
        format!("{} entries", written.entries.len()),
    ));
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).unwrap();

    let tampered = text.replacen("#sos-manifest\t1", "#sos-manifest\t9", 1);
    fs::write(&manifest_path, &tampered).unwrap();
    out.push(Outcome::new(
        "manifest unknown version",
        matches!(load_manifest(&root), Err(DataError::UnknownVersion(_))),
        "version 9",
    ));
    fs::write(&manifest_path, &text).unwrap();

    let lowres_path = root.join(&written.entries[0].lowres_path);
    let original = fs::read(&lowres_path).unwrap();
    pgm::write_pgm(&lowres_path, &GrayImage::filled(3, 3, 0.5)).unwrap();
    out.push(Outcome::new(
        "manifest wrong image size",
        matches!(load_manifest(&root), Err(DataError::DimensionMismatch { .. })),
        "lowres replaced by 3x3",
    ));
    fs::write(&lowres_path, &original).unwrap();

    let victim = root.join(written.entries[0].patch_path(1, 2));
    fs::remove_file(&victim).unwrap();
    let missing = load_manifest(&root);
    out.push(Outcome::new(
        "manifest missing patch",
        matches!(&missing, Err(DataError::MissingFile(p)) if p == &victim),
        format!("{missing:?}").chars().take(120).collect::<String>(),
    ));

    let pgm_path = root.join(&written.entries[1].lowres_path);
    let raw = fs::read(&pgm_path).unwrap();
    fs::write(&pgm_path, &raw[..raw.len() - 2]).unwrap();
    out.push(Outcome::new(
        "pgm short data",
        matches!(pgm::read_pgm(&pgm_path), Err(DataError::DimensionMismatch { .. })),
        "two bytes removed",
    ));
    out
}
