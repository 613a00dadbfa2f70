//! Central-difference gradient checks.

use super::{NumericsError, ParamId, ParamStore, Tape, Tensor, Var};

/// Max over elements of `|analytic - numeric| / max(1e-8, |numeric|)` where the
/// numeric gradient is the central difference of `value` with step `h`.
pub fn compare_with_central_difference(
    value: impl Fn(&Tensor) -> f64,
    analytic: &[f64],
    x: &Tensor,
    h: f64,
) -> f64 {
    assert!(h > 0.0, "step must be positive");
    assert_eq!(analytic.len(), x.numel());
    check_param(analytic, x, h, value)
}

/// Checks the tape gradient of a scalar function of one tensor.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let input = tape.input(x.clone());
    let out = f(&mut tape, input)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(input)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let value = |probe: &Tensor| {
        let mut t = Tape::new();
        let v = t.input(probe.clone());
        f(&mut t, v).map(|o| t.item(o)).unwrap_or(f64::NAN)
    };
    Ok(compare_with_central_difference(value, &analytic, x, h))
}

/// Checks gradients of a scalar built from stored parameters, perturbing each
/// listed parameter in turn. Grads in `store` are zeroed before and after.
pub fn finite_difference_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: F,
    h: f64,
) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, NumericsError>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward_into(out, store)?;
    let mut worst: f64 = 0.0;
    for &id in ids {
        let analytic = store.grad(id).data().to_vec();
        let x = store.value(id).clone();
        let mut scratch = store.clone();
        let value = |probe: &Tensor| {
            *scratch.value_mut(id) = probe.clone();
            let mut t = Tape::new();
            f(&mut t, &scratch).map(|o| t.item(o)).unwrap_or(f64::NAN)
        };
        worst = worst.max(check_param(&analytic, &x, h, value));
    }
    store.zero_grads();
    Ok(worst)
}

fn check_param(analytic: &[f64], x: &Tensor, h: f64, mut value: impl FnMut(&Tensor) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = value(&probe);
        probe.data_mut()[i] = orig - h;
        let down = value(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1e-8));
    }
    worst
}
