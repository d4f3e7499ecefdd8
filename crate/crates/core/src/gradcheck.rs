//! Finite-difference verification of analytic gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Error;
use crate::params::ParamStore;
use crate::tape::{DiffArray, Precision, Tape};
use crate::Result;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over all parameter scalars of
    /// `|analytic - central| / max(|analytic|, |central|, 1e-12)`.
    pub max_rel_err: f64,
    /// Parameter where the maximum occurred.
    pub worst_param: String,
    pub scalars_checked: usize,
}

/// Compare reverse-mode gradients of `build` against central finite
/// differences over every parameter scalar in `params`.
///
/// `build` must construct the scalar loss on the given tape, binding
/// parameters through [`Tape::param`]; it must be deterministic (any
/// stochastic masks frozen), which is verified by evaluating it twice.
/// Runs in 64-bit regardless of the training precision.
pub fn finite_difference_check<F>(
    build: F,
    params: &mut ParamStore,
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<DiffArray>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new(Precision::F64);
        let loss = build(&tape, store)?;
        loss.item()
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(format!(
            "loss is not deterministic: {first} vs {second}; freeze stochastic masks before checking"
        )));
    }

    // Analytic gradients.
    params.zero_grads();
    let tape = Tape::new(Precision::F64);
    let loss = build(&tape, params)?;
    loss.backward_into(params)?;

    let names: Vec<String> = params.names().cloned().collect();
    let mut max_rel_err = 0.0f64;
    let mut worst_param = String::new();
    let mut scalars_checked = 0usize;
    for name in names {
        let n = params.get(&name)?.values.len();
        let analytic = params
            .get(&name)?
            .grad
            .clone()
            .ok_or_else(|| Error::Contract(format!("no gradient for `{name}` after reverse pass")))?;
        for i in 0..n {
            let original = params.get(&name)?.values[i];
            params.get_mut(&name)?.values[i] = original + h;
            let plus = eval(params)?;
            params.get_mut(&name)?.values[i] = original - h;
            let minus = eval(params)?;
            params.get_mut(&name)?.values[i] = original;
            let central = (plus - minus) / (2.0 * h);
            let rel = (analytic[i] - central).abs()
                / analytic[i].abs().max(central.abs()).max(1e-12);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_param = name.clone();
            }
            scalars_checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, worst_param, scalars_checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use core::cell::Cell;

    #[test]
    fn quadratic_matches_hand_calculus() {
        // f(w) = w^2 at w = 3: analytic and central difference both give 6.
        let mut store = ParamStore::new(0);
        store.insert("w", vec![1], vec![3.0]).unwrap();
        let report = finite_difference_check(
            |tape, store| {
                let w = tape.param(store, "w")?;
                w.mul(&w)?.sum_all()
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
        assert_eq!(store.get("w").unwrap().grad, Some(vec![6.0]));
        assert_eq!(report.scalars_checked, 1);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new(0);
        store.insert("w", vec![2], vec![1.0, -2.0]).unwrap();
        let report = finite_difference_check(
            |tape, store| {
                let w = tape.param(store, "w")?;
                // Constant: the parameter is detached before use.
                w.detach()?.sum_all()?.scale(0.0)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn non_determinism_is_a_contract_error() {
        let mut store = ParamStore::new(0);
        store.insert("w", vec![1], vec![1.0]).unwrap();
        let calls = Cell::new(0u64);
        let err = finite_difference_check(
            |tape, store| {
                calls.set(calls.get() + 1);
                let w = tape.param(store, "w")?;
                let jitter = tape.scalar(calls.get() as f64)?;
                w.mul_scalar(&jitter)?.sum_all()
            },
            &mut store,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn unreachable_parameter_still_reports_zero_grad() {
        let mut store = ParamStore::new(0);
        store.insert("used", vec![1], vec![2.0]).unwrap();
        store.insert("unused", vec![2], vec![1.0, 1.0]).unwrap();
        let report = finite_difference_check(
            |tape, store| {
                let w = tape.param(store, "used")?;
                let _ = tape.param(store, "unused")?;
                w.mul(&w)?.sum_all()
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert_eq!(store.get("unused").unwrap().grad, Some(vec![0.0, 0.0]));
        assert!(report.max_rel_err < 1e-9);
    }
}
