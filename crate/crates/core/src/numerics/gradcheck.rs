use super::tape::{Grads, ParamStore};
use crate::error::{Error, Result};

/// Compares analytic gradients against central differences.
///
/// `f` evaluates the scalar objective and its analytic gradient at a given
/// parameter store. Every scalar of every parameter is perturbed by `±h`.
/// Returns the maximum over all entries of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(store: &ParamStore, h: f64, f: F) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(f64, Grads)>,
{
    if !(h > 0.0) {
        return Err(Error::Numeric(format!("finite-difference step must be positive, got {h}")));
    }
    let (value, analytic) = f(store)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective is not finite: {value}")));
    }
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        for k in 0..store.get(id).data().len() {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + h;
            let plus = f(&probe)?.0;
            probe.get_mut(id).data_mut()[k] = orig - h;
            let minus = f(&probe)?.0;
            probe.get_mut(id).data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective not finite while probing `{}`[{k}]",
                    store.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).data()[k];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, Tape};

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.register("x", Matrix::filled(1, 1, 3.0));
        let err = grad_check(&store, 1e-4, |s| {
            let mut t = Tape::new(s);
            let v = t.param(x);
            let sq = t.square(v);
            let loss = t.mean(sq);
            let grads = t.backward(loss)?;
            Ok((t.scalar(loss), grads))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::new();
        let x = store.register("x", Matrix::row_vector(&[0.5, -2.0, 4.0]));
        let err = grad_check(&store, 1e-4, |s| {
            let mut t = Tape::new(s);
            let v = t.param(x);
            let sc = t.scale(v, 3.0);
            let loss = t.mean(sc);
            let grads = t.backward(loss)?;
            Ok((t.scalar(loss), grads))
        })
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite_objective() {
        let mut store = ParamStore::new();
        store.register("x", Matrix::filled(1, 1, 1.0));
        let f = |s: &ParamStore| Ok((f64::NAN, s.zeros_like()));
        assert!(matches!(grad_check(&store, 0.0, f), Err(Error::Numeric(_))));
        assert!(matches!(grad_check(&store, 1e-4, f), Err(Error::Numeric(_))));
    }
}
