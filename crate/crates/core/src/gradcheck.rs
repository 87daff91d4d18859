//! Central finite-difference verification of reverse-mode gradients.

use crate::array::NdArray;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

/// Max over coordinates of |analytic - central_diff| / max(1, |central_diff|)
/// for a scalar-valued graph built by `f` from a single input leaf at `x`.
///
/// Runs in f64; `f` is re-invoked on a fresh tape for every probe, so it must
/// be a pure function of the leaf value.
pub fn grad_check<F>(f: F, x: &NdArray<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, NodeId) -> Result<NodeId>,
{
    let eval = |point: &NdArray<f64>| -> Result<f64> {
        let tape = Tape::new();
        let leaf = tape.leaf(point.clone());
        let root = f(&tape, leaf)?;
        let v = tape.value(root).item();
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite function value".into()));
        }
        Ok(v)
    };

    let analytic = {
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let root = f(&tape, leaf)?;
        if !tape.value(root).item().is_finite() {
            return Err(Error::Numeric("grad_check: non-finite function value".into()));
        }
        tape.backward(root)?;
        tape.grad(leaf)
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sum_of_squares_checks_tightly() {
        let mut rng = Rng::new(3);
        let x = NdArray::from_vec(vec![6], (0..6).map(|_| rng.range(-2.0, 2.0)).collect())
            .unwrap();
        let err = grad_check(
            |tape, leaf| {
                let sq = tape.mul(leaf, leaf)?;
                Ok(tape.sum_all(sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-8, "err {err}");
    }

    #[test]
    fn non_finite_values_are_reported() {
        let x = NdArray::from_vec(vec![1], vec![-1.0]).unwrap();
        let r = grad_check(
            |tape, leaf| {
                let l = tape.ln(leaf);
                Ok(tape.sum_all(l))
            },
            &x,
            1e-6,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
