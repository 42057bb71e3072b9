use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error: components whose analytic and
/// numeric values are both below this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Worst relative error between the tape gradient of a scalar function `f`
/// at `point` and its central finite difference with step `eps`.
///
/// `f` builds its graph on a fresh tape from the supplied input leaf and
/// returns the scalar output. The relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(p);
        let y = f(&mut t, x)?;
        t.value(y).item()
    };
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if !rel.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient comparison at {i}")));
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let p = Tensor::from_fn(&[7], |i| i as f64 * 0.3 - 1.0);
        let err = grad_check(|t, x| t.sum(x), &p, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn l1_away_from_zero_residuals() {
        let p = Tensor::from_fn(&[2, 5], |i| (i as f64 * 1.3).sin());
        let target = Tensor::from_fn(&[2, 5], |i| (i as f64 * 1.3).sin() + if i % 2 == 0 { 0.3 } else { -0.4 });
        let err = grad_check(
            |t, x| {
                let c = t.constant(target.clone());
                t.l1(x, c)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn relu_bounded_away_from_kink() {
        let p = Tensor::from_fn(&[8], |i| if i % 2 == 0 { 0.5 + i as f64 * 0.1 } else { -0.3 - i as f64 * 0.1 });
        let err = grad_check(
            |t, x| {
                let r = t.relu(x)?;
                let sq = t.mul(r, r)?;
                t.sum(sq)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
