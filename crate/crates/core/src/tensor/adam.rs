use super::Tensor;
use crate::error::{Error, Result};

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state with the usual `(0.9, 0.999, 1e-8)` constants.
    pub fn new(len: usize) -> Self {
        Self::with_betas(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if grad.len() != param.numel() || state.m.len() != param.numel() || state.v.len() != param.numel() {
        return Err(Error::dim(format!(
            "adam: param has {} values, grad {}, state {}",
            param.numel(),
            grad.len(),
            state.m.len()
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Contract(format!("adam learning rate must be > 0, got {lr}")));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient {} at index {i}", grad[i])));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let orig = p.clone();
        let mut s = AdamState::new(5);
        for _ in 0..10 {
            adam_step(&mut p, &[0.0; 5], &mut s, 0.1).unwrap();
        }
        assert!(p.bitwise_eq(&orig));
        assert_eq!(s.t, 10);
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = Tensor::scalar(1.0);
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 0.1).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - want).abs() < 1e-15);
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn clones_step_identically() {
        let mut a = Tensor::from_fn(&[4], |i| (i as f64).sin());
        let mut b = a.clone();
        let (mut sa, mut sb) = (AdamState::new(4), AdamState::new(4));
        let g = [0.3, -1.2, 1e-3, 7.0];
        for _ in 0..2 {
            adam_step(&mut a, &g, &mut sa, 0.01).unwrap();
            adam_step(&mut b, &g, &mut sb, 0.01).unwrap();
        }
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn rejects_non_finite_gradient_and_bad_lr() {
        let mut p = Tensor::zeros(&[2]);
        let mut s = AdamState::new(2);
        assert!(matches!(
            adam_step(&mut p, &[0.0, f64::NAN], &mut s, 0.1),
            Err(Error::Numeric(_))
        ));
        assert_eq!(s.t, 0);
        assert!(adam_step(&mut p, &[0.0, 0.0], &mut s, 0.0).is_err());
        assert!(adam_step(&mut p, &[0.0], &mut s, 0.1).is_err());
    }
}
