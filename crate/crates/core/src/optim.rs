//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AdamState<F = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<F>, Vec<F>)>,
}

impl<F: Scalar> Default for AdamState<F> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }
}

impl<F: Scalar> AdamState<F> {
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> Option<&[F]> {
        self.moments.get(i).map(|(m, _)| m.as_slice())
    }
}

/// One Adam update over a parameter group.
///
/// Weight decay is decoupled: `p ← p − lr·wd·p` precedes the bias-corrected
/// Adam delta. Gradients are validated before anything is written, so a
/// non-finite gradient leaves every parameter and the state untouched.
pub fn adam_step<F: Scalar>(
    params: &mut [(&str, &mut Tensor<F>)],
    grads: &[&Tensor<F>],
    state: &mut AdamState<F>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[grads.len()]));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("gradient of {name}")));
        }
    }
    if state.moments.is_empty() {
        state.moments = params
            .iter()
            .map(|(_, p)| (vec![F::zero(); p.numel()], vec![F::zero(); p.numel()]))
            .collect();
    } else if state.moments.len() != params.len() {
        return Err(Error::dim("adam_step", &[state.moments.len()], &[params.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::of(state.beta1), F::of(state.beta2));
    let c1 = F::of(1.0 - state.beta1.powi(t));
    let c2 = F::of(1.0 - state.beta2.powi(t));
    let (lr_f, decay, eps) = (F::of(lr), F::of(lr * weight_decay), F::of(state.eps));
    for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(state.moments.iter_mut()) {
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *pv = *pv - decay * *pv;
            *mv = b1 * *mv + (F::one() - b1) * gv;
            *vv = b2 * *vv + (F::one() - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv = *pv - lr_f * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor::<f64>::vector(vec![1.5, -2.0]);
        let g = Tensor::<f64>::zeros(&[2]);
        let mut st = AdamState::default();
        adam_step(&mut [("p", &mut p)], &[&g], &mut st, 0.3, 0.0).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::scalar(0.0);
        let g = Tensor::<f64>::scalar(1.0);
        let mut st = AdamState::default();
        adam_step(&mut [("p", &mut p)], &[&g], &mut st, 0.1, 0.0).unwrap();
        assert!((p.item() + 0.1).abs() < 1e-6, "{}", p.item());
    }

    #[test]
    fn decoupled_decay_shrinks_before_delta() {
        let mut p = Tensor::<f64>::scalar(2.0);
        let g = Tensor::<f64>::scalar(0.0);
        let mut st = AdamState::default();
        adam_step(&mut [("p", &mut p)], &[&g], &mut st, 0.1, 0.5).unwrap();
        assert!((p.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = Tensor::<f64>::scalar(0.0);
        let mut st = AdamState::default();
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * (p.item() - 3.0));
            adam_step(&mut [("p", &mut p)], &[&g], &mut st, 0.1, 0.0).unwrap();
        }
        assert!((p.item() - 3.0).abs() < 1e-2, "{}", p.item());
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_writes_nothing() {
        let mut p = Tensor::<f64>::vector(vec![1.0]);
        let mut q = Tensor::<f64>::vector(vec![1.0]);
        let g_ok = Tensor::<f64>::vector(vec![1.0]);
        let g_bad = Tensor::<f64>::vector(vec![f64::NAN]);
        let mut st = AdamState::default();
        let err = adam_step(&mut [("p", &mut p), ("w_up", &mut q)], &[&g_ok, &g_bad], &mut st, 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("w_up"));
        assert_eq!(p.item(), 1.0);
        assert_eq!(st.step(), 0);
    }
}
