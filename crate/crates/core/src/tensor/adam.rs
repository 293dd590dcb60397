use super::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam moments for an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub const DEFAULT_LEARNING_RATE: f64 = 1e-6;

    pub fn new(params: &[Tensor], learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update using the gradients stored on each parameter.
///
/// A parameter without a gradient is treated as having a zero gradient.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::dim(
            "adam_step",
            &[params.len()],
            &[state.first_moment.len()],
        ));
    }
    for (p, (m, v)) in params
        .iter()
        .zip(state.first_moment.iter().zip(&state.second_moment))
    {
        if p.numel() != m.len() || p.numel() != v.len() {
            return Err(Error::dim("adam_step", p.shape(), &[m.len()]));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    for (p, (m, v)) in params
        .iter_mut()
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        let Some(grad) = p.grad.take() else { continue };
        for (((w, g), mi), vi) in p.values.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        p.grad = Some(grad);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        params[0].set_grad(vec![0.0; 3]).unwrap();
        let before = params[0].values().to_vec();
        let mut state = AdamState::new(&params, 1e-3);
        for _ in 0..5 {
            adam_step(&mut params, &mut state).unwrap();
        }
        assert_eq!(params[0].values(), before.as_slice());
        assert_eq!(state.step_count, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![Tensor::scalar(0.0)];
        params[0].set_grad(vec![1.0]).unwrap();
        let mut state = AdamState::new(&params, AdamState::DEFAULT_LEARNING_RATE);
        adam_step(&mut params, &mut state).unwrap();
        // m_hat = 1, v_hat = 1 → Δ = -lr / (1 + eps)
        let want = -1e-6 / (1.0 + 1e-8);
        assert!((params[0].item() - want).abs() < 1e-9);
        assert!((params[0].item() + 1e-6).abs() < 1e-9);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params, 0.1);
        for _ in 0..200 {
            let w = params[0].item();
            params[0].set_grad(vec![2.0 * (w - 3.0)]).unwrap();
            adam_step(&mut params, &mut state).unwrap();
        }
        assert!((params[0].item() - 3.0).abs() < 0.05, "{}", params[0].item());
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let small = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::new(&small, 0.1);
        let mut big = vec![Tensor::zeros(&[3])];
        assert!(matches!(adam_step(&mut big, &mut state), Err(Error::Dimension { .. })));
        assert_eq!(state.step_count, 0);
    }
}
