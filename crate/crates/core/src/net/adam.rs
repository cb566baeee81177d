use super::{NetError, TensorND};
use serde::{Deserialize, Serialize};

/// Adam moment estimates for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimState {
    pub fn new(params: &[TensorND], learning_rate: f64) -> Self {
        OptimState {
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [TensorND], grads: &[TensorND], state: &mut OptimState) -> Result<(), NetError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(NetError::ShapeMismatch(format!(
            "{} params, {} grads, {} optimizer slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[i].len() {
            return Err(NetError::ShapeMismatch(format!("tensor {i}: {:?} vs {:?}", p.shape, g.shape)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);
    for ((p, g), (m, v)) in
        params.iter_mut().zip(grads).zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        for (((x, &gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<TensorND> {
        vec![TensorND::from_vec(&[1], vec![v]).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(1.5);
        let mut s = OptimState::new(&p, 0.1);
        adam_step(&mut p, &scalar(0.0), &mut s).unwrap();
        assert_eq!(p[0].data[0], 1.5);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_unit_scaled() {
        let mut p = scalar(0.0);
        let mut s = OptimState::new(&p, 0.1);
        adam_step(&mut p, &scalar(1.0), &mut s).unwrap();
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        assert!((p[0].data[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        adam_step(&mut p, &scalar(1.0), &mut s).unwrap();
        assert!((p[0].data[0] + 0.2).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = scalar(3.0);
        let mut s = OptimState::new(&p, 0.1);
        let loss0 = 9.0;
        for _ in 0..500 {
            let g = scalar(2.0 * p[0].data[0]);
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        let loss = p[0].data[0].powi(2);
        assert!(loss < 0.01 * loss0, "{loss}");
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar(0.0);
        let mut s = OptimState::new(&p, 0.1);
        let g = vec![TensorND::zeros(&[2])];
        assert!(adam_step(&mut p, &g, &mut s).is_err());
    }
}
