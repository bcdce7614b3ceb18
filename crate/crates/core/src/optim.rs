//! Adam optimizer.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }
}

/// One bias-corrected Adam step applied in place.
pub fn adam_update(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(shape_err(
            "adam_update",
            format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(shape_err(
                "adam_update",
                format!("param {:?} grad {:?} moment {:?}", p.shape(), g.shape(), m.shape()),
            ));
        }
    }

    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gv = gv as f64;
            let m_new = beta1 * *mv as f64 + (1.0 - beta1) * gv;
            let v_new = beta2 * *vv as f64 + (1.0 - beta2) * gv * gv;
            *mv = m_new as f32;
            *vv = v_new as f32;
            let m_hat = m_new / c1;
            let v_hat = v_new / c2;
            *pv = (*pv as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut params = vec![Tensor::full([1, 1, 1, 2], 0.5)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        adam_update(&mut params, &[Tensor::full([1, 1, 1, 2], 1.0)], &mut state).unwrap();
        let before = params[0].clone();
        let m_before = state.first_moments()[0].item();
        adam_update(&mut params, &[Tensor::zeros([1, 1, 1, 2])], &mut state).unwrap();
        // With zero gradient the first moment decays by beta1 but is non-zero,
        // so params still move; a fresh state with zero grads must not move.
        assert!((state.first_moments()[0].item() - 0.9 * m_before).abs() < 1e-7);
        assert!(state.second_moments()[0].item() < 0.001 + 1e-9);
        assert_ne!(params[0], before);

        let mut fresh = vec![Tensor::full([1, 1, 1, 2], 0.5)];
        let mut s2 = AdamState::new(AdamConfig::default(), &fresh);
        adam_update(&mut fresh, &[Tensor::zeros([1, 1, 1, 2])], &mut s2).unwrap();
        assert_eq!(fresh[0].data(), &[0.5, 0.5]);
        assert_eq!(s2.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = vec![Tensor::new([1, 1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap()];
        let grads = vec![Tensor::new([1, 1, 1, 3], vec![0.3, -7.0, 1e-3]).unwrap()];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        adam_update(&mut params, &grads, &mut state).unwrap();
        let expect = [1.0 - 1e-3, 1.0 + 1e-3, 1.0 - 1e-3];
        for (p, e) in params[0].data().iter().zip(expect) {
            assert!((p - e).abs() < 1e-6, "{p} vs {e}");
        }
    }

    #[test]
    fn minimizes_scalar_quadratic() {
        let mut params = vec![Tensor::scalar(0.0)];
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut state = AdamState::new(cfg, &params);
        for _ in 0..100 {
            let w = params[0].item();
            let grad = Tensor::scalar(2.0 * (w - 5.0));
            adam_update(&mut params, &[grad], &mut state).unwrap();
        }
        assert!((params[0].item() - 5.0).abs() < 0.5, "w = {}", params[0].item());
        assert_eq!(state.step(), 100);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut params = vec![Tensor::zeros([1, 1, 1, 2])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        assert!(adam_update(&mut params, &[Tensor::zeros([1, 1, 2, 1])], &mut state).is_err());
        assert!(adam_update(&mut params, &[], &mut state).is_err());
    }
}
