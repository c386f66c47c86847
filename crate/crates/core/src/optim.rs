//! Adam with weight decay folded into the gradient as an L2 term.

use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step(params: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(grads.len(), params.len(), "one gradient per parameter");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j] + cfg.weight_decay * *w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = store(&[0.5, -2.0, 3.0]);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &[vec![0.0; 3]], &mut st, &cfg);
        assert_eq!(p.get(crate::params::ParamId(0)).data(), &[0.5, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = store(&[1.0, 1.0]);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &[vec![0.3, -7.0]], &mut st, &cfg);
        let d = p.get(crate::params::ParamId(0)).data();
        // m_hat = g, v_hat = g², so the step is lr·g/(|g|+eps).
        assert!((d[0] - (1.0 - 1e-3 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
        assert!((d[1] - (1.0 + 1e-3 * 7.0 / (7.0 + 1e-8))).abs() < 1e-15);
        assert!((d[0] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn weight_decay_enters_as_l2_gradient() {
        // With g = 0 and decay λ the effective gradient is λ·w, so after one
        // step the first moment is (1-β1)·λ·w.
        let mut p = store(&[2.0]);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[vec![0.0]], &mut st, &cfg);
        assert!((st.m[0][0] - 0.1 * 1e-4 * 2.0).abs() < 1e-18);
        assert!(p.get(crate::params::ParamId(0)).data()[0] < 2.0);
    }
}
