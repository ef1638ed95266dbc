use crate::error::{Error, Result};

use super::params::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One bias-corrected update. Zeroes `grads` afterwards.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut Gradients) -> Result<()> {
        if !grads.matches(params) || self.m.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                "gradients or moments do not match parameters",
            ));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        grads.zero();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Tensor;

    fn one_param(w: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("w", Tensor::scalar(w));
        p
    }

    #[test]
    fn single_step_from_zero() {
        let mut p = one_param(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let mut g = Gradients::zeros_like(&p);
        g.get_mut(p.id("w").unwrap())[0] = 1.0;
        st.step(&mut p, &mut g).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p.get(p.id("w").unwrap()).data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.t, 1);
        assert!(g.get(p.id("w").unwrap()).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_unit_steps() {
        let mut p = one_param(0.0);
        let id = p.id("w").unwrap();
        let mut st = AdamState::new(&p, AdamConfig::default());
        let mut g = Gradients::zeros_like(&p);
        for _ in 0..2 {
            g.get_mut(id)[0] = 1.0;
            st.step(&mut p, &mut g).unwrap();
        }
        assert!((p.get(id).data()[0] + 0.002).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = one_param(0.7);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let mut g = Gradients::zeros_like(&p);
        st.step(&mut p, &mut g).unwrap();
        st.step(&mut p, &mut g).unwrap();
        assert_eq!(p.get(p.id("w").unwrap()).data()[0], 0.7);
        assert_eq!(st.t, 2);
    }

    #[test]
    fn mismatched_gradients_error() {
        let mut p = one_param(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let other = one_param(1.0);
        let mut bigger = other.clone();
        bigger.add("extra", Tensor::scalar(0.0));
        let mut g = Gradients::zeros_like(&bigger);
        assert!(st.step(&mut p, &mut g).is_err());
    }
}
