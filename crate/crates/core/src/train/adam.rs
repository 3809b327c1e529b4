use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{Param, Parameterized};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators keyed by parameter name, plus the shared step count.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// First and second moments (before bias correction) of a parameter.
    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }
}

/// One bias-corrected Adam update of every trainable parameter of `params`,
/// using the gradients stored on them, then clears those gradients. Frozen
/// parameters are skipped. Nothing is modified if any trainable parameter
/// lacks a gradient.
pub fn adam_step<T: Element>(
    params: &mut (impl Parameterized<T> + ?Sized),
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let mut missing = None;
    params.visit_params(&mut |p| {
        if p.requires_grad() && p.grad().is_none() && missing.is_none() {
            missing = Some(p.name().to_owned());
        }
    });
    if let Some(name) = missing {
        return Err(Error::State(format!("parameter {name} has no gradient")));
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = T::from_f64_lossy(1.0 - beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - beta2.powi(t));
    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
    let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(eps));
    let one = T::one();
    let moments = &mut state.moments;
    params.visit_params_mut(&mut |p: &mut Param<T>| {
        if !p.requires_grad() {
            return;
        }
        let g = p.take_grad().expect("checked above");
        let (m, v) = moments
            .entry(p.name().to_owned())
            .or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())));
        let values = p.value.data_mut();
        for (((w, &gi), mi), vi) in values
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Param<f64>);

    impl Parameterized<f64> for One {
        fn visit_params(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.0);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0);
        }
    }

    fn with_grad(value: f64, g: f64) -> One {
        let mut p = Param::new("w", Tensor::full([1], value));
        p.accumulate_grad(&Tensor::full([1], g));
        One(p)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = with_grad(0.0, 1.0);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut m, &mut st, 0.1).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((m.0.value.data()[0] - expected).abs() < 1e-15);
        assert!(m.0.grad().is_none());
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut m = with_grad(2.5, 0.0);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut m, &mut st, 0.1).unwrap();
        assert_eq!(m.0.value.data()[0], 2.5);
    }

    #[test]
    fn two_step_moments() {
        let mut m = with_grad(0.0, 1.0);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut m, &mut st, 0.1).unwrap();
        m.0.accumulate_grad(&Tensor::full([1], 1.0));
        adam_step(&mut m, &mut st, 0.1).unwrap();
        let (mm, vv) = st.moments("w").unwrap();
        assert!((mm.data()[0] - 0.19).abs() < 1e-15);
        assert!((vv.data()[0] - 0.001999).abs() < 1e-15);
        assert_eq!(st.step(), 2);
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut m = One(Param::new("w", Tensor::full([1], 1.0)));
        let mut st = AdamState::new(AdamConfig::default());
        assert!(matches!(adam_step(&mut m, &mut st, 0.1), Err(Error::State(_))));
        m.0.set_requires_grad(false);
        adam_step(&mut m, &mut st, 0.1).unwrap();
        assert_eq!(m.0.value.data()[0], 1.0);
    }
}
