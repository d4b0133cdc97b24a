use crate::error::{Error, Result};
use crate::net::ParameterStore;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of every trainable parameter (step `t ≥ 1`),
/// without weight decay. Gradients are zeroed afterwards. Non-finite
/// gradients abort before anything is modified.
pub fn adam_step<T: Real>(store: &mut ParameterStore<T>, lr: f64, t: u64, cfg: &AdamConfig) -> Result<()> {
    assert!(t >= 1, "Adam steps count from 1");
    for p in store.iter().filter(|p| p.trainable()) {
        if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                index: i,
            });
        }
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for p in store.iter_mut() {
        if !p.trainable() {
            continue;
        }
        for i in 0..p.value.len() {
            let g = p.grad[i].as_f64();
            let m = cfg.beta1 * p.m[i].as_f64() + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * p.v[i].as_f64() + (1.0 - cfg.beta2) * g * g;
            p.m[i] = T::lit(m);
            p.v[i] = T::lit(v);
            let step = lr * (m / c1) / ((v / c2).sqrt() + cfg.epsilon);
            p.value[i] = T::lit(p.value[i].as_f64() - step);
        }
    }
    store.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ParamRole;

    fn scalar_store(v: f64, g: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        let id = s.push("w", vec![1], ParamRole::ConvWeight, vec![v]);
        s.get_mut(id).grad[0] = g;
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.3, 0.0);
        adam_step(&mut s, 1e-3, 1, &AdamConfig::default()).unwrap();
        assert_eq!(s.iter().next().unwrap().value[0], 0.3);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut s = scalar_store(0.0, 1.0);
        let cfg = AdamConfig::default();
        adam_step(&mut s, 1e-5, 1, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expected = -1e-5 / (1.0 + cfg.epsilon);
        let p = s.iter().next().unwrap();
        assert!((p.value[0] - expected).abs() < 1e-18);
        assert_eq!(p.grad[0], 0.0);
        assert!((p.m[0] - 0.1).abs() < 1e-15);
        assert!((p.v[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn running_statistics_are_not_optimized() {
        let mut s = ParameterStore::<f64>::new();
        let id = s.push("bn.running_mean", vec![1], ParamRole::BnRunningMean, vec![0.5]);
        s.get_mut(id).grad[0] = 1.0;
        adam_step(&mut s, 1e-2, 1, &AdamConfig::default()).unwrap();
        assert_eq!(s.value(id)[0], 0.5);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut s = scalar_store(0.2, f64::NAN);
        let err = adam_step(&mut s, 1e-3, 1, &AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFinite { what: "gradient", .. })));
        assert_eq!(s.iter().next().unwrap().value[0], 0.2);
    }
}
