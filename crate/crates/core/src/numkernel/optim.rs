//! Adam parameter updates with bias correction.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use super::{KernelError, ParamSet};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Optimizer state: first/second moment per parameter plus the step count.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// One update over every (param, grad) pair. Grads must be keyed by
    /// parameter name; a missing or non-finite gradient is an error.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), KernelError> {
        self.t += 1;
        let t = self.t as i32;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        let names: Vec<String> = grads.keys().cloned().collect();
        for name in names {
            let grad = &grads[&name];
            grad.validate_finite("optimizer_step")
                .map_err(|_| KernelError::NonFiniteGrad(name.clone()))?;
            let param = params.get(&name)?.clone();
            if param.shape() != grad.shape() {
                return Err(KernelError::ShapeMismatch {
                    context: "optimizer_step",
                    expected: format!("{:?}", param.shape()),
                    got: format!("{:?}", grad.shape()),
                });
            }
            let n = param.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut data = param.data().to_vec();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            params.insert(&name, Tensor::new(param.shape().to_vec(), data)?)?;
        }
        Ok(())
    }

    /// Step that requires a gradient for an explicit set of names.
    pub fn step_expecting(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
        expected: &[String],
    ) -> Result<(), KernelError> {
        for name in expected {
            if !grads.contains_key(name) {
                return Err(KernelError::MissingGrad(name.clone()));
            }
        }
        self.step(params, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = scalar_param(1.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.0).unwrap());
        opt.step(&mut p, &grads).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn first_step_matches_hand_computed_adam() {
        // w=1, g=1, lr=0.1: m̂=1, v̂=1 ⇒ w' = 1 − 0.1·1/(1+1e-8) ≈ 0.9
        let mut p = scalar_param(1.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0).unwrap());
        opt.step(&mut p, &grads).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!((w - 0.9).abs() < 1e-8, "w = {w}");
    }

    #[test]
    fn identical_runs_are_bit_exact() {
        let run = || {
            let mut p = scalar_param(0.5);
            let mut opt = Adam::new(AdamConfig::with_lr(0.05));
            for step in 0..2 {
                let mut grads = BTreeMap::new();
                grads.insert("w".to_string(), Tensor::scalar(0.25 + step as f64).unwrap());
                opt.step(&mut p, &grads).unwrap();
            }
            p.get("w").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = scalar_param(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        let grads = BTreeMap::new();
        let err = opt.step_expecting(&mut p, &grads, &["w".to_string()]);
        assert!(matches!(err, Err(KernelError::MissingGrad(_))));
    }

    #[test]
    fn non_finite_grad_is_an_error() {
        let mut p = scalar_param(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.0).unwrap());
        // smuggle a NaN past the constructor via data_mut
        grads.get_mut("w").unwrap().data_mut()[0] = f64::NAN;
        assert!(matches!(opt.step(&mut p, &grads), Err(KernelError::NonFiniteGrad(_))));
    }
}
