//! AdamW with decoupled weight decay.
//!
//! Decay multiplies the parameter value directly by (1 − lr·λ) and is
//! skipped entirely for biases and norm gains (`Param::decay == false`);
//! the moment update never sees the decay term.

use crate::error::{Error, Result};
use crate::nn::Param;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn with_lr(learning_rate: f64) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One AdamW update on a single parameter. The gradient accumulator is left
/// untouched; callers zero it between steps.
pub fn adamw_step(param: &mut Param, cfg: &OptimizerConfig) -> Result<()> {
    if !param.grad.is_finite() {
        return Err(Error::NonFiniteGrad {
            param: param.name.clone(),
        });
    }
    if param.decay && cfg.weight_decay > 0.0 {
        let shrink = 1.0 - cfg.learning_rate * cfg.weight_decay;
        for v in param.value.data_mut() {
            *v *= shrink;
        }
    }
    param.step += 1;
    let t = param.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let n = param.value.numel();
    for i in 0..n {
        let g = param.grad.data()[i];
        let m = cfg.beta1 * param.m.data()[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * param.v.data()[i] + (1.0 - cfg.beta2) * g * g;
        param.m.data_mut()[i] = m;
        param.v.data_mut()[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        param.value.data_mut()[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(value: f64, decay: bool) -> Param {
        Param::new("p", Tensor::from_vec(&[1, 1], vec![value]), decay)
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let mut p = scalar_param(0.37, true);
        let mut cfg = OptimizerConfig::with_lr(0.1);
        cfg.weight_decay = 0.0;
        for _ in 0..5 {
            adamw_step(&mut p, &cfg).unwrap();
        }
        assert_eq!(p.value.data()[0], 0.37);
    }

    #[test]
    fn decay_is_decoupled_from_the_moment_update() {
        // With zero gradient the only movement is value *= 1 - lr*wd.
        let mut p = scalar_param(1.0, true);
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..OptimizerConfig::with_lr(0.1)
        };
        adamw_step(&mut p, &cfg).unwrap();
        assert!((p.value.data()[0] - 0.95).abs() < 1e-15);
        // Moments stayed at zero: decay never entered the gradient path.
        assert_eq!(p.m.data()[0], 0.0);
        assert_eq!(p.v.data()[0], 0.0);
    }

    #[test]
    fn decay_skips_bias_like_parameters() {
        let mut p = scalar_param(1.0, false);
        let cfg = OptimizerConfig {
            weight_decay: 0.5,
            ..OptimizerConfig::with_lr(0.1)
        };
        adamw_step(&mut p, &cfg).unwrap();
        assert_eq!(p.value.data()[0], 1.0);
    }

    #[test]
    fn matches_scalar_recurrence_oracle() {
        // Independent re-derivation of the update for a 1-element parameter,
        // written as plain scalar code.
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        };
        let grads = [1.0, -0.5, 0.25, 2.0, -1.0];

        let mut p = scalar_param(0.8, true);
        let mut oracle_val = 0.8;
        let (mut om, mut ov) = (0.0f64, 0.0f64);
        for (step, &g) in grads.iter().enumerate() {
            p.grad.data_mut()[0] = g;
            adamw_step(&mut p, &cfg).unwrap();

            oracle_val *= 1.0 - cfg.learning_rate * cfg.weight_decay;
            om = cfg.beta1 * om + (1.0 - cfg.beta1) * g;
            ov = cfg.beta2 * ov + (1.0 - cfg.beta2) * g * g;
            let t = (step + 1) as i32;
            let mh = om / (1.0 - cfg.beta1.powi(t));
            let vh = ov / (1.0 - cfg.beta2.powi(t));
            oracle_val -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);

            assert!(
                (p.value.data()[0] - oracle_val).abs() < 1e-12,
                "diverged from oracle at step {step}"
            );
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = scalar_param(1.0, true);
        p.name = "decoder.blocks.0.wq".into();
        p.grad.data_mut()[0] = f64::NAN;
        match adamw_step(&mut p, &OptimizerConfig::with_lr(0.1)) {
            Err(Error::NonFiniteGrad { param }) => {
                assert_eq!(param, "decoder.blocks.0.wq");
            }
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_hyperparameters() {
        assert!(OptimizerConfig::with_lr(0.0).validate().is_err());
        let mut c = OptimizerConfig::with_lr(0.1);
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
        c = OptimizerConfig::with_lr(0.1);
        c.weight_decay = -0.1;
        assert!(c.validate().is_err());
        assert!(OptimizerConfig::with_lr(1e-5).validate().is_ok());
    }
}
