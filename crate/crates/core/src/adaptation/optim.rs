//! Optimizers over the flattened adapter parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::AdapterState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    AdamW,
    /// Plain gradient descent `p <- p - lr * g`.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    AdamW {
        params: AdamWParams,
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    },
    Sgd,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, adamw: AdamWParams, n_params: usize) -> Self {
        match kind {
            OptimizerKind::AdamW => OptimizerState::AdamW {
                params: adamw,
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
                t: 0,
            },
            OptimizerKind::Sgd => OptimizerState::Sgd,
        }
    }

    /// Apply one update and return the new parameters. `adapter` is not modified.
    pub fn step(&mut self, adapter: &AdapterState, grad: &AdapterState, lr: f64) -> Result<AdapterState> {
        if !adapter.is_structurally_equal(grad) {
            return Err(Error::config("gradient structure does not match adapter"));
        }
        let mut p = adapter.flat_params();
        let g = grad.flat_params();
        match self {
            OptimizerState::Sgd => {
                for (pi, gi) in p.iter_mut().zip(&g) {
                    *pi -= lr * gi;
                }
            }
            OptimizerState::AdamW { params, m, v, t } => {
                if m.len() != p.len() {
                    return Err(Error::config("optimizer state size does not match adapter"));
                }
                *t += 1;
                let bc1 = 1.0 - params.beta1.powi(*t as i32);
                let bc2 = 1.0 - params.beta2.powi(*t as i32);
                for i in 0..p.len() {
                    p[i] -= lr * params.weight_decay * p[i];
                    m[i] = params.beta1 * m[i] + (1.0 - params.beta1) * g[i];
                    v[i] = params.beta2 * v[i] + (1.0 - params.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + params.eps);
                }
            }
        }
        let mut out = adapter.clone();
        out.set_flat_params(&p)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{LoraLayer, Placement};
    use nalgebra::DMatrix;
    use std::collections::BTreeMap;

    fn state(vals: [f64; 2]) -> AdapterState {
        let mut layers = BTreeMap::new();
        layers.insert(
            "x".to_string(),
            LoraLayer {
                a: DMatrix::from_element(1, 1, vals[0]),
                b: DMatrix::from_element(1, 1, vals[1]),
                rank: 1,
                alpha: 1.0,
                target: "x".into(),
            },
        );
        AdapterState {
            layers,
            placement: Placement::LlmOnly,
            seed: 0,
        }
    }

    #[test]
    fn first_adamw_step_matches_hand_computation() {
        // t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let p = AdamWParams::default();
        let mut opt = OptimizerState::new(OptimizerKind::AdamW, p, 2);
        let out = opt.step(&state([1.0, -2.0]), &state([0.5, -4.0]), 0.1).unwrap();
        let flat = out.flat_params();
        let exp0 = 1.0 - 0.1 * 0.01 * 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        let exp1 = -2.0 - 0.1 * 0.01 * -2.0 + 0.1 * 4.0 / (4.0 + 1e-8);
        assert!((flat[0] - exp0).abs() < 1e-15);
        assert!((flat[1] - exp1).abs() < 1e-15);
    }

    #[test]
    fn adamw_second_step_uses_bias_corrected_moments() {
        let p = AdamWParams {
            weight_decay: 0.0,
            ..AdamWParams::default()
        };
        let mut opt = OptimizerState::new(OptimizerKind::AdamW, p, 2);
        let s0 = state([0.0, 0.0]);
        let s1 = opt.step(&s0, &state([1.0, 1.0]), 1.0).unwrap();
        let s2 = opt.step(&s1, &state([3.0, 3.0]), 1.0).unwrap();
        let m = (0.9 * 0.1 * 1.0 + 0.1 * 3.0) / (1.0 - 0.81);
        let v = (0.999 * 0.001 * 1.0 + 0.001 * 9.0) / (1.0 - 0.999f64.powi(2));
        let expected = s1.flat_params()[0] - m / (v.sqrt() + 1e-8);
        assert!((s2.flat_params()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn sgd_step() {
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, AdamWParams::default(), 2);
        let out = opt.step(&state([1.0, 1.0]), &state([2.0, -2.0]), 0.25).unwrap();
        assert_eq!(out.flat_params(), vec![0.5, 1.5]);
    }

    #[test]
    fn vanishing_lr_barely_moves_parameters() {
        let mut opt = OptimizerState::new(OptimizerKind::AdamW, AdamWParams::default(), 2);
        let s = state([3.0, -1.0]);
        let lr = 1e-12;
        let out = opt.step(&s, &state([100.0, 1e-3]), lr).unwrap();
        // |step| <= lr * (1 + wd * |p|) per coordinate on the first step
        let bound = lr * (1.0 + 0.01 * 3.0) * 2f64.sqrt();
        assert!(out.max_abs_diff(&s).unwrap() <= bound);
    }
}
