use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments per parameter plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: OptimState::default(),
        }
    }

    /// One decoupled-weight-decay Adam update. Parameters without a gradient
    /// or with `trainable == false` are left untouched. A non-finite gradient
    /// aborts before anything is modified.
    pub fn step(
        &mut self,
        store: &mut ParameterStore<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            if let Some(p) = store.get(name) {
                if p.value.shape() != g.shape() {
                    return Err(Error::shape(
                        "adamw",
                        format!("`{name}` {:?} vs grad {:?}", p.value.shape(), g.shape()),
                    ));
                }
            }
        }
        self.state.step += 1;
        let c = self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            if !p.trainable {
                continue;
            }
            let m = self
                .state
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .state
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
            let lr = c.lr as f32;
            let decay = (1.0 - c.lr * c.weight_decay) as f32;
            let (bc1, bc2) = (bc1 as f32, bc2 as f32);
            let eps = c.eps as f32;
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f32, trainable: bool) -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::from_vec(&[1], vec![v]).unwrap()).unwrap();
        s.get_mut("p").unwrap().trainable = trainable;
        s
    }

    fn grad(v: f32) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([("p".to_string(), Tensor::from_vec(&[1], vec![v]).unwrap())])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(0.7, true);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s, &grad(0.0)).unwrap();
        assert_eq!(s.get("p").unwrap().value.data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g = 1, v̂ = g² = 1 after bias correction.
        let mut s = scalar_store(1.0, true);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s, &grad(1.0)).unwrap();
        let p = s.get("p").unwrap().value.data()[0];
        assert!((p - 0.9).abs() < 1e-6, "{p}");
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut s = scalar_store(1.0, false);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, &grad(5.0)).unwrap();
        assert_eq!(s.get("p").unwrap().value.data()[0].to_bits(), 1.0f32.to_bits());
    }

    #[test]
    fn nan_gradient_aborts_and_names_parameter() {
        let mut s = scalar_store(1.0, true);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut s, &grad(f32::NAN)).unwrap_err();
        assert!(err.to_string().contains("`p`"));
        assert_eq!(opt.state.step, 0);
        assert_eq!(s.get("p").unwrap().value.data()[0], 1.0);
    }
}
