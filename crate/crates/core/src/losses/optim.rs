use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            clip: default_clip(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Whether decoupled weight decay applies to a parameter. Biases, norm
/// gains and the loss weights are excluded.
pub fn decays(name: &str, rank: usize) -> bool {
    !(rank <= 1
        || name.starts_with("loss.")
        || name.ends_with(".gain")
        || name.ends_with(".bias")
        || name.ends_with("bias_inc"))
}

#[derive(Debug, Clone)]
struct Moments<T: Scalar> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Adam with decoupled weight decay. Moments are created lazily and only
/// for parameters that are trainable when a step is taken.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of parameters carrying moment buffers.
    pub fn tracked(&self) -> usize {
        self.moments.iter().filter(|m| m.is_some()).count()
    }

    /// Global L2 norm of the trainable gradients.
    pub fn grad_norm(store: &ParamStore<T>) -> f64 {
        store
            .iter()
            .filter(|p| !p.frozen)
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g.f64() * g.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Apply one update from the gradients stored in `store`; frozen
    /// parameters are neither read nor written. Returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<f64> {
        for p in store.iter().filter(|p| !p.frozen) {
            if !p.grad.all_finite() {
                return Err(Error::NanGradient(p.name.clone()));
            }
        }
        let norm = Self::grad_norm(store);
        let scale = match self.config.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (lr, eps, scale) = (T::of(c.lr), T::of(c.eps), T::of(scale));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        for (slot, p) in self.moments.iter_mut().zip(store.iter_mut()) {
            if p.frozen {
                continue;
            }
            let mo = slot.get_or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape().to_vec()),
                v: Tensor::zeros(p.value.shape().to_vec()),
            });
            let decay = if decays(&p.name, p.value.rank()) {
                T::of(c.lr * c.weight_decay)
            } else {
                T::zero()
            };
            let grad = p.grad.data();
            let m = mo.m.data_mut();
            let v = mo.v.data_mut();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i] * scale;
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] = value[i] - decay * value[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
