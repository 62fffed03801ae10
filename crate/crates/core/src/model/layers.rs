//! Parameter initialization and the small dense building blocks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std²) truncated at ±2 std by rejection.
pub fn trunc_normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

/// Two-layer perceptron `fc2(gelu(fc1(x)))` with biases.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            prefix: prefix.into(),
            input,
            hidden,
            output,
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    /// Register parameters. `zero_out` zero-initializes the output projection.
    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, zero_out: bool) {
        store.insert(
            self.name("fc1.weight"),
            trunc_normal(rng, &[self.input, self.hidden], INIT_STD),
        );
        store.insert(self.name("fc1.bias"), Tensor::zeros([self.hidden]));
        let w2 = if zero_out {
            Tensor::zeros([self.hidden, self.output])
        } else {
            trunc_normal(rng, &[self.hidden, self.output], INIT_STD)
        };
        store.insert(self.name("fc2.weight"), w2);
        store.insert(self.name("fc2.bias"), Tensor::zeros([self.output]));
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w1 = tape.param_named(store, &self.name("fc1.weight"))?;
        let b1 = tape.param_named(store, &self.name("fc1.bias"))?;
        let w2 = tape.param_named(store, &self.name("fc2.weight"))?;
        let b2 = tape.param_named(store, &self.name("fc2.bias"))?;
        let h = tape.linear(x, w1, Some(b1))?;
        let h = tape.gelu(h)?;
        tape.linear(h, w2, Some(b2))
    }
}

/// Bind `{prefix}.weight` / `{prefix}.bias` and apply them.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param_named(store, &format!("{prefix}.weight"))?;
    let b = tape.param_named(store, &format!("{prefix}.bias"))?;
    tape.linear(x, w, Some(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_bounds_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = trunc_normal(&mut rng, &[10_000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / 10_000.0;
        // variance of a normal truncated at 2 sigma is 0.774 sigma^2
        assert!((var.sqrt() / 0.02 - 0.774f64.sqrt()).abs() < 0.02);
    }
}
