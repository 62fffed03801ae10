#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vamoe::model::{Model, ModelConfig, VariableCatalog};
use vamoe::tensor::{ParamStore, Scalar, Tensor};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        height: 8,
        width: 8,
        latent: 8,
        heads: 2,
        blocks: 1,
        k: 3,
        patch: 2,
        kernel: 3,
    }
}

pub fn tiny_model<T: Scalar>(seed: u64) -> Model<T> {
    Model::new(tiny_config(), VariableCatalog::upper_air(1), seed).unwrap()
}

pub fn random<T: Scalar>(shape: &[usize], scale: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-scale..scale)))
}

/// Overwrite every parameter with uniform noise in `[-scale, scale)`, so
/// zero-initialized projections carry signal.
pub fn randomize<T: Scalar>(store: &mut ParamStore<T>, scale: f64, seed: u64) {
    for (i, p) in store.iter_mut().enumerate() {
        let v = random(
            p.value.shape(),
            scale,
            seed.wrapping_mul(7919).wrapping_add(i as u64),
        );
        p.set_value(v);
    }
}

pub fn zero<T: Scalar>(store: &mut ParamStore<T>, name: &str) {
    let p = store.by_name_mut(name).unwrap();
    let z = Tensor::zeros(p.value.shape().to_vec());
    p.set_value(z);
}

pub fn bits<T: Scalar>(t: &Tensor<T>) -> Vec<u64> {
    t.data().iter().map(|v| v.f64().to_bits()).collect()
}

pub fn assert_bit_identical<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) {
    assert_eq!(a.shape(), b.shape());
    assert_eq!(bits(a), bits(b));
}
