//! Run one forward pass and show which latent channels each group's expert
//! picks for the first few tokens. Parameters are perturbed first: at
//! initialization the gates are nearly uniform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vamoe::model::{Model, ModelConfig, VariableCatalog};
use vamoe::tensor::{Tape, Tensor};

fn main() -> vamoe::Result<()> {
    let config = ModelConfig::default();
    let mut model: Model<f32> = Model::new(config.clone(), VariableCatalog::upper_air(3), 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for p in model.params.iter_mut() {
        let v = Tensor::from_fn(p.value.shape().to_vec(), |_| rng.random_range(-0.3..0.3));
        p.set_value(v);
    }
    let n = model.channels();
    let x = Tensor::from_fn([config.height, config.width, n], |i| {
        ((i * 7919) % 101) as f32 / 50.0 - 1.0
    });

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = model.forward_full(&mut tape, xv)?;
    println!(
        "{} tokens, K = {} of C = {}",
        config.tokens(),
        config.k,
        config.latent
    );
    for (group, decision) in &out.routing[0] {
        let weights = tape.value(decision.weights);
        for t in 0..2 {
            let w = &weights.data()[t * config.k..][..4];
            println!(
                "block 0 {group} token {t}: channels {:?}.. weights {:.3?}..",
                &decision.indices.row(t)[..4],
                w
            );
        }
    }
    Ok(())
}
