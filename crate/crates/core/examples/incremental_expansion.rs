//! Expand a model with the surface bundle, freeze the old modules, train a
//! few steps and verify that nothing frozen moved.

use vamoe::incremental::{prepare_incremental, verify_preservation, FreezeOptions, IndexInit};
use vamoe::losses::{total_loss, AdamW, AdamWConfig};
use vamoe::model::{Model, ModelConfig, VariableCatalog};
use vamoe::tensor::{Tape, Tensor};

fn main() -> vamoe::Result<()> {
    let config = ModelConfig {
        height: 8,
        width: 16,
        latent: 32,
        heads: 2,
        blocks: 2,
        k: 8,
        patch: 2,
        kernel: 3,
    };
    let base: Model<f32> = Model::new(config, VariableCatalog::upper_air(2), 0)?;
    let mut model = base.clone();
    let plan = prepare_incremental(
        &mut model,
        &VariableCatalog::surface_groups(),
        IndexInit::Reinit,
        FreezeOptions::default(),
        1,
    )?;
    println!(
        "{} -> {} channels, {} experts per block, {} of {} parameters trainable",
        base.channels(),
        model.channels(),
        model.blocks[0].experts.len(),
        model.params.trainable_count(),
        model.params.total_count()
    );

    let n = model.channels();
    let x = Tensor::from_fn([8, 16, n], |i| ((i * 31) % 17) as f32 / 8.0 - 1.0);
    let y = Tensor::from_fn([8, 16, n], |i| ((i * 29 + 5) % 17) as f32 / 8.0 - 1.0);
    let mut opt = AdamW::new(AdamWConfig::with_lr(1e-2))?;
    for step in 0..20 {
        model.params.zero_grads();
        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let parts = total_loss(&mut tape, &model, xv, yv, 0.1, None)?;
        if step % 5 == 0 {
            println!("step {step:>2}: loss {:.4}", tape.value(parts.total).item());
        }
        tape.backward(parts.total)?
            .accumulate_into(&mut model.params, 1.0)?;
        opt.step(&mut model.params)?;
    }

    let report = verify_preservation(&base.params, &model.params, &plan)?;
    print!("{}", report.to_table());
    report.ensure_clean()
}
