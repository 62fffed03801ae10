//! Phase management: growing a trained model to new variables, freezing the
//! pretrained parts, and checking that frozen values survived training.

mod plan;
mod preserve;

pub use plan::{apply_freeze, glob_match, ExpansionRecord, FreezeOptions, PhasePlan};
pub use preserve::{verify_preservation, PreservationEntry, PreservationReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::index::PROJECTOR;
use crate::model::layers::{trunc_normal, INIT_STD};
use crate::model::{
    Model, Phase, VariableGroup, DECODER_BIAS_INC, DECODER_KERNEL_INC, ENCODER_KERNEL_INC, LOSS_W_INC,
};
use crate::tensor::{Scalar, Tensor};

/// How the index projector is retrained when groups are added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexInit {
    /// Draw a fresh projector for all groups.
    #[default]
    Reinit,
    /// Keep the pretrained rows and draw only the rows of new channels.
    Warm,
}

// independent RNG streams per expansion step
const STREAM_ENCODER: u64 = 1;
const STREAM_INDEX: u64 = 2;
const STREAM_EXPERTS: u64 = 3;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Extend the catalog by `new_groups` and grow the encoder kernel from
/// `(k,k,N,C)` to `(k,k,N+M,C)`, the decoder kernel from `(k,k,C,N)` to
/// `(k,k,C,N+M)`, the decoder bias and the loss weights. Pretrained tensors
/// are left untouched; the added slices live in separate `*_inc`
/// parameters.
pub fn expand_encoder<T: Scalar>(
    model: &mut Model<T>,
    new_groups: &[VariableGroup],
    seed: u64,
) -> Result<ExpansionRecord> {
    if model.phase != Phase::Initial || model.is_expanded() {
        return Err(Error::Phase("model is already expanded".into()));
    }
    let added: usize = new_groups.iter().map(|g| g.levels).sum();
    if new_groups.is_empty() || added == 0 {
        return Err(Error::Phase("expansion needs at least one new channel".into()));
    }
    let old = model.channels();
    let mut catalog = model.catalog.clone();
    catalog.extend(new_groups.to_vec())?;
    let mut rng = rng(seed, STREAM_ENCODER);
    let (k, c) = (model.config.kernel, model.config.latent);
    let p = &mut model.params;
    p.insert(
        ENCODER_KERNEL_INC,
        trunc_normal(&mut rng, &[k, k, added, c], INIT_STD),
    );
    p.insert(
        DECODER_KERNEL_INC,
        trunc_normal(&mut rng, &[k, k, c, added], INIT_STD),
    );
    p.insert(DECODER_BIAS_INC, Tensor::zeros([added]));
    p.insert(LOSS_W_INC, Tensor::zeros([1, 1, added]));
    model.catalog = catalog;
    Ok(ExpansionRecord {
        old_channels: old,
        added_channels: added,
        new_groups: new_groups.iter().map(|g| g.name.clone()).collect(),
    })
}

/// Add one-hot row-blocks for `new_groups` and retrain the projector.
pub fn expand_index_embedding<T: Scalar>(
    model: &mut Model<T>,
    new_groups: &[VariableGroup],
    init: IndexInit,
    seed: u64,
) -> Result<()> {
    let index = model.index.expanded(new_groups)?;
    if index.channels() != model.channels() {
        return Err(Error::CatalogMismatch {
            expected: model.channels(),
            actual: index.channels(),
        });
    }
    let mut rng = rng(seed, STREAM_INDEX);
    let c = model.config.latent;
    let param = model.params.by_name_mut(PROJECTOR)?;
    let value = match init {
        IndexInit::Reinit => trunc_normal(&mut rng, &[index.channels(), c], INIT_STD),
        IndexInit::Warm => {
            let old_rows = param.value.shape()[0];
            let fresh: Tensor<T> = trunc_normal(&mut rng, &[index.channels() - old_rows, c], INIT_STD);
            Tensor::concat(&[&param.value, &fresh], 0)?
        }
    };
    param.set_value(value);
    model.index = index;
    Ok(())
}

/// Give every block one freshly initialised expert per new group.
pub fn add_surface_experts<T: Scalar>(
    model: &mut Model<T>,
    new_groups: &[VariableGroup],
    seed: u64,
) -> Result<()> {
    if !model.is_expanded() {
        return Err(Error::Phase(
            "encoder and decoder must be expanded before adding experts".into(),
        ));
    }
    let mut rng = rng(seed, STREAM_EXPERTS);
    for block in &mut model.blocks {
        for g in new_groups {
            block.add_expert(&g.name, &mut model.params, &mut rng)?;
        }
    }
    Ok(())
}

/// Full expansion: kernels, index embedding and experts, then switch to the
/// incremental phase and validate.
pub fn expand<T: Scalar>(
    model: &mut Model<T>,
    new_groups: &[VariableGroup],
    init: IndexInit,
    seed: u64,
) -> Result<ExpansionRecord> {
    for (i, g) in new_groups.iter().enumerate() {
        if model.catalog.group_index(&g.name).is_ok() || new_groups[..i].iter().any(|h| h.name == g.name) {
            return Err(Error::DuplicateGroup(g.name.clone()));
        }
    }
    let record = expand_encoder(model, new_groups, seed)?;
    expand_index_embedding(model, new_groups, init, seed)?;
    add_surface_experts(model, new_groups, seed)?;
    model.phase = Phase::Incremental;
    model.validate()?;
    Ok(record)
}

/// Names of the catalog groups present before `record`'s expansion.
pub fn old_groups<T: Scalar>(model: &Model<T>, record: &ExpansionRecord) -> Vec<String> {
    model
        .catalog
        .groups()
        .iter()
        .map(|g| g.name.clone())
        .filter(|n| !record.new_groups.contains(n))
        .collect()
}

/// Expand with the surface bundle and apply the incremental freeze plan.
pub fn prepare_incremental<T: Scalar>(
    model: &mut Model<T>,
    new_groups: &[VariableGroup],
    init: IndexInit,
    opts: FreezeOptions,
    seed: u64,
) -> Result<PhasePlan> {
    let record = expand(model, new_groups, init, seed)?;
    let plan = PhasePlan::incremental(&old_groups(model, &record), record, opts);
    apply_freeze(model, &plan)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, VariableCatalog};

    fn small() -> Model<f32> {
        let cfg = ModelConfig {
            height: 8,
            width: 8,
            latent: 8,
            heads: 2,
            blocks: 1,
            k: 2,
            patch: 2,
            kernel: 3,
        };
        Model::new(cfg, VariableCatalog::upper_air(1), 3).unwrap()
    }

    #[test]
    fn expansion_is_not_idempotent() {
        let mut m = small();
        expand(&mut m, &VariableCatalog::surface_groups(), IndexInit::Reinit, 1).unwrap();
        let again = expand(
            &mut m,
            &[VariableGroup::surface("extra", 1)],
            IndexInit::Reinit,
            1,
        );
        assert!(matches!(again, Err(Error::Phase(_))));
        let dup = expand(
            &mut small(),
            &[VariableGroup::surface("z", 1)],
            IndexInit::Reinit,
            1,
        );
        assert!(matches!(dup, Err(Error::DuplicateGroup(_))));
    }

    #[test]
    fn experts_require_expanded_encoder() {
        let mut m = small();
        assert!(matches!(
            add_surface_experts(&mut m, &VariableCatalog::surface_groups(), 0),
            Err(Error::Phase(_))
        ));
    }

    #[test]
    fn empty_expansion_rejected() {
        let mut m = small();
        assert!(expand_encoder(&mut m, &[], 0).is_err());
    }

    #[test]
    fn warm_index_keeps_old_rows() {
        let mut m = small();
        let before = m.params.by_name(PROJECTOR).unwrap().value.clone();
        expand(&mut m, &VariableCatalog::surface_groups(), IndexInit::Warm, 9).unwrap();
        let after = &m.params.by_name(PROJECTOR).unwrap().value;
        assert_eq!(after.shape(), &[10, 8]);
        assert_eq!(after.narrow(0, 0, 5).unwrap(), before);
    }

    #[test]
    fn incremental_plan_covers_every_parameter() {
        let mut m = small();
        let plan = prepare_incremental(
            &mut m,
            &VariableCatalog::surface_groups(),
            IndexInit::Reinit,
            FreezeOptions::default(),
            4,
        )
        .unwrap();
        assert_eq!(plan.phase, Phase::Incremental);
        assert!(m.params.by_name("encoder.kernel").unwrap().frozen);
        assert!(!m.params.by_name("encoder.kernel_inc").unwrap().frozen);
        assert!(
            m.params
                .by_name("blocks.0.moe.cae.z.gate.fc1.weight")
                .unwrap()
                .frozen
        );
        assert!(
            !m.params
                .by_name("blocks.0.moe.cae.sv.gate.fc1.weight")
                .unwrap()
                .frozen
        );
        assert!(!m.params.by_name("blocks.0.moe.shared.fc1.weight").unwrap().frozen);
        assert!(!m.params.by_name("index.proj").unwrap().frozen);
    }
}
