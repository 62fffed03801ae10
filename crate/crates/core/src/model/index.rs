//! One-hot group identifiers and their learned projection to latent width.

use crate::error::{Error, Result};
use crate::model::catalog::{VariableCatalog, VariableGroup};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

pub const PROJECTOR: &str = "index.proj";

/// One row-block per variable group over the physical channels. The learned
/// projector (`index.proj`, shape `[channels, latent]`) lives in the model's
/// parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEmbedding {
    groups: Vec<String>,
    /// `[groups, channels]`, ones exactly in each group's channel columns.
    onehot: Tensor<f64>,
}

impl IndexEmbedding {
    pub fn from_catalog(catalog: &VariableCatalog) -> Self {
        let channels = catalog.channels();
        let mut data = vec![0.0; catalog.len() * channels];
        for g in 0..catalog.len() {
            for c in catalog.range(g) {
                data[g * channels + c] = 1.0;
            }
        }
        IndexEmbedding {
            groups: catalog.groups().iter().map(|g| g.name.clone()).collect(),
            onehot: Tensor::new([catalog.len(), channels], data).expect("consistent shape"),
        }
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn onehot(&self) -> &Tensor<f64> {
        &self.onehot
    }

    pub fn channels(&self) -> usize {
        self.onehot.shape()[1]
    }

    /// Append one row-block per new group and one column per new channel.
    /// Existing rows stay zero in the new columns.
    pub fn expanded(&self, new_groups: &[VariableGroup]) -> Result<Self> {
        for (i, g) in new_groups.iter().enumerate() {
            if self.groups.contains(&g.name) || new_groups[..i].iter().any(|h| h.name == g.name) {
                return Err(Error::DuplicateGroup(g.name.clone()));
            }
        }
        let (rows, cols) = (self.groups.len(), self.channels());
        let added: usize = new_groups.iter().map(|g| g.levels).sum();
        let new_cols = cols + added;
        let new_rows = rows + new_groups.len();
        let mut data = vec![0.0; new_rows * new_cols];
        for r in 0..rows {
            data[r * new_cols..r * new_cols + cols]
                .copy_from_slice(&self.onehot.data()[r * cols..(r + 1) * cols]);
        }
        let mut col = cols;
        for (i, g) in new_groups.iter().enumerate() {
            for _ in 0..g.levels {
                data[(rows + i) * new_cols + col] = 1.0;
                col += 1;
            }
        }
        let mut groups = self.groups.clone();
        groups.extend(new_groups.iter().map(|g| g.name.clone()));
        Ok(IndexEmbedding {
            groups,
            onehot: Tensor::new([new_rows, new_cols], data)?,
        })
    }

    pub fn group_position(&self, name: &str) -> Result<usize> {
        self.groups
            .iter()
            .position(|g| g == name)
            .ok_or_else(|| Error::UnknownGroup(name.to_string()))
    }

    /// Latent index vector `[1, C]` of a group: its one-hot row times the
    /// projector.
    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, group: usize) -> Result<Var> {
        if group >= self.groups.len() {
            return Err(Error::UnknownGroup(format!("#{group}")));
        }
        let proj = tape.param_named(store, PROJECTOR)?;
        let row = self.onehot.narrow(0, group, 1)?.cast::<T>();
        let row = tape.constant(row);
        tape.matmul(row, proj)
    }
}
