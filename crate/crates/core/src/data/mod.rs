//! Synthetic datasets, normalisation and the on-disk tensor format.

mod io;
mod norm;
pub mod synth;

pub use io::{from_bytes, load, save, to_bytes, MAGIC, VERSION};
pub use norm::NormalizationStats;
pub use synth::{generate, GroupDynamics, SurfaceSpec, SyntheticFieldSpec, Trajectory};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Phase, Stage, VariableCatalog};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Consecutive frames of one trajectory; pair `i` is `(frame i, frame
/// i+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub catalog: VariableCatalog,
    pub height: usize,
    pub width: usize,
    pub phase: Phase,
    pub split: Split,
    /// `[T, H, W, C]`, frame-major.
    data: Vec<f32>,
}

impl Dataset {
    pub fn new(
        catalog: VariableCatalog,
        height: usize,
        width: usize,
        phase: Phase,
        split: Split,
        data: Vec<f32>,
    ) -> Result<Self> {
        let frame = height * width * catalog.channels();
        if frame == 0 || !data.len().is_multiple_of(frame) {
            return Err(Error::InvalidShape {
                op: "dataset",
                detail: format!(
                    "{} values do not split into {height}x{width}x{} frames",
                    data.len(),
                    catalog.channels()
                ),
            });
        }
        let ds = Dataset {
            catalog,
            height,
            width,
            phase,
            split,
            data,
        };
        ds.check_channels()?;
        Ok(ds)
    }

    fn check_channels(&self) -> Result<()> {
        let m = self.catalog.incremental_channels();
        match self.phase {
            Phase::Initial if m > 0 => Err(Error::Phase(format!(
                "initial-phase dataset carries {m} incremental channels"
            ))),
            Phase::Incremental if m == 0 => Err(Error::Phase(
                "incremental-phase dataset has no new channels".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn channels(&self) -> usize {
        self.catalog.channels()
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels()
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.frame_len()
    }

    pub fn pairs(&self) -> usize {
        self.frames().saturating_sub(1)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> Tensor<f32> {
        let n = self.frame_len();
        Tensor::new(
            [self.height, self.width, self.channels()],
            self.data[t * n..(t + 1) * n].to_vec(),
        )
        .expect("frame shape")
    }

    /// `(X^t, X^{t+1})`.
    pub fn pair(&self, i: usize) -> (Tensor<f32>, Tensor<f32>) {
        (self.frame(i), self.frame(i + 1))
    }

    /// Frames `start..start+count`.
    pub fn slice_frames(&self, start: usize, count: usize, split: Split) -> Result<Dataset> {
        if start + count > self.frames() {
            return Err(Error::IndexOutOfBounds {
                index: start + count,
                len: self.frames(),
            });
        }
        let n = self.frame_len();
        Dataset::new(
            self.catalog.clone(),
            self.height,
            self.width,
            self.phase,
            split,
            self.data[start * n..(start + count) * n].to_vec(),
        )
    }

    /// Keep only the channels of `stage`'s groups (initial) or all groups
    /// (incremental).
    pub fn for_phase(&self, phase: Phase) -> Result<Dataset> {
        let catalog = match phase {
            Phase::Initial => self.catalog.stage(Stage::Initial),
            Phase::Incremental => self.catalog.clone(),
        };
        let keep: Vec<usize> = catalog
            .channel_names()
            .iter()
            .map(|n| self.catalog.channel_index(n))
            .collect::<Result<_>>()?;
        let c = self.channels();
        let mut data = Vec::with_capacity(self.data.len() / c * keep.len());
        for cell in self.data.chunks_exact(c) {
            data.extend(keep.iter().map(|&k| cell[k]));
        }
        Dataset::new(catalog, self.height, self.width, phase, self.split, data)
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

impl Trajectory {
    /// The whole trajectory as an incremental-phase dataset.
    pub fn into_dataset(self, split: Split) -> Result<Dataset> {
        Dataset::new(
            self.catalog,
            self.height,
            self.width,
            Phase::Incremental,
            split,
            self.data,
        )
    }
}

/// Pair counts of the three splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub initial: usize,
    pub incremental: usize,
    pub test: usize,
    /// Frames skipped between the training window and the test window.
    pub gap: usize,
}

/// Train/test splits carved from one trajectory. The incremental training
/// window is the later part of the initial window; the test window starts
/// after the training window and never overlaps it.
#[derive(Debug, Clone)]
pub struct Splits {
    pub initial_train: Dataset,
    pub incremental_train: Dataset,
    /// The whole training window with every channel.
    pub full_train: Dataset,
    /// Test frames with initial channels only.
    pub test_initial: Dataset,
    /// Test frames with every channel.
    pub test: Dataset,
    /// Test window's first frame index in the trajectory.
    pub test_start: usize,
}

pub fn build_splits(spec: &SyntheticFieldSpec, sizes: SplitSizes) -> Result<Splits> {
    if sizes.incremental > sizes.initial || sizes.initial == 0 || sizes.test == 0 {
        return Err(Error::Config(format!(
            "split sizes {sizes:?}: need 0 < incremental <= initial and test > 0"
        )));
    }
    if spec.surface.is_none() {
        return Err(Error::Config(
            "splits need surface variables for the incremental phase".into(),
        ));
    }
    let train_frames = sizes.initial + 1;
    let test_start = train_frames + sizes.gap;
    let total = test_start + sizes.test + 1;
    let full = generate(spec, total)?.into_dataset(Split::Train)?;
    let window = full.slice_frames(0, train_frames, Split::Train)?;
    let initial_train = window.for_phase(Phase::Initial)?;
    let incremental_train = window.slice_frames(
        sizes.initial - sizes.incremental,
        sizes.incremental + 1,
        Split::Train,
    )?;
    let test = full.slice_frames(test_start, sizes.test + 1, Split::Test)?;
    let test_initial = test.for_phase(Phase::Initial)?;
    Ok(Splits {
        initial_train,
        incremental_train,
        full_train: window,
        test_initial,
        test,
        test_start,
    })
}
