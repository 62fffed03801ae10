//! Autoregressive rollouts and per-channel RMSE at fixed lead times.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::rmse_all;
use crate::model::{Model, VariableKind};

pub const LEADS: [usize; 3] = [1, 3, 5];

/// Per-channel RMSE at each lead, averaged over rollout start points.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub channels: Vec<String>,
    pub kinds: Vec<VariableKind>,
    pub leads: Vec<usize>,
    /// `[lead][channel]`.
    pub rmse: Vec<Vec<f64>>,
    pub starts: usize,
}

impl Evaluation {
    pub fn get(&self, lead: usize, channel: &str) -> Option<f64> {
        let l = self.leads.iter().position(|&x| x == lead)?;
        let c = self.channels.iter().position(|x| x == channel)?;
        Some(self.rmse[l][c])
    }

    /// Mean RMSE over channels of `kind` at `lead`.
    pub fn mean(&self, lead: usize, kind: VariableKind) -> Option<f64> {
        let l = self.leads.iter().position(|&x| x == lead)?;
        let vals: Vec<f64> = self.rmse[l]
            .iter()
            .zip(&self.kinds)
            .filter(|(_, k)| **k == kind)
            .map(|(v, _)| *v)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean over all leads of [`Evaluation::mean`].
    pub fn mean_all_leads(&self, kind: VariableKind) -> Option<f64> {
        let vals: Vec<f64> = self.leads.iter().filter_map(|&l| self.mean(l, kind)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Rollout start indices: every valid start, or `limit` of them evenly
/// spaced.
pub fn rollout_starts(frames: usize, max_lead: usize, limit: usize) -> Vec<usize> {
    let valid = frames.saturating_sub(max_lead);
    if limit == 0 || limit >= valid {
        return (0..valid).collect();
    }
    (0..limit).map(|i| i * valid / limit).collect()
}

fn evaluate_with(
    test: &Dataset,
    starts: usize,
    lat_weighted: bool,
    mut forecast: impl FnMut(usize, usize) -> Result<Vec<crate::tensor::Tensor<f32>>>,
) -> Result<Evaluation> {
    let max_lead = *LEADS.iter().max().expect("non-empty");
    let idx = rollout_starts(test.frames(), max_lead, starts);
    if idx.is_empty() {
        return Err(Error::Config(format!(
            "test split of {} frames is too short for lead {max_lead}",
            test.frames()
        )));
    }
    let c = test.channels();
    let mut acc = vec![vec![0.0f64; c]; LEADS.len()];
    for &s in &idx {
        let preds = forecast(s, max_lead)?;
        for (li, &lead) in LEADS.iter().enumerate() {
            let r = rmse_all(&preds[lead - 1], &test.frame(s + lead), lat_weighted)?;
            for (a, v) in acc[li].iter_mut().zip(r) {
                *a += v;
            }
        }
    }
    let n = idx.len() as f64;
    Ok(Evaluation {
        channels: test.catalog.channel_names(),
        kinds: test.catalog.channel_kinds(),
        leads: LEADS.to_vec(),
        rmse: acc
            .into_iter()
            .map(|row| row.into_iter().map(|v| v / n).collect())
            .collect(),
        starts: idx.len(),
    })
}

/// Roll the model forward from each start and score leads 1, 3, 5 on
/// normalised fields.
pub fn evaluate(model: &Model<f32>, test: &Dataset, starts: usize, lat_weighted: bool) -> Result<Evaluation> {
    if test.channels() != model.channels() {
        return Err(Error::CatalogMismatch {
            expected: model.channels(),
            actual: test.channels(),
        });
    }
    evaluate_with(test, starts, lat_weighted, |s, steps| {
        let mut x = test.frame(s);
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            x = model.predict(&x)?;
            out.push(x.clone());
        }
        Ok(out)
    })
}

/// The no-skill forecast `X^{t+k} = X^t`.
pub fn persistence(test: &Dataset, starts: usize, lat_weighted: bool) -> Result<Evaluation> {
    evaluate_with(test, starts, lat_weighted, |s, steps| {
        Ok(vec![test.frame(s); steps])
    })
}
