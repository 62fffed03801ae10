//! Mini-batch training with one tape per sample.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{total_loss, AdamW, AdamWConfig};
use crate::model::{Model, LOSS_W, LOSS_W_INC};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub optimizer: AdamWConfig,
    /// With `Some(n)`, each sample hides a random half of its first `n`
    /// channels: zeroed in the input and excluded from the loss.
    pub subsample_old: Option<usize>,
    pub seed: u64,
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub pred: f64,
    pub recon: f64,
}

/// Loss values of one sample after a backward pass into `model.params`.
#[derive(Debug, Clone, Copy)]
struct SampleLoss {
    total: f64,
    pred: f64,
    recon: f64,
}

fn sample_mask(channels: usize, old: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut order: Vec<usize> = (0..old).collect();
    order.shuffle(rng);
    let mut mask = vec![1.0f32; channels];
    for &c in &order[..old / 2] {
        mask[c] = 0.0;
    }
    mask
}

fn accumulate_sample(
    model: &mut Model<f32>,
    x: Tensor<f32>,
    y: Tensor<f32>,
    lambda: f64,
    mask: Option<Vec<f32>>,
    scale: f32,
    step: usize,
) -> Result<SampleLoss> {
    let mut tape = Tape::new();
    let (x, mask) = match mask {
        None => (x, None),
        Some(m) => {
            let c = m.len();
            let data = x.data().iter().enumerate().map(|(i, v)| v * m[i % c]).collect();
            let x = Tensor::new(x.shape().to_vec(), data)?;
            (x, Some(tape.constant(Tensor::new([1, 1, c], m)?)))
        }
    };
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let parts = match total_loss(&mut tape, model, xv, yv, lambda, mask) {
        Err(Error::NonFinite { .. }) => return Err(Error::NanLoss { step }),
        r => r?,
    };
    let total = tape.value(parts.total).item() as f64;
    if !total.is_finite() {
        return Err(Error::NanLoss { step });
    }
    let grads = tape.backward(parts.total)?;
    grads.accumulate_into(&mut model.params, scale)?;
    Ok(SampleLoss {
        total,
        pred: tape.value(parts.pred).item() as f64,
        recon: tape.value(parts.recon).item() as f64,
    })
}

/// Train `model` on the pairs of `data` (already normalised). `on_epoch`
/// runs after every epoch, e.g. for evaluation. Frozen parameters are never
/// updated.
pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    settings: &TrainSettings,
    mut on_epoch: impl FnMut(&Model<f32>, &EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if data.channels() != model.channels() {
        return Err(Error::CatalogMismatch {
            expected: model.channels(),
            actual: data.channels(),
        });
    }
    if data.pairs() == 0 {
        return Err(Error::Config("training set has no pairs".into()));
    }
    let mut opt = AdamW::new(settings.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut logs = Vec::with_capacity(settings.epochs);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..data.pairs()).collect();
    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        for batch in order.chunks(settings.batch_size) {
            model.params.zero_grads();
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let (x, y) = data.pair(i);
                let mask = settings
                    .subsample_old
                    .map(|old| sample_mask(data.channels(), old, &mut rng));
                let l = accumulate_sample(model, x, y, settings.lambda, mask, scale, step)?;
                sums[0] += l.total;
                sums[1] += l.pred;
                sums[2] += l.recon;
            }
            opt.step(&mut model.params)?;
            step += 1;
        }
        let n = data.pairs() as f64;
        let log = EpochLog {
            epoch,
            total: sums[0] / n,
            pred: sums[1] / n,
            recon: sums[2] / n,
        };
        on_epoch(model, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Mean prediction and reconstruction losses over all pairs, without
/// training.
pub fn mean_losses(model: &Model<f32>, data: &Dataset, lambda: f64) -> Result<(f64, f64)> {
    let (mut pred, mut recon) = (0.0, 0.0);
    for i in 0..data.pairs() {
        let (x, y) = data.pair(i);
        let mut tape = Tape::new();
        let (x, y) = (tape.constant(x), tape.constant(y));
        let parts = total_loss(&mut tape, model, x, y, lambda, None)?;
        pred += tape.value(parts.pred).item() as f64;
        recon += tape.value(parts.recon).item() as f64;
    }
    let n = data.pairs().max(1) as f64;
    Ok((pred / n, recon / n))
}

/// Full-batch training on the first `samples` pairs for `steps` steps;
/// returns the batch-mean total loss before every step and after the last.
/// The loss weights are held at their current values so the loss stays a
/// weighted squared error bounded below by zero (the learnable weights would
/// drive it negative and make ratios against the first value meaningless).
pub fn overfit(
    model: &mut Model<f32>,
    data: &Dataset,
    samples: usize,
    steps: usize,
    lambda: f64,
    optimizer: AdamWConfig,
) -> Result<Vec<f64>> {
    let samples = samples.min(data.pairs());
    if samples == 0 {
        return Err(Error::Config("overfit needs at least one pair".into()));
    }
    let held: Vec<(&str, bool)> = [LOSS_W, LOSS_W_INC]
        .into_iter()
        .filter_map(|n| model.params.by_name(n).ok().map(|p| (n, p.frozen)))
        .collect();
    for (n, _) in &held {
        model.params.by_name_mut(n)?.frozen = true;
    }
    let history = overfit_steps(model, data, samples, steps, lambda, optimizer);
    for (n, frozen) in held {
        model.params.by_name_mut(n)?.frozen = frozen;
    }
    history
}

fn overfit_steps(
    model: &mut Model<f32>,
    data: &Dataset,
    samples: usize,
    steps: usize,
    lambda: f64,
    optimizer: AdamWConfig,
) -> Result<Vec<f64>> {
    let mut opt = AdamW::new(optimizer)?;
    let pairs: Vec<_> = (0..samples).map(|i| data.pair(i)).collect();
    let mut history = Vec::with_capacity(steps + 1);
    let scale = 1.0 / samples as f32;
    for step in 0..=steps {
        model.params.zero_grads();
        let mut total = 0.0;
        for (x, y) in &pairs {
            total += accumulate_sample(model, x.clone(), y.clone(), lambda, None, scale, step)?.total;
        }
        history.push(total / samples as f64);
        if step < steps {
            opt.step(&mut model.params)?;
        }
    }
    Ok(history)
}
