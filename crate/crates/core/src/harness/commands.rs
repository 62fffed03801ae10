//! The experiment commands behind the CLI verbs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{self, Dataset, NormalizationStats};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::eval::{evaluate, persistence, Evaluation};
use crate::harness::metrics::{self, MetricsRow};
use crate::harness::run::{create_run_dir, prepare_data, prepare_with, write_text, PreparedData};
use crate::harness::train::{mean_losses, train, EpochLog, TrainSettings};
use crate::incremental::{
    apply_freeze, expand, prepare_incremental, verify_preservation, PhasePlan, PreservationReport,
};
use crate::model::{checkpoint, Model, Phase, VariableKind, ENCODER_KERNEL};

/// One trained phase: final model, losses, metric rows and final scores.
#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub model: Model<f32>,
    pub logs: Vec<EpochLog>,
    pub metrics: Vec<MetricsRow>,
    pub evaluation: Evaluation,
    /// Training time without the evaluations.
    pub train_seconds: f64,
}

struct FitArgs<'a> {
    label: &'a str,
    train: &'a Dataset,
    test: &'a Dataset,
    settings: TrainSettings,
}

fn fit(config: &RunConfig, mut model: Model<f32>, args: FitArgs<'_>) -> Result<PhaseOutcome> {
    let (starts, lat) = (config.data.eval_starts, config.train.lat_weighted);
    let epochs = args.settings.epochs;
    let every = config.train.eval_every;
    let trainable = model.params.trainable_count();
    let mut rows = Vec::new();
    let mut last: Option<Evaluation> = None;
    let mut eval_seconds = 0.0;
    let clock = Instant::now();
    let logs = train(&mut model, args.train, &args.settings, |m, log| {
        if log.epoch == epochs || (every > 0 && log.epoch % every == 0) {
            let t = Instant::now();
            let e = evaluate(m, args.test, starts, lat)?;
            rows.extend(metrics::rows(args.label, log, &e, trainable));
            last = Some(e);
            eval_seconds += t.elapsed().as_secs_f64();
        }
        Ok(())
    })?;
    let train_seconds = clock.elapsed().as_secs_f64() - eval_seconds;
    let evaluation = match last {
        Some(e) => e,
        None => {
            let e = evaluate(&model, args.test, starts, lat)?;
            let (pred, recon) = mean_losses(&model, args.train, args.settings.lambda)?;
            let log = EpochLog {
                epoch: 0,
                total: pred + args.settings.lambda * recon,
                pred,
                recon,
            };
            rows.extend(metrics::rows(args.label, &log, &e, trainable));
            e
        }
    };
    Ok(PhaseOutcome {
        model,
        logs,
        metrics: rows,
        evaluation,
        train_seconds,
    })
}

fn settings(
    config: &RunConfig,
    epochs: usize,
    lr: f64,
    seed: u64,
    subsample: Option<usize>,
) -> TrainSettings {
    TrainSettings {
        epochs,
        batch_size: config.train.batch_size,
        lambda: config.train.lambda,
        optimizer: config.train.optimizer(lr),
        subsample_old: subsample,
        seed,
    }
}

/// Train a fresh model on the upper-air channels.
pub fn fit_initial(config: &RunConfig, seed: u64, data: &PreparedData) -> Result<PhaseOutcome> {
    let mut model = Model::new(config.model.clone(), data.initial_train.catalog.clone(), seed)?;
    apply_freeze(&mut model, &PhasePlan::initial())?;
    let t = &config.train;
    fit(
        config,
        model,
        FitArgs {
            label: "initial",
            train: &data.initial_train,
            test: &data.test_initial,
            settings: settings(config, t.epochs_initial, t.lr_initial, seed, None),
        },
    )
}

/// Train a fresh model on every channel over the whole training window.
pub fn fit_full(config: &RunConfig, seed: u64, data: &PreparedData) -> Result<PhaseOutcome> {
    let mut model = Model::new(config.model.clone(), data.full_train.catalog.clone(), seed)?;
    apply_freeze(&mut model, &PhasePlan::initial())?;
    let t = &config.train;
    fit(
        config,
        model,
        FitArgs {
            label: "full",
            train: &data.full_train,
            test: &data.test,
            settings: settings(config, t.epochs_initial, t.lr_initial, seed, None),
        },
    )
}

/// Incremental result with its plan and the preservation check against the
/// base model.
#[derive(Debug, Clone)]
pub struct IncrementalOutcome {
    pub phase: PhaseOutcome,
    pub plan: PhasePlan,
    pub report: PreservationReport,
}

/// Expand `base` with the new groups of the data and train. With `frozen`
/// the incremental freeze plan applies; otherwise everything trains.
pub fn fit_incremental(
    config: &RunConfig,
    seed: u64,
    base: &Model<f32>,
    data: &PreparedData,
    frozen: bool,
) -> Result<IncrementalOutcome> {
    if base.phase != Phase::Initial {
        return Err(Error::Phase(
            "base checkpoint is not an initial-phase model".into(),
        ));
    }
    let full = &data.incremental_train.catalog;
    let old = base.catalog.groups();
    if full.len() <= old.len() || full.groups()[..old.len()] != *old {
        return Err(Error::CatalogMismatch {
            expected: base.channels(),
            actual: data.initial_train.channels(),
        });
    }
    let new_groups = full.groups()[old.len()..].to_vec();
    let inc = &config.incremental;
    let mut model = base.clone();
    let plan = if frozen {
        prepare_incremental(&mut model, &new_groups, inc.index_init, inc.freeze(), seed)?
    } else {
        let record = expand(&mut model, &new_groups, inc.index_init, seed)?;
        let plan = PhasePlan::unfrozen(record);
        apply_freeze(&mut model, &plan)?;
        plan
    };
    let subsample = inc.subsample_old.then_some(base.channels());
    let t = &config.train;
    let phase = fit(
        config,
        model,
        FitArgs {
            label: if frozen { "incremental" } else { "finetune" },
            train: &data.incremental_train,
            test: &data.test,
            settings: settings(config, t.epochs_incremental, t.lr_incremental, seed, subsample),
        },
    )?;
    let report = verify_preservation(&base.params, &phase.model.params, &plan)?;
    Ok(IncrementalOutcome { phase, plan, report })
}

fn eval_report(title: &str, model: &Evaluation, baseline: &Evaluation) -> String {
    let mut s = format!("{title}\n");
    s.push_str(&format!(
        "{:<10} {:>5} {:>10} {:>12}\n",
        "channel", "lead", "rmse", "persistence"
    ));
    for (li, &lead) in model.leads.iter().enumerate() {
        for (ci, ch) in model.channels.iter().enumerate() {
            s.push_str(&format!(
                "{:<10} {:>5} {:>10.5} {:>12.5}\n",
                ch, lead, model.rmse[li][ci], baseline.rmse[li][ci]
            ));
        }
    }
    s
}

/// Channels (as a fraction) where the model beats persistence at lead 1.
pub fn beats_persistence(model: &Evaluation, baseline: &Evaluation) -> f64 {
    let l = model
        .leads
        .iter()
        .position(|&l| l == 1)
        .expect("lead 1 is scored");
    let wins = model.rmse[l]
        .iter()
        .zip(&baseline.rmse[l])
        .filter(|(m, p)| m < p)
        .count();
    wins as f64 / model.channels.len() as f64
}

/// Fraction of channels whose lead-3 RMSE is at least the lead-1 RMSE.
pub fn error_growth(model: &Evaluation) -> f64 {
    let l1 = model
        .leads
        .iter()
        .position(|&l| l == 1)
        .expect("lead 1 is scored");
    let l3 = model
        .leads
        .iter()
        .position(|&l| l == 3)
        .expect("lead 3 is scored");
    let grows = model.rmse[l3]
        .iter()
        .zip(&model.rmse[l1])
        .filter(|(a, b)| a >= b)
        .count();
    grows as f64 / model.channels.len() as f64
}

#[derive(Debug, Clone)]
pub struct InitialRun {
    pub dir: PathBuf,
    pub outcome: PhaseOutcome,
    pub stats: NormalizationStats,
    pub persistence: Evaluation,
}

/// `train-initial`: writes `initial.vamo`, `stats.txt`, `metrics.csv`,
/// `test.vamg` (raw test split, every channel) and `report.txt`.
pub fn train_initial(config: &RunConfig, out: &Path) -> Result<InitialRun> {
    let dir = create_run_dir(out, "train-initial", config)?;
    let data = prepare_data(config, config.seed)?;
    let outcome = fit_initial(config, config.seed, &data)?;
    let persistence = persistence(
        &data.test_initial,
        config.data.eval_starts,
        config.train.lat_weighted,
    )?;
    checkpoint::save(&outcome.model, dir.join("initial.vamo"))?;
    data.stats_initial.save(dir.join("stats.txt"))?;
    data::save(&data.raw.test, dir.join("test.vamg"))?;
    metrics::write_csv(dir.join("metrics.csv"), &outcome.metrics)?;
    let mut report = eval_report("initial phase, test split", &outcome.evaluation, &persistence);
    report.push_str(&format!(
        "beats persistence at lead 1: {:.3}\nlead 3 >= lead 1: {:.3}\ntrain seconds: {:.2}\n",
        beats_persistence(&outcome.evaluation, &persistence),
        error_growth(&outcome.evaluation),
        outcome.train_seconds
    ));
    write_text(&dir.join("report.txt"), &report)?;
    Ok(InitialRun {
        dir,
        outcome,
        stats: data.stats_initial,
        persistence,
    })
}

#[derive(Debug, Clone)]
pub struct IncrementalRun {
    pub dir: PathBuf,
    pub base: Model<f32>,
    pub outcome: IncrementalOutcome,
    pub stats: NormalizationStats,
    pub persistence: Evaluation,
}

impl IncrementalRun {
    pub fn trainable_ratio(&self) -> f64 {
        let p = &self.outcome.phase.model.params;
        p.trainable_count() as f64 / p.total_count() as f64
    }
}

/// Check that the pretrained encoder slice is byte-identical to the base.
pub fn check_old_encoder(base: &Model<f32>, model: &Model<f32>) -> Result<()> {
    let a = base.params.by_name(ENCODER_KERNEL)?;
    let b = model.params.by_name(ENCODER_KERNEL)?;
    let same = a.value.shape() == b.value.shape()
        && a.value
            .data()
            .iter()
            .zip(b.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
    if same {
        Ok(())
    } else {
        Err(Error::PreservationViolated {
            count: 1,
            first: ENCODER_KERNEL.into(),
        })
    }
}

/// `train-incremental`: uses `paths.initial_checkpoint` (with
/// `paths.initial_stats`) as the base, or trains one first. Writes
/// `initial.vamo`, `incremental.vamo`, `stats.txt`, `metrics.csv`,
/// `preservation.txt`, `preservation.kv` and `report.txt`. A dirty
/// preservation report is a hard failure (after writing it).
pub fn train_incremental(config: &RunConfig, out: &Path) -> Result<IncrementalRun> {
    let dir = create_run_dir(out, "train-incremental", config)?;
    let seed = config.seed;
    let (base, data, mut rows) = match &config.paths.initial_checkpoint {
        Some(path) => {
            let base: Model<f32> = checkpoint::load(path)?;
            let stats_path = config.paths.initial_stats.as_ref().ok_or_else(|| {
                Error::Config("paths.initial_stats is required with paths.initial_checkpoint".into())
            })?;
            let stats = NormalizationStats::load(stats_path)?;
            let raw = data::build_splits(&config.field_spec(seed), config.split_sizes())?;
            (base, prepare_with(raw, stats)?, Vec::new())
        }
        None => {
            let data = prepare_data(config, seed)?;
            let initial = fit_initial(config, seed, &data)?;
            (initial.model, data, initial.metrics)
        }
    };
    if base.catalog != data.initial_train.catalog {
        return Err(Error::CatalogMismatch {
            expected: data.initial_train.channels(),
            actual: base.channels(),
        });
    }
    let outcome = fit_incremental(config, seed, &base, &data, true)?;
    let persistence = persistence(&data.test, config.data.eval_starts, config.train.lat_weighted)?;
    rows.extend(outcome.phase.metrics.iter().cloned());
    checkpoint::save(&base, dir.join("initial.vamo"))?;
    checkpoint::save(&outcome.phase.model, dir.join("incremental.vamo"))?;
    data.stats_full.save(dir.join("stats.txt"))?;
    data::save(&data.raw.test, dir.join("test.vamg"))?;
    metrics::write_csv(dir.join("metrics.csv"), &rows)?;
    outcome.report.write(&dir)?;
    let run = IncrementalRun {
        dir,
        base,
        stats: data.stats_full,
        persistence,
        outcome,
    };
    let eval = &run.outcome.phase.evaluation;
    let mut report = eval_report("incremental phase, test split", eval, &run.persistence);
    let p = &run.outcome.phase.model.params;
    report.push_str(&format!(
        "trainable parameters: {} of {} ({:.3})\npreservation violations: {}\ntrain seconds: {:.2}\n",
        p.trainable_count(),
        p.total_count(),
        run.trainable_ratio(),
        run.outcome.report.violations().len(),
        run.outcome.phase.train_seconds
    ));
    write_text(&run.dir.join("report.txt"), &report)?;
    run.outcome.report.ensure_clean()?;
    check_old_encoder(&run.base, &run.outcome.phase.model)?;
    Ok(run)
}

#[derive(Debug, Clone)]
pub struct EvaluateRun {
    pub dir: PathBuf,
    pub evaluation: Evaluation,
    pub persistence: Evaluation,
}

#[derive(Debug, serde::Serialize)]
struct EvalRow<'a> {
    lead: usize,
    channel: &'a str,
    rmse: f64,
    persistence: f64,
}

/// Score a model on a raw dataset (normalised with `stats`).
pub fn evaluate_model(
    model: &Model<f32>,
    stats: &NormalizationStats,
    raw: &Dataset,
    config: &RunConfig,
) -> Result<(Evaluation, Evaluation)> {
    if raw.catalog != model.catalog {
        return Err(Error::CatalogMismatch {
            expected: model.channels(),
            actual: raw.channels(),
        });
    }
    let test = stats.normalize(raw)?;
    let (starts, lat) = (config.data.eval_starts, config.train.lat_weighted);
    Ok((
        evaluate(model, &test, starts, lat)?,
        persistence(&test, starts, lat)?,
    ))
}

/// `evaluate`: needs `paths.checkpoint` and `paths.stats`; the dataset is
/// `paths.dataset` or the generated test split matching the model's phase.
/// Writes `evaluation.csv` and `report.txt`.
pub fn evaluate_checkpoint(config: &RunConfig, out: &Path) -> Result<EvaluateRun> {
    let need = |p: &Option<PathBuf>, key: &str| {
        p.clone()
            .ok_or_else(|| Error::Config(format!("paths.{key} is required for evaluate")))
    };
    let model: Model<f32> = checkpoint::load(need(&config.paths.checkpoint, "checkpoint")?)?;
    let stats = NormalizationStats::load(need(&config.paths.stats, "stats")?)?;
    let raw = match &config.paths.dataset {
        Some(p) => data::load(p)?,
        None => {
            let s = data::build_splits(&config.field_spec(config.seed), config.split_sizes())?;
            match model.phase {
                Phase::Initial => s.test_initial,
                Phase::Incremental => s.test,
            }
        }
    };
    let (evaluation, persistence) = evaluate_model(&model, &stats, &raw, config)?;
    let dir = create_run_dir(out, "evaluate", config)?;
    let mut rows = Vec::new();
    for (li, &lead) in evaluation.leads.iter().enumerate() {
        for (ci, ch) in evaluation.channels.iter().enumerate() {
            rows.push(EvalRow {
                lead,
                channel: ch,
                rmse: evaluation.rmse[li][ci],
                persistence: persistence.rmse[li][ci],
            });
        }
    }
    metrics::write_csv(dir.join("evaluation.csv"), &rows)?;
    write_text(
        &dir.join("report.txt"),
        &eval_report("evaluation", &evaluation, &persistence),
    )?;
    Ok(EvaluateRun {
        dir,
        evaluation,
        persistence,
    })
}

/// Mean over upper-air channels and leads.
pub fn upper_air_mean(e: &Evaluation) -> f64 {
    e.mean_all_leads(VariableKind::UpperAir).unwrap_or(f64::NAN)
}
