mod common;

use std::path::Path;
use std::process::Command;

use common::zero;
use vamoe::harness::commands::error_growth;
use vamoe::harness::config::{DataConfig, TrainConfig};
use vamoe::harness::forgetting::run_seed;
use vamoe::harness::metrics::read_metrics;
use vamoe::harness::run::prepare_data;
use vamoe::harness::train::overfit;
use vamoe::harness::{
    evaluate, evaluate_checkpoint, persistence, train_incremental, train_initial, RunConfig, LEADS,
};
use vamoe::incremental::prepare_incremental;
use vamoe::losses::AdamWConfig;
use vamoe::model::{Model, ModelConfig, DECODER_KERNEL, LOSS_W};
use vamoe::tensor::Tensor;
use vamoe::Error;

fn small() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            height: 8,
            width: 16,
            latent: 16,
            heads: 2,
            blocks: 1,
            k: 3,
            patch: 2,
            kernel: 3,
        },
        data: DataConfig {
            levels: 1,
            initial_pairs: 24,
            incremental_pairs: 12,
            test_pairs: 10,
            gap: 2,
            eval_starts: 0,
        },
        train: TrainConfig {
            epochs_initial: 2,
            epochs_incremental: 2,
            eval_every: 1,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn overfitting_eight_samples_drives_the_loss_down() {
    let mut config = small();
    // wide enough that a patch fits in the latent
    config.model.latent = 32;
    let data = prepare_data(&config, 0).unwrap();
    let mut model = Model::new(config.model.clone(), data.initial_train.catalog.clone(), 0).unwrap();
    let w_before = common::bits(&model.params.by_name(LOSS_W).unwrap().value);
    let history = overfit(
        &mut model,
        &data.initial_train,
        8,
        500,
        config.train.lambda,
        AdamWConfig::with_lr(1e-2),
    )
    .unwrap();
    assert_eq!(history.len(), 501);
    assert!(history.iter().all(|l| l.is_finite() && *l >= 0.0));
    let w = model.params.by_name(LOSS_W).unwrap();
    assert_eq!(common::bits(&w.value), w_before);
    assert!(!w.frozen);
    let last = *history.last().unwrap();
    assert!(last < 1e-2 * history[0], "{} -> {last}", history[0]);
    let window = |i: usize| history[i * 10..(i + 1) * 10].iter().sum::<f64>();
    for i in 1..5 {
        assert!(window(i) < window(i - 1), "window {i} did not decrease");
    }
}

#[test]
fn identity_model_matches_persistence_exactly() {
    let config = RunConfig {
        model: ModelConfig {
            height: 8,
            width: 16,
            latent: 8,
            heads: 2,
            blocks: 1,
            k: 2,
            patch: 1,
            kernel: 1,
        },
        ..small()
    };
    let data = prepare_data(&config, 1).unwrap();
    let mut model: Model<f32> =
        Model::new(config.model.clone(), data.test_initial.catalog.clone(), 0).unwrap();
    let n = model.channels();
    let enc = Tensor::from_fn([1, 1, n, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
    let dec = Tensor::from_fn([1, 1, 8, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
    model.params.by_name_mut("encoder.kernel").unwrap().set_value(enc);
    model.params.by_name_mut(DECODER_KERNEL).unwrap().set_value(dec);
    zero(&mut model.params, "pos_embed");
    let e = evaluate(&model, &data.test_initial, 0, false).unwrap();
    let p = persistence(&data.test_initial, 0, false).unwrap();
    assert_eq!(e.rmse, p.rmse);
    assert_eq!(e.leads, LEADS.to_vec());
}

#[test]
fn same_seed_runs_are_bit_identical() {
    let config = small();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train_initial(&config, a.path()).unwrap();
    let rb = train_initial(&config, b.path()).unwrap();
    for f in ["initial.vamo", "metrics.csv", "stats.txt", "test.vamg"] {
        assert_eq!(read(&ra.dir.join(f)), read(&rb.dir.join(f)), "{f}");
    }
    let other = RunConfig { seed: 1, ..config };
    let c = tempfile::tempdir().unwrap();
    let rc = train_initial(&other, c.path()).unwrap();
    assert_ne!(
        read(&ra.dir.join("initial.vamo")),
        read(&rc.dir.join("initial.vamo"))
    );
}

#[test]
fn metrics_have_one_row_per_evaluation_lead_and_channel() {
    let config = RunConfig {
        train: TrainConfig {
            epochs_initial: 3,
            eval_every: 2,
            ..small().train
        },
        ..small()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = train_initial(&config, dir.path()).unwrap();
    let rows = read_metrics(run.dir.join("metrics.csv")).unwrap();
    let channels = run.outcome.model.channels();
    // epochs 2 and 3
    assert_eq!(rows.len(), 2 * LEADS.len() * channels);
    assert!(rows
        .iter()
        .all(|r| r.phase == "initial" && (r.epoch == 2 || r.epoch == 3)));
    let header = std::fs::read_to_string(run.dir.join("metrics.csv")).unwrap();
    assert!(header.starts_with("phase,epoch,lead,channel,rmse,loss_pred,loss_recon,trainable_params\n"));
}

#[test]
fn evaluating_a_saved_checkpoint_reproduces_training_scores() {
    let config = small();
    let dir = tempfile::tempdir().unwrap();
    let run = train_initial(&config, dir.path()).unwrap();
    let mut eval = config.clone();
    eval.paths.checkpoint = Some(run.dir.join("initial.vamo"));
    eval.paths.stats = Some(run.dir.join("stats.txt"));
    let scored = evaluate_checkpoint(&eval, dir.path()).unwrap();
    assert_eq!(scored.evaluation.rmse, run.outcome.evaluation.rmse);
    assert_eq!(scored.persistence.rmse, run.persistence.rmse);
    assert!(scored.dir.join("evaluation.csv").exists());
    assert!((0.0..=1.0).contains(&error_growth(&scored.evaluation)));
}

#[test]
fn incremental_run_from_a_saved_base_is_clean() {
    let config = small();
    let dir = tempfile::tempdir().unwrap();
    let base = train_initial(&config, dir.path()).unwrap();
    let mut inc = config.clone();
    inc.paths.initial_checkpoint = Some(base.dir.join("initial.vamo"));
    inc.paths.initial_stats = Some(base.dir.join("stats.txt"));
    let run = train_incremental(&inc, dir.path()).unwrap();
    assert!(run.outcome.report.is_clean());
    assert!(run.trainable_ratio() < 0.5);
    assert_eq!(
        read(&run.dir.join("initial.vamo")),
        read(&base.dir.join("initial.vamo"))
    );
    for f in [
        "incremental.vamo",
        "preservation.txt",
        "preservation.kv",
        "report.txt",
    ] {
        assert!(run.dir.join(f).exists(), "{f}");
    }
}

#[test]
fn zero_epoch_arms_report_their_starting_models() {
    let mut config = small();
    config.train.epochs_initial = 0;
    config.train.epochs_incremental = 0;
    let seed = 4;
    let result = run_seed(&config, seed).unwrap();
    let data = prepare_data(&config, seed).unwrap();

    let initial: Model<f32> =
        Model::new(config.model.clone(), data.initial_train.catalog.clone(), seed).unwrap();
    assert_eq!(
        result.pre.rmse,
        evaluate(&initial, &data.test_initial, 0, false).unwrap().rmse
    );

    let mut expanded = initial.clone();
    let new = data.test.catalog.groups()[initial.catalog.len()..].to_vec();
    let inc = &config.incremental;
    prepare_incremental(&mut expanded, &new, inc.index_init, inc.freeze(), seed).unwrap();
    let start = evaluate(&expanded, &data.test, 0, false).unwrap();
    assert_eq!(result.arms[0].evaluation.rmse, start.rmse);
    assert_eq!(result.arms[1].evaluation.rmse, start.rmse);

    let fresh: Model<f32> = Model::new(config.model.clone(), data.full_train.catalog.clone(), seed).unwrap();
    assert_eq!(
        result.arms[2].evaluation.rmse,
        evaluate(&fresh, &data.test, 0, false).unwrap().rmse
    );
}

#[test]
fn config_rejects_unknown_keys() {
    for text in ["bogus = 1", "[train]\nlearning_rate = 0.1", "[model]\nlayers = 3"] {
        assert!(
            matches!(RunConfig::from_toml(text), Err(Error::Config(_))),
            "{text}"
        );
    }
    assert!(matches!(
        RunConfig::from_toml("[data]\nincremental_pairs = 0"),
        Err(Error::Config(_))
    ));
    let round = RunConfig::from_toml(&small().to_toml()).unwrap();
    assert_eq!(round, small());
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vamoe"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn cli_exit_codes_follow_the_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, small().to_toml()).unwrap();
    let out = dir.path().join("runs");
    let ok = cli(&[
        "train-initial",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let stdout = String::from_utf8(ok.stdout).unwrap();
    let line = stdout.lines().last().unwrap();
    let run_dir = Path::new(line.strip_prefix("ok dir=").unwrap());
    assert!(run_dir.join("initial.vamo").exists());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "nonsense = true").unwrap();
    let fail = cli(&[
        "train-initial",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(fail.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&fail.stderr).starts_with("error kind=config"));

    let missing = cli(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(1));

    let usage = cli(&["train-initial", "--seed", "x"]);
    assert!(!usage.status.success());
}
