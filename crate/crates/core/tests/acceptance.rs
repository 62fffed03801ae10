//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. `ACCEPTANCE_ONLY=1,3` restricts the run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vamoe::data::{self, Dataset};
use vamoe::harness::commands::{beats_persistence, check_old_encoder, error_growth};
use vamoe::harness::config::{DataConfig, GradcheckConfig, TrainConfig};
use vamoe::harness::gradsuite::run_suite;
use vamoe::harness::run::prepare_data;
use vamoe::harness::train::overfit;
use vamoe::harness::{evaluate, forgetting_report, persistence, train_incremental, train_initial, RunConfig};
use vamoe::losses::{dynamic_prediction_loss, AdamWConfig};
use vamoe::model::{checkpoint, Model, ModelConfig, VariableCatalog, ENCODER_KERNEL};
use vamoe::tensor::{Tape, Tensor};
use vamoe::Error;

const GRAD_TOL: f64 = 1e-4;
const GRAD_TOL_E2E: f64 = 1e-3;
const GRAD_SECONDS: f64 = 120.0;
const W_TOL: f64 = 1e-3;
const W_SECONDS: f64 = 5.0;
const RATIO_MAX: f64 = 0.5;
const FORGETTING_SEEDS: usize = 3;
const FORGETTING_SECONDS: f64 = 1800.0;
const OVERFIT_SAMPLES: usize = 8;
const OVERFIT_STEPS: usize = 500;
const OVERFIT_FACTOR: f64 = 1e-3;
const OVERFIT_LR: f64 = 1e-2;
const BEAT_FRACTION: f64 = 0.9;
const GROWTH_FRACTION: f64 = 0.9;

type Check = vamoe::Result<(bool, String)>;
type Trained = ((bool, String), Model<f32>, Model<f32>);

fn gradient_suite() -> Check {
    let cfg = GradcheckConfig {
        tolerance: GRAD_TOL,
        end_to_end_tolerance: GRAD_TOL_E2E,
        ..GradcheckConfig::default()
    };
    let report = run_suite(&cfg, 0)?;
    let worst = report
        .entries
        .iter()
        .max_by(|a, b| (a.rel_err / a.tolerance).total_cmp(&(b.rel_err / b.tolerance)))
        .expect("suite has entries");
    let e2e = report
        .entry("model_end_to_end")
        .is_some_and(|e| e.passed() && e.tolerance == GRAD_TOL_E2E);
    let pinned = report
        .entries
        .iter()
        .filter(|e| e.op != "model_end_to_end")
        .all(|e| e.tolerance == GRAD_TOL);
    let ok = report.passed() && e2e && pinned && report.seconds < GRAD_SECONDS;
    Ok((
        ok,
        format!(
            "{} ops, worst {} rel {:.2e} (tol {:.0e}), {:.1}s",
            report.entries.len(),
            worst.op,
            worst.rel_err,
            worst.tolerance,
            report.seconds
        ),
    ))
}

fn weight_stationarity() -> Check {
    let clock = Instant::now();
    let (h, w, c) = (16, 32, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scales: Vec<f64> = (0..c).map(|i| 0.05 * 1.35f64.powi(i as i32)).collect();
    let residual = Tensor::from_fn([h, w, c], |i| {
        let e: f64 = rng.sample(StandardNormal);
        e * scales[i % c]
    });
    // oracle: two-pass per-channel mean square
    let mut m = vec![0.0f64; c];
    for cell in residual.data().chunks_exact(c) {
        for (a, v) in m.iter_mut().zip(cell) {
            *a += v * v;
        }
    }
    let m: Vec<f64> = m.into_iter().map(|s| s / (h * w) as f64).collect();

    let zeros = Tensor::zeros([h, w, c]);
    let mut wv = vec![0.0f64; c];
    for _ in 0..400 {
        let mut tape = Tape::new();
        let p = tape.constant(residual.clone());
        let t = tape.constant(zeros.clone());
        let wt = tape.leaf(Tensor::new([1, 1, c], wv.clone())?, true);
        let l = dynamic_prediction_loss(&mut tape, p, t, wt, None)?;
        let g = tape.backward(l)?;
        let g = g.wrt(wt).expect("w is a leaf");
        for (x, d) in wv.iter_mut().zip(g.data()) {
            *x -= c as f64 * d;
        }
    }
    let err = wv
        .iter()
        .zip(&m)
        .map(|(x, mc)| (x - mc.ln()).abs())
        .fold(0.0, f64::max);
    let secs = clock.elapsed().as_secs_f64();
    Ok((
        err <= W_TOL && secs < W_SECONDS,
        format!("{c} channels, max |w - ln m| {err:.2e}, {secs:.2}s"),
    ))
}

fn routing_invariants() -> Check {
    let config = ModelConfig::default();
    let mut model: Model<f64> = Model::new(config.clone(), VariableCatalog::upper_air(3), 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in model.params.iter_mut() {
        let v = Tensor::from_fn(p.value.shape().to_vec(), |_| rng.random_range(-0.3..0.3));
        p.set_value(v);
    }
    let n = model.channels();
    let (k, c) = (config.k, config.latent);
    let x = Tensor::from_fn([config.height, config.width, n], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = model.forward_full(&mut tape, xv)?;
    let (mut tokens, mut distinct, mut exact) = (0usize, true, true);
    for block in &out.routing {
        for (_, d) in block {
            let probs = tape.value(d.probs);
            let weights = tape.value(d.weights);
            for t in 0..d.indices.rows() {
                let row = d.indices.row(t);
                let mut sorted = row.to_vec();
                sorted.sort_unstable();
                sorted.dedup();
                distinct &= row.len() == k && sorted.len() == k;
                for (j, &ch) in row.iter().enumerate() {
                    exact &= weights.data()[t * k + j].to_bits() == probs.data()[t * c + ch].to_bits();
                }
                tokens += 1;
            }
        }
    }

    // unselected channels with the routing held fixed
    let cae = &model.blocks[0].experts[0];
    let rows = config.tokens();
    let xs = Tensor::from_fn([rows, c], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let xv = tape.constant(xs.clone());
    let iv = tape.constant(Tensor::from_fn([1, c], |_| rng.random_range(-1.0..1.0)));
    let (base, decision) = cae.forward(&mut tape, &model.params, xv, iv)?;
    let base: Vec<u64> = tape.value(base).data().iter().map(|v| v.to_bits()).collect();
    let mut untouched = true;
    for t in 0..rows {
        let selected = decision.indices.row(t).to_vec();
        let free = (0..c).filter(|ch| !selected.contains(ch)).take(3);
        for ch in free {
            let mut data = xs.data().to_vec();
            data[t * c + ch] += 10.0;
            let moved = tape.constant(Tensor::new([rows, c], data)?);
            let after = cae.apply(&mut tape, &model.params, moved, &decision)?;
            untouched &= tape
                .value(after)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .eq(base.iter().copied());
        }
    }
    Ok((
        distinct && exact && untouched,
        format!("{tokens} token decisions, K = {k} distinct: {distinct}, weights bit-exact: {exact}, unselected inert: {untouched}"),
    ))
}

fn expansion_soundness(config: &RunConfig, out: &Path) -> vamoe::Result<Trained> {
    let run = train_incremental(config, out)?;
    let base: Model<f32> = checkpoint::load(run.dir.join("initial.vamo"))?;
    let inc: Model<f32> = checkpoint::load(run.dir.join("incremental.vamo"))?;
    let old = base.params.by_name(ENCODER_KERNEL)?.value.data().to_vec();
    let new = inc.params.by_name(ENCODER_KERNEL)?.value.data().to_vec();
    let bytes_equal = old
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .eq(new.iter().flat_map(|v| v.to_le_bytes()));
    let identical = bytes_equal && check_old_encoder(&base, &inc).is_ok();
    let violations = run.outcome.report.violations().len();
    let ratio = run.trainable_ratio();
    let ok = violations == 0 && identical && ratio < RATIO_MAX;
    Ok((
        (ok, format!("violations {violations}, old encoder slice identical: {identical}, trainable ratio {ratio:.3}")),
        base,
        inc,
    ))
}

fn forgetting(config: &RunConfig, out: &Path) -> Check {
    let clock = Instant::now();
    let report = forgetting_report(config, out)?;
    let secs = clock.elapsed().as_secs_f64();
    let deg = |arm: &str| report.arm(arm).map_or(f64::NAN, |a| a.degradation);
    let secs_of = |arm: &str| report.arm(arm).map_or(f64::NAN, |a| a.train_seconds);
    let ok = report.seeds.len() >= FORGETTING_SEEDS
        && report.frozen_forgets_less()
        && report.frozen_is_cheaper()
        && secs < FORGETTING_SECONDS;
    Ok((
        ok,
        format!(
            "{} seeds, degradation frozen {:+.4} vs finetune {:+.4}, train s frozen {:.1} vs full {:.1}, total {:.0}s",
            report.seeds.len(),
            deg("frozen"),
            deg("finetune"),
            secs_of("frozen"),
            secs_of("full"),
            secs
        ),
    ))
}

fn learning_sanity(config: &RunConfig, base: &Model<f32>, inc: &Model<f32>) -> Check {
    let data = prepare_data(config, config.seed)?;
    let mut model = Model::new(
        config.model.clone(),
        data.initial_train.catalog.clone(),
        config.seed,
    )?;
    let history = overfit(
        &mut model,
        &data.initial_train,
        OVERFIT_SAMPLES,
        OVERFIT_STEPS,
        config.train.lambda,
        AdamWConfig::with_lr(OVERFIT_LR),
    )?;
    let (first, last) = (history[0], *history.last().expect("non-empty"));
    let reached = history.iter().position(|&l| l < OVERFIT_FACTOR * first);
    let overfit_ok = last < OVERFIT_FACTOR * first && history.iter().all(|l| l.is_finite());

    let (starts, lat) = (config.data.eval_starts, config.train.lat_weighted);
    let e = evaluate(base, &data.test_initial, starts, lat)?;
    let p = persistence(&data.test_initial, starts, lat)?;
    let (beat, grow) = (beats_persistence(&e, &p), error_growth(&e));

    let e_inc = evaluate(inc, &data.test, starts, lat)?;
    let p_inc = persistence(&data.test, starts, lat)?;
    let ok = overfit_ok && beat >= BEAT_FRACTION && grow >= GROWTH_FRACTION;
    Ok((
        ok,
        format!(
            "overfit {first:.3e} -> {last:.3e} (below 1e-3x at step {}), initial model beats persistence {beat:.3}, \
             error growth {grow:.3}; incremental model on all channels: beats {:.3}, growth {:.3}",
            reached.map_or("never".to_string(), |s| s.to_string()),
            beats_persistence(&e_inc, &p_inc),
            error_growth(&e_inc)
        ),
    ))
}

fn small() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            height: 8,
            width: 16,
            latent: 16,
            heads: 2,
            blocks: 1,
            k: 4,
            patch: 2,
            kernel: 3,
        },
        data: DataConfig {
            levels: 2,
            initial_pairs: 32,
            incremental_pairs: 16,
            test_pairs: 12,
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

/// Random bit flips in the header region and random truncations may parse or
/// fail, but must never panic.
fn survives_corruption(bytes: &[u8], parse: impl Fn(&[u8]) -> bool) -> (bool, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tried = 0;
    let mut ok = true;
    for _ in 0..300 {
        let mut b = bytes.to_vec();
        let i = rng.random_range(0..b.len().min(256));
        b[i] ^= 1 << rng.random_range(0..8);
        let cut = rng.random_range(0..bytes.len());
        for case in [&b[..], &bytes[..cut]] {
            tried += 1;
            ok &= catch_unwind(AssertUnwindSafe(|| parse(case))).is_ok();
        }
    }
    (ok, tried)
}

fn determinism_and_io(out: &Path) -> Check {
    let config = small();
    let a = train_initial(&config, &out.join("a"))?;
    let b = train_initial(&config, &out.join("b"))?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let mut same = true;
    for f in ["initial.vamo", "metrics.csv"] {
        same &= read(&a.dir.join(f))? == read(&b.dir.join(f))?;
    }

    let ck = read(&a.dir.join("initial.vamo"))?;
    let model: Model<f32> = checkpoint::from_bytes(&ck)?;
    let ck_round = checkpoint::to_bytes(&model)? == ck;
    let ds = read(&a.dir.join("test.vamg"))?;
    let dataset: Dataset = data::from_bytes(&ds)?;
    let ds_round = data::to_bytes(&dataset)? == ds;

    let typed = |r: std::result::Result<(), Error>| {
        matches!(
            r,
            Err(Error::BadMagic { .. }
                | Error::Version { .. }
                | Error::Truncated { .. }
                | Error::Malformed(_))
        )
    };
    let mut bad = ck.clone();
    bad[0] ^= 0xff;
    let mut version = ds.clone();
    version[4] = 0xee;
    let named = typed(checkpoint::from_bytes::<f32>(&bad).map(drop))
        && typed(checkpoint::from_bytes::<f32>(&ck[..ck.len() / 3]).map(drop))
        && typed(data::from_bytes(&version).map(drop))
        && typed(data::from_bytes(&ds[..ds.len() - 5]).map(drop));
    let (ck_safe, n1) = survives_corruption(&ck, |b| checkpoint::from_bytes::<f32>(b).is_err());
    let (ds_safe, n2) = survives_corruption(&ds, |b| data::from_bytes(b).is_err());
    let ok = same && ck_round && ds_round && named && ck_safe && ds_safe;
    Ok((
        ok,
        format!(
            "same-seed files identical: {same}, checkpoint round-trip: {ck_round}, dataset round-trip: {ds_round}, \
             typed errors: {named}, {} corruptions without panic: {}",
            n1 + n2,
            ck_safe && ds_safe
        ),
    ))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let dir = tempfile::tempdir().expect("temp dir");
    let config = RunConfig::default();
    let mut results: Vec<(usize, &str, bool, String)> = Vec::new();
    let mut record = |n: usize, name: &'static str, r: Check| {
        let (ok, detail) = r.unwrap_or_else(|e| (false, format!("error kind={} {e}", e.kind())));
        println!(
            "criterion {n} {name}: {} | {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
        results.push((n, name, ok, detail));
    };

    if wanted(1) {
        record(1, "gradient suite", gradient_suite());
    }
    if wanted(2) {
        record(2, "loss-weight stationarity", weight_stationarity());
    }
    if wanted(3) {
        record(3, "routing invariants", routing_invariants());
    }
    let mut trained = None;
    if wanted(4) || wanted(6) {
        match expansion_soundness(&config, &dir.path().join("incremental")) {
            Ok((r, base, inc)) => {
                if wanted(4) {
                    record(4, "expansion and freeze soundness", Ok(r));
                }
                trained = Some((base, inc));
            }
            Err(e) => record(4, "expansion and freeze soundness", Err(e)),
        }
    }
    if wanted(5) {
        record(
            5,
            "forgetting experiment",
            forgetting(&config, &dir.path().join("forgetting")),
        );
    }
    if wanted(6) {
        let r = match &trained {
            Some((base, inc)) => learning_sanity(&config, base, inc),
            None => Err(Error::Config("no trained model available".into())),
        };
        record(6, "learning sanity", r);
    }
    if wanted(7) {
        record(
            7,
            "determinism and I/O",
            determinism_and_io(&dir.path().join("io")),
        );
    }

    results.sort_by_key(|r| r.0);
    println!("\nsummary");
    for (n, name, ok, _) in &results {
        println!("  {n}. {name}: {}", if *ok { "PASS" } else { "FAIL" });
    }
    if results.iter().any(|r| !r.2) {
        std::process::exit(1);
    }
}
