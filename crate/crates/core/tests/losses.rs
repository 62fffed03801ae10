mod common;

use common::{random, randomize, tiny_config, tiny_model, zero};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vamoe::losses::{
    dynamic_prediction_loss, mse, reconstruction_loss, rmse, rmse_all, total_loss, AdamW, AdamWConfig,
};
use vamoe::model::{Model, ModelConfig, VariableCatalog, DECODER_BIAS, DECODER_KERNEL, LOSS_W};
use vamoe::tensor::gradcheck::{check, check_store, Coverage};
use vamoe::tensor::{ParamStore, Tape, Tensor};
use vamoe::Error;

fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(&mut rng))
}

/// Mean squared residual per channel of `[H, W, C]` fields.
fn channel_ms(r: &Tensor<f64>) -> Vec<f64> {
    let c = r.last_dim();
    let mut m = vec![0.0; c];
    for cell in r.data().chunks_exact(c) {
        for (a, v) in m.iter_mut().zip(cell) {
            *a += v * v;
        }
    }
    let cells = (r.numel() / c) as f64;
    m.into_iter().map(|s| s / cells).collect()
}

fn loss_at(residual: &Tensor<f64>, w: &[f64]) -> (f64, Vec<f64>) {
    let c = residual.last_dim();
    let mut tape = Tape::new();
    let p = tape.constant(residual.clone());
    let t = tape.constant(Tensor::zeros(residual.shape().to_vec()));
    let wv = tape.leaf(Tensor::new([1, 1, c], w.to_vec()).unwrap(), true);
    let l = dynamic_prediction_loss(&mut tape, p, t, wv, None).unwrap();
    let g = tape.backward(l).unwrap();
    (tape.value(l).item(), g.wrt(wv).unwrap().data().to_vec())
}

#[test]
fn weight_gradient_matches_the_closed_form() {
    let r = normal(&[6, 7, 4], 1);
    let m = channel_ms(&r);
    let w = [0.3, -0.7, 1.1, 0.0];
    let (_, g) = loss_at(&r, &w);
    for c in 0..4 {
        // the mean over C channels scales each channel's term by 1/C
        let want = (1.0 - m[c] * (-w[c]).exp()) / 4.0;
        assert!((g[c] - want).abs() < 1e-10, "channel {c}: {} vs {want}", g[c]);
    }
}

#[test]
fn descent_on_weights_reaches_log_mean_square() {
    let scales = [0.2, 1.0, 3.0, 0.05, 10.0];
    let base = normal(&[8, 8, 5], 2);
    let r = Tensor::from_fn([8, 8, 5], |i| base.data()[i] * scales[i % 5]);
    let m = channel_ms(&r);
    let mut w = vec![0.0; 5];
    // plain gradient descent; lr 5 undoes the 1/C of the mean
    for _ in 0..300 {
        let (_, g) = loss_at(&r, &w);
        for c in 0..5 {
            w[c] -= 5.0 * g[c];
        }
    }
    for c in 0..5 {
        assert!(
            (w[c] - m[c].ln()).abs() < 1e-3,
            "channel {c}: {} vs {}",
            w[c],
            m[c].ln()
        );
    }
}

#[test]
fn reconstruction_of_identity_pair_is_exact() {
    let cfg = ModelConfig {
        height: 4,
        width: 6,
        latent: 8,
        heads: 2,
        blocks: 1,
        k: 2,
        patch: 1,
        kernel: 1,
    };
    let mut model: Model<f64> = Model::new(cfg, VariableCatalog::upper_air(1), 0).unwrap();
    let enc = Tensor::from_fn([1, 1, 5, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
    let dec = Tensor::from_fn([1, 1, 8, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
    model.params.by_name_mut("encoder.kernel").unwrap().set_value(enc);
    model.params.by_name_mut(DECODER_KERNEL).unwrap().set_value(dec);
    zero(&mut model.params, "pos_embed");
    let mut tape = Tape::new();
    let x = tape.constant(random(&[4, 6, 5], 1.0, 3));
    let l = reconstruction_loss(&mut tape, &model, x).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn zero_decoder_reconstruction_is_input_mean_square() {
    let cfg = ModelConfig {
        height: 16,
        width: 16,
        ..tiny_config()
    };
    let mut model: Model<f64> = Model::new(cfg, VariableCatalog::upper_air(1), 1).unwrap();
    zero(&mut model.params, DECODER_KERNEL);
    zero(&mut model.params, DECODER_BIAS);
    let xs = normal(&[16, 16, 5], 4);
    let mut tape = Tape::new();
    let x = tape.constant(xs.clone());
    let l = reconstruction_loss(&mut tape, &model, x).unwrap();
    let l = tape.value(l).item();
    let ms = xs.data().iter().map(|v| v * v).sum::<f64>() / xs.numel() as f64;
    assert!((l - ms).abs() < 1e-12);
    // E[x²] = 1 with std sqrt(2/n), n = 1280; five sigma
    assert!((l - 1.0).abs() < 5.0 * (2.0f64 / 1280.0).sqrt());
}

#[test]
fn reconstruction_bypasses_the_blocks() {
    let mut model = tiny_model::<f64>(5);
    randomize(&mut model.params, 0.3, 6);
    let xs = random::<f64>(&[8, 8, 5], 1.0, 7);
    let recon = |m: &Model<f64>| {
        let mut tape = Tape::new();
        let x = tape.constant(xs.clone());
        let l = reconstruction_loss(&mut tape, m, x).unwrap();
        let g = tape.backward(l).unwrap();
        let block_grads: Vec<f64> = g
            .params()
            .into_iter()
            .filter(|(id, _)| m.params.get(*id).name.starts_with("blocks."))
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        (tape.value(l).item(), block_grads)
    };
    let (before, grads) = recon(&model);
    assert!(grads.iter().all(|&g| g == 0.0));
    let mut perturbed = model.clone();
    for p in perturbed
        .params
        .iter_mut()
        .filter(|p| p.name.starts_with("blocks."))
    {
        let v = p.value.map(|x| x * 1.5 + 0.25);
        p.set_value(v);
    }
    assert_eq!(recon(&perturbed).0.to_bits(), before.to_bits());
}

#[test]
fn total_loss_decomposes() {
    let mut model = tiny_model::<f64>(8);
    randomize(&mut model.params, 0.3, 9);
    let (xs, ys) = (
        random::<f64>(&[8, 8, 5], 1.0, 10),
        random::<f64>(&[8, 8, 5], 1.0, 11),
    );
    let eval = |lambda: f64| {
        let mut tape = Tape::new();
        let (x, y) = (tape.constant(xs.clone()), tape.constant(ys.clone()));
        let parts = total_loss(&mut tape, &model, x, y, lambda, None).unwrap();
        let v = |n| tape.value(n).item();
        (v(parts.total), v(parts.pred), v(parts.recon))
    };
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(xs.clone()), tape.constant(ys.clone()));
    let pred = model.predict(&xs).unwrap();
    let p = tape.constant(pred);
    let w = model.loss_weights(&mut tape).unwrap();
    let alone = dynamic_prediction_loss(&mut tape, p, y, w, None).unwrap();
    let alone = tape.value(alone).item();
    let r = reconstruction_loss(&mut tape, &model, x).unwrap();
    let recon = tape.value(r).item();

    let (t0, p0, _) = eval(0.0);
    assert_eq!(t0.to_bits(), alone.to_bits());
    assert_eq!(p0.to_bits(), alone.to_bits());
    let (t1, p1, r1) = eval(1.0);
    assert!((t1 - (alone + recon)).abs() < 1e-12);
    assert!((t1 - (p1 + r1)).abs() < 1e-12);
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(xs), tape.constant(ys));
    assert!(matches!(
        total_loss(&mut tape, &model, x, y, -1.0, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn total_loss_weight_gradient_matches_differences() {
    let mut model = tiny_model::<f64>(12);
    randomize(&mut model.params, 0.3, 13);
    for p in model.params.iter_mut() {
        p.frozen = p.name != LOSS_W;
    }
    let (xs, ys) = (
        random::<f64>(&[8, 8, 5], 1.0, 14),
        random::<f64>(&[8, 8, 5], 1.0, 15),
    );
    let r = check_store(&model.params, 1e-5, Coverage::All, |tape, store| {
        let m = Model {
            params: store.clone(),
            ..model.clone()
        };
        let (x, y) = (tape.constant(xs.clone()), tape.constant(ys.clone()));
        let parts = total_loss(tape, &m, x, y, 0.1, None)?;
        Ok(parts.total)
    })
    .unwrap();
    assert_eq!(r.checked, 5);
    assert!(r.rel_err <= 1e-5, "rel err {}", r.rel_err);
}

#[test]
fn prediction_loss_gradient_in_pred_matches_differences() {
    let inputs = [
        random::<f64>(&[3, 4, 3], 1.0, 16),
        random(&[3, 4, 3], 1.0, 17),
        random(&[1, 1, 3], 1.0, 18),
    ];
    let r = check(&inputs, 1e-5, Coverage::All, |tape, v| {
        dynamic_prediction_loss(tape, v[0], v[1], v[2], None)
    })
    .unwrap();
    assert!(r.rel_err <= 1e-8, "rel err {}", r.rel_err);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 2, 3]));
    let b = tape.constant(Tensor::zeros([2, 2, 4]));
    let w = tape.constant(Tensor::zeros([1, 1, 3]));
    assert!(matches!(
        dynamic_prediction_loss(&mut tape, a, b, w, None),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(matches!(mse(&mut tape, a, b), Err(Error::ShapeMismatch { .. })));
}

fn scalar_store(x0: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("x.weight", Tensor::from_f64([1, 1], &[x0]).unwrap());
    s
}

fn plain(lr: f64) -> AdamWConfig {
    AdamWConfig {
        weight_decay: 0.0,
        clip: None,
        ..AdamWConfig::with_lr(lr)
    }
}

#[test]
fn adam_first_step_is_learning_rate() {
    let mut s = scalar_store(0.5);
    let id = s.id("x.weight").unwrap();
    s.accumulate(id, &Tensor::ones([1, 1]), 1.0).unwrap();
    let mut opt = AdamW::new(plain(1e-3)).unwrap();
    opt.step(&mut s).unwrap();
    let moved = s.get(id).value.item() - 0.5;
    // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
    assert!((moved + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "moved {moved}");
}

#[test]
fn adam_zero_gradient_without_decay_is_a_no_op() {
    let mut s = scalar_store(0.5);
    let mut opt = AdamW::new(plain(1e-1)).unwrap();
    for _ in 0..10 {
        opt.step(&mut s).unwrap();
    }
    assert_eq!(s.by_name("x.weight").unwrap().value.item(), 0.5);
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let mut s = scalar_store(1.0);
    let id = s.id("x.weight").unwrap();
    let mut opt = AdamW::new(plain(1e-2)).unwrap();
    for _ in 0..500 {
        s.zero_grads();
        let x = s.get(id).value.item();
        s.accumulate(id, &Tensor::full([1, 1], 2.0 * x), 1.0).unwrap();
        opt.step(&mut s).unwrap();
    }
    let x = s.get(id).value.item();
    assert!(x.abs() < 1e-3, "x = {x}");
}

#[test]
fn rmse_examples() {
    let cat = VariableCatalog::upper_air(1);
    let a = random::<f64>(&[4, 4, 5], 1.0, 19);
    assert_eq!(rmse(&a, &a, &cat, "z500", false).unwrap(), 0.0);
    let b = a.map(|v| v + 2.0);
    for ch in cat.channel_names() {
        assert!((rmse(&b, &a, &cat, &ch, false).unwrap() - 2.0).abs() < 1e-12);
    }
    assert!(matches!(
        rmse(&b, &a, &cat, "w700", false),
        Err(Error::UnknownChannel(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rmse_matches_two_pass_reference(seed in 0u64..10_000) {
        let p = random::<f32>(&[5, 6, 3], 3.0, seed);
        let t = random::<f32>(&[5, 6, 3], 3.0, seed + 1);
        let got = rmse_all(&p, &t, false).unwrap();
        for (c, g) in got.iter().enumerate() {
            let sq: Vec<f64> = p.data().iter().zip(t.data()).skip(c).step_by(3)
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2)).collect();
            let want = (sq.iter().sum::<f64>() / sq.len() as f64).sqrt();
            prop_assert!((g - want).abs() < 1e-6);
        }
    }

    #[test]
    fn weight_objective_is_convex_with_minimum_at_log_m(scale in 0.05f64..5.0, w in -3.0f64..3.0, seed in 0u64..1000) {
        let r = normal(&[4, 4, 1], seed).map(|v| v * scale);
        let m = channel_ms(&r)[0];
        let (at_min, g_min) = loss_at(&r, &[m.ln()]);
        prop_assert!(g_min[0].abs() < 1e-12);
        let (here, _) = loss_at(&r, &[w]);
        if (w - m.ln()).abs() > 1e-6 {
            prop_assert!(here > at_min);
        }
        // midpoint convexity
        let (mid, _) = loss_at(&r, &[(w + m.ln()) / 2.0]);
        prop_assert!(mid <= (here + at_min) / 2.0 + 1e-12);
    }
}
