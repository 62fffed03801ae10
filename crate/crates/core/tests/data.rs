use proptest::prelude::*;
use vamoe::data::synth::{advect, diffuse, generate, GroupDynamics, SyntheticFieldSpec};
use vamoe::data::{self, build_splits, Dataset, NormalizationStats, Split, SplitSizes};
use vamoe::harness::commands::evaluate_model;
use vamoe::harness::run::prepare_data;
use vamoe::harness::{persistence, RunConfig};
use vamoe::model::{Model, ModelConfig, Phase, VariableCatalog};
use vamoe::Error;

const SIZES: SplitSizes = SplitSizes {
    initial: 48,
    incremental: 24,
    test: 16,
    gap: 4,
};

fn still() -> GroupDynamics {
    GroupDynamics {
        velocity: [0.0, 0.0],
        diffusion: 0.0,
        forcing: 0.0,
        time_scale: 10.0,
    }
}

/// Upper-air only, one level, every group sharing `d`.
fn uniform(d: GroupDynamics) -> SyntheticFieldSpec {
    let mut spec = SyntheticFieldSpec::desk(8, 16, 1, 3);
    spec.level_shear = 0.0;
    spec.burn_in = 2;
    spec.surface = None;
    for (_, g) in spec.groups.iter_mut() {
        *g = d.clone();
    }
    spec
}

fn frame(data: &[f32], t: usize, len: usize) -> &[f32] {
    &data[t * len..(t + 1) * len]
}

#[test]
fn zero_dynamics_is_the_identity_map() {
    let mut spec = SyntheticFieldSpec::desk(8, 16, 2, 4);
    for (_, g) in spec.groups.iter_mut() {
        *g = still();
    }
    spec.surface.as_mut().unwrap().dynamics = still();
    let traj = generate(&spec, 6).unwrap();
    let len = 8 * 16 * traj.catalog.channels();
    for t in 1..6 {
        assert_eq!(frame(&traj.data, t, len), frame(&traj.data, 0, len));
    }
}

#[test]
fn unit_velocity_shifts_by_one_cell() {
    let spec = uniform(GroupDynamics {
        velocity: [1.0, 0.0],
        ..still()
    });
    let traj = generate(&spec, 4).unwrap();
    let (h, w, c) = (8, 16, traj.catalog.channels());
    for t in 0..3 {
        let (a, b) = (
            frame(&traj.data, t, h * w * c),
            frame(&traj.data, t + 1, h * w * c),
        );
        for y in 0..h {
            for x in 0..w {
                let src = y * w + (x + w - 1) % w;
                assert_eq!(&b[(y * w + x) * c..][..c], &a[src * c..][..c]);
            }
        }
    }
}

#[test]
fn diffusion_lowers_variance_and_keeps_the_mean() {
    let spec = uniform(GroupDynamics {
        diffusion: 0.2,
        ..still()
    });
    let traj = generate(&spec, 5).unwrap();
    let c = traj.catalog.channels();
    let len = 8 * 16 * c;
    let stats = |t: usize, ch: usize| {
        let v: Vec<f64> = frame(&traj.data, t, len)
            .iter()
            .skip(ch)
            .step_by(c)
            .map(|&x| x as f64)
            .collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64)
    };
    for ch in 0..c {
        for t in 0..4 {
            let (m0, v0) = stats(t, ch);
            let (m1, v1) = stats(t + 1, ch);
            assert!(v1 < v0, "channel {ch} step {t}: {v1} >= {v0}");
            assert!(
                (m1 - m0).abs() <= 1e-6,
                "channel {ch} step {t}: mean {m0} -> {m1}"
            );
        }
    }
}

#[test]
fn cfl_violations_are_rejected() {
    let fast = uniform(GroupDynamics {
        velocity: [1.5, 0.0],
        ..still()
    });
    assert!(matches!(generate(&fast, 2), Err(Error::Cfl(_))));
    let stiff = uniform(GroupDynamics {
        diffusion: 0.3,
        ..still()
    });
    assert!(matches!(generate(&stiff, 2), Err(Error::Cfl(_))));
}

#[test]
fn desk_surface_relaxes_faster_than_upper_air() {
    let spec = SyntheticFieldSpec::desk(8, 16, 3, 0);
    let surface = spec.surface.as_ref().unwrap().dynamics.time_scale;
    assert!(spec.groups.iter().all(|(_, d)| d.time_scale > surface));
}

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = SyntheticFieldSpec::desk(8, 16, 2, 11);
    assert_eq!(generate(&spec, 10).unwrap(), generate(&spec, 10).unwrap());
    let other = SyntheticFieldSpec {
        seed: 12,
        ..spec.clone()
    };
    assert_ne!(
        generate(&spec, 10).unwrap().data,
        generate(&other, 10).unwrap().data
    );
}

#[test]
fn advection_makes_persistence_imperfect() {
    let splits = build_splits(&SyntheticFieldSpec::desk(16, 32, 2, 5), SIZES).unwrap();
    let p = persistence(&splits.test, 8, false).unwrap();
    for (row, lead) in p.rmse.iter().zip(&p.leads) {
        assert!(row.iter().all(|&r| r > 0.0), "lead {lead}");
    }
}

#[test]
fn splits_respect_channel_discipline() {
    let splits = build_splits(&SyntheticFieldSpec::desk(8, 16, 2, 6), SIZES).unwrap();
    assert_eq!(splits.initial_train.catalog.incremental_channels(), 0);
    assert_eq!(splits.test_initial.catalog.incremental_channels(), 0);
    assert_eq!(splits.initial_train.pairs(), SIZES.initial);
    assert_eq!(splits.incremental_train.pairs(), SIZES.incremental);
    assert_eq!(splits.test.pairs(), SIZES.test);
    assert_eq!(splits.test_start, SIZES.initial + 1 + SIZES.gap);
    // the incremental window is the tail of the initial one
    let tail = splits.initial_train.frames() - splits.incremental_train.frames();
    let old = splits.incremental_train.for_phase(Phase::Initial).unwrap();
    assert_eq!(
        old.data(),
        splits
            .initial_train
            .slice_frames(tail, old.frames(), Split::Train)
            .unwrap()
            .data()
    );

    let bad = Dataset::new(
        splits.test.catalog.clone(),
        8,
        16,
        Phase::Initial,
        Split::Test,
        splits.test.data().to_vec(),
    );
    assert!(matches!(bad, Err(Error::Phase(_))));
}

#[test]
fn incremental_data_is_refused_by_an_unexpanded_model() {
    let config = RunConfig::default();
    let splits = build_splits(&SyntheticFieldSpec::desk(8, 16, 3, 7), SIZES).unwrap();
    let cfg = ModelConfig {
        height: 8,
        width: 16,
        latent: 8,
        heads: 2,
        blocks: 1,
        k: 3,
        patch: 2,
        kernel: 3,
    };
    let model: Model<f32> = Model::new(cfg, VariableCatalog::upper_air(3), 0).unwrap();
    let stats = NormalizationStats::from_dataset(&splits.full_train).unwrap();
    assert!(matches!(
        evaluate_model(&model, &stats, &splits.test, &config),
        Err(Error::CatalogMismatch { .. })
    ));
}

#[test]
fn normalization_round_trips() {
    let splits = build_splits(&SyntheticFieldSpec::desk(8, 16, 2, 8), SIZES).unwrap();
    let stats = NormalizationStats::from_dataset(&splits.full_train).unwrap();
    let norm = stats.normalize(&splits.test).unwrap();
    for t in 0..norm.frames() {
        let back = stats.denormalize(&norm.frame(t)).unwrap();
        for (a, b) in back.data().iter().zip(splits.test.frame(t).data()) {
            assert!(
                (a - b).abs() as f64 <= 1e-6 * b.abs().max(1.0) as f64,
                "{a} vs {b}"
            );
        }
    }
    let text = stats.to_text();
    assert_eq!(NormalizationStats::from_text(&text).unwrap(), stats);
}

#[test]
fn normalized_training_split_is_standardized() {
    let config = RunConfig::default();
    let prepared = prepare_data(&config, 0).unwrap();
    let s = NormalizationStats::from_dataset(&prepared.initial_train).unwrap();
    for (m, sd) in s.mean.iter().zip(&s.std) {
        assert!(m.abs() <= 1e-6, "mean {m}");
        assert!((sd - 1.0).abs() <= 1e-6, "std {sd}");
    }
    let t = NormalizationStats::from_dataset(&prepared.test_initial).unwrap();
    let bound = 3.0 / (prepared.test_initial.frames() as f64).sqrt();
    for (n, m) in t.names.iter().zip(&t.mean) {
        assert!(m.abs() <= bound, "{n}: test mean {m} beyond {bound}");
    }
}

#[test]
fn dataset_file_round_trips_bit_exactly() {
    let splits = build_splits(&SyntheticFieldSpec::desk(8, 16, 2, 9), SIZES).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for ds in [&splits.initial_train, &splits.test] {
        let path = dir.path().join("ds.bin");
        data::save(ds, &path).unwrap();
        let back = data::load(&path).unwrap();
        assert_eq!(back.catalog, ds.catalog);
        assert_eq!((back.phase, back.split), (ds.phase, ds.split));
        let bits = |d: &Dataset| d.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(ds));
        let header = data::to_bytes(ds).unwrap().len() - 4 * ds.data().len();
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, header + 4 * 8 * 16 * ds.channels() * ds.frames());
    }
}

#[test]
fn corrupt_dataset_files_are_typed_errors() {
    let splits = build_splits(&SyntheticFieldSpec::desk(8, 16, 1, 10), SIZES).unwrap();
    let bytes = data::to_bytes(&splits.test).unwrap();
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(data::from_bytes(&magic), Err(Error::BadMagic { .. })));
    let mut version = bytes.clone();
    version[4..6].copy_from_slice(&7u16.to_le_bytes());
    assert!(matches!(
        data::from_bytes(&version),
        Err(Error::Version { found: 7, .. })
    ));
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        let err = data::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "cut {cut}: {err:?}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(data::from_bytes(&long), Err(Error::Malformed(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn advection_conserves_the_mean(u in -1.0f64..1.0, v in -1.0f64..1.0, seed in 0u64..1000) {
        let (h, w) = (6, 10);
        let field: Vec<f64> = (0..h * w).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64 / 97.0).collect();
        let mut out = vec![0.0; h * w];
        advect(&field, h, w, [u, v], &mut out);
        let mean = |f: &[f64]| f.iter().sum::<f64>() / f.len() as f64;
        prop_assert!((mean(&out) - mean(&field)).abs() < 1e-12);
        let (lo, hi) = field.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert!(out.iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
    }

    #[test]
    fn diffusion_never_raises_the_peak(kd in 0.0f64..0.25, seed in 0u64..1000) {
        let (h, w) = (6, 10);
        let mut field: Vec<f64> = (0..h * w).map(|i| ((i as u64 * 40503 + seed) % 89) as f64).collect();
        let peak = field.iter().cloned().fold(f64::MIN, f64::max);
        let mut scratch = vec![0.0; h * w];
        diffuse(&mut field, h, w, kd, &mut scratch);
        prop_assert!(field.iter().all(|&x| x <= peak + 1e-9));
    }
}
