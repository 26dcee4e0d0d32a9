use super::*;
use crate::ingest::Provenance;
use crate::maskforge::{make_geometric_mask, ShapeSpec};
use crate::nn::gradcheck::check_gradients;

fn tiny(side: usize, base: usize) -> TranslatorConfig {
    TranslatorConfig {
        base_channels: base,
        seed: 3,
        ..TranslatorConfig::default().with_side(side)
    }
}

fn disk(side: usize, r: f64) -> BinaryMask {
    let c = side as f64 / 2.0;
    make_geometric_mask(&ShapeSpec::Circle { cx: c, cy: c, radius: r }, side).unwrap()
}

fn pair(side: usize, seed: u64) -> PairedSample {
    let mask = disk(side, side as f64 / 4.0);
    let mut state = seed;
    let values = (0..3 * side * side)
        .map(|i| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let noise = ((state >> 40) as f32 / (1u64 << 24) as f32) * 0.2 - 0.1;
            let fg = mask.values()[i % (side * side)] as f32;
            (fg * 0.6 - 0.3 + noise).clamp(-1.0, 1.0)
        })
        .collect();
    let image = ImageTensor::new(side, side, 3, values).unwrap();
    PairedSample::new(format!("p{seed}"), image, mask, Provenance::Real).unwrap()
}

/// Layer-by-layer count from the channel ladder, written out independently.
fn ladder_count(ladder: &[usize]) -> usize {
    let d = ladder.len();
    let conv = |i: usize, o: usize| 16 * i * o;
    let mut n = conv(1, ladder[0]) + ladder[0];
    for l in 1..d - 1 {
        n += conv(ladder[l - 1], ladder[l]) + 2 * ladder[l];
    }
    n += conv(ladder[d - 2], ladder[d - 1]) + ladder[d - 1];
    let mut up_in = ladder[d - 1];
    for l in (0..d - 1).rev() {
        n += conv(up_in, ladder[l]) + 2 * ladder[l];
        up_in = 2 * ladder[l];
    }
    n + conv(up_in, 3) + 3
}

#[test]
fn parameter_count_matches_ladder() {
    let cfg = TranslatorConfig::default();
    assert_eq!(generator_param_count(&cfg), ladder_count(&[64, 128, 256, 512, 512, 512, 512]));
    let small = tiny(64, 8);
    let model = build_translator(&small).unwrap();
    assert_eq!(model.generator_param_count(), ladder_count(&[8, 16, 32, 64, 64, 64]));
    assert_eq!(model.generator_param_count(), generator_param_count(&small));
}

#[test]
fn receptive_field_recurrence() {
    assert_eq!(receptive_field(&[(4, 2)]).unwrap(), 4);
    assert_eq!(receptive_field(&[(4, 2), (4, 2)]).unwrap(), 10);
    assert_eq!(receptive_field(&[(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)]).unwrap(), 70);
    assert!(receptive_field(&[(4, 0)]).is_err());
    assert!(receptive_field(&[]).is_err());
    let model = build_translator(&tiny(32, 1)).unwrap();
    assert_eq!(receptive_field(&model.critic.descriptor()).unwrap(), 70);
}

#[test]
fn score_map_side() {
    // 128 → 64 → 32 → 16 → 15 → 14
    let model = build_translator(&tiny(128, 1)).unwrap();
    assert_eq!(model.score_side(), 14);
    assert_eq!(build_translator(&tiny(32, 1)).unwrap().score_side(), 2);
}

#[test]
fn config_validation() {
    assert!(build_translator(&tiny(16, 1)).is_err());
    assert!(build_translator(&TranslatorConfig { encoder_depth: 6, ..tiny(128, 1) }).is_err());
    assert!(build_translator(&TranslatorConfig { dropout_keep: 0.0, ..tiny(32, 1) }).is_err());
    assert!(build_translator(&TranslatorConfig { leaky_slope: 1.0, ..tiny(32, 1) }).is_err());
    assert!(build_translator(&TranslatorConfig { side: 48, ..tiny(32, 1) }).is_err());
}

#[test]
fn builds_are_deterministic() {
    let a = build_translator(&tiny(32, 2)).unwrap();
    let b = build_translator(&tiny(32, 2)).unwrap();
    assert_eq!(a.store, b.store);
    let c = build_translator(&TranslatorConfig { seed: 4, ..tiny(32, 2) }).unwrap();
    assert_ne!(a.store, c.store);
}

#[test]
fn generator_contract() {
    let model = build_translator(&tiny(32, 2)).unwrap();
    let mask = disk(32, 8.0);
    let out = generator_forward(&model, &mask, 7).unwrap();
    assert_eq!((out.channels(), out.height(), out.width()), (3, 32, 32));
    assert!(out.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(out, generator_forward(&model, &mask, 7).unwrap());
    let ablated = generator_forward_without_inner_skip(&model, &mask, 7).unwrap();
    assert!(out.max_abs_diff(&ablated) > 0.0);
    assert!(generator_forward(&model, &disk(64, 8.0), 7).is_err());
}

#[test]
fn critic_half_confidence_with_zero_head() {
    let mut model = build_translator(&tiny(32, 2)).unwrap();
    let last = model.critic.layers.last().unwrap().conv;
    for v in model.store.get_mut(last.weight).data_mut() {
        *v = 0.0;
    }
    let p = pair(32, 1);
    let map = discriminator_forward(&model, &p.mask, &p.image).unwrap();
    assert_eq!(map.side, 2);
    assert!(map.scores.iter().all(|&s| s == 0.5));
    assert_eq!(map.mean, 0.5);
}

#[test]
fn critic_mean_is_arithmetic_mean() {
    let model = build_translator(&tiny(64, 2)).unwrap();
    let p = pair(64, 2);
    let m = discriminator_forward(&model, &p.mask, &p.image).unwrap();
    let mean = m.scores.iter().sum::<f64>() / m.scores.len() as f64;
    assert!((m.mean - mean).abs() < 1e-12);
    assert!(m.scores.iter().all(|&s| s > 0.0 && s < 1.0));
}

#[test]
fn loss_spot_values() {
    let cfg = TranslatorConfig::default();
    let p = pair(32, 5);
    let half = PatchScoreMap::constant(14, 0.5);
    let l = translator_loss(&p, &p.image, &half, &half, &cfg).unwrap();
    assert!((l.cgan_term - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    assert!((l.cgan_term + 1.386294).abs() < 1e-6);
    assert_eq!(l.l1_term, 0.0);
    assert_eq!(l.d_objective, -l.cgan_term);
    assert!((l.g_objective - 2f64.ln()).abs() < 1e-12);

    let zero = PatchScoreMap::constant(14, 0.0);
    let l = translator_loss(&p, &p.image, &zero, &half, &cfg).unwrap();
    assert!((l.cgan_term - (1e-7f64.ln() + 0.5f64.ln())).abs() < 1e-9);
    assert!((1e-7f64.ln() + 16.1181).abs() < 1e-4);

    let sat = TranslatorConfig {
        adversarial_variant: AdversarialVariant::Saturating,
        l1_weight: 0.0,
        ..cfg.clone()
    };
    let l = translator_loss(&p, &p.image, &half, &half, &sat).unwrap();
    assert!((l.g_objective - 0.5f64.ln()).abs() < 1e-12);

    let nan = PatchScoreMap::new(14, vec![f64::NAN; 196]).unwrap();
    match translator_loss(&p, &p.image, &half, &nan, &cfg) {
        Err(Error::Numeric { term, .. }) => assert_eq!(term, "d_fake"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn graph_objectives_match_scalar_loss() {
    let model = build_translator(&tiny(32, 2)).unwrap();
    let p = pair(32, 1);
    let eval = translator_objectives(&model, &model.store, &[&p], 11, false);
    assert!(eval.d_objective.is_finite() && eval.g_objective.is_finite());
    assert!((eval.d_objective + eval.cgan_term).abs() < 1e-15);
    assert!(eval.l1_term > 0.0);
}

fn gradcheck(variant: AdversarialVariant) {
    // Unit-scale weights keep a 1e-4 step small relative to every weight,
    // which batch norm would otherwise turn into a large relative change.
    let cfg = TranslatorConfig {
        adversarial_variant: variant,
        init_std: 0.5,
        ..tiny(32, 1)
    };
    let mut model = build_translator(&cfg).unwrap();
    // Move away from the symmetric initial point so every slot carries signal.
    for id in model.generator_ids().into_iter().chain(model.critic_ids()) {
        if model.store.entry(id).name.ends_with("bias") || model.store.entry(id).name.ends_with("beta") {
            for (i, v) in model.store.get_mut(id).data_mut().iter_mut().enumerate() {
                *v = 0.05 * ((i % 5) as f64 - 2.0);
            }
        }
    }
    let p = pair(32, 9);
    let eval = translator_objectives(&model, &model.store, &[&p], 21, true);
    let d_ids = model.critic_ids();
    let g_ids = model.generator_ids();
    let shape = model.clone();
    let mut store = model.store.clone();
    let d = check_gradients(&mut store, &d_ids, eval.d_grads.as_ref().unwrap(), 1e-4, 1e-3, |s| {
        translator_objectives(&shape, s, &[&p], 21, false).d_objective
    });
    let g = check_gradients(&mut store, &g_ids, eval.g_grads.as_ref().unwrap(), 1e-4, 1e-3, |s| {
        translator_objectives(&shape, s, &[&p], 21, false).g_objective
    });
    assert!(d.max_rel_error < 1e-3, "critic: {:?}", d);
    assert!(g.max_rel_error < 1e-3, "generator: {:?}", g);
    model.store = store;
}

#[test]
fn gradients_non_saturating() {
    gradcheck(AdversarialVariant::NonSaturating);
}

#[test]
fn gradients_saturating() {
    gradcheck(AdversarialVariant::Saturating);
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let cfg = TranslatorConfig {
        epochs: 2,
        checkpoint_every: 1,
        ..tiny(32, 2)
    };
    let samples = vec![pair(32, 1), pair(32, 2)];
    let manifest = DatasetManifest::new(samples, crate::ingest::Split::Train, 0, "mem".into()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        log_path: Some(dir.path().join("log.jsonl")),
        resume: None,
    };
    let a = train_translator(&manifest, &cfg, &opts).unwrap();
    let b = train_translator(&manifest, &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(a.epochs.len(), 2);
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.checkpoint.model.store, b.checkpoint.model.store);
    assert!(dir.path().join("epoch-0001.ckpt").exists());
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let bytes = a.checkpoint.to_bytes();
    let loaded = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(loaded.to_bytes(), bytes);
    assert_eq!(loaded, a.checkpoint);

    let masks = vec![("m0".to_string(), disk(32, 6.0)), ("m1".to_string(), disk(32, 10.0))];
    let s1 = synthesize(&a.checkpoint, &masks, 5);
    let s2 = synthesize(&loaded, &masks, 5);
    for (x, y) in s1.iter().zip(&s2) {
        let (x, y) = (x.as_ref().unwrap(), y.as_ref().unwrap());
        assert_eq!(x.image, y.image);
        assert_eq!(x.provenance, Provenance::Synthetic);
    }
    assert_eq!(s1[0].as_ref().unwrap().id, "m0-synth");

    // Resuming from epoch 1 reproduces the uninterrupted run.
    let mid = Checkpoint::load(&dir.path().join("epoch-0001.ckpt")).unwrap();
    let resumed = train_translator(
        &manifest,
        &cfg,
        &TrainOptions {
            resume: Some(mid),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.checkpoint.model.store, a.checkpoint.model.store);
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let cfg = TranslatorConfig { epochs: 0, ..tiny(32, 2) };
    let manifest = DatasetManifest::new(vec![pair(32, 1)], crate::ingest::Split::Train, 0, "mem".into()).unwrap();
    let out = train_translator(&manifest, &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(out.checkpoint.model.store, build_translator(&cfg).unwrap().store);
}

#[test]
fn synthesize_reports_empty_masks_per_item() {
    let model = build_translator(&tiny(32, 2)).unwrap();
    let ck = Checkpoint {
        model,
        optimizer_state: Vec::new(),
        epoch: 0,
        rng_state: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
        format_version: CHECKPOINT_VERSION,
    };
    let masks = vec![
        ("empty".to_string(), BinaryMask::zeros(32, 32)),
        ("disk".to_string(), disk(32, 8.0)),
    ];
    let out = synthesize(&ck, &masks, 1);
    assert!(matches!(out[0], Err(Error::Degenerate(_))));
    assert!(out[1].is_ok());
}

#[test]
fn rejects_bad_checkpoint_bytes() {
    assert!(Checkpoint::from_bytes(b"XXXX").is_err());
    assert!(Checkpoint::from_bytes(b"M2L1\x01\x00\x00\x00").is_err());
}

use crate::ingest::DatasetManifest;



#[test]
fn critic_step_descends() {
    let mut model = build_translator(&tiny(32, 2)).unwrap();
    let p = pair(32, 4);
    let before = translator_objectives(&model, &model.store, &[&p], 8, true);
    let mut adam = crate::nn::Adam::new(&model.store, model.critic_ids(), 1e-5, 0.5, 0.999);
    adam.update(&mut model.store, before.d_grads.as_ref().unwrap());
    let after = translator_objectives(&model, &model.store, &[&p], 8, false);
    assert!(after.d_objective <= before.d_objective + 1e-6, "{} -> {}", before.d_objective, after.d_objective);
    assert!(after.d_objective < before.d_objective);
}

