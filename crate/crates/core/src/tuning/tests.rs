use std::collections::{BTreeMap, BTreeSet};

use crate::autograd::NdArray;
use crate::model::{ModelConfig, PromptConfig, SegModel};

use super::*;

fn toy_config() -> ModelConfig {
    ModelConfig {
        spatial: [8, 8, 8],
        in_channels: 2,
        patch: 4,
        embed_dim: 16,
        layers: 2,
        heads: 2,
        mlp_dim: 32,
        num_classes: 3,
        skip_layers: vec![1, 2],
        decoder_channels: vec![8],
        final_channels: 4,
    }
}

fn toy_model(prompt: PromptConfig, seed: u64) -> SegModel<f32> {
    SegModel::init(toy_config(), prompt, seed).unwrap()
}

fn toy_sample(seed: u64) -> (NdArray<f32>, Vec<u8>) {
    use rand::Rng as _;
    use rand::SeedableRng as _;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let vol: Vec<f32> = (0..2 * 512).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mask: Vec<u8> = (0..512).map(|_| rng.gen_range(0u8..3)).collect();
    (NdArray::new(vec![2, 8, 8, 8], vol).unwrap(), mask)
}

#[test]
fn strategy_names_round_trip() {
    for s in TuningStrategy::ALL {
        assert_eq!(TuningStrategy::parse(s.name()).unwrap(), s);
        assert_eq!(TuningStrategy::from_tag(s.tag()), Some(s));
    }
    assert!(TuningStrategy::parse("frobnicate").is_err());
    assert_eq!(TuningStrategy::from_tag(99), None);
}

#[test]
fn none_strategy_selects_nothing() {
    let model = toy_model(PromptConfig::none(), 0);
    let set = select_learnable(&model, TuningStrategy::None).unwrap();
    assert!(set.is_empty());
}

#[test]
fn full_strategy_selects_everything() {
    let model = toy_model(PromptConfig::none(), 0);
    let set = select_learnable(&model, TuningStrategy::Full).unwrap();
    assert_eq!(set.len(), model.param_names().count());
}

#[test]
fn partial_strategy_is_final_block_plus_head() {
    let model = toy_model(PromptConfig::none(), 0);
    let set = select_learnable(&model, TuningStrategy::Partial).unwrap();
    assert_eq!(
        set,
        ["dec.final.w", "dec.final.b", "head.w", "head.b"]
            .iter()
            .map(|s| s.to_string())
            .collect::<BTreeSet<_>>()
    );
}

#[test]
fn prompt_strategy_requires_prompts() {
    let model = toy_model(PromptConfig::none(), 0);
    assert!(select_learnable(&model, TuningStrategy::ShallowPrompt).is_err());
    assert!(select_learnable(&model, TuningStrategy::DeepPrompt).is_err());
    // mode mismatch is also rejected
    let shallow = toy_model(PromptConfig::shallow(4), 0);
    assert!(select_learnable(&shallow, TuningStrategy::DeepPrompt).is_err());
}

#[test]
fn shallow_selects_prompt_and_head_only() {
    let model = toy_model(PromptConfig::shallow(4), 0);
    let set = select_learnable(&model, TuningStrategy::ShallowPrompt).unwrap();
    assert_eq!(
        set,
        ["prompt.1", "head.w", "head.b"]
            .iter()
            .map(|s| s.to_string())
            .collect::<BTreeSet<_>>()
    );
}

// Hand-countable learnable totals for a d=32 configuration:
// shallow = 8·32 prompt + (16·3 + 3) head = 307; deep over 4 sites = 1075.
#[test]
fn learnable_counting_oracle() {
    let cfg = ModelConfig {
        spatial: [8, 8, 8],
        in_channels: 2,
        patch: 4,
        embed_dim: 32,
        layers: 4,
        heads: 4,
        mlp_dim: 64,
        num_classes: 3,
        skip_layers: vec![2, 4],
        decoder_channels: vec![8],
        final_channels: 16,
    };
    let shallow: SegModel<f32> = SegModel::init(cfg.clone(), PromptConfig::shallow(8), 0).unwrap();
    let (n, frac) = count_learnable(&shallow, TuningStrategy::ShallowPrompt).unwrap();
    assert_eq!(n, 8 * 32 + 16 * 3 + 3);
    assert!(frac > 0.0 && frac < 1.0);

    let deep: SegModel<f32> = SegModel::init(
        cfg,
        PromptConfig {
            mode: crate::model::PromptMode::Deep,
            count: 8,
            sites: vec![1, 2, 3, 4],
            init_scale: 0.0,
        },
        0,
    )
    .unwrap();
    let (n, _) = count_learnable(&deep, TuningStrategy::DeepPrompt).unwrap();
    assert_eq!(n, 4 * 8 * 32 + 16 * 3 + 3);
}

#[test]
fn learnable_ordering_partial_shallow_deep_full() {
    let deep = toy_model(PromptConfig::deep_default_sites(&toy_config(), 4), 0);
    let shallow = toy_model(PromptConfig::shallow(4), 0);
    let counts = [
        count_learnable(&deep, TuningStrategy::None).unwrap().0,
        count_learnable(&deep, TuningStrategy::Partial).unwrap().0,
        count_learnable(&shallow, TuningStrategy::ShallowPrompt).unwrap().0,
        count_learnable(&deep, TuningStrategy::DeepPrompt).unwrap().0,
        count_learnable(&deep, TuningStrategy::Full).unwrap().0,
    ];
    assert_eq!(counts[0], 0);
    assert!(counts[2] < counts[3], "shallow {} < deep {}", counts[2], counts[3]);
    assert!(counts[3] < counts[4], "deep {} < full {}", counts[3], counts[4]);
}

#[test]
fn cosine_schedule_endpoints() {
    assert!((cosine_lr(0, 100, 0.05).unwrap() - 0.05).abs() < 1e-15);
    assert!((cosine_lr(50, 100, 0.05).unwrap() - 0.025).abs() < 1e-15);
    assert!(cosine_lr(100, 100, 0.05).unwrap().abs() < 1e-17);
    assert!(cosine_lr(0, 0, 0.05).is_err());
    assert!(cosine_lr(101, 100, 0.05).is_err());
}

#[test]
fn strategy_optimizer_defaults() {
    let p = OptimizerConfig::for_strategy(TuningStrategy::ShallowPrompt);
    assert_eq!(p.algorithm, Algorithm::Sgd);
    assert_eq!(p.lr0, 0.05);
    assert_eq!(p.schedule, Schedule::Cosine);
    let f = OptimizerConfig::for_strategy(TuningStrategy::Full);
    assert_eq!(f.algorithm, Algorithm::AdamW);
    assert_eq!(f.lr0, 1e-5);
    assert_eq!(f.weight_decay, 1e-3);
    assert_eq!(f.schedule, Schedule::Constant);
}

#[test]
fn sgd_step_is_p_minus_lr_g() {
    let mut model = toy_model(PromptConfig::shallow(4), 3);
    let learnable = apply_strategy(&mut model, TuningStrategy::ShallowPrompt).unwrap();
    let before = model.param("head.b").value.data().to_vec();
    let cfg = OptimizerConfig {
        algorithm: Algorithm::Sgd,
        lr0: 0.1,
        weight_decay: 0.0,
        schedule: Schedule::Constant,
        epochs: 1,
        batch_size: 1,
    };
    let mut opt = Optimizer::new(cfg, learnable);
    let mut grads = BTreeMap::new();
    grads.insert("head.b".to_string(), vec![1.0f32, 2.0, 3.0]);
    opt.step(&mut model, &grads, 0.1).unwrap();
    let after = model.param("head.b").value.data();
    for i in 0..3 {
        assert!((after[i] - (before[i] - 0.1 * (i as f32 + 1.0))).abs() < 1e-7);
    }
}

// Three AdamW steps on a single scalar, checked against an explicit
// per-step trace computed with plain f64 arithmetic.
#[test]
fn adamw_matches_scalar_trace() {
    let mut model: SegModel<f64> = toy_model(PromptConfig::none(), 0).cast();
    let learnable = apply_strategy(&mut model, TuningStrategy::Partial).unwrap();
    let cfg = OptimizerConfig {
        algorithm: Algorithm::AdamW,
        lr0: 0.1,
        weight_decay: 0.01,
        schedule: Schedule::Constant,
        epochs: 1,
        batch_size: 1,
    };
    let mut opt = Optimizer::new(cfg, learnable);
    let grads_per_step = [0.5f64, -0.25, 0.125];

    let mut expected = model.param("head.b").value.data()[0];
    let (mut m, mut v) = (0.0f64, 0.0f64);
    for (t, &g) in grads_per_step.iter().enumerate() {
        let t = t + 1;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mhat = m / (1.0 - 0.9f64.powi(t as i32));
        let vhat = v / (1.0 - 0.999f64.powi(t as i32));
        expected -= 0.1 * (mhat / (vhat.sqrt() + 1e-8) + 0.01 * expected);
    }

    let len = model.param("head.b").value.numel();
    for &g in &grads_per_step {
        let mut grads = BTreeMap::new();
        grads.insert("head.b".to_string(), vec![g; len]);
        opt.step(&mut model, &grads, 0.1).unwrap();
    }
    let got = model.param("head.b").value.data()[0];
    assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");
}

#[test]
fn optimizer_rejects_gradient_on_frozen_param() {
    let mut model = toy_model(PromptConfig::shallow(4), 0);
    let learnable = apply_strategy(&mut model, TuningStrategy::ShallowPrompt).unwrap();
    let mut opt = Optimizer::new(
        OptimizerConfig::for_strategy(TuningStrategy::ShallowPrompt),
        learnable,
    );
    let mut grads = BTreeMap::new();
    grads.insert("enc.1.msa.wq".to_string(), vec![0.0f32; 16 * 16]);
    let err = opt.step(&mut model, &grads, 0.01).unwrap_err();
    assert!(err.to_string().contains("freeze breach"), "{err}");
}

#[test]
fn training_freezes_backbone_bitwise() {
    let mut model = toy_model(PromptConfig::shallow(4), 7);
    let learnable = select_learnable(&model, TuningStrategy::ShallowPrompt).unwrap();
    let before: BTreeMap<String, Vec<u32>> = model
        .params()
        .filter(|(n, _)| !learnable.contains(*n))
        .map(|(n, p)| (n.to_string(), p.value.data().iter().map(|x| x.to_bits()).collect()))
        .collect();

    let samples = vec![toy_sample(1), toy_sample(2)];
    let cfg = OptimizerConfig {
        epochs: 2,
        batch_size: 2,
        ..OptimizerConfig::for_strategy(TuningStrategy::ShallowPrompt)
    };
    let records =
        train_epochs(&mut model, TuningStrategy::ShallowPrompt, &cfg, LossKind::Dice, &samples, 11)
            .unwrap();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r.loss.is_finite()));

    for (name, bits) in &before {
        let now: Vec<u32> = model.param(name).value.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(&now, bits, "backbone parameter {name} changed");
    }
    // and the learnable part did actually move
    let prompt_before = SegModel::<f32>::init(toy_config(), PromptConfig::shallow(4), 7).unwrap();
    assert_ne!(
        model.param("prompt.1").value.data(),
        prompt_before.param("prompt.1").value.data()
    );
}

#[test]
fn training_is_deterministic_for_fixed_seed() {
    let run = || {
        let mut model = toy_model(PromptConfig::shallow(4), 5);
        let samples = vec![toy_sample(1), toy_sample(2), toy_sample(3)];
        let cfg = OptimizerConfig {
            epochs: 2,
            batch_size: 2,
            ..OptimizerConfig::for_strategy(TuningStrategy::ShallowPrompt)
        };
        let recs =
            train_epochs(&mut model, TuningStrategy::ShallowPrompt, &cfg, LossKind::Dice, &samples, 9)
                .unwrap();
        let bits: Vec<u32> = model.param("prompt.1").value.data().iter().map(|x| x.to_bits()).collect();
        (recs.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(), bits)
    };
    assert_eq!(run(), run());
}

#[test]
fn none_strategy_trains_nothing() {
    let mut model = toy_model(PromptConfig::none(), 0);
    let cfg = OptimizerConfig::for_strategy(TuningStrategy::None);
    let recs = train_epochs(&mut model, TuningStrategy::None, &cfg, LossKind::Dice, &[], 0).unwrap();
    assert!(recs.is_empty());
}

#[test]
fn cross_entropy_training_smoke() {
    let mut model = toy_model(PromptConfig::none(), 2);
    let samples = vec![toy_sample(4)];
    let cfg = OptimizerConfig {
        epochs: 3,
        batch_size: 1,
        ..OptimizerConfig::for_strategy(TuningStrategy::Partial)
    };
    let recs =
        train_epochs(&mut model, TuningStrategy::Partial, &cfg, LossKind::CrossEntropy, &samples, 0)
            .unwrap();
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
}

#[test]
fn full_checkpoint_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = toy_model(PromptConfig::deep_default_sites(&toy_config(), 4), 13);
    let bytes = save_full(&model, &path).unwrap();
    assert_eq!(bytes, std::fs::metadata(&path).unwrap().len());

    let loaded: SegModel<f32> = load_full(&path).unwrap();
    assert_eq!(loaded.config, model.config);
    assert_eq!(loaded.prompt, model.prompt);
    for (name, p) in model.params() {
        let a: Vec<u32> = p.value.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = loaded.param(name).value.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b, "blob {name} not bit-identical");
    }
}

#[test]
fn delta_checkpoint_round_trips_onto_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("delta.ckpt");
    let backbone = toy_model(PromptConfig::shallow(4), 21);

    let mut tuned = backbone.cast::<f32>();
    for name in ["prompt.1", "head.w", "head.b"] {
        for x in tuned.param_mut(name).value.data_mut() {
            *x += 0.5;
        }
    }
    save_delta(&tuned, TuningStrategy::ShallowPrompt, &path).unwrap();

    let header = read_header(&path).unwrap();
    assert!(header.is_delta);
    assert_eq!(header.strategy, TuningStrategy::ShallowPrompt);
    assert_eq!(header.blob_names.len(), 3);

    let restored = load_delta(&path, &backbone).unwrap();
    for (name, p) in tuned.params() {
        assert_eq!(
            restored.param(name).value.data(),
            p.value.data(),
            "blob {name} differs after delta reload"
        );
    }
}

#[test]
fn delta_is_small_fraction_of_full() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(PromptConfig::shallow(4), 0);
    let full = save_full(&model, &dir.path().join("f.ckpt")).unwrap();
    let delta = save_delta(&model, TuningStrategy::ShallowPrompt, &dir.path().join("d.ckpt")).unwrap();
    assert!(delta * 20 < full, "delta {delta} not well below full {full}");
}

#[test]
fn delta_load_rejects_wrong_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("delta.ckpt");
    let model = toy_model(PromptConfig::shallow(4), 0);
    save_delta(&model, TuningStrategy::ShallowPrompt, &path).unwrap();

    let other = toy_model(PromptConfig::shallow(8), 0);
    let err = load_delta(&path, &other).unwrap_err();
    assert!(matches!(err, crate::Error::FingerprintMismatch { .. }), "{err}");
}

#[test]
fn truncated_checkpoint_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = toy_model(PromptConfig::none(), 0);
    save_full(&model, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let cut = bytes.len() - 100;
    bytes.truncate(cut);
    std::fs::write(&path, &bytes).unwrap();

    let err = load_full::<f32>(&path).unwrap_err();
    match err {
        crate::Error::Format { offset, ref detail, .. } => {
            assert!(detail.contains("truncated"), "{detail}");
            assert!(offset as usize <= cut);
        }
        other => panic!("expected format error, got {other}"),
    }
}

#[test]
fn corrupted_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = toy_model(PromptConfig::none(), 0);
    save_full(&model, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_full::<f32>(&path), Err(crate::Error::Format { .. })));
}

#[test]
fn full_and_delta_kinds_are_not_interchangeable() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(PromptConfig::shallow(4), 0);
    let fp = dir.path().join("f.ckpt");
    let dp = dir.path().join("d.ckpt");
    save_full(&model, &fp).unwrap();
    save_delta(&model, TuningStrategy::ShallowPrompt, &dp).unwrap();
    assert!(load_full::<f32>(&dp).is_err());
    assert!(load_delta::<f32>(&fp, &model).is_err());
    assert!(save_delta(&model, TuningStrategy::Full, &dp).is_err());
}

#[test]
fn fingerprint_separates_architectures() {
    let a = toy_model(PromptConfig::shallow(4), 0);
    let b = toy_model(PromptConfig::shallow(8), 0);
    assert_eq!(fingerprint(&a.config, &a.prompt), fingerprint(&a.config, &a.prompt));
    assert_ne!(fingerprint(&a.config, &a.prompt), fingerprint(&b.config, &b.prompt));
}
