use super::dataset::{dataset_files, generate_dataset, load_split, read_manifest, Record};
use super::io::*;
use super::optim::*;
use super::report::all_tables;
use super::train::*;
use super::*;
use crate::metrics::EvalConfig;
use crate::model::features::extract;
use crate::model::{init_params, predict, Mode, ModelConfig};
use crate::setloss::total_loss;
use crate::simulator::{generate_split, WorldConfig};
use crate::targets::{build_targets, truncate_targets};
use crate::tensor::{GradMap, Graph, ParamStore, Tensor};

fn tiny_world(seed: u64) -> WorldConfig {
    WorldConfig {
        height: 32,
        width: 32,
        history: 8,
        horizon: 4,
        warmup: 6,
        seed,
        ..WorldConfig::default()
    }
}

fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        grad_accum: 2,
        max_epochs: 2,
        eval_every: 1,
        jitter_max: 2,
        seed,
        model: ModelConfig {
            queries: 4,
            layers: 1,
            d_model: 8,
            heads: 2,
            ffn_dim: 8,
            locality: vec![0.2, 0.0],
            height: 32,
            width: 32,
            ..ModelConfig::default()
        },
        eval: EvalConfig::default(),
        optimizer: AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn records(world: &WorldConfig, split: usize, n: usize) -> Vec<Record> {
    generate_split(world, split, n)
        .unwrap()
        .into_iter()
        .map(|s| Record {
            entity: s.entity,
            regime: s.regime,
            seed: s.seed,
        })
        .collect()
}

#[test]
fn entity_file_round_trip_is_byte_identical() {
    let e = &records(&tiny_world(1), 0, 2)[1].entity;
    let bytes = encode_entity(e).unwrap();
    assert_eq!(&bytes[..4], b"WISP");
    let back = decode_entity(&bytes).unwrap();
    assert_eq!(&back, e);
    assert_eq!(encode_entity(&back).unwrap(), bytes);
    // header: magic, version, five dims, then names
    let dims: Vec<u32> = (0..5)
        .map(|k| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap()))
        .collect();
    assert_eq!(dims, vec![7, 12, 8, 32, 32]);
    let names: usize = e.channels().iter().map(|c| 4 + c.len()).sum();
    assert_eq!(bytes.len(), 28 + names + 7 * 12 * 32 * 32 * 4);
}

#[test]
fn malformed_entity_files_are_rejected() {
    let e = &records(&tiny_world(1), 0, 1)[0].entity;
    let bytes = encode_entity(e).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_entity(&bad), Err(HarnessError::Format(_))));
    assert!(matches!(
        decode_entity(&bytes[..bytes.len() - 1]),
        Err(HarnessError::Format(_))
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_entity(&long).is_err());
    let missing = read_entity(std::path::Path::new("/nonexistent/x.wisp")).unwrap_err();
    assert!(missing.is_file_error());
}

#[test]
fn adam_leaves_params_without_gradient_or_decay() {
    let mut store = ParamStore::<f64>::new();
    let id = store
        .insert("w", Tensor::from_f64(vec![2], &[0.5, -1.5]).unwrap())
        .unwrap();
    let mut state = AdamState::new(&store);
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut grads = GradMap::new();
    grads.insert(id, Tensor::zeros(vec![2]));
    adam_step(&mut store, &grads, &mut state, &cfg).unwrap();
    assert_eq!(store.get(id).data(), &[0.5, -1.5]);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("w", Tensor::scalar(2.0)).unwrap();
    let mut state = AdamState::new(&store);
    let cfg = AdamConfig {
        learning_rate: 0.01,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut grads = GradMap::new();
    grads.insert(id, Tensor::scalar(1.0));
    adam_step(&mut store, &grads, &mut state, &cfg).unwrap();
    // bias-corrected moments are exactly g and g^2
    let expected = 2.0 - 0.01 * 1.0 / (1.0 + 1e-8);
    assert!((store.get(id).data()[0] - expected).abs() < 1e-15);
}

#[test]
fn adam_decay_is_decoupled() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("w", Tensor::scalar(3.0)).unwrap();
    let mut state = AdamState::new(&store);
    let cfg = AdamConfig {
        learning_rate: 0.1,
        weight_decay: 0.5,
        ..AdamConfig::default()
    };
    adam_step(&mut store, &GradMap::new(), &mut state, &cfg).unwrap();
    assert!((store.get(id).data()[0] - 3.0 * (1.0 - 0.05)).abs() < 1e-15);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("head.w", Tensor::scalar(1.0)).unwrap();
    let mut state = AdamState::new(&store);
    let mut grads = GradMap::new();
    grads.insert(id, Tensor::scalar(f64::NAN));
    let err = adam_step(&mut store, &grads, &mut state, &AdamConfig::default()).unwrap_err();
    assert!(err.to_string().contains("head.w"));
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny_train(3);
    let store = init_params::<f32>(&cfg.model).unwrap();
    let info = CheckpointInfo {
        model: cfg.model.clone(),
        seed: 3,
        step: 10,
        epoch: 2,
        val_map: Some(0.25),
    };
    let bytes = encode_checkpoint(info.clone(), &store).unwrap();
    let (header, back) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, store);
    assert_eq!(
        (header.seed, header.step, header.epoch, header.val_map),
        (3, 10, 2, Some(0.25))
    );
    assert_eq!(header.model, cfg.model);
    assert_eq!(header.params.len(), store.len());
    assert_eq!(encode_checkpoint(info, &back).unwrap(), bytes);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 2]).is_err());
    assert_eq!(
        sha256_hex(b"abc"),
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
}

#[test]
fn accumulated_mean_equals_full_batch_mean() {
    let cfg = tiny_train(4);
    let store = init_params::<f64>(&cfg.model).unwrap();
    let batch: Vec<_> = records(&tiny_world(4), 0, 4)
        .into_iter()
        .map(|r| r.entity)
        .collect();

    // one graph holding the mean of all four losses
    let mut g = Graph::<f64>::new();
    let mut total = None;
    for e in &batch {
        let feats = extract(e, cfg.model.memory_steps).unwrap();
        let targets =
            truncate_targets(&build_targets(e, &cfg.targets).unwrap(), cfg.model.queries).centres();
        let q = predict(&mut g, &store, &cfg.model, &feats, &mut Mode::Eval).unwrap();
        let l = total_loss(&mut g, q.vars(), &targets, &cfg.loss)
            .unwrap()
            .total;
        let l = g.scale(l, 0.25).unwrap();
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l).unwrap(),
        });
    }
    let full = g.backward(total.unwrap()).unwrap();

    let (all, _) = accumulate_gradients(&store, &cfg, &batch, &mut Mode::Eval).unwrap();
    let (a, _) = accumulate_gradients(&store, &cfg, &batch[..2], &mut Mode::Eval).unwrap();
    let (b, _) = accumulate_gradients(&store, &cfg, &batch[2..], &mut Mode::Eval).unwrap();
    let mut halves = GradMap::new();
    halves.add_scaled(&a, 0.5);
    halves.add_scaled(&b, 0.5);
    let mut worst = 0.0f64;
    for (id, t) in full.iter() {
        for other in [&all, &halves] {
            let o = other.get(id).expect("same parameters receive gradients");
            for (x, y) in t.data().iter().zip(o.data()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    assert!(worst <= 1e-6, "max difference {worst}");
}

#[test]
fn training_is_deterministic_and_selects_the_best_validation_map() {
    let world = tiny_world(6);
    let train_set = records(&world, 0, 6);
    let val_set = records(&world, 1, 3);
    let cfg = tiny_train(6);
    let dir = tempfile::tempdir().unwrap();
    let a = train(&cfg, &train_set, &val_set, Some(dir.path())).unwrap();
    let b = train(&cfg, &train_set, &val_set, None).unwrap();
    assert_eq!(a.best_hash, b.best_hash);
    assert_eq!(a.last, b.last);
    let maps: Vec<f64> = a
        .epochs
        .iter()
        .filter_map(|e| e.val.as_ref().and_then(|v| v.map))
        .collect();
    if let Some(best) = a.best_val_map {
        assert!(maps.iter().all(|&m| best >= m));
    }
    for f in ["train_log.jsonl", "epochs.jsonl", "best.ckpt", "last.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let best_bytes = read_file(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(sha256_hex(&best_bytes), a.best_hash);
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let first: StepLog = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!((first.epoch, first.step), (1, 1));
    // 6 entities in micro-batches of 2, two epochs
    assert_eq!(log.lines().count(), 6);
}

#[test]
fn different_seeds_give_different_checkpoints() {
    let world = tiny_world(8);
    let train_set = records(&world, 0, 4);
    let val_set = records(&world, 1, 2);
    let a = train(&tiny_train(1), &train_set, &val_set, None).unwrap();
    let b = train(&tiny_train(2), &train_set, &val_set, None).unwrap();
    assert_ne!(a.best_hash, b.best_hash);
}

#[test]
fn invalid_training_config_is_rejected() {
    let cfg = TrainConfig {
        grad_accum: 0,
        ..tiny_train(1)
    };
    assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    let cfg = TrainConfig {
        optimizer: AdamConfig {
            learning_rate: -1.0,
            ..AdamConfig::default()
        },
        ..tiny_train(1)
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn dataset_generation_is_reproducible() {
    let world = tiny_world(11);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_dataset(&world, [4, 2, 2], a.path()).unwrap();
    generate_dataset(&world, [4, 2, 2], b.path()).unwrap();
    let fa = dataset_files(a.path()).unwrap();
    let fb = dataset_files(b.path()).unwrap();
    assert_eq!(fa.len(), 9);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(
            read_file(x).unwrap(),
            read_file(y).unwrap(),
            "{}",
            x.display()
        );
    }
    assert_eq!(read_manifest(a.path()).unwrap(), ma);
    let counts: usize = ma.regime_counts["train"].values().sum();
    assert_eq!(counts, 4);
    let loaded = load_split(a.path(), "val").unwrap();
    assert_eq!(loaded.len(), 2);
    assert!(load_split(a.path(), "nope").is_err());
    let seeds: std::collections::HashSet<u64> = ma.entries.iter().map(|e| e.seed).collect();
    assert_eq!(seeds.len(), ma.entries.len());
    assert!(matches!(
        generate_dataset(&world, [0, 1, 1], a.path()),
        Err(HarnessError::Config(_))
    ));
}

#[test]
fn tables_list_every_run_and_regime() {
    let world = tiny_world(12);
    let recs = records(&world, 2, 6);
    let cfg = tiny_train(12);
    let base = evaluate_baseline(&recs, &cfg.targets, &cfg.eval, 4).unwrap();
    let text = all_tables(&[("baseline".into(), base.clone()), ("other".into(), base)]);
    for needle in [
        "AP@14",
        "ClusRec@14",
        "Mean prob.",
        "baseline",
        "other",
        "quiescent",
    ] {
        assert!(text.contains(needle), "{needle}\n{text}");
    }
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(LrSchedule::Constant.factor(37, 100), 1.0);
    assert_eq!(LrSchedule::Cosine.factor(0, 100), 1.0);
    assert!((LrSchedule::Cosine.factor(50, 100) - 0.5).abs() < 1e-15);
    assert!(LrSchedule::Cosine.factor(100, 100).abs() < 1e-15);
    let f: Vec<f64> = (0..=10).map(|s| LrSchedule::Cosine.factor(s, 10)).collect();
    assert!(f.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn oracle_suites_agree() {
    for r in super::oracles::all_suites(11, 60) {
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.cases, 60);
    }
}
