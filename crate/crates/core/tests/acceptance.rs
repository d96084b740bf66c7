//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test --release -p fireset --test acceptance -- --nocapture`.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fireset::harness::dataset::{dataset_files, generate_dataset, load_split, Record};
use fireset::harness::io::{decode_entity, encode_entity, read_entity, write_entity};
use fireset::harness::optim::AdamConfig;
use fireset::harness::oracles::{auroc_suite, coverage_suite, event_ap_suite};
use fireset::harness::report::all_tables;
use fireset::harness::train::{evaluate_baseline, evaluate_model, train, TrainConfig};
use fireset::matching::{assignment_cost, hungarian};
use fireset::metrics::{EvalConfig, MetricReport};
use fireset::model::{extract, init_params, predict, Mode, ModelConfig};
use fireset::setloss::{
    classification_loss, localization_loss, total_loss, ClassNorm, LossConfig, QueryVars,
};
use fireset::simulator::{generate_split, Regime, WorldConfig};
use fireset::targets::{
    build_targets, connected_components, Entity, Grid, TargetConfig, ValidBox, ACTIVE_FIRE, FRP,
};
use fireset::tensor::{grad_check, Graph, Tensor, TensorError};

fn report(id: u32, name: &str, ok: bool, detail: String) -> bool {
    println!(
        "criterion {id} [{}] {name}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[test]
fn criterion_1_worked_assignment() {
    let cost = [
        -0.41, 0.78, 0.92, //
        -0.20, 0.10, 0.65, //
        0.55, -0.35, 0.50, //
        0.48, 0.44, -0.05,
    ];
    let start = Instant::now();
    let pairs = hungarian(&cost, 4, 3).unwrap();
    let elapsed = start.elapsed();
    let total = assignment_cost(&cost, 3, &pairs);
    let ok = pairs == [(0, 0), (2, 1), (3, 2)]
        && (total + 0.81).abs() < 1e-12
        && elapsed < Duration::from_millis(1);
    let detail = format!(
        "pairs {pairs:?} total {total:.12} in {:.3} ms (limit 1 ms)",
        ms(elapsed)
    );
    assert!(report(1, "worked 4x3 assignment", ok, detail));
}

/// Minimum assignment total over every injective map of the smaller side.
fn exhaustive_minimum(cost: &[i64], q: usize, k: usize) -> i64 {
    fn go(cost: &[i64], q: usize, k: usize, row: usize, used: &mut Vec<bool>, skips: usize) -> i64 {
        if row == q {
            return 0;
        }
        let mut best = i64::MAX;
        // a row may stay unassigned only while enough rows remain to fill every column
        if skips > 0 {
            best = go(cost, q, k, row + 1, used, skips - 1);
        }
        for c in 0..k {
            if !used[c] {
                used[c] = true;
                let rest = go(cost, q, k, row + 1, used, skips);
                if rest != i64::MAX {
                    best = best.min(cost[row * k + c] + rest);
                }
                used[c] = false;
            }
        }
        best
    }
    let skips = q.saturating_sub(k);
    go(cost, q, k, 0, &mut vec![false; k], skips)
}

#[test]
fn criterion_2_hungarian_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases = 1000;
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..cases {
        let (q, k) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
        let ints: Vec<i64> = (0..q * k).map(|_| rng.gen_range(-1000..=1000)).collect();
        let cost: Vec<f64> = ints.iter().map(|&c| c as f64).collect();
        let pairs = hungarian(&cost, q, k).unwrap();
        let total: i64 = pairs.iter().map(|&(i, j)| ints[i * k + j]).sum();
        if total != exhaustive_minimum(&ints, q, k) || pairs.len() != q.min(k) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let ok = mismatches == 0 && elapsed < Duration::from_secs(10);
    let detail = format!(
        "{mismatches} mismatches over {cases} matrices in {:.0} ms (limit 10 s)",
        ms(elapsed)
    );
    assert!(report(
        2,
        "Hungarian vs exhaustive permutations",
        ok,
        detail
    ));
}

#[test]
fn criterion_3_pipeline_gradients() {
    let world = WorldConfig {
        height: 32,
        width: 32,
        history: 8,
        horizon: 4,
        warmup: 6,
        regime_mix: [0.0, 1.0, 0.0, 0.0],
        seed: 3,
        ..WorldConfig::default()
    };
    let entity = generate_split(&world, 0, 1).unwrap().remove(0).entity;
    let cfg = ModelConfig {
        queries: 4,
        d_model: 8,
        heads: 2,
        ffn_dim: 8,
        height: 32,
        width: 32,
        locality: vec![0.2, 0.0],
        dropout: 0.0,
        seed: 3,
        ..ModelConfig::default()
    };
    let start = Instant::now();
    let feats = extract(&entity, cfg.memory_steps).unwrap();
    let targets = build_targets(&entity, &TargetConfig::default())
        .unwrap()
        .centres();
    let mut store = init_params::<f64>(&cfg).unwrap();
    // offset heads start at zero; move them so every parameter carries gradient
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for l in 0..cfg.layers {
        for v in store
            .by_name_mut(&format!("dec.{l}.offset.w"))
            .unwrap()
            .data_mut()
        {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    let check = grad_check(&mut store, 1e-6, |s, g| {
        let q = predict(g, s, &cfg, &feats, &mut Mode::Eval)
            .map_err(|e| TensorError::Numeric(e.to_string()))?;
        let out = total_loss(g, q.vars(), &targets, &LossConfig::default())
            .map_err(|e| TensorError::Numeric(e.to_string()))?;
        Ok(out.total)
    })
    .unwrap();
    let elapsed = start.elapsed();
    let ok =
        !targets.is_empty() && check.max_rel_error <= 1e-4 && elapsed < Duration::from_secs(120);
    let detail = format!(
        "max rel error {:.2e} (limit 1e-4) over {} components, K={}, {:.1} s (limit 120 s)",
        check.max_rel_error,
        check.components,
        targets.len(),
        elapsed.as_secs_f64()
    );
    assert!(report(3, "full-pipeline gradient check", ok, detail));
}

fn scalar(g: &Graph<f64>, v: fireset::tensor::Var) -> f64 {
    g.value(v).data()[0]
}

#[test]
fn criterion_4_loss_hand_values() {
    let ln2 = std::f64::consts::LN_2;
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(Tensor::from_f64(vec![1, 2], &[0.0, 0.0]).unwrap(), true);
    let locs = g.leaf(Tensor::from_f64(vec![1, 2], &[0.5, 0.5]).unwrap(), true);
    let no_fire = classification_loss(&mut g, logits, &[0], 0.1, ClassNorm::PerQuery).unwrap();
    let fire = classification_loss(&mut g, logits, &[1], 0.1, ClassNorm::PerQuery).unwrap();
    let loc = localization_loss(&mut g, locs, &[[0.25, 0.75]], &[(0, 0)]).unwrap();
    let total = total_loss(
        &mut g,
        QueryVars { logits, locs },
        &[[0.25, 0.75]],
        &LossConfig::default(),
    )
    .unwrap();
    let empty = total_loss(
        &mut g,
        QueryVars { logits, locs },
        &[],
        &LossConfig::default(),
    )
    .unwrap();
    let vals = [
        scalar(&g, no_fire),
        scalar(&g, fire),
        scalar(&g, loc),
        total.value(&g),
    ];
    let ok = (vals[0] - 0.1 * ln2).abs() <= 1e-9
        && (vals[1] - ln2).abs() <= 1e-9
        && (vals[2] - 0.25).abs() <= 1e-12
        && (vals[3] - 1.9431).abs() <= 1e-4
        && empty.loc == 0.0;
    let detail = format!(
        "CE no-fire {:.10} fire {:.10}, L1 {:.12}, total {:.6}, K=0 loc {}",
        vals[0], vals[1], vals[2], vals[3], empty.loc
    );
    assert!(report(4, "loss hand values", ok, detail));
}

#[test]
fn criterion_5_metric_oracles() {
    let start = Instant::now();
    let suites = [
        event_ap_suite(51, 200),
        auroc_suite(52, 200),
        coverage_suite(53, 200),
    ];
    let elapsed = start.elapsed();
    let ok = suites.iter().all(|s| s.passed()) && elapsed < Duration::from_secs(30);
    let detail = suites
        .iter()
        .map(|s| {
            format!(
                "{} {}/{} max diff {:.1e}",
                s.suite,
                s.cases - s.mismatches,
                s.cases,
                s.max_abs_diff
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    assert!(report(
        5,
        "metric oracles",
        ok,
        format!("{detail}; {:.0} ms (limit 30 s)", ms(elapsed))
    ));
}

fn blank(h: usize, w: usize) -> Entity {
    let channels = vec!["dryness".to_string(), ACTIVE_FIRE.into(), FRP.into()];
    Entity::new(
        channels,
        4,
        2,
        h,
        w,
        vec![0.0; 3 * 4 * h * w],
        ValidBox::default_for(h, w),
    )
    .unwrap()
}

fn burn(e: &mut Entity, t: usize, y: usize, x: usize, code: f32, frp: f32) {
    let w = e.width();
    e.frame_mut(1, t)[y * w + x] = code;
    e.frame_mut(2, t)[y * w + x] = frp;
}

fn mask(pts: &[(usize, usize)]) -> fireset::targets::Mask {
    let mut m = Grid::filled(32, 32, false);
    for &(y, x) in pts {
        m.set(y, x, true);
    }
    m
}

#[test]
fn criterion_6_target_construction() {
    let mut checks = Vec::new();
    checks.push((
        "distance 3 merges",
        connected_components(&mask(&[(10, 10), (13, 13)]), 3).count == 1,
    ));
    checks.push((
        "distance 4 splits",
        connected_components(&mask(&[(10, 10), (10, 14)]), 3).count == 2,
    ));

    // FRP 1 at x=40 and 3 at x=43 give x = 42.25, (42.25 - 16) / 96 in the box
    let mut e = blank(128, 128);
    burn(&mut e, 2, 40, 40, 2.0, 1.0);
    burn(&mut e, 3, 40, 43, 3.0, 3.0);
    let ts = build_targets(&e, &TargetConfig::default()).unwrap();
    checks.push((
        "FRP-weighted centre",
        ts.len() == 1 && (ts.clusters[0].centre[1] - 0.2734).abs() < 1e-4,
    ));

    let mut e = blank(128, 128);
    burn(&mut e, 2, 40, 40, 2.0, 0.0);
    burn(&mut e, 3, 40, 42, 3.0, 0.0);
    let ts = build_targets(&e, &TargetConfig::default()).unwrap();
    checks.push((
        "zero-FRP centroid",
        (ts.clusters[0].centre[1] - 25.0 / 96.0).abs() < 1e-12,
    ));

    let mut e = blank(128, 128);
    burn(&mut e, 2, 60, 20, 2.0, 1.0);
    burn(&mut e, 2, 80, 80, 2.0, 0.5);
    burn(&mut e, 2, 80, 81, 2.0, 0.5);
    burn(&mut e, 2, 30, 30, 2.0, 1.0);
    burn(&mut e, 2, 100, 100, 2.0, 3.0);
    let ts = build_targets(&e, &TargetConfig::default()).unwrap();
    let order: Vec<(f64, usize, f64)> = ts
        .clusters
        .iter()
        .map(|c| (c.mass, c.size, c.centre[0]))
        .collect();
    let want_y = [
        (100.0 - 16.0) / 96.0,
        (80.0 - 16.0) / 96.0,
        (30.0 - 16.0) / 96.0,
        (60.0 - 16.0) / 96.0,
    ];
    let ranked = order.len() == 4
        && order.iter().map(|o| (o.0, o.1)).collect::<Vec<_>>()
            == [(3.0, 1), (1.0, 2), (1.0, 1), (1.0, 1)]
        && order
            .iter()
            .zip(want_y)
            .all(|(o, y)| (o.2 - y).abs() < 1e-12);
    checks.push(("(mass, size, position) ranking", ranked));

    let ok = checks.iter().all(|c| c.1);
    let detail = checks
        .iter()
        .map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "WRONG" }))
        .collect::<Vec<_>>()
        .join(", ");
    assert!(report(6, "target construction", ok, detail));
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let files: Vec<(String, Vec<u8>)> = dataset_files(dir)
        .unwrap()
        .into_iter()
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().display().to_string(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files
}

#[test]
fn criterion_9_determinism_and_io() {
    let tmp = tempfile::tempdir().unwrap();
    let world = WorldConfig {
        height: 32,
        width: 32,
        history: 8,
        horizon: 4,
        warmup: 6,
        seed: 9,
        ..WorldConfig::default()
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate_dataset(&world, [6, 3, 3], &a).unwrap();
    generate_dataset(&world, [6, 3, 3], &b).unwrap();
    let (fa, fb) = (tree_bytes(&a), tree_bytes(&b));
    let dataset_same = fa.len() == 13 && fa == fb;

    let first = dataset_files(&a)
        .unwrap()
        .into_iter()
        .find(|p| p.extension().is_some_and(|e| e == "wisp"))
        .unwrap();
    let bytes = std::fs::read(&first).unwrap();
    let entity = read_entity(&first).unwrap();
    let copy = tmp.path().join("copy.wisp");
    write_entity(&copy, &entity).unwrap();
    let round_trip = std::fs::read(&copy).unwrap() == bytes
        && encode_entity(&decode_entity(&bytes).unwrap()).unwrap() == bytes;

    let load = |split: usize, n: usize| -> Vec<Record> {
        generate_split(&world, split, n)
            .unwrap()
            .into_iter()
            .map(|s| Record {
                entity: s.entity,
                regime: s.regime,
                seed: s.seed,
            })
            .collect()
    };
    let (tr, val) = (load(0, 6), load(1, 3));
    let cfg = TrainConfig {
        grad_accum: 2,
        max_epochs: 3,
        eval_every: 1,
        jitter_max: 2,
        seed: 9,
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
        optimizer: AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let run1 = train(&cfg, &tr, &val, Some(&tmp.path().join("run1"))).unwrap();
    let run2 = train(&cfg, &tr, &val, Some(&tmp.path().join("run2"))).unwrap();
    let on_disk = |d: &str| {
        fireset::harness::io::sha256_hex(
            &std::fs::read(tmp.path().join(d).join("best.ckpt")).unwrap(),
        )
    };
    let hash_same = run1.best_hash == run2.best_hash
        && on_disk("run1") == on_disk("run2")
        && on_disk("run1") == run1.best_hash;

    let ok = dataset_same && round_trip && hash_same;
    let detail = format!(
        "dataset regeneration identical {dataset_same} ({} files), entity round trip {round_trip}, checkpoint hash identical {hash_same} ({})",
        fa.len(),
        &run1.best_hash[..16]
    );
    assert!(report(9, "determinism and I/O", ok, detail));
}

/// Training length and step size for the learning runs.
const EPOCHS: usize = 40;
const LEARNING_RATE: f64 = 3e-4;
const SEEDS: [u64; 3] = [0, 1, 2];

fn learning_config(queries: usize, seed: u64, height: usize, width: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        max_epochs: EPOCHS,
        seed,
        model: ModelConfig {
            queries,
            height,
            width,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.optimizer.learning_rate = LEARNING_RATE;
    cfg
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Run {
    queries: usize,
    report: MetricReport,
}

impl Run {
    fn clus_rec(&self) -> f64 {
        self.report.at(14.0).and_then(|m| m.clus_rec).unwrap_or(0.0)
    }
    fn avg_pred(&self) -> f64 {
        self.report.avg_pred
    }
    fn ap14(&self, regime: Regime) -> f64 {
        self.report.regime(regime).and_then(|r| r.ap).unwrap_or(0.0)
    }
    fn mean_prob(&self, regime: Regime) -> f64 {
        self.report
            .regime(regime)
            .and_then(|r| r.mean_prob)
            .unwrap_or(f64::NAN)
    }
}

#[test]
fn criteria_7_and_8_learning_and_trends() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let world = WorldConfig {
        seed: 7,
        ..WorldConfig::default()
    };
    let data = tmp.path().join("data");
    generate_dataset(&world, [512, 128, 256], &data).unwrap();
    let (tr, val, test) = (
        load_split(&data, "train").unwrap(),
        load_split(&data, "val").unwrap(),
        load_split(&data, "test").unwrap(),
    );
    let targets = TargetConfig::default();
    let eval = EvalConfig::default();
    let baseline = evaluate_baseline(&test, &targets, &eval, 10).unwrap();
    let base_map = baseline.map.unwrap_or(0.0);

    let mut runs = Vec::new();
    let mut first_run_time = Duration::ZERO;
    for queries in [10, 50] {
        for seed in SEEDS {
            let t0 = Instant::now();
            let cfg = learning_config(queries, seed, world.height, world.width);
            let outcome = train(&cfg, &tr, &val, None).unwrap();
            let report = evaluate_model(&outcome.best, &cfg, &test).unwrap();
            println!(
                "  Q={queries} seed={seed}: best epoch {} val mAP {:.3} test mAP {:.3} ({:.0} s)",
                outcome.best_epoch,
                outcome.best_val_map.unwrap_or(0.0),
                report.map.unwrap_or(0.0),
                t0.elapsed().as_secs_f64()
            );
            if runs.is_empty() {
                first_run_time = t0.elapsed();
            }
            runs.push(Run { queries, report });
        }
    }
    println!(
        "{}",
        all_tables(&[
            ("baseline".to_string(), baseline.clone()),
            ("Q10-seed0".to_string(), runs[0].report.clone())
        ])
    );

    // criterion 7 uses the first seed at Q=10
    let headline = &runs[0].report;
    let model_map = headline.map.unwrap_or(0.0);
    let hit = headline
        .regime(Regime::Continued)
        .and_then(|r| r.hit)
        .unwrap_or(0.0);
    let ok7 = model_map >= 2.0 * base_map && hit >= 0.5;
    let detail7 = format!(
        "test mAP {model_map:.3} vs baseline {base_map:.3} (ratio {:.2}, need 2.00), continued Hit@14 {hit:.3} (need 0.5), {} epochs in {:.1} min",
        model_map / base_map.max(1e-12),
        EPOCHS,
        first_run_time.as_secs_f64() / 60.0
    );
    let pass7 = report(7, "end-to-end learning", ok7, detail7);

    let med = |q: usize, f: &dyn Fn(&Run) -> f64| {
        median(runs.iter().filter(|r| r.queries == q).map(f).collect())
    };
    let rec = (med(10, &Run::clus_rec), med(50, &Run::clus_rec));
    let avg = (med(10, &Run::avg_pred), med(50, &Run::avg_pred));
    let trunc = (
        med(10, &|r| r.report.truncation_rate.unwrap_or(0.0)),
        med(50, &|r| r.report.truncation_rate.unwrap_or(0.0)),
    );
    let ap = (
        med(10, &|r| r.ap14(Regime::Continued)),
        med(10, &|r| r.ap14(Regime::NewIgnition)),
    );
    let prob = (
        med(10, &|r| r.mean_prob(Regime::Quiescent)),
        med(10, &|r| r.mean_prob(Regime::Extinguished)),
    );
    let trends = [
        (
            "ClusRec@14 up",
            rec.1 > rec.0,
            format!("{:.3} -> {:.3}", rec.0, rec.1),
        ),
        (
            "Avg.pred up",
            avg.1 > avg.0,
            format!("{:.2} -> {:.2}", avg.0, avg.1),
        ),
        (
            "truncation down",
            trunc.1 < trunc.0,
            format!("{:.3} -> {:.3}", trunc.0, trunc.1),
        ),
        (
            "continued AP@14 > new-ignition",
            ap.0 > ap.1,
            format!("{:.3} vs {:.3}", ap.0, ap.1),
        ),
        (
            "quiescent mean prob < extinguished",
            prob.0 < prob.1,
            format!("{:.2} vs {:.2}", prob.0, prob.1),
        ),
    ];
    let ok8 = trends.iter().all(|t| t.1);
    let detail8 = trends
        .iter()
        .map(|(n, ok, v)| format!("{n} {v} {}", if *ok { "ok" } else { "WRONG" }))
        .collect::<Vec<_>>()
        .join("; ");
    let pass8 = report(8, "trend reproduction (median of 3 seeds)", ok8, detail8);
    println!(
        "  criteria 7-8 total {:.1} min",
        start.elapsed().as_secs_f64() / 60.0
    );
    assert!(pass7 && pass8);
}
