//! Training loop, validation-driven checkpoint selection and evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Record;
use super::io::{encode_checkpoint, sha256_hex, write_file, CheckpointInfo};
use super::optim::{adam_step, AdamConfig, AdamState, LrSchedule};
use super::{HarnessError, Result};
use crate::metrics::{
    evaluate, persistence_baseline, subset_cover, EvalConfig, EvalEntity, MetricReport,
};
use crate::model::features::extract;
use crate::model::{init_params, predict, predict_values, Mode, ModelConfig, Predictions};
use crate::setloss::{total_loss, LossConfig};
use crate::targets::{apply_jitter, build_targets, truncate_targets, Entity, TargetConfig};
use crate::tensor::{GradMap, Graph, ParamStore, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Entities per optimizer step; gradients are averaged over them.
    pub grad_accum: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    /// Query-evolution export cadence in epochs; 0 disables it.
    pub export_every: usize,
    /// Largest jitter shift per axis, drawn fresh every epoch.
    pub jitter_max: i32,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub targets: TargetConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            schedule: LrSchedule::Constant,
            grad_accum: 4,
            max_epochs: 50,
            eval_every: 5,
            export_every: 0,
            jitter_max: 4,
            seed: 0,
            dataset: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            targets: TargetConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0) {
            return Err(HarnessError::Config(
                "learning rate and eps must be positive".into(),
            ));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(HarnessError::Config("betas must lie in [0, 1)".into()));
        }
        if self.grad_accum == 0 || self.max_epochs == 0 || self.eval_every == 0 {
            return Err(HarnessError::Config(
                "grad_accum, max_epochs and eval_every must be positive".into(),
            ));
        }
        if self.jitter_max < 0 {
            return Err(HarnessError::Config(
                "jitter_max must be non-negative".into(),
            ));
        }
        self.model.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

/// Loss terms of one entity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityLoss {
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
    /// Matched queries over Q.
    pub matched_fraction: f64,
    pub subset_cover_xy: Option<f64>,
}

/// Forward, loss and backward for one entity.
pub fn entity_gradients<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &TrainConfig,
    entity: &Entity,
    mode: &mut Mode,
) -> Result<(GradMap<T>, EntityLoss)> {
    let feats = extract(entity, cfg.model.memory_steps)?;
    let targets = truncate_targets(&build_targets(entity, &cfg.targets)?, cfg.model.queries);
    let centres = targets.centres();
    let mut g = Graph::new();
    let q = predict(&mut g, store, &cfg.model, &feats, mode)?;
    let out = total_loss(&mut g, q.vars(), &centres, &cfg.loss)?;
    let preds = Predictions::from_graph(&g, &q);
    let total = out.value(&g);
    let stats = EntityLoss {
        total,
        cls: out.cls,
        loc: out.loc,
        matched_fraction: out.matching.pairs.len() as f64 / cfg.model.queries as f64,
        subset_cover_xy: subset_cover(&preds, &centres, cfg.eval.threshold),
    };
    if !total.is_finite() {
        return Ok((GradMap::new(), stats));
    }
    let grads = g.backward(out.total)?;
    Ok((grads, stats))
}

/// Mean of per-entity gradients over a micro-batch.
pub fn accumulate_gradients<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &TrainConfig,
    batch: &[Entity],
    mode: &mut Mode,
) -> Result<(GradMap<T>, Vec<EntityLoss>)> {
    let mut acc = GradMap::new();
    let mut stats = Vec::with_capacity(batch.len());
    let w = T::of(1.0 / batch.len() as f64);
    for e in batch {
        let (grads, s) = entity_gradients(store, cfg, e, mode)?;
        acc.add_scaled(&grads, w);
        stats.push(s);
    }
    Ok((acc, stats))
}

/// One line of the JSONL training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub cls: f64,
    pub loc: f64,
    pub matched_fraction: f64,
    pub subset_cover_xy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val: Option<MetricReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_val_map: Option<f64>,
    /// SHA-256 of the best checkpoint's bytes.
    pub best_hash: String,
    pub last: ParamStore<f32>,
    pub epochs: Vec<EpochLog>,
}

fn jsonl<T: Serialize>(w: &mut Option<BufWriter<File>>, path: &Path, v: &T) -> Result<()> {
    if let Some(w) = w {
        serde_json::to_writer(&mut *w, v).map_err(|e| HarnessError::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| HarnessError::io(path, e))?;
    }
    Ok(())
}

fn open_log(dir: Option<&Path>, name: &str) -> Result<(Option<BufWriter<File>>, PathBuf)> {
    let Some(dir) = dir else {
        return Ok((None, PathBuf::new()));
    };
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    Ok((Some(BufWriter::new(f)), path))
}

/// Predictions and targets for a whole split, without jitter.
pub fn eval_entities(
    records: &[Record],
    targets: &TargetConfig,
    mut predict_one: impl FnMut(&Entity) -> Result<Predictions>,
) -> Result<Vec<EvalEntity>> {
    records
        .iter()
        .map(|r| {
            Ok(EvalEntity::new(
                &r.entity,
                predict_one(&r.entity)?,
                targets,
                Some(r.regime),
            )?)
        })
        .collect()
}

pub fn evaluate_model(
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
    records: &[Record],
) -> Result<MetricReport> {
    let ents = eval_entities(records, &cfg.targets, |e| {
        Ok(predict_values(
            store,
            &cfg.model,
            &extract(e, cfg.model.memory_steps)?,
        )?)
    })?;
    Ok(evaluate(&ents, &cfg.eval, cfg.model.queries))
}

/// Persistence baseline; its truncation rate is reported against `queries`.
pub fn evaluate_baseline(
    records: &[Record],
    targets: &TargetConfig,
    eval: &EvalConfig,
    queries: usize,
) -> Result<MetricReport> {
    let ents = eval_entities(records, targets, |e| Ok(persistence_baseline(e, targets)?))?;
    Ok(evaluate(&ents, eval, queries))
}

fn checkpoint_info(
    cfg: &TrainConfig,
    step: usize,
    epoch: usize,
    val_map: Option<f64>,
) -> CheckpointInfo {
    CheckpointInfo {
        model: cfg.model.clone(),
        seed: cfg.seed,
        step,
        epoch,
        val_map,
    }
}

/// Runs training. With `out_dir`, writes `train_log.jsonl`, `epochs.jsonl`,
/// `best.ckpt`, `last.ckpt` and, when enabled, `query_evolution.jsonl`.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Record],
    val_set: &[Record],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(HarnessError::Config(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = cfg.seed;
    let cfg = &TrainConfig {
        model: model_cfg,
        ..cfg.clone()
    };
    let mut store = init_params::<f32>(&cfg.model)?;
    let mut adam = AdamState::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);

    let (mut step_log, step_path) = open_log(out_dir, "train_log.jsonl")?;
    let (mut epoch_log, epoch_path) = open_log(out_dir, "epochs.jsonl")?;
    let (mut evo_log, evo_path) = if cfg.export_every > 0 {
        open_log(out_dir, "query_evolution.jsonl")?
    } else {
        (None, PathBuf::new())
    };

    let mut best: Option<(ParamStore<f32>, usize, Option<f64>, usize)> = None;
    let mut epochs = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let total_steps = cfg.max_epochs * train_set.len().div_ceil(cfg.grad_accum);
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(order.len());
        for chunk in order.chunks(cfg.grad_accum) {
            let batch: Vec<Entity> = chunk
                .iter()
                .map(|&i| {
                    let j = cfg.jitter_max;
                    let (dy, dx) = (rng.gen_range(-j..=j), rng.gen_range(-j..=j));
                    apply_jitter(&train_set[i].entity, dy, dx, j)
                })
                .collect::<std::result::Result<_, _>>()?;
            let (grads, stats) =
                accumulate_gradients(&store, cfg, &batch, &mut Mode::Train(&mut rng))?;
            step += 1;
            let n = stats.len() as f64;
            let covers: Vec<f64> = stats.iter().filter_map(|s| s.subset_cover_xy).collect();
            let log = StepLog {
                epoch,
                step,
                loss: stats.iter().map(|s| s.total).sum::<f64>() / n,
                cls: stats.iter().map(|s| s.cls).sum::<f64>() / n,
                loc: stats.iter().map(|s| s.loc).sum::<f64>() / n,
                matched_fraction: stats.iter().map(|s| s.matched_fraction).sum::<f64>() / n,
                subset_cover_xy: (!covers.is_empty())
                    .then(|| covers.iter().sum::<f64>() / covers.len() as f64),
            };
            if !log.loss.is_finite() {
                if let Some(dir) = out_dir {
                    let dump = serde_json::json!({
                        "epoch": epoch,
                        "step": step,
                        "entities": chunk.iter().map(|&i| train_set[i].seed).collect::<Vec<_>>(),
                        "per_entity": stats,
                    });
                    write_file(&dir.join("nan_dump.json"), dump.to_string().as_bytes())?;
                }
                return Err(HarnessError::Numeric(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            jsonl(&mut step_log, &step_path, &log)?;
            losses.push(log.loss);
            let optimizer = AdamConfig {
                learning_rate: cfg.optimizer.learning_rate
                    * cfg.schedule.factor(step - 1, total_steps),
                ..cfg.optimizer
            };
            adam_step(&mut store, &grads, &mut adam, &optimizer)?;
        }

        if cfg.export_every > 0 && epoch % cfg.export_every == 0 {
            let e = &val_set[0].entity;
            let preds = predict_values(&store, &cfg.model, &extract(e, cfg.model.memory_steps)?)?;
            let targets = build_targets(e, &cfg.targets)?;
            let row = serde_json::json!({ "epoch": epoch, "predictions": preds, "targets": targets.centres() });
            jsonl(&mut evo_log, &evo_path, &row)?;
        }

        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let val = if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            let report = evaluate_model(&store, cfg, val_set)?;
            let better = match &best {
                None => true,
                Some((_, _, b, _)) => {
                    report.map.unwrap_or(f64::NEG_INFINITY) > b.unwrap_or(f64::NEG_INFINITY)
                }
            };
            if better {
                best = Some((store.clone(), epoch, report.map, step));
            }
            Some(report)
        } else {
            None
        };
        let row = EpochLog {
            epoch,
            mean_loss,
            val,
        };
        jsonl(&mut epoch_log, &epoch_path, &row)?;
        epochs.push(row);
    }
    for (w, p) in [
        (&mut step_log, &step_path),
        (&mut epoch_log, &epoch_path),
        (&mut evo_log, &evo_path),
    ] {
        if let Some(w) = w {
            w.flush().map_err(|e| HarnessError::io(p, e))?;
        }
    }

    let (best_store, best_epoch, best_val_map, best_step) =
        best.expect("the final epoch always validates");
    let best_bytes = encode_checkpoint(
        checkpoint_info(cfg, best_step, best_epoch, best_val_map),
        &best_store,
    )?;
    let best_hash = sha256_hex(&best_bytes);
    if let Some(dir) = out_dir {
        write_file(&dir.join("best.ckpt"), &best_bytes)?;
        let last = encode_checkpoint(checkpoint_info(cfg, step, cfg.max_epochs, None), &store)?;
        write_file(&dir.join("last.ckpt"), &last)?;
    }
    Ok(TrainOutcome {
        best: best_store,
        best_epoch,
        best_val_map,
        best_hash,
        last: store,
        epochs,
    })
}
