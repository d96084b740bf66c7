use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fireset::harness::dataset::{generate_dataset, load_split};
use fireset::harness::io::{load_checkpoint, read_entity, read_file, write_file};
use fireset::harness::optim::LrSchedule;
use fireset::harness::oracles::all_suites;
use fireset::harness::report::all_tables;
use fireset::harness::train::{evaluate_baseline, evaluate_model, train, TrainConfig};
use fireset::harness::HarnessError;
use fireset::metrics::{render_union, to_pgm, EvalConfig, MetricReport};
use fireset::model::features::extract;
use fireset::model::{predict_values, ModelConfig};
use fireset::simulator::WorldConfig;
use fireset::targets::{build_union_mask, TargetConfig};

/// Default output directory when `--out` is not given.
const OUT_ENV: &str = "FIRESET_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "fireset",
    version,
    about = "Sparse next-day fire cluster prediction on synthetic worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset of entity files plus manifest.json.
    Gen(GenArgs),
    /// Train a model and write checkpoints and logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the persistence baseline) on a split.
    Eval(EvalArgs),
    /// Render probability and ground-truth maps for one entity.
    Render(RenderArgs),
    /// Print comparison tables for metric report files.
    Report(ReportArgs),
    /// Run the brute-force oracle suites.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    n_train: usize,
    #[arg(long, default_value_t = 64)]
    n_val: usize,
    #[arg(long, default_value_t = 128)]
    n_test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Output directory; defaults to $FIRESET_OUT_DIR/data.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    queries: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Decay the learning rate along a half cosine to zero.
    #[arg(long)]
    cosine: bool,
    #[arg(long, default_value_t = 4)]
    grad_accum: usize,
    #[arg(long, default_value_t = 5)]
    eval_every: usize,
    /// Query-evolution export cadence in epochs (0 = off).
    #[arg(long, default_value_t = 0)]
    export_every: usize,
    /// Optional JSON file with a full training config; flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to $FIRESET_OUT_DIR/run.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Model checkpoint; omit with --baseline.
    #[arg(long, required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the fire-history persistence baseline instead of a model.
    #[arg(long)]
    baseline: bool,
    /// Query budget used for the baseline's truncation rate.
    #[arg(long, default_value_t = 10)]
    queries: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    entity: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory; defaults to $FIRESET_OUT_DIR/render.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metric report JSON files; the file stem names each run.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    cases: usize,
}

fn out_dir(flag: Option<PathBuf>, sub: &str) -> PathBuf {
    flag.unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("fireset_out"))
            .join(sub)
    })
}

fn print_json<T: Serialize>(v: &T) -> Result<(), HarnessError> {
    let s = serde_json::to_string_pretty(v).map_err(|e| HarnessError::Format(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn emit<T: Serialize>(v: &T, out: Option<&Path>) -> Result<(), HarnessError> {
    match out {
        Some(p) => {
            let s =
                serde_json::to_vec_pretty(v).map_err(|e| HarnessError::Format(e.to_string()))?;
            write_file(p, &s)
        }
        None => print_json(v),
    }
}

fn gen(a: GenArgs) -> Result<(), HarnessError> {
    let world = WorldConfig {
        seed: a.seed,
        height: a.size,
        width: a.size,
        ..WorldConfig::default()
    };
    let dir = out_dir(a.out, "data");
    let manifest = generate_dataset(&world, [a.n_train, a.n_val, a.n_test], &dir)?;
    print_json(&serde_json::json!({
        "dir": dir,
        "entities": manifest.entries.len(),
        "regime_counts": manifest.regime_counts,
    }))
}

fn train_cmd(a: TrainArgs) -> Result<(), HarnessError> {
    let cfg = match &a.config {
        Some(p) => serde_json::from_slice(&read_file(p)?)
            .map_err(|e| HarnessError::Format(format!("{}: {e}", p.display())))?,
        None => {
            let manifest_world = fireset::harness::dataset::read_manifest(&a.data)?.world;
            let mut cfg = TrainConfig {
                max_epochs: a.epochs,
                grad_accum: a.grad_accum,
                eval_every: a.eval_every,
                export_every: a.export_every,
                seed: a.seed,
                dataset: Some(a.data.clone()),
                model: ModelConfig {
                    queries: a.queries,
                    height: manifest_world.height,
                    width: manifest_world.width,
                    ..ModelConfig::default()
                },
                ..TrainConfig::default()
            };
            cfg.optimizer.learning_rate = a.lr;
            if a.cosine {
                cfg.schedule = LrSchedule::Cosine;
            }
            cfg
        }
    };
    let train_set = load_split(&a.data, "train")?;
    let val_set = load_split(&a.data, "val")?;
    let dir = out_dir(a.out, "run");
    let config_json =
        serde_json::to_vec_pretty(&cfg).map_err(|e| HarnessError::Format(e.to_string()))?;
    write_file(&dir.join("config.json"), &config_json)?;
    let outcome = train(&cfg, &train_set, &val_set, Some(&dir))?;
    print_json(&serde_json::json!({
        "out": dir,
        "best_epoch": outcome.best_epoch,
        "best_val_map": outcome.best_val_map,
        "best_checkpoint_sha256": outcome.best_hash,
    }))
}

fn eval_cmd(a: EvalArgs) -> Result<(), HarnessError> {
    let records = load_split(&a.data, &a.split)?;
    let report: MetricReport = if a.baseline {
        evaluate_baseline(
            &records,
            &TargetConfig::default(),
            &EvalConfig::default(),
            a.queries,
        )?
    } else {
        let path = a.checkpoint.expect("required unless --baseline");
        let (header, store) = load_checkpoint(&path)?;
        let cfg = TrainConfig {
            model: header.model,
            ..TrainConfig::default()
        };
        evaluate_model(&store, &cfg, &records)?
    };
    emit(&report, a.out.as_deref())
}

/// Colour overlay: red = ground-truth union, green = rendered probability,
/// white crosses = positive query centres.
fn overlay_ppm(prob: &[f64], truth: &[bool], queries: &[[f64; 2]], h: usize, w: usize) -> Vec<u8> {
    let mut px: Vec<[u8; 3]> = (0..h * w)
        .map(|i| {
            let g = (prob[i].clamp(0.0, 1.0) * 255.0).round() as u8;
            [if truth[i] { 255 } else { 0 }, g, 0]
        })
        .collect();
    for q in queries {
        let (cy, cx) = (q[0].round() as isize, q[1].round() as isize);
        for d in -2..=2isize {
            for (y, x) in [(cy + d, cx), (cy, cx + d)] {
                if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) {
                    px[y as usize * w + x as usize] = [255, 255, 255];
                }
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(px.iter().flatten());
    out
}

fn render_cmd(a: RenderArgs) -> Result<(), HarnessError> {
    let entity = read_entity(&a.entity)?;
    let (header, store) = load_checkpoint(&a.checkpoint)?;
    let feats = extract(&entity, header.model.memory_steps)?;
    let preds = predict_values(&store, &header.model, &feats)?;
    let (h, w, vb) = (entity.height(), entity.width(), entity.valid_box());
    let eval = EvalConfig::default();
    let prob = render_union(&preds, h, w, vb, eval.sigma);
    let truth = build_union_mask(&entity, TargetConfig::default().min_confidence)?;
    let truth_map: Vec<f64> = truth.data.iter().map(|&b| b as u8 as f64).collect();
    let positives: Vec<[f64; 2]> = preds
        .probs
        .iter()
        .zip(&preds.locs)
        .filter(|(p, _)| **p >= eval.threshold)
        .map(|(_, &l)| vb.denormalize(l))
        .collect();
    let dir = out_dir(a.out, "render");
    write_file(&dir.join("probability.pgm"), &to_pgm(&prob, h, w))?;
    write_file(&dir.join("truth.pgm"), &to_pgm(&truth_map, h, w))?;
    write_file(
        &dir.join("overlay.ppm"),
        &overlay_ppm(&prob, &truth.data, &positives, h, w),
    )?;
    print_json(&serde_json::json!({ "out": dir, "predictions": preds }))
}

fn report_cmd(a: ReportArgs) -> Result<(), HarnessError> {
    let runs = a
        .reports
        .iter()
        .map(|p| {
            let report: MetricReport = serde_json::from_slice(&read_file(p)?)
                .map_err(|e| HarnessError::Format(format!("{}: {e}", p.display())))?;
            let name = p.file_stem().map_or_else(
                || p.display().to_string(),
                |s| s.to_string_lossy().into_owned(),
            );
            Ok((name, report))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    print!("{}", all_tables(&runs));
    Ok(())
}

fn oracle_cmd(a: OracleArgs) -> Result<bool, HarnessError> {
    let results = all_suites(a.seed, a.cases);
    print_json(&results)?;
    Ok(results.iter().all(|r| r.passed()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Render(a) => render_cmd(a).map(|_| true),
        Command::Report(a) => report_cmd(a).map(|_| true),
        Command::Oracle(a) => oracle_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: oracle mismatch");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_file_error() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
