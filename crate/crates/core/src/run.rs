//! The training loop: batches, periodic validation, early stopping,
//! metrics JSONL and checkpoints.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::rng::SeedStream;
use crate::tasks::{GlyphSource, TargetKind, TaskBatch};
use crate::training::{evaluate, merge_eval, EvalStats, Learner};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.trds";
pub const DIVERGED_FILE: &str = "diverged_batch.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub mode: String,
    pub task: String,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    /// Per-bit loss for bit tasks, per-digit error for class tasks.
    pub valid_metric: f64,
    pub wall_time_s: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub learner: Learner,
    /// Parameters at the best validation metric.
    pub best: ParamStore,
    pub best_metric: f64,
    pub best_step: u64,
    pub history: Vec<MetricsRecord>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn best_model(&self) -> Model {
        let mut m = self.learner.model.clone();
        m.store = self.best.clone();
        m
    }
}

pub fn validation_set(cfg: &RunConfig, glyphs: &GlyphSource) -> Result<Vec<TaskBatch>> {
    let root = SeedStream::new(cfg.seed).child("valid");
    (0..cfg.valid_batches)
        .map(|i| cfg.sample(glyphs, cfg.valid_size, &mut root.indexed("batch", i as u64).rng()))
        .collect()
}

pub fn evaluate_all(model: &Model, batches: &[TaskBatch]) -> Result<EvalStats> {
    let stats = batches.iter().map(|b| evaluate(model, b)).collect::<Result<Vec<_>>>()?;
    Ok(merge_eval(&stats))
}

/// The metric early stopping and the metrics stream use.
pub fn headline(stats: &EvalStats, kind: TargetKind) -> f64 {
    match kind {
        TargetKind::Bits => stats.loss,
        TargetKind::Classes => stats.error.unwrap_or(stats.loss),
    }
}

pub fn manifest(cfg: &RunConfig, step: u64, metric: f64) -> serde_json::Value {
    serde_json::json!({
        "config": cfg,
        "seed": cfg.seed,
        "step": step,
        "valid_metric": metric,
        "rng": { "generator": "chacha8", "seed": cfg.seed, "next_batch": step },
    })
}

fn dump_batch(dir: &Path, batch: &TaskBatch) -> Result<PathBuf> {
    let path = dir.join(DIVERGED_FILE);
    let rows: Vec<Vec<f64>> = batch.inputs.iter().map(|t| t.data().to_vec()).collect();
    let targets: Vec<Vec<f64>> = batch.targets.iter().map(|t| t.data().to_vec()).collect();
    let v = serde_json::json!({
        "task": batch.task,
        "batch": batch.batch,
        "d_x": batch.d_x,
        "d_out": batch.d_out,
        "lengths": batch.lengths,
        "inputs": rows,
        "targets": targets,
        "mask": batch.mask,
    });
    std::fs::write(&path, serde_json::to_vec(&v)?)?;
    Ok(path)
}

/// Trains per `cfg`. With `out_dir`, writes `metrics.jsonl` and the best
/// checkpoint there. `on_record` sees every metrics record as it is made.
pub fn train_run(cfg: &RunConfig, out_dir: Option<&Path>, on_record: &mut dyn FnMut(&MetricsRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = SeedStream::new(cfg.seed);
    let glyphs = cfg.glyph_source()?;
    let model = Model::new(cfg.model_config(), &root.child("model"))?;
    let mut learner = Learner::new(model, cfg.update_settings());
    let valid = validation_set(cfg, &glyphs)?;
    let kind = valid[0].kind;

    let mut metrics = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(std::fs::File::create(d.join(METRICS_FILE))?)
        }
        None => None,
    };

    let start = Instant::now();
    let mut best = learner.model.store.clone();
    let mut best_metric = f64::INFINITY;
    let mut best_step = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_n = 0u64;
    let mut stopped_early = false;

    for step in 1..=cfg.budget {
        let batch = cfg.sample(&glyphs, cfg.batch, &mut root.child("data").indexed("batch", step).rng())?;
        let stats = match learner.update(&batch, &root.child("noise").indexed("batch", step)) {
            Ok(s) => s,
            Err(e @ Error::NonFinite { .. }) => {
                if let Some(d) = out_dir {
                    let p = dump_batch(d, &batch)?;
                    return Err(Error::NonFinite {
                        what: format!("{} (batch dumped to {})", e.to_string().trim_start_matches("non-finite value in "), p.display()),
                    });
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        loss_acc += stats.loss;
        loss_n += 1;

        if step % cfg.eval_interval == 0 || step == cfg.budget {
            let ev = evaluate_all(&learner.model, &valid)?;
            let metric = headline(&ev, kind);
            let rec = MetricsRecord {
                step,
                mode: cfg.mode.name().into(),
                task: cfg.task.name().into(),
                train_loss: loss_acc / loss_n as f64,
                valid_metric: metric,
                wall_time_s: start.elapsed().as_secs_f64(),
                seed: cfg.seed,
            };
            loss_acc = 0.0;
            loss_n = 0;
            if let Some(f) = metrics.as_mut() {
                serde_json::to_writer(&mut *f, &rec)?;
                f.write_all(b"\n")?;
                f.flush()?;
            }
            on_record(&rec);
            history.push(rec);
            if metric < best_metric {
                best_metric = metric;
                best_step = step;
                best = learner.model.store.clone();
                since_best = 0;
            } else {
                since_best += 1;
            }
            if cfg.stop_below.is_some_and(|s| metric < s) || (cfg.patience > 0 && since_best >= cfg.patience) {
                stopped_early = step < cfg.budget;
                break;
            }
        }
    }

    if let Some(d) = out_dir {
        checkpoint::save(&d.join(CHECKPOINT_FILE), &best, &manifest(cfg, best_step, best_metric))?;
    }
    Ok(TrainOutcome {
        learner,
        best,
        best_metric,
        best_step,
        history,
        stopped_early,
    })
}

/// Rebuilds the model a checkpoint was written from.
pub fn load_model(path: &Path) -> Result<(RunConfig, Model)> {
    let (tensors, manifest) = checkpoint::load(path)?;
    let cfg: RunConfig = serde_json::from_value(
        manifest
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("manifest has no config".into()))?,
    )?;
    let mut model = Model::new(cfg.model_config(), &SeedStream::new(cfg.seed).child("model"))?;
    checkpoint::restore(&mut model.store, &tensors)?;
    Ok((cfg, model))
}
