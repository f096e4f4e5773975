//! Train, evaluate, transfer and latent dumps on top of the core crate.

use std::io::Write;
use std::path::Path;

use deca_core::data::{Dataset, Split, ViewTag};
use deca_core::metrics::MetricsReport;
use deca_core::train::{evaluate, mean_pose_baseline, predict, training_pool, EpochLog, Trainer};
use deca_core::DecaError;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Trains `cfg` on the training split (optionally one view), continuing
/// from `resume` when given, until `cfg.train.epochs` epochs are done.
/// `on_epoch` sees each epoch log as it is produced.
pub fn train_model(
    cfg: &RunConfig,
    dataset: &Dataset,
    view: Option<ViewTag>,
    resume: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&EpochLog) -> CliResult<()>,
) -> CliResult<Checkpoint> {
    let pool = training_pool(dataset, view);
    if pool.is_empty() {
        return Err(DecaError::Data(format!(
            "no training samples for view {}",
            view.map_or("any".into(), |v| v.to_string())
        ))
        .into());
    }
    let ck = match resume {
        Some(ck) => {
            if ck.config.model != cfg.model {
                return Err(DecaError::Config("resume checkpoint was built with a different model config".into()).into());
            }
            Checkpoint { config: cfg.clone(), ..ck }
        }
        None => Checkpoint::init(cfg.clone())?,
    };
    let mut trainer: Trainer<f32> = ck.into_trainer()?;
    trainer.cfg = cfg.train.clone();
    let per = trainer.steps_per_epoch(pool.len()) as u64;
    let total = cfg.train.epochs as u64 * per;
    while trainer.step < total {
        let left = per - trainer.step % per;
        for log in trainer.train_steps(dataset, &pool, left.min(total - trainer.step))? {
            on_epoch(&log)?;
        }
    }
    Ok(Checkpoint::from_trainer(cfg.clone(), trainer, view))
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(w: &mut impl Write, item: &T) -> CliResult<()> {
    serde_json::to_writer(&mut *w, item)?;
    w.write_all(b"\n").map_err(|e| CliError::io("cannot write log", e))
}

pub fn write_json<T: Serialize>(path: &Path, item: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(item)?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

pub fn evaluate_checkpoint(ck: &Checkpoint, dataset: &Dataset, view: Option<ViewTag>, split: Option<Split>) -> CliResult<MetricsReport> {
    Ok(evaluate(&ck.model, &ck.store, dataset, view, split)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub train_view: ViewTag,
    pub test_view: ViewTag,
    pub model: MetricsReport,
    /// Mean training pose of the training view placed in each test camera.
    pub mean_pose_baseline: MetricsReport,
    /// `1 − model MPJPE / baseline MPJPE`.
    pub mpjpe_improvement: f64,
}

/// Test-split evaluation on view `b` of a model trained on view `a`.
pub fn transfer(ck: &Checkpoint, dataset: &Dataset, a: ViewTag, b: ViewTag) -> CliResult<TransferReport> {
    if let Some(v) = ck.train_view {
        if v != a {
            return Err(DecaError::Config(format!("checkpoint was trained on {v} views, not {a}")).into());
        }
    }
    let model = evaluate_checkpoint(ck, dataset, Some(b), Some(Split::Test))?;
    let baseline = mean_pose_baseline(
        dataset,
        &dataset.select(Some(a), Some(Split::Train)),
        &dataset.select(Some(b), Some(Split::Test)),
    )?;
    Ok(TransferReport {
        train_view: a,
        test_view: b,
        mpjpe_improvement: 1.0 - model.mpjpe_mm / baseline.mpjpe_mm,
        model,
        mean_pose_baseline: baseline,
    })
}

/// CSV with one row per (sample, joint): identifiers, the joint label and
/// the 16 entity values.
pub fn write_latents(ck: &Checkpoint, dataset: &Dataset, view: Option<ViewTag>, split: Option<Split>, out: &Path) -> CliResult<usize> {
    let idx = dataset.select(view, split);
    if idx.is_empty() {
        return Err(DecaError::Data("no samples selected".into()).into());
    }
    let (_, entities) = predict(&ck.model, &ck.store, dataset, &idx, 32)?;
    let j = ck.model.config.joints;
    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["stem".to_string(), "pose_id".into(), "view".into(), "joint".into(), "joint_name".into()];
    header.extend((0..16).map(|k| format!("e{k}")));
    w.write_record(&header)?;
    for (n, &i) in idx.iter().enumerate() {
        let s = &dataset.samples[i];
        for k in 0..j {
            let mut row = vec![s.stem.clone(), s.pose_id.to_string(), s.view.to_string(), k.to_string(), dataset.manifest.joint_names[k].clone()];
            let base = (n * j + k) * 16;
            row.extend(entities[base..base + 16].iter().map(|v| format!("{}", *v as f32)));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| CliError::io(format!("cannot write {}", out.display()), e))?;
    Ok(idx.len() * j)
}
