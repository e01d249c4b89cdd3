use std::path::Path;

use serde::Serialize;

use super::{
    batch_indices, checkpoint_path, distill_non_finite, diverged, write_lock, Checkpoint,
    CheckpointKind, JsonLines, TrainingConfig, TrainingError,
};
use crate::distillation::{init_student, pretrain_step, TeacherStudentPair};
use crate::numerics::{AdamW, ParamStore, Tensor};
use crate::pointcloud::PointCloud;
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainLogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss_csc: f64,
    pub loss_geo: f64,
    pub loss_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<PretrainLogEntry>,
}

impl PretrainRun {
    /// Mean total loss over the last `window` steps is below the first
    /// step's loss. Vacuously true for runs shorter than `window`.
    pub fn trend_ok(&self, window: usize) -> bool {
        if self.log.len() < window || window == 0 {
            return true;
        }
        let tail = &self.log[self.log.len() - window..];
        let mean = tail.iter().map(|e| e.loss_total).sum::<f64>() / window as f64;
        mean < self.log[0].loss_total
    }
}

pub(crate) fn pretrain_checkpoint(
    cfg: &TrainingConfig,
    pair: &TeacherStudentPair,
    step: usize,
) -> Checkpoint {
    let mut state = ParamStore::new();
    state.insert("center", Tensor::vector(pair.center.clone()));
    Checkpoint {
        kind: CheckpointKind::Pretrain,
        step,
        config_text: cfg.to_text(),
        config_hash: cfg.hash(),
        arch_hash: super::arch_hash(&pair.student),
        student: pair.student.clone(),
        teacher: pair.teacher.clone(),
        state,
    }
}

/// Self-distillation pretraining on unlabeled scenes.
///
/// Checkpoints are written every `pretrain.checkpoint_every` steps and at
/// the end; with zero steps the final checkpoint is the initialization.
pub fn run_pretrain(
    cfg: &TrainingConfig,
    corpus: &[PointCloud],
    out: &Path,
) -> Result<PretrainRun, TrainingError> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(TrainingError::CorpusTooSmall {
            need: 2,
            found: corpus.len(),
        });
    }
    write_lock(cfg, out)?;
    let settings = cfg.pretrain_settings();
    let seed = cfg.run.seed;
    let total = cfg.pretrain.total_steps;
    let params = init_student(
        &settings.model,
        &settings.distill,
        &settings.geo,
        &mut seeding::rng(seed, &[seeding::INIT]),
    )?;
    let mut pair = TeacherStudentPair::new(params, &settings.distill)?;
    let mut opt = AdamW::new(cfg.adamw());
    let schedule = cfg.schedule(total);
    schedule.validate()?;
    let batch_base = seeding::derive(seed, &[seeding::BATCH]);
    let mut log_file = JsonLines::create(&out.join("logs").join("train.jsonl"))?;
    let mut log = Vec::with_capacity(total);
    for step in 0..total {
        let lr = schedule.lr_at(step)?;
        let batch: Vec<PointCloud> =
            batch_indices(batch_base, step, cfg.pretrain.batch_size, corpus.len())
                .into_iter()
                .map(|i| corpus[i].clone())
                .collect();
        let losses = match pretrain_step(
            &batch,
            &mut pair,
            &mut opt,
            lr,
            &settings,
            seed,
            step as u64,
        ) {
            Ok(l) => l,
            Err(e) if distill_non_finite(&e) => {
                return Err(diverged(out, step, e.to_string(), &log.last()))
            }
            Err(e) => return Err(e.into()),
        };
        if !losses.loss_total.is_finite() {
            return Err(diverged(out, step, "non-finite loss".into(), &losses));
        }
        let entry = PretrainLogEntry {
            step,
            lr,
            loss_csc: losses.loss_csc,
            loss_geo: losses.loss_geo,
            loss_total: losses.loss_total,
        };
        log_file.push(&entry)?;
        log.push(entry);
        if (step + 1) % cfg.pretrain.checkpoint_every == 0 && step + 1 < total {
            pretrain_checkpoint(cfg, &pair, step + 1).save(&checkpoint_path(out, step + 1))?;
        }
    }
    let checkpoint = pretrain_checkpoint(cfg, &pair, total);
    checkpoint.save(&checkpoint_path(out, total))?;
    Ok(PretrainRun { checkpoint, log })
}
