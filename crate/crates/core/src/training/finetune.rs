use std::path::Path;

use rand::Rng;
use serde::Serialize;

use super::{
    ablation::{Arm, ArmSummary},
    arch_hash, batch_indices, checkpoint_path, diverged, spd_non_finite, write_json, write_lock,
    Checkpoint, CheckpointKind, JsonLines, TrainingConfig, TrainingError,
};
use crate::backbone::init_backbone;
use crate::evaluation::{
    embed_scenes, evaluate, scene_consistency, segmentation_metrics, EvalOptions, EvalSummary,
    ProbeOptions,
};
use crate::numerics::{AdamW, ParamStore};
use crate::pointcloud::PointCloud;
use crate::seeding;
use crate::spd::{finetune_step, init_finetune_params, prepare_sample, SpdPair};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneLogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss_task: f64,
    pub loss_spd: f64,
    pub loss_geo: f64,
    pub loss_total: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationEntry {
    pub step: usize,
    pub val_acc: f64,
    pub val_miou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<FinetuneLogEntry>,
    pub validation: Vec<ValidationEntry>,
    pub summary: EvalSummary,
    /// Consistency ratio of the pretrained backbone on the validation
    /// scenes, before any finetuning.
    pub pretrain_consistency_ratio: Option<f64>,
}

impl FinetuneRun {
    pub fn final_val_acc(&self) -> f64 {
        self.validation.last().map_or(0.0, |v| v.val_acc)
    }
}

/// Evaluation settings taken from the `eval` section.
pub fn eval_options(cfg: &TrainingConfig) -> EvalOptions {
    EvalOptions {
        target_points: cfg.views.target_points,
        knn_k: cfg.eval.knn_k,
        probe: ProbeOptions {
            steps: cfg.eval.probe_steps,
            lr: cfg.eval.probe_lr,
            weight_decay: 0.0,
        },
        consistency_per_group: cfg.eval.consistency_per_group,
        group: 1,
    }
}

/// Task accuracy and mIoU of the student on whole validation scenes.
pub(crate) fn validate(
    cfg: &TrainingConfig,
    student: &ParamStore,
    val: &[PointCloud],
    step: usize,
) -> Result<ValidationEntry, TrainingError> {
    let (set, pred) = embed_scenes(student, &cfg.model, val, cfg.views.target_points, 1)?;
    let m = segmentation_metrics(
        &pred.unwrap_or_default(),
        &set.labels,
        cfg.corpus.classes as usize,
    );
    Ok(ValidationEntry {
        step,
        val_acc: m.accuracy,
        val_miou: m.miou,
    })
}

/// Fails unless `ckpt` holds a backbone of the configured shape.
pub fn check_compatible(cfg: &TrainingConfig, ckpt: &Checkpoint) -> Result<(), TrainingError> {
    let expected = arch_hash(&init_backbone(&cfg.model, &mut seeding::rng(0, &[]))?);
    let stored = arch_hash(&ckpt.student);
    if stored != ckpt.arch_hash {
        return Err(TrainingError::Checkpoint(format!(
            "recorded architecture {} differs from the stored tensors {stored}",
            ckpt.arch_hash
        )));
    }
    if ckpt.arch_hash != expected {
        return Err(TrainingError::IncompatibleCheckpoint {
            expected,
            found: ckpt.arch_hash.clone(),
        });
    }
    Ok(())
}

/// Supervised finetuning on labeled scenes, from a pretrained checkpoint or
/// from scratch, followed by the full evaluation on `val`.
pub fn run_finetune(
    cfg: &TrainingConfig,
    pretrained: Option<&Checkpoint>,
    train: &[PointCloud],
    val: &[PointCloud],
    out: &Path,
) -> Result<FinetuneRun, TrainingError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainingError::CorpusTooSmall {
            need: 1,
            found: train.len().min(val.len()),
        });
    }
    if let Some(ckpt) = pretrained {
        check_compatible(cfg, ckpt)?;
    }
    write_lock(cfg, out)?;
    let settings = cfg.finetune_settings();
    let seed = cfg.run.seed;
    let opts = eval_options(cfg);
    let pretrain_consistency_ratio = match pretrained {
        Some(c) => scene_consistency(&c.student, &cfg.model, val, &opts)?.ratio,
        None => None,
    };
    let params = init_finetune_params(
        pretrained.map(|c| &c.student),
        &settings.model,
        &settings.geo,
        settings.classes,
        &mut seeding::rng(seed, &[seeding::FINETUNE, seeding::INIT]),
    )?;
    let mut pair = SpdPair::new(params, &settings.spd)?;
    let mut opt = AdamW::new(cfg.adamw());
    let total = cfg.finetune.total_steps;
    let schedule = cfg.schedule(total);
    schedule.validate()?;
    let batch_base = seeding::derive(seed, &[seeding::FINETUNE, seeding::BATCH]);
    let mut log_file = JsonLines::create(&out.join("logs").join("train.jsonl"))?;
    let mut val_file = JsonLines::create(&out.join("logs").join("val.jsonl"))?;
    let mut log = Vec::with_capacity(total);
    let mut validation = Vec::new();
    for step in 0..total {
        let lr = schedule.lr_at(step)?;
        let samples = batch_indices(batch_base, step, cfg.finetune.batch_size, train.len())
            .into_iter()
            .enumerate()
            .map(|(b, i)| {
                let pc = &train[i];
                let start = seeding::rng(
                    seed,
                    &[seeding::FINETUNE, step as u64, b as u64, seeding::AUGMENT],
                )
                .random_range(0..pc.len());
                prepare_sample(pc, cfg.views.target_points, start)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let step_seed = seeding::derive(seed, &[seeding::FINETUNE, step as u64]);
        let losses = match finetune_step(&samples, &mut pair, &mut opt, lr, &settings, step_seed) {
            Ok(l) => l,
            Err(e) if spd_non_finite(&e) => {
                return Err(diverged(out, step, e.to_string(), &log.last()))
            }
            Err(e) => return Err(e.into()),
        };
        if !losses.loss_total.is_finite() {
            return Err(diverged(out, step, "non-finite loss".into(), &losses));
        }
        let entry = FinetuneLogEntry {
            step,
            lr,
            loss_task: losses.loss_task,
            loss_spd: losses.loss_spd,
            loss_geo: losses.loss_geo,
            loss_total: losses.loss_total,
            train_acc: losses.train_acc,
        };
        log_file.push(&entry)?;
        log.push(entry);
        if (step + 1) % cfg.finetune.eval_every == 0 && step + 1 < total {
            let v = validate(cfg, &pair.student, val, step + 1)?;
            val_file.push(&v)?;
            validation.push(v);
        }
    }
    let v = validate(cfg, &pair.student, val, total)?;
    val_file.push(&v)?;
    validation.push(v);

    let checkpoint = Checkpoint {
        kind: CheckpointKind::Finetune,
        step: total,
        config_text: cfg.to_text(),
        config_hash: cfg.hash(),
        arch_hash: arch_hash(&pair.student),
        student: pair.student.clone(),
        teacher: pair.teacher.clone(),
        state: ParamStore::new(),
    };
    checkpoint.save(&checkpoint_path(out, total))?;
    let summary = evaluate(
        &pair.student,
        &cfg.model,
        train,
        val,
        settings.classes,
        &opts,
    )?;
    let run = FinetuneRun {
        checkpoint,
        log,
        validation,
        summary,
        pretrain_consistency_ratio,
    };
    let arm = Arm {
        csp_enabled: cfg.pretrain.csp_enabled,
        spd_enabled: cfg.finetune.spd_enabled,
    };
    write_json(
        &out.join("metrics").join("summary.json"),
        &ArmSummary::new(arm, cfg, None, &run),
    )?;
    Ok(run)
}
