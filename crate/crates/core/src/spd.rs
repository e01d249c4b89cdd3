//! Finetuning with semantic-preservation distillation.
//!
//! The teacher sees the whole batch serialized through the cross-sample
//! state-space path; the student sees each sample on its own. The student
//! is trained on per-point cross-entropy plus a per-point MSE toward the
//! teacher's features and the geometric loss, and the teacher follows the
//! student by EMA. Only the student is used at inference.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, ModelError, Propagation};
use crate::distillation::{ema_blend, DistillError, LOG_FLOOR};
use crate::geometry::{self, GeoSupervision, GeometryError};
use crate::numerics::{AdamW, NumericsError, ParamStore, Tape, Tensor, Var};
use crate::pointcloud::{farthest_point_indices, normalize_coords, PointCloud, PointCloudError};
use crate::seeding;

pub const TASK_PREFIX: &str = "task";

#[derive(Debug, thiserror::Error)]
pub enum SpdError {
    #[error("feature shapes differ: student {student:?}, teacher {teacher:?}")]
    ShapeMismatch {
        student: Vec<usize>,
        teacher: Vec<usize>,
    },
    #[error("sample has no labels")]
    Unlabeled,
    #[error("label {label} outside [0, {classes})")]
    LabelRange { label: u32, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("finetune EMA momentum must lie in [0, 1], got {0}")]
    Momentum(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    PointCloud(#[from] PointCloudError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdConfig {
    pub lambda_spd: f64,
    pub lambda_geo: f64,
    pub gamma_ft: f64,
    pub spd_enabled: bool,
}

impl Default for SpdConfig {
    fn default() -> Self {
        Self {
            lambda_spd: 0.5,
            lambda_geo: 0.1,
            gamma_ft: 0.999,
            spd_enabled: true,
        }
    }
}

impl SpdConfig {
    /// Weight actually applied to the distillation term.
    pub fn effective_lambda_spd(&self) -> f64 {
        if self.spd_enabled {
            self.lambda_spd
        } else {
            0.0
        }
    }
}

/// Mean over points of the squared feature distance.
pub fn spd_loss(student: &Tensor, teacher: &Tensor) -> Result<f64, SpdError> {
    if student.shape() != teacher.shape() || student.shape().len() != 2 {
        return Err(SpdError::ShapeMismatch {
            student: student.shape().to_vec(),
            teacher: teacher.shape().to_vec(),
        });
    }
    let n = student.rows().max(1) as f64;
    Ok(student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(s, t)| (s - t) * (s - t))
        .sum::<f64>()
        / n)
}

/// Tape version of [`spd_loss`]; the teacher side is a constant.
pub fn spd_loss_tape<'t>(student: Var<'t>, teacher: &Tensor) -> Result<Var<'t>, SpdError> {
    let shape = student.shape();
    if shape != teacher.shape() || shape.len() != 2 {
        return Err(SpdError::ShapeMismatch {
            student: shape,
            teacher: teacher.shape().to_vec(),
        });
    }
    let t = student.tape().constant(teacher.clone());
    Ok((student - t)
        .square()
        .sum()
        .scale(1.0 / shape[0].max(1) as f64))
}

/// One labelled finetune input: normalized coordinates and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub coords: Tensor,
    pub labels: Vec<u32>,
    pub scene_id: String,
}

impl LabeledSample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Farthest-point subsample of `target` points starting at `seed_index`,
/// normalized to the unit ball.
pub fn prepare_sample(
    pc: &PointCloud,
    target: usize,
    seed_index: usize,
) -> Result<LabeledSample, SpdError> {
    let labels = pc.labels.as_ref().ok_or(SpdError::Unlabeled)?;
    let idx = farthest_point_indices(&pc.coords, target.min(pc.len()), seed_index)?;
    let picked: Vec<_> = idx.iter().map(|&i| pc.coords[i]).collect();
    let coords = normalize_coords(&picked);
    Ok(LabeledSample {
        coords: Tensor::new(
            vec![idx.len(), 3],
            coords.iter().flat_map(|p| p.iter().copied()).collect(),
        )
        .expect("shape"),
        labels: idx.iter().map(|&i| labels[i]).collect(),
        scene_id: pc.scene_id.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpdPair {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub gamma_ft: f64,
    pub lambda_spd: f64,
}

/// Finetune parameter store: the pretrained backbone and geometric decoders
/// (fresh ones where missing) plus a new per-point task head.
pub fn init_finetune_params<R: Rng + ?Sized>(
    pretrained: Option<&ParamStore>,
    model: &BackboneConfig,
    geo: &GeoSupervision,
    classes: usize,
    rng: &mut R,
) -> Result<ParamStore, SpdError> {
    let mut params = match pretrained {
        Some(p) => {
            let mut kept = p.filter_prefix(&format!("{}.", backbone::PREFIX));
            kept.merge(&p.filter_prefix(&format!("{}.", geometry::PREFIX)));
            kept
        }
        None => backbone::init_backbone(model, rng)?,
    };
    for l in &geo.layers {
        if geometry::Decoder::from_params(&params, l.layer).is_err() {
            geometry::Decoder::random(model.channels, rng).write_params(&mut params, l.layer);
        }
    }
    let n = Normal::new(0.0, 1.0 / (model.c_out as f64).sqrt()).expect("std");
    params.insert(
        format!("{TASK_PREFIX}.w"),
        Tensor::new(
            vec![model.c_out, classes],
            (0..model.c_out * classes).map(|_| n.sample(rng)).collect(),
        )
        .expect("shape"),
    );
    params.insert(format!("{TASK_PREFIX}.b"), Tensor::zeros(&[classes]));
    Ok(params)
}

impl SpdPair {
    /// Teacher and student both start as exact copies of `params`.
    pub fn new(params: ParamStore, cfg: &SpdConfig) -> Result<Self, SpdError> {
        if !(0.0..=1.0).contains(&cfg.gamma_ft) {
            return Err(SpdError::Momentum(cfg.gamma_ft));
        }
        Ok(Self {
            teacher: params.clone(),
            student: params,
            gamma_ft: cfg.gamma_ft,
            lambda_spd: cfg.effective_lambda_spd(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneSettings {
    pub model: BackboneConfig,
    pub geo: GeoSupervision,
    pub spd: SpdConfig,
    pub classes: usize,
    /// Teacher runs on the serialized batch; otherwise per sample.
    pub csp_enabled: bool,
    pub shuffle: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneLosses {
    pub loss_task: f64,
    pub loss_spd: f64,
    pub loss_geo: f64,
    pub loss_total: f64,
    pub train_acc: f64,
}

fn check_labels(samples: &[LabeledSample], classes: usize) -> Result<(), SpdError> {
    if samples.is_empty() {
        return Err(SpdError::EmptyBatch);
    }
    for s in samples {
        if let Some(&label) = s.labels.iter().find(|&&l| l as usize >= classes) {
            return Err(SpdError::LabelRange { label, classes });
        }
    }
    Ok(())
}

/// Teacher features `[sum L, C_f]` for the whole batch.
pub fn teacher_features(
    teacher: &ParamStore,
    model: &BackboneConfig,
    samples: &[LabeledSample],
    propagation: Propagation,
) -> Result<Tensor, SpdError> {
    let inputs: Vec<Tensor> = samples.iter().map(|s| s.coords.clone()).collect();
    let out = backbone::forward_values(teacher, model, &inputs, propagation)?;
    let c = model.c_out;
    let rows: usize = samples.iter().map(|s| s.len()).sum();
    Ok(Tensor::new(
        vec![rows, c],
        out.into_iter().flat_map(|(_, f)| f.into_data()).collect(),
    )
    .expect("shape"))
}

/// Finetune objective on the tape. `teacher` is `None` when the
/// distillation term is disabled. Returns `(total, task, spd, geo, logits)`.
#[allow(clippy::type_complexity)]
pub fn finetune_objective<'t>(
    tape: &'t Tape,
    student: &ParamStore,
    samples: &[LabeledSample],
    teacher: Option<&Tensor>,
    settings: &FinetuneSettings,
    geo_seed: u64,
) -> Result<(Var<'t>, Var<'t>, Var<'t>, Var<'t>, Var<'t>), SpdError> {
    check_labels(samples, settings.classes)?;
    let inputs: Vec<Tensor> = samples.iter().map(|s| s.coords.clone()).collect();
    let out = backbone::forward(
        tape,
        student,
        &settings.model,
        &inputs,
        Propagation::PER_SAMPLE,
    )?;
    let w = tape.param(
        &format!("{TASK_PREFIX}.w"),
        student.get(&format!("{TASK_PREFIX}.w"))?,
    );
    let b = tape.param(
        &format!("{TASK_PREFIX}.b"),
        student.get(&format!("{TASK_PREFIX}.b"))?,
    );
    let logits = out.features.matmul(w).add_row(b);
    let n: usize = samples.iter().map(|s| s.len()).sum();
    let mut onehot = vec![0.0; n * settings.classes];
    for (r, &l) in samples.iter().flat_map(|s| s.labels.iter()).enumerate() {
        onehot[r * settings.classes + l as usize] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(vec![n, settings.classes], onehot).expect("shape"));
    let task = (logits.softmax_rows().clamp_min(LOG_FLOOR).log() * onehot)
        .sum()
        .scale(-1.0 / n as f64);
    let zero = || tape.constant(Tensor::scalar(0.0));
    let lambda_spd = settings.spd.effective_lambda_spd();
    let spd = match teacher {
        Some(t) if lambda_spd != 0.0 => spd_loss_tape(out.features, t)?,
        _ => zero(),
    };
    let geo = if settings.spd.lambda_geo != 0.0 {
        let coords = Tensor::new(
            vec![n, 3],
            samples
                .iter()
                .flat_map(|s| s.coords.data().iter().copied())
                .collect(),
        )
        .expect("shape");
        let mut rng = seeding::rng(geo_seed, &[]);
        geometry::geo_loss_tape(
            tape,
            student,
            &settings.geo,
            &out.taps,
            &coords,
            &out.spans,
            &mut rng,
        )?
    } else {
        zero()
    };
    let total = task + spd.scale(lambda_spd) + geo.scale(settings.spd.lambda_geo);
    tape.check_finite()?;
    Ok((total, task, spd, geo, logits))
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// One finetune step: teacher features (when distillation is on), student
/// loss, AdamW on the student, EMA on the teacher.
pub fn finetune_step(
    samples: &[LabeledSample],
    pair: &mut SpdPair,
    optimizer: &mut AdamW,
    lr: f64,
    settings: &FinetuneSettings,
    step_seed: u64,
) -> Result<FinetuneLosses, SpdError> {
    let use_teacher = settings.spd.effective_lambda_spd() != 0.0;
    let propagation = if settings.csp_enabled {
        Propagation::cross_sample(
            settings
                .shuffle
                .then(|| seeding::derive(step_seed, &[seeding::SHUFFLE])),
        )
    } else {
        Propagation::PER_SAMPLE
    };
    let teacher = if use_teacher {
        Some(teacher_features(
            &pair.teacher,
            &settings.model,
            samples,
            propagation,
        )?)
    } else {
        None
    };
    let tape = Tape::new();
    let (total, task, spd, geo, logits) = finetune_objective(
        &tape,
        &pair.student,
        samples,
        teacher.as_ref(),
        settings,
        seeding::derive(step_seed, &[seeding::GEO]),
    )?;
    let grads = total.backward()?;
    let logits = logits.value();
    let labels: Vec<u32> = samples
        .iter()
        .flat_map(|s| s.labels.iter().copied())
        .collect();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &l)| argmax(logits.row(*r)) == l)
        .count();
    let losses = FinetuneLosses {
        loss_task: task.value().item(),
        loss_spd: spd.value().item(),
        loss_geo: geo.value().item(),
        loss_total: total.value().item(),
        train_acc: correct as f64 / labels.len() as f64,
    };
    optimizer.step(&mut pair.student, &grads, lr)?;
    if use_teacher {
        ema_blend(&mut pair.teacher, &pair.student, pair.gamma_ft)?;
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub features: Tensor,
    pub predictions: Vec<u32>,
}

/// Student features and task predictions for one sample, computed with no
/// other sample present.
pub fn student_infer(
    student: &ParamStore,
    model: &BackboneConfig,
    coords: &Tensor,
) -> Result<Inference, SpdError> {
    let features = backbone::infer(student, model, coords)?;
    let w = student.get(&format!("{TASK_PREFIX}.w"))?;
    let b = student.get(&format!("{TASK_PREFIX}.b"))?;
    let logits = features.matmul(w);
    let predictions = (0..logits.rows())
        .map(|r| {
            let row: Vec<f64> = logits
                .row(r)
                .iter()
                .zip(b.data())
                .map(|(v, b)| v + b)
                .collect();
            argmax(&row)
        })
        .collect();
    Ok(Inference {
        features,
        predictions,
    })
}
