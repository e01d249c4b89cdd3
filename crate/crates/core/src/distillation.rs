//! Self-distillation pretraining.
//!
//! Every view is mean-pooled, projected by a linear head to `K_proto`
//! logits and turned into a distribution with a temperature softmax; the
//! teacher additionally subtracts a running center. The consistency loss is
//! the cross-entropy between every teacher (global) view and every student
//! view of the same sample:
//!
//! `L = -1/(n(m+n)) sum_i sum_j p_i^t . log p_j^s`
//!
//! with `log` clamped at `1e-12`. Teacher parameters follow the student by
//! an exponential moving average.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, ModelError, Propagation};
use crate::geometry::{self, GeoSupervision, GeometryError};
use crate::numerics::{softmax_in_place, AdamW, NumericsError, ParamStore, Tape, Tensor, Var};
use crate::pointcloud::{
    augment, AugmentConfig, AugmentedViews, PointCloud, PointCloudError, ViewKind,
};
use crate::seeding;

pub const HEAD_PREFIX: &str = "head";
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("expected {expected} {what} distributions, got {found}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("distribution widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("student probability is exactly zero at view {view}, entry {entry}")]
    ZeroProbability { view: usize, entry: usize },
    #[error("EMA momentum must lie in [0, 1), got {0}")]
    Momentum(f64),
    #[error("teacher and student parameter layouts differ")]
    LayoutMismatch,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    PointCloud(#[from] PointCloudError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub k_proto: usize,
    pub tau_s: f64,
    pub tau_t: f64,
    pub gamma: f64,
    pub center_momentum: f64,
    /// Drop the `(i, i)` pairs where a teacher global and the student see the
    /// same view.
    pub exclude_same_view: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            k_proto: 64,
            tau_s: 0.1,
            tau_t: 0.04,
            gamma: 0.996,
            center_momentum: 0.9,
            exclude_same_view: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewDistribution {
    pub probs: Vec<f64>,
    pub kind: ViewKind,
    pub sample_id: usize,
}

/// Linear projection head `[C_f, K]`, `[K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub w: Tensor,
    pub b: Tensor,
}

impl Head {
    pub fn random<R: Rng + ?Sized>(c_f: usize, k: usize, rng: &mut R) -> Self {
        let n = Normal::new(0.0, 1.0 / (c_f as f64).sqrt()).expect("std");
        Self {
            w: Tensor::new(vec![c_f, k], (0..c_f * k).map(|_| n.sample(rng)).collect())
                .expect("shape"),
            b: Tensor::zeros(&[k]),
        }
    }

    pub fn from_params(params: &ParamStore) -> Result<Self, NumericsError> {
        Ok(Self {
            w: params.get(&format!("{HEAD_PREFIX}.w"))?.clone(),
            b: params.get(&format!("{HEAD_PREFIX}.b"))?.clone(),
        })
    }

    pub fn write_params(&self, params: &mut ParamStore) {
        params.insert(format!("{HEAD_PREFIX}.w"), self.w.clone());
        params.insert(format!("{HEAD_PREFIX}.b"), self.b.clone());
    }

    /// Logits of the mean-pooled features `[L, C_f]`.
    pub fn logits(&self, features: &Tensor) -> Vec<f64> {
        let (l, c) = (features.rows(), features.cols());
        let mut pooled = vec![0.0; c];
        for i in 0..l {
            for (p, v) in pooled.iter_mut().zip(features.row(i)) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= l as f64);
        let k = self.b.len();
        (0..k)
            .map(|j| self.b.data()[j] + (0..c).map(|i| pooled[i] * self.w.at(i, j)).sum::<f64>())
            .collect()
    }
}

fn tempered(logits: &[f64], tau: f64, center: Option<&[f64]>) -> Result<Vec<f64>, DistillError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(DistillError::Temperature(tau));
    }
    let mut z: Vec<f64> = match center {
        Some(c) => logits.iter().zip(c).map(|(l, c)| (l - c) / tau).collect(),
        None => logits.iter().map(|l| l / tau).collect(),
    };
    softmax_in_place(&mut z);
    Ok(z)
}

/// Mean-pool, project, optionally center, and softmax at temperature `tau`.
pub fn to_distribution(
    features: &Tensor,
    head: &Head,
    tau: f64,
    center: Option<&[f64]>,
    kind: ViewKind,
    sample_id: usize,
) -> Result<ViewDistribution, DistillError> {
    if features.cols() != head.w.rows() {
        return Err(ModelError::ChannelMismatch {
            expected: head.w.rows(),
            found: features.cols(),
        }
        .into());
    }
    Ok(ViewDistribution {
        probs: tempered(&head.logits(features), tau, center)?,
        kind,
        sample_id,
    })
}

fn check_counts(
    teacher: &[ViewDistribution],
    student: &[ViewDistribution],
) -> Result<(usize, usize), DistillError> {
    let n = teacher.len();
    if n == 0 {
        return Err(DistillError::CountMismatch {
            what: "teacher",
            expected: 1,
            found: 0,
        });
    }
    if student.len() < n {
        return Err(DistillError::CountMismatch {
            what: "student",
            expected: n,
            found: student.len(),
        });
    }
    let k = teacher[0].probs.len();
    for d in teacher.iter().chain(student) {
        if d.probs.len() != k {
            return Err(DistillError::WidthMismatch(k, d.probs.len()));
        }
    }
    Ok((n, student.len() - n))
}

/// Number of `(i, j)` pairs in the loss.
pub fn pair_count(n: usize, m: usize, exclude_same_view: bool) -> usize {
    if exclude_same_view {
        n * (m + n - 1)
    } else {
        n * (m + n)
    }
}

/// Consistency loss for one sample. `student` lists the `n` globals first
/// (in teacher order) followed by the `m` locals.
pub fn csc_loss(
    teacher: &[ViewDistribution],
    student: &[ViewDistribution],
    exclude_same_view: bool,
) -> Result<f64, DistillError> {
    csc_inner(teacher, student, exclude_same_view, Some(LOG_FLOOR))
}

/// [`csc_loss`] without the log floor; zero student probabilities are an
/// error.
pub fn csc_loss_unclamped(
    teacher: &[ViewDistribution],
    student: &[ViewDistribution],
    exclude_same_view: bool,
) -> Result<f64, DistillError> {
    csc_inner(teacher, student, exclude_same_view, None)
}

fn csc_inner(
    teacher: &[ViewDistribution],
    student: &[ViewDistribution],
    exclude_same_view: bool,
    floor: Option<f64>,
) -> Result<f64, DistillError> {
    let (n, m) = check_counts(teacher, student)?;
    let logs: Vec<Vec<f64>> = student
        .iter()
        .enumerate()
        .map(|(j, s)| {
            s.probs
                .iter()
                .enumerate()
                .map(|(k, &p)| match floor {
                    Some(f) => Ok(p.max(f).ln()),
                    None if p == 0.0 => Err(DistillError::ZeroProbability { view: j, entry: k }),
                    None => Ok(p.ln()),
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let mut total = 0.0;
    for (i, t) in teacher.iter().enumerate() {
        for (j, ls) in logs.iter().enumerate() {
            if exclude_same_view && i == j {
                continue;
            }
            total += t.probs.iter().zip(ls).map(|(p, l)| p * l).sum::<f64>();
        }
    }
    Ok(-total / pair_count(n, m, exclude_same_view) as f64)
}

/// Differentiable loss over a batch. `student_logp` is `[B (n+m), K]` in
/// sample-major view order (globals first within each sample) and
/// `teacher_probs` is `[B n, K]` in the same sample order. Returns the mean
/// of the per-sample losses.
pub fn csc_loss_tape<'t>(
    student_logp: Var<'t>,
    teacher_probs: &Tensor,
    n: usize,
    m: usize,
    exclude_same_view: bool,
) -> Var<'t> {
    let k = teacher_probs.cols();
    let batch = teacher_probs.rows() / n;
    let views = n + m;
    let mut weights = vec![0.0; batch * views * k];
    for b in 0..batch {
        let mut sum = vec![0.0; k];
        for i in 0..n {
            for (s, p) in sum.iter_mut().zip(teacher_probs.row(b * n + i)) {
                *s += p;
            }
        }
        for j in 0..views {
            let row = &mut weights[(b * views + j) * k..(b * views + j + 1) * k];
            row.copy_from_slice(&sum);
            if exclude_same_view && j < n {
                for (w, p) in row.iter_mut().zip(teacher_probs.row(b * n + j)) {
                    *w -= p;
                }
            }
        }
    }
    let norm = (pair_count(n, m, exclude_same_view) * batch) as f64;
    let w = student_logp
        .tape()
        .constant(Tensor::new(vec![batch * views, k], weights).expect("shape"));
    (student_logp * w).sum().scale(-1.0 / norm)
}

/// `teacher <- gamma teacher + (1 - gamma) student` for every parameter.
pub fn ema_update(
    teacher: &mut ParamStore,
    student: &ParamStore,
    gamma: f64,
) -> Result<(), DistillError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(DistillError::Momentum(gamma));
    }
    ema_blend(teacher, student, gamma)
}

/// EMA without the `gamma < 1` restriction; `gamma = 1` freezes the teacher.
pub(crate) fn ema_blend(
    teacher: &mut ParamStore,
    student: &ParamStore,
    gamma: f64,
) -> Result<(), DistillError> {
    if !teacher.same_layout(student) {
        return Err(DistillError::LayoutMismatch);
    }
    if gamma == 1.0 {
        return Ok(());
    }
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name)?;
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = gamma * *tv + (1.0 - gamma) * sv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudentPair {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub gamma: f64,
    pub center: Vec<f64>,
    pub center_momentum: f64,
}

impl TeacherStudentPair {
    /// Teacher starts as an exact copy of the student; the center at zero.
    pub fn new(student: ParamStore, cfg: &DistillConfig) -> Result<Self, DistillError> {
        if !(0.0..1.0).contains(&cfg.gamma) {
            return Err(DistillError::Momentum(cfg.gamma));
        }
        Ok(Self {
            teacher: student.clone(),
            student,
            gamma: cfg.gamma,
            center: vec![0.0; cfg.k_proto],
            center_momentum: cfg.center_momentum,
        })
    }

    pub fn ema_update(&mut self) -> Result<(), DistillError> {
        ema_update(&mut self.teacher, &self.student, self.gamma)
    }

    /// Moves the center toward the mean of a batch of teacher logits.
    pub fn update_center(&mut self, teacher_logits: &[Vec<f64>]) {
        if teacher_logits.is_empty() {
            return;
        }
        let inv = 1.0 / teacher_logits.len() as f64;
        for (k, c) in self.center.iter_mut().enumerate() {
            let mean: f64 = teacher_logits.iter().map(|l| l[k]).sum::<f64>() * inv;
            *c = self.center_momentum * *c + (1.0 - self.center_momentum) * mean;
        }
    }
}

/// Fresh student parameters: backbone, projection head and geometric
/// decoders.
pub fn init_student<R: Rng + ?Sized>(
    model: &BackboneConfig,
    distill: &DistillConfig,
    geo: &GeoSupervision,
    rng: &mut R,
) -> Result<ParamStore, DistillError> {
    let mut params = backbone::init_backbone(model, rng)?;
    Head::random(model.c_out, distill.k_proto, rng).write_params(&mut params);
    geometry::init_decoders(geo, model.channels, &mut params, rng);
    Ok(params)
}

/// Everything a pretraining step needs besides data and parameters.
#[derive(Clone, Debug)]
pub struct PretrainSettings {
    pub model: BackboneConfig,
    pub augment: AugmentConfig,
    pub distill: DistillConfig,
    pub geo: GeoSupervision,
    pub lambda_geo: f64,
    pub csp_enabled: bool,
    pub shuffle: bool,
}

impl PretrainSettings {
    /// Propagation mode of the backbone for one step.
    pub fn propagation(&self, seed: u64) -> Propagation {
        if self.csp_enabled {
            Propagation::cross_sample(self.shuffle.then_some(seed))
        } else {
            Propagation::PER_SAMPLE
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainLosses {
    pub loss_csc: f64,
    pub loss_geo: f64,
    pub loss_total: f64,
    pub teacher_views: usize,
    pub student_views: usize,
}

/// Augments every sample of a batch with its own derived stream.
pub fn augment_batch(
    batch: &[PointCloud],
    cfg: &AugmentConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<AugmentedViews>, DistillError> {
    batch
        .iter()
        .enumerate()
        .map(|(b, pc)| {
            Ok(augment(
                pc,
                cfg,
                &mut seeding::rng(seed, &[step, b as u64, seeding::AUGMENT]),
            )?)
        })
        .collect()
}

fn student_inputs(views: &[AugmentedViews]) -> (Vec<Tensor>, Tensor) {
    let mut inputs = Vec::new();
    let mut coords = Vec::new();
    for v in views {
        for view in v.all_views() {
            let flat = view.cloud.flat_coords();
            coords.extend_from_slice(&flat);
            inputs.push(Tensor::new(vec![view.cloud.len(), 3], flat).expect("shape"));
        }
    }
    let rows = coords.len() / 3;
    (inputs, Tensor::new(vec![rows, 3], coords).expect("shape"))
}

/// Teacher logits (before centering) and probabilities `[B n, K]` for the
/// global views.
pub fn teacher_targets(
    teacher: &ParamStore,
    center: &[f64],
    views: &[AugmentedViews],
    settings: &PretrainSettings,
    shuffle_seed: u64,
) -> Result<(Vec<Vec<f64>>, Tensor), DistillError> {
    let inputs: Vec<Tensor> = views
        .iter()
        .flat_map(|v| v.globals.iter())
        .map(|g| Tensor::new(vec![g.cloud.len(), 3], g.cloud.flat_coords()).expect("shape"))
        .collect();
    let head = Head::from_params(teacher)?;
    let per_view = backbone::forward_values(
        teacher,
        &settings.model,
        &inputs,
        settings.propagation(shuffle_seed),
    )?;
    let mut logits = Vec::with_capacity(per_view.len());
    let mut probs = Vec::with_capacity(per_view.len() * settings.distill.k_proto);
    for (_, feats) in &per_view {
        let l = head.logits(feats);
        probs.extend(tempered(&l, settings.distill.tau_t, Some(center))?);
        logits.push(l);
    }
    let k = head.b.len();
    Ok((
        logits,
        Tensor::new(vec![per_view.len(), k], probs).expect("shape"),
    ))
}

/// Pretraining objective `L_csc + lambda_geo L_geo` on the tape, given fixed
/// teacher probabilities. Returns `(total, csc, geo)`.
pub fn pretrain_objective<'t>(
    tape: &'t Tape,
    student: &ParamStore,
    views: &[AugmentedViews],
    teacher_probs: &Tensor,
    settings: &PretrainSettings,
    shuffle_seed: u64,
    geo_seed: u64,
) -> Result<(Var<'t>, Var<'t>, Var<'t>), DistillError> {
    let n = settings.augment.n_global;
    let m = settings.augment.n_local;
    let (inputs, coords) = student_inputs(views);
    let out = backbone::forward(
        tape,
        student,
        &settings.model,
        &inputs,
        settings.propagation(shuffle_seed),
    )?;
    let pooled = out.features.segment_mean(out.spans.clone());
    let w = tape.param(
        &format!("{HEAD_PREFIX}.w"),
        student.get(&format!("{HEAD_PREFIX}.w"))?,
    );
    let b = tape.param(
        &format!("{HEAD_PREFIX}.b"),
        student.get(&format!("{HEAD_PREFIX}.b"))?,
    );
    let logp = pooled
        .matmul(w)
        .add_row(b)
        .scale(1.0 / settings.distill.tau_s)
        .softmax_rows()
        .clamp_min(LOG_FLOOR)
        .log();
    let csc = csc_loss_tape(
        logp,
        teacher_probs,
        n,
        m,
        settings.distill.exclude_same_view,
    );
    let geo = if settings.lambda_geo != 0.0 {
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
        tape.constant(Tensor::scalar(0.0))
    };
    let total = csc + geo.scale(settings.lambda_geo);
    tape.check_finite()?;
    Ok((total, csc, geo))
}

/// One pretraining step on already augmented views: teacher targets on the
/// globals, student loss on every view, AdamW on the student, EMA on the
/// teacher, then the center update.
pub fn pretrain_step_views(
    views: &[AugmentedViews],
    pair: &mut TeacherStudentPair,
    optimizer: &mut AdamW,
    lr: f64,
    settings: &PretrainSettings,
    step_seed: u64,
) -> Result<PretrainLosses, DistillError> {
    if views.is_empty() {
        return Err(DistillError::EmptyBatch);
    }
    let shuffle_seed = seeding::derive(step_seed, &[seeding::SHUFFLE]);
    let geo_seed = seeding::derive(step_seed, &[seeding::GEO]);
    let (teacher_logits, teacher_probs) =
        teacher_targets(&pair.teacher, &pair.center, views, settings, shuffle_seed)?;
    let tape = Tape::new();
    let (total, csc, geo) = pretrain_objective(
        &tape,
        &pair.student,
        views,
        &teacher_probs,
        settings,
        shuffle_seed,
        geo_seed,
    )?;
    let grads = total.backward()?;
    let losses = PretrainLosses {
        loss_csc: csc.value().item(),
        loss_geo: geo.value().item(),
        loss_total: total.value().item(),
        teacher_views: teacher_probs.rows(),
        student_views: views.iter().map(|v| v.globals.len() + v.locals.len()).sum(),
    };
    optimizer.step(&mut pair.student, &grads, lr)?;
    pair.ema_update()?;
    pair.update_center(&teacher_logits);
    Ok(losses)
}

/// Augments `batch` and runs [`pretrain_step_views`].
pub fn pretrain_step(
    batch: &[PointCloud],
    pair: &mut TeacherStudentPair,
    optimizer: &mut AdamW,
    lr: f64,
    settings: &PretrainSettings,
    seed: u64,
    step: u64,
) -> Result<PretrainLosses, DistillError> {
    let views = augment_batch(batch, &settings.augment, seed, step)?;
    pretrain_step_views(
        views.as_slice(),
        pair,
        optimizer,
        lr,
        settings,
        seeding::derive(seed, &[step]),
    )
}

/// Row spans of `count` consecutive blocks of `len` rows.
pub fn uniform_spans(count: usize, len: usize) -> Vec<Range<usize>> {
    backbone::spans(std::iter::repeat_n(len, count))
}
