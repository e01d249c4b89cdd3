//! Frozen-feature probes and representation metrics.
//!
//! All probes work on L2-normalized features with Euclidean distance.
//! Features always come from the student applied to one scene at a time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, Propagation};
use crate::numerics::{AdamW, AdamWConfig, NumericsError, ParamStore, Tape, Tensor};
use crate::pointcloud::PointCloud;
use crate::spd::{prepare_sample, SpdError, TASK_PREFIX};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("k = {k} exceeds the {train} training points")]
    KTooLarge { k: usize, train: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("empty training set")]
    EmptyTrain,
    #[error("{features} feature rows for {labels} labels")]
    CountMismatch { features: usize, labels: usize },
    #[error("class {0} is absent from the training split")]
    ClassAbsent(u32),
    #[error("no class occurs in two different scenes")]
    NoSharedClass,
    #[error("malformed embedding file at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Spd(#[from] SpdError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Rows scaled to unit Euclidean norm; zero rows stay zero.
pub fn l2_normalize_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_rows(x: &Tensor, y: &[u32]) -> Result<(), EvalError> {
    if x.rows() != y.len() {
        return Err(EvalError::CountMismatch {
            features: x.rows(),
            labels: y.len(),
        });
    }
    Ok(())
}

/// k-nearest-neighbour label for one query. Majority vote; ties go to the
/// label with the smallest summed distance, then to the smallest label.
pub fn knn_predict(train_x: &Tensor, train_y: &[u32], query: &[f64], k: usize) -> u32 {
    let mut d: Vec<(f64, usize)> = (0..train_x.rows())
        .map(|i| (dist(train_x.row(i), query), i))
        .collect();
    d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
    for &(dd, i) in &d[..k] {
        let e = votes.entry(train_y[i]).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += dd;
    }
    let mut best: Option<(u32, usize, f64)> = None;
    for (&label, &(count, total)) in &votes {
        let better = match best {
            None => true,
            Some((_, bc, bt)) => count > bc || (count == bc && total < bt),
        };
        if better {
            best = Some((label, count, total));
        }
    }
    best.expect("k >= 1").0
}

pub fn knn_probe(
    train_x: &Tensor,
    train_y: &[u32],
    test_x: &Tensor,
    test_y: &[u32],
    k: usize,
) -> Result<f64, EvalError> {
    check_rows(train_x, train_y)?;
    check_rows(test_x, test_y)?;
    if train_y.is_empty() {
        return Err(EvalError::EmptyTrain);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if k > train_y.len() {
        return Err(EvalError::KTooLarge {
            k,
            train: train_y.len(),
        });
    }
    if test_y.is_empty() {
        return Ok(0.0);
    }
    let correct = (0..test_x.rows())
        .filter(|&i| knn_predict(train_x, train_y, test_x.row(i), k) == test_y[i])
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub accuracy: f64,
    /// `None` for classes absent from both prediction and truth.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn segmentation_metrics(pred: &[u32], truth: &[u32], classes: usize) -> SegmentationMetrics {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    let mut correct = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p as usize, t as usize);
        if p == t {
            correct += 1;
            inter[t] += 1;
            union[t] += 1;
        } else {
            if p < classes {
                union[p] += 1;
            }
            if t < classes {
                union[t] += 1;
            }
        }
    }
    let iou: Vec<Option<f64>> = (0..classes)
        .map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    SegmentationMetrics {
        accuracy: if truth.is_empty() {
            0.0
        } else {
            correct as f64 / truth.len() as f64
        },
        miou: if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        },
        iou,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            weight_decay: 0.0,
        }
    }
}

/// Trains a softmax linear layer on frozen features (full batch, AdamW from
/// zero weights) and scores the held-out split.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[u32],
    test_x: &Tensor,
    test_y: &[u32],
    classes: usize,
    opts: &ProbeOptions,
) -> Result<SegmentationMetrics, EvalError> {
    check_rows(train_x, train_y)?;
    check_rows(test_x, test_y)?;
    if train_y.is_empty() {
        return Err(EvalError::EmptyTrain);
    }
    let seen: BTreeSet<u32> = train_y.iter().copied().collect();
    if let Some(&c) = test_y.iter().find(|c| !seen.contains(c)) {
        return Err(EvalError::ClassAbsent(c));
    }
    let c = train_x.cols();
    let n = train_y.len();
    let mut onehot = vec![0.0; n * classes];
    for (i, &l) in train_y.iter().enumerate() {
        onehot[i * classes + l as usize] = 1.0;
    }
    let onehot = Tensor::new(vec![n, classes], onehot)?;
    let mut params = ParamStore::new();
    params.insert("probe.w", Tensor::zeros(&[c, classes]));
    params.insert("probe.b", Tensor::zeros(&[classes]));
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: opts.weight_decay,
        ..Default::default()
    });
    for _ in 0..opts.steps {
        let tape = Tape::new();
        let x = tape.constant(train_x.clone());
        let w = tape.param("probe.w", params.get("probe.w")?);
        let b = tape.param("probe.b", params.get("probe.b")?);
        let logp = x.matmul(w).add_row(b).softmax_rows().clamp_min(1e-12).log();
        let loss = (logp * tape.constant(onehot.clone()))
            .sum()
            .scale(-1.0 / n as f64);
        let grads = loss.backward()?;
        opt.step(&mut params, &grads, opts.lr)?;
    }
    let w = params.get("probe.w")?;
    let b = params.get("probe.b")?;
    let logits = test_x.matmul(w);
    let pred: Vec<u32> = (0..test_x.rows())
        .map(|r| argmax_biased(logits.row(r), b.data()))
        .collect();
    Ok(segmentation_metrics(&pred, test_y, classes))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Mean same-class cross-scene distance per class.
    pub per_class_intra: BTreeMap<u32, f64>,
    pub intra: f64,
    pub inter: f64,
    /// `intra / inter`; `None` when either side is degenerate.
    pub ratio: Option<f64>,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
}

/// Intra-class cross-scene versus inter-class mean feature distance.
/// `scenes[i]` and `labels[i]` describe row `i` of `features`.
pub fn consistency_metric(
    features: &Tensor,
    labels: &[u32],
    scenes: &[usize],
) -> Result<ConsistencyReport, EvalError> {
    check_rows(features, labels)?;
    let mut class_scenes: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for (&l, &s) in labels.iter().zip(scenes) {
        class_scenes.entry(l).or_default().insert(s);
    }
    if !class_scenes.values().any(|s| s.len() >= 2) {
        return Err(EvalError::NoSharedClass);
    }
    let mut per_class: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let (mut inter_sum, mut inter_n) = (0.0, 0usize);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let d = dist(features.row(i), features.row(j));
            if labels[i] == labels[j] {
                if scenes[i] != scenes[j] {
                    let e = per_class.entry(labels[i]).or_insert((0.0, 0));
                    e.0 += d;
                    e.1 += 1;
                }
            } else {
                inter_sum += d;
                inter_n += 1;
            }
        }
    }
    let intra_sum: f64 = per_class.values().map(|v| v.0).sum();
    let intra_n: usize = per_class.values().map(|v| v.1).sum();
    let intra = if intra_n > 0 {
        intra_sum / intra_n as f64
    } else {
        0.0
    };
    let inter = if inter_n > 0 {
        inter_sum / inter_n as f64
    } else {
        0.0
    };
    Ok(ConsistencyReport {
        per_class_intra: per_class
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect(),
        intra,
        inter,
        ratio: (intra_n > 0 && inter_n > 0 && inter > 0.0).then(|| intra / inter),
        intra_pairs: intra_n,
        inter_pairs: inter_n,
    })
}

/// Per-point features with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub scene_ids: Vec<String>,
    pub point_ids: Vec<usize>,
    pub labels: Vec<u32>,
    pub features: Tensor,
}

impl EmbeddingSet {
    pub fn empty(channels: usize) -> Self {
        Self {
            scene_ids: Vec::new(),
            point_ids: Vec::new(),
            labels: Vec::new(),
            features: Tensor::zeros(&[0, channels]),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let c = self.features.cols();
        let mut s = String::from("scene_id,point_id,label");
        for k in 0..c {
            write!(s, ",f_{k}").expect("string write");
        }
        s.push('\n');
        for i in 0..self.len() {
            write!(
                s,
                "{},{},{}",
                self.scene_ids[i], self.point_ids[i], self.labels[i]
            )
            .expect("string write");
            for v in self.features.row(i) {
                write!(s, ",{v:.16e}").expect("string write");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| EvalError::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[..3] != ["scene_id", "point_id", "label"] {
            return Err(EvalError::Parse {
                line: 1,
                msg: "unexpected header".into(),
            });
        }
        let c = cols.len() - 3;
        let mut set = Self::empty(c);
        let mut data = Vec::new();
        for (k, line) in lines.enumerate() {
            let bad = |msg: String| EvalError::Parse { line: k + 2, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != c + 3 {
                return Err(bad(format!("expected {} fields, found {}", c + 3, f.len())));
            }
            set.scene_ids.push(f[0].to_string());
            set.point_ids.push(
                f[1].parse()
                    .map_err(|_| bad(format!("bad point id `{}`", f[1])))?,
            );
            set.labels.push(
                f[2].parse()
                    .map_err(|_| bad(format!("bad label `{}`", f[2])))?,
            );
            for v in &f[3..] {
                data.push(
                    v.parse::<f64>()
                        .map_err(|_| bad(format!("bad value `{v}`")))?,
                );
            }
        }
        set.features = Tensor::new(vec![set.labels.len(), c], data)?;
        Ok(set)
    }
}

pub fn export_embeddings(set: &EmbeddingSet, path: &Path) -> Result<(), EvalError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, set.to_csv())?;
    Ok(())
}

/// Student embeddings of every scene: deterministic farthest-point
/// subsample from point 0, then per-sample inference over groups of
/// `group` scenes. Task predictions are returned when the store carries a
/// task head.
pub fn embed_scenes(
    student: &ParamStore,
    model: &BackboneConfig,
    scenes: &[PointCloud],
    target_points: usize,
    group: usize,
) -> Result<(EmbeddingSet, Option<Vec<u32>>), EvalError> {
    let mut set = EmbeddingSet::empty(model.c_out);
    let mut data = Vec::new();
    let head = match (
        student.get(&format!("{TASK_PREFIX}.w")),
        student.get(&format!("{TASK_PREFIX}.b")),
    ) {
        (Ok(w), Ok(b)) => Some((w, b)),
        _ => None,
    };
    let mut predictions = Vec::new();
    for chunk in scenes.chunks(group.max(1)) {
        let samples = chunk
            .iter()
            .map(|pc| prepare_sample(pc, target_points, 0))
            .collect::<Result<Vec<_>, _>>()?;
        let inputs: Vec<Tensor> = samples.iter().map(|s| s.coords.clone()).collect();
        let outputs = backbone::forward_values(student, model, &inputs, Propagation::PER_SAMPLE)
            .map_err(SpdError::from)?;
        for (sample, (_, features)) in samples.iter().zip(outputs) {
            if let Some((w, b)) = head {
                let logits = features.matmul(w);
                predictions
                    .extend((0..logits.rows()).map(|r| argmax_biased(logits.row(r), b.data())));
            }
            data.extend_from_slice(features.data());
            set.labels.extend(&sample.labels);
            set.point_ids.extend(0..sample.len());
            set.scene_ids
                .extend(std::iter::repeat_n(sample.scene_id.clone(), sample.len()));
        }
    }
    set.features = Tensor::new(vec![set.labels.len(), model.c_out], data)?;
    Ok((set, head.map(|_| predictions)))
}

fn argmax_biased(row: &[f64], bias: &[f64]) -> u32 {
    let mut best = 0;
    for k in 1..row.len() {
        if row[k] + bias[k] > row[best] + bias[best] {
            best = k;
        }
    }
    best as u32
}

/// Evenly strided subset of at most `per_group` rows per (scene, label).
pub fn subsample_groups(set: &EmbeddingSet, per_group: usize) -> Vec<usize> {
    let mut groups: BTreeMap<(&str, u32), Vec<usize>> = BTreeMap::new();
    for i in 0..set.len() {
        groups
            .entry((set.scene_ids[i].as_str(), set.labels[i]))
            .or_default()
            .push(i);
    }
    let mut out = Vec::new();
    for rows in groups.values() {
        let stride = rows.len().div_ceil(per_group.max(1)).max(1);
        out.extend(rows.iter().step_by(stride).take(per_group));
    }
    out.sort_unstable();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub target_points: usize,
    pub knn_k: usize,
    pub probe: ProbeOptions,
    pub consistency_per_group: usize,
    /// Scenes per inference call; results do not depend on it.
    pub group: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            target_points: 256,
            knn_k: 5,
            probe: ProbeOptions::default(),
            consistency_per_group: 24,
            group: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub acc_knn: f64,
    pub acc_linear: f64,
    pub miou: f64,
    /// Task-head accuracy on the test scenes, when a task head exists.
    pub acc_task: Option<f64>,
    pub consistency_ratio: Option<f64>,
    pub consistency: ConsistencyReport,
    pub per_class_iou: Vec<Option<f64>>,
}

fn select<'a>(set: &'a EmbeddingSet, rows: &[usize]) -> (Tensor, Vec<u32>, Vec<&'a str>) {
    let c = set.features.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(set.features.row(r));
    }
    (
        Tensor::new(vec![rows.len(), c], data).expect("shape"),
        rows.iter().map(|&r| set.labels[r]).collect(),
        rows.iter().map(|&r| set.scene_ids[r].as_str()).collect(),
    )
}

/// Consistency ratio of normalized student features over `scenes`, using
/// at most `opts.consistency_per_group` points per (scene, class).
pub fn scene_consistency(
    student: &ParamStore,
    model: &BackboneConfig,
    scenes: &[PointCloud],
    opts: &EvalOptions,
) -> Result<ConsistencyReport, EvalError> {
    let (set, _) = embed_scenes(student, model, scenes, opts.target_points, opts.group)?;
    consistency_of(&set, opts.consistency_per_group)
}

fn consistency_of(set: &EmbeddingSet, per_group: usize) -> Result<ConsistencyReport, EvalError> {
    let normalized = EmbeddingSet {
        features: l2_normalize_rows(&set.features),
        ..set.clone()
    };
    let rows = subsample_groups(&normalized, per_group);
    let (x, y, scene_names) = select(&normalized, &rows);
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    let scenes: Vec<usize> = scene_names
        .iter()
        .map(|s| {
            let next = index.len();
            *index.entry(s).or_insert(next)
        })
        .collect();
    consistency_metric(&x, &y, &scenes)
}

/// Probes trained on `train` scenes and scored on `test` scenes, plus the
/// consistency ratio over the test scenes.
pub fn evaluate(
    student: &ParamStore,
    model: &BackboneConfig,
    train: &[PointCloud],
    test: &[PointCloud],
    classes: usize,
    opts: &EvalOptions,
) -> Result<EvalSummary, EvalError> {
    let (tr, _) = embed_scenes(student, model, train, opts.target_points, opts.group)?;
    let (te, pred) = embed_scenes(student, model, test, opts.target_points, opts.group)?;
    let trx = l2_normalize_rows(&tr.features);
    let tex = l2_normalize_rows(&te.features);
    let acc_knn = knn_probe(&trx, &tr.labels, &tex, &te.labels, opts.knn_k.min(tr.len()))?;
    let lin = linear_probe(&trx, &tr.labels, &tex, &te.labels, classes, &opts.probe)?;
    let consistency = consistency_of(&te, opts.consistency_per_group)?;
    Ok(EvalSummary {
        acc_knn,
        acc_linear: lin.accuracy,
        miou: lin.miou,
        acc_task: pred.map(|p| segmentation_metrics(&p, &te.labels, classes).accuracy),
        consistency_ratio: consistency.ratio,
        consistency,
        per_class_iou: lin.iou,
    })
}
