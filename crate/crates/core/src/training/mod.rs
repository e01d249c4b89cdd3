//! Configuration, checkpoints and the pretrain / finetune / ablation runs.
//!
//! A run directory holds `config.lock`, `checkpoints/step_<n>.ckpt`,
//! `logs/train.jsonl` and, for finetune runs, `logs/val.jsonl` and
//! `metrics/summary.json`. Everything written is a function of the config
//! and its seed.

mod ablation;
pub mod checkpoint;
pub mod config;
mod finetune;
mod grad_suite;
mod pretrain;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use ablation::{run_ablation, AblationMatrix, AblationReport, Arm, ArmSummary};
pub use checkpoint::{arch_hash, Checkpoint, CheckpointKind};
pub use config::{parse_override, ConfigError, ConfigErrors, TrainingConfig};
pub use finetune::{
    check_compatible, eval_options, run_finetune, FinetuneLogEntry, FinetuneRun, ValidationEntry,
};
pub use grad_suite::{grad_check_suite, toy_config, LossCheck};
pub use pretrain::{run_pretrain, PretrainLogEntry, PretrainRun};

use crate::backbone::{token_permutation, ModelError};
use crate::distillation::DistillError;
use crate::evaluation::EvalError;
use crate::numerics::NumericsError;
use crate::pointcloud::{self, generate_corpus, PointCloud, PointCloudError};
use crate::seeding;
use crate::spd::SpdError;

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("invalid configuration:\n{0}")]
    Config(#[from] ConfigErrors),
    #[error("corpus needs at least {need} scenes, found {found}")]
    CorpusTooSmall { need: usize, found: usize },
    #[error("checkpoint architecture {found} does not match the configured model {expected}")]
    IncompatibleCheckpoint { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {detail} (diagnostics in {dump})")]
    Diverged {
        step: usize,
        detail: String,
        dump: PathBuf,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    PointCloud(#[from] PointCloudError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Spd(#[from] SpdError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl TrainingError {
    /// True for problems with the inputs rather than the computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::CorpusTooSmall { .. } | Self::IncompatibleCheckpoint { .. }
        )
    }
}

/// Train and held-out scenes of one synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

impl Corpus {
    /// The last `test_scenes` scenes are held out.
    pub fn split(mut scenes: Vec<PointCloud>, test_scenes: usize) -> Result<Self, TrainingError> {
        if scenes.len() <= test_scenes {
            return Err(TrainingError::CorpusTooSmall {
                need: test_scenes + 1,
                found: scenes.len(),
            });
        }
        let test = scenes.split_off(scenes.len() - test_scenes);
        Ok(Self {
            train: scenes,
            test,
        })
    }

    pub fn all(&self) -> impl Iterator<Item = &PointCloud> {
        self.train.iter().chain(&self.test)
    }
}

/// Corpus seed used when none is given: derived from the run seed.
pub fn default_corpus_seed(cfg: &TrainingConfig) -> u64 {
    seeding::derive(cfg.run.seed, &[seeding::CORPUS])
}

pub fn build_corpus(cfg: &TrainingConfig, corpus_seed: u64) -> Result<Corpus, TrainingError> {
    let scenes = generate_corpus(&cfg.scene_spec(corpus_seed), cfg.corpus.scenes)?;
    Corpus::split(scenes, cfg.corpus.test_scenes)
}

/// Writes every scene as `scene_<i>.pcsp` (text format).
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), TrainingError> {
    fs::create_dir_all(dir)?;
    for (i, pc) in corpus.all().enumerate() {
        pointcloud::io::write(
            &dir.join(format!("scene_{i:04}.pcsp")),
            pc,
            pointcloud::io::Format::Text,
        )?;
    }
    Ok(())
}

/// Reads a directory written by [`write_corpus`], in file-name order.
pub fn read_corpus(dir: &Path, test_scenes: usize) -> Result<Corpus, TrainingError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "pcsp"));
    paths.sort();
    let scenes = paths
        .iter()
        .map(|p| pointcloud::io::read(p))
        .collect::<Result<Vec<_>, _>>()?;
    Corpus::split(scenes, test_scenes)
}

/// Scene indices for one step: consecutive slices of a fresh permutation
/// per epoch.
pub fn batch_indices(base: u64, step: usize, batch: usize, scenes: usize) -> Vec<usize> {
    (0..batch)
        .map(|b| {
            let k = step * batch + b;
            let perm =
                token_permutation(scenes, Some(seeding::derive(base, &[(k / scenes) as u64])));
            perm[k % scenes]
        })
        .collect()
}

pub fn write_lock(cfg: &TrainingConfig, out: &Path) -> Result<(), TrainingError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.lock"), cfg.to_text())?;
    Ok(())
}

pub fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step}.ckpt"))
}

pub(crate) struct JsonLines(fs::File);

impl JsonLines {
    pub(crate) fn create(path: &Path) -> Result<Self, TrainingError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(Self(fs::File::create(path)?))
    }

    pub(crate) fn push<T: Serialize>(&mut self, row: &T) -> Result<(), TrainingError> {
        let mut line = serde_json::to_vec(row).expect("log rows serialize");
        line.push(b'\n');
        self.0.write_all(&line)?;
        Ok(())
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainingError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `logs/diagnostic.json` and builds the matching error.
pub(crate) fn diverged<T: Serialize>(
    out: &Path,
    step: usize,
    detail: String,
    context: &T,
) -> TrainingError {
    let dump = out.join("logs").join("diagnostic.json");
    let body = serde_json::json!({ "step": step, "error": detail, "context": context });
    match write_json(&dump, &body) {
        Ok(()) => TrainingError::Diverged { step, detail, dump },
        Err(e) => e,
    }
}

fn numerics_non_finite(e: &NumericsError) -> bool {
    matches!(
        e,
        NumericsError::NonFinite { .. } | NumericsError::NonFiniteGradient { .. }
    )
}

fn model_non_finite(e: &ModelError) -> bool {
    match e {
        ModelError::NonFiniteState => true,
        ModelError::Numerics(n) => numerics_non_finite(n),
        _ => false,
    }
}

pub(crate) fn distill_non_finite(e: &DistillError) -> bool {
    match e {
        DistillError::Model(m) => model_non_finite(m),
        DistillError::Numerics(n) => numerics_non_finite(n),
        _ => false,
    }
}

pub(crate) fn spd_non_finite(e: &SpdError) -> bool {
    match e {
        SpdError::Model(m) => model_non_finite(m),
        SpdError::Distill(d) => distill_non_finite(d),
        SpdError::Numerics(n) => numerics_non_finite(n),
        _ => false,
    }
}
