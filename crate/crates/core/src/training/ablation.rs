use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::{
    build_corpus, run_finetune, run_pretrain, write_json, Checkpoint, FinetuneRun, TrainingConfig,
    TrainingError,
};

/// One (csp, spd) combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Arm {
    pub csp_enabled: bool,
    pub spd_enabled: bool,
}

impl Arm {
    pub const BASELINE: Arm = Arm {
        csp_enabled: false,
        spd_enabled: false,
    };
    pub const CSP: Arm = Arm {
        csp_enabled: true,
        spd_enabled: false,
    };
    pub const SPD: Arm = Arm {
        csp_enabled: false,
        spd_enabled: true,
    };
    pub const FULL: Arm = Arm {
        csp_enabled: true,
        spd_enabled: true,
    };
    pub const ALL: [Arm; 4] = [Arm::BASELINE, Arm::CSP, Arm::SPD, Arm::FULL];

    pub fn name(self) -> &'static str {
        match (self.csp_enabled, self.spd_enabled) {
            (false, false) => "baseline",
            (true, false) => "csp",
            (false, true) => "spd",
            (true, true) => "full",
        }
    }

    pub fn apply(self, cfg: &TrainingConfig) -> TrainingConfig {
        let mut c = cfg.clone();
        c.pretrain.csp_enabled = self.csp_enabled;
        c.finetune.spd_enabled = self.spd_enabled;
        c
    }
}

/// Arms and corpus seeds of an ablation, plus the finetune batch sizes of
/// the full-model sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationMatrix {
    pub arms: Vec<Arm>,
    pub corpus_seeds: Vec<u64>,
    pub sweep_batch_sizes: Vec<usize>,
}

impl AblationMatrix {
    pub fn four_arm(corpus_seeds: Vec<u64>) -> Self {
        Self {
            arms: Arm::ALL.to_vec(),
            corpus_seeds,
            sweep_batch_sizes: vec![1, 2, 4, 8],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Some(missing) = Arm::ALL.iter().find(|a| !self.arms.contains(a)) {
            return Err(format!("ablation is missing the `{}` arm", missing.name()));
        }
        if self.corpus_seeds.is_empty() {
            return Err("ablation needs at least one corpus seed".into());
        }
        if self.sweep_batch_sizes.contains(&0) {
            return Err("sweep batch sizes must be at least 1".into());
        }
        Ok(())
    }
}

/// One row of `metrics/summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub seed: u64,
    pub corpus_seed: Option<u64>,
    pub csp_enabled: bool,
    pub spd_enabled: bool,
    pub batch_size: usize,
    pub acc_knn: f64,
    pub acc_linear: f64,
    pub miou: f64,
    pub consistency_ratio: Option<f64>,
    pub pretrain_consistency_ratio: Option<f64>,
    pub val_acc: f64,
    /// Linear-probe IoU per class; `null` for classes absent from the
    /// held-out scenes and predictions.
    pub per_class: BTreeMap<u32, Option<f64>>,
}

impl ArmSummary {
    pub fn new(
        arm: Arm,
        cfg: &TrainingConfig,
        corpus_seed: Option<u64>,
        run: &FinetuneRun,
    ) -> Self {
        Self {
            arm: arm.name().to_string(),
            seed: cfg.run.seed,
            corpus_seed,
            csp_enabled: arm.csp_enabled,
            spd_enabled: arm.spd_enabled,
            batch_size: cfg.finetune.batch_size,
            acc_knn: run.summary.acc_knn,
            acc_linear: run.summary.acc_linear,
            miou: run.summary.miou,
            consistency_ratio: run.summary.consistency_ratio,
            pretrain_consistency_ratio: run.pretrain_consistency_ratio,
            val_acc: run.final_val_acc(),
            per_class: run
                .summary
                .per_class_iou
                .iter()
                .enumerate()
                .map(|(k, v)| (k as u32, *v))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    /// One row per (corpus seed, arm), corpus-major.
    pub rows: Vec<ArmSummary>,
    /// Full-model rows for each sweep batch size, first corpus seed only.
    pub sweep: Vec<ArmSummary>,
}

impl AblationReport {
    pub fn row(&self, corpus_seed: u64, arm: Arm) -> Option<&ArmSummary> {
        self.rows
            .iter()
            .find(|r| r.corpus_seed == Some(corpus_seed) && r.arm == arm.name())
    }
}

type Job<'a> = (Arm, TrainingConfig, &'a Checkpoint, std::path::PathBuf);

fn run_jobs(
    jobs: Vec<Job<'_>>,
    train: &[crate::pointcloud::PointCloud],
    test: &[crate::pointcloud::PointCloud],
    parallel: bool,
) -> Result<Vec<(Arm, TrainingConfig, FinetuneRun)>, TrainingError> {
    let run = |(arm, cfg, ckpt, dir): Job<'_>| {
        run_finetune(&cfg, Some(ckpt), train, test, &dir).map(|r| (arm, cfg, r))
    };
    if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs.into_iter().map(|j| s.spawn(move || run(j))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        })
    } else {
        jobs.into_iter().map(run).collect()
    }
}

/// Pretrains once per CSP setting, finetunes every arm from the matching
/// checkpoint, then sweeps the full model's finetune batch size. Each run
/// gets its own directory under `out/corpus_<seed>/`; the combined table is
/// `out/metrics/ablation.json`.
pub fn run_ablation(
    matrix: &AblationMatrix,
    cfg: &TrainingConfig,
    out: &Path,
    parallel: bool,
) -> Result<AblationReport, TrainingError> {
    matrix.validate().map_err(|m| {
        TrainingError::Config(super::ConfigErrors(vec![super::ConfigError {
            line: 0,
            column: 0,
            message: m,
        }]))
    })?;
    cfg.validate()?;
    let mut report = AblationReport {
        rows: Vec::new(),
        sweep: Vec::new(),
    };
    for (ci, &corpus_seed) in matrix.corpus_seeds.iter().enumerate() {
        let corpus = build_corpus(cfg, corpus_seed)?;
        let dir = out.join(format!("corpus_{corpus_seed}"));
        let mut pretrained: BTreeMap<bool, Checkpoint> = BTreeMap::new();
        for csp in [false, true] {
            if matrix.arms.iter().any(|a| a.csp_enabled == csp) {
                let mut pcfg = cfg.clone();
                pcfg.pretrain.csp_enabled = csp;
                let name = if csp {
                    "pretrain_csp"
                } else {
                    "pretrain_per_sample"
                };
                pretrained.insert(
                    csp,
                    run_pretrain(&pcfg, &corpus.train, &dir.join(name))?.checkpoint,
                );
            }
        }
        let jobs: Vec<Job<'_>> = matrix
            .arms
            .iter()
            .map(|&arm| {
                (
                    arm,
                    arm.apply(cfg),
                    &pretrained[&arm.csp_enabled],
                    dir.join(arm.name()),
                )
            })
            .collect();
        for (arm, acfg, run) in run_jobs(jobs, &corpus.train, &corpus.test, parallel)? {
            let row = ArmSummary::new(arm, &acfg, Some(corpus_seed), &run);
            write_json(
                &dir.join(arm.name()).join("metrics").join("summary.json"),
                &row,
            )?;
            report.rows.push(row);
        }
        if ci == 0 && !matrix.sweep_batch_sizes.is_empty() {
            let full = Arm::FULL.apply(cfg);
            let jobs: Vec<Job<'_>> = matrix
                .sweep_batch_sizes
                .iter()
                .map(|&bf| {
                    let mut c = full.clone();
                    c.finetune.batch_size = bf;
                    (
                        Arm::FULL,
                        c,
                        &pretrained[&true],
                        dir.join("sweep").join(format!("bf_{bf}")),
                    )
                })
                .collect();
            for (arm, acfg, run) in run_jobs(jobs, &corpus.train, &corpus.test, parallel)? {
                let row = ArmSummary::new(arm, &acfg, Some(corpus_seed), &run);
                write_json(
                    &dir.join("sweep")
                        .join(format!("bf_{}", acfg.finetune.batch_size))
                        .join("metrics")
                        .join("summary.json"),
                    &row,
                )?;
                report.sweep.push(row);
            }
        }
    }
    write_json(&out.join("metrics").join("ablation.json"), &report)?;
    Ok(report)
}
