use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pointcsp::evaluation::{embed_scenes, evaluate, export_embeddings};
use pointcsp::pointcloud::io::{self, Format};
use pointcsp::training::{
    build_corpus, check_compatible, default_corpus_seed, eval_options, grad_check_suite,
    parse_override, read_corpus, run_ablation, run_finetune, run_pretrain, write_lock,
    AblationMatrix, Checkpoint, ConfigErrors, Corpus, TrainingConfig, TrainingError,
};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "pointcsp",
    version,
    about = "Cross-sample state-space pretraining on synthetic point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    set: Vec<(String, String)>,
}

#[derive(Args)]
struct Source {
    /// Directory of `.pcsp` scenes written by `gen-corpus`.
    #[arg(long, conflicts_with = "corpus_seed")]
    corpus: Option<PathBuf>,
    /// Seed of the generated corpus; derived from the run seed by default.
    #[arg(long)]
    corpus_seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FileFormat {
    Text,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic labeled corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corpus_seed: Option<u64>,
        #[arg(long, value_enum, default_value = "text")]
        format: FileFormat,
    },
    /// Self-distillation pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised finetuning, optionally from a pretraining checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Four-arm component ablation plus the finetune batch-size sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        corpus_seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        sweep: Vec<usize>,
        /// Skips the batch-size sweep.
        #[arg(long, conflicts_with = "sweep")]
        no_sweep: bool,
        /// Runs the arms of each corpus seed concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Probes and consistency of a checkpoint's student.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-point student features as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss at toy sizes.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<TrainingError> for Failure {
    fn from(e: TrainingError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl Failure {
    fn at(self, path: &Path) -> Self {
        match self {
            Failure::Validation(m) => Failure::Validation(format!("{}: {m}", path.display())),
            Failure::Runtime(m) => Failure::Runtime(format!("{}: {m}", path.display())),
        }
    }
}

impl From<pointcsp::evaluation::EvalError> for Failure {
    fn from(e: pointcsp::evaluation::EvalError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<pointcsp::pointcloud::PointCloudError> for Failure {
    fn from(e: pointcsp::pointcloud::PointCloudError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn resolve(common: &Common) -> Result<TrainingConfig, Failure> {
    let located = |e: ConfigErrors| match &common.config {
        Some(p) => Failure::Validation(format!("{}:\n{e}", p.display())),
        None => Failure::Validation(e.to_string()),
    };
    let base = match &common.config {
        Some(p) => TrainingConfig::load(p).map_err(located)?,
        None => TrainingConfig::default(),
    };
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(("run.seed".into(), seed.to_string()));
    }
    let cfg = base.with_overrides(&overrides).map_err(located)?;
    cfg.validate().map_err(located)?;
    Ok(cfg)
}

fn load_corpus(cfg: &TrainingConfig, source: &Source) -> Result<Corpus, Failure> {
    Ok(match &source.corpus {
        Some(dir) => {
            read_corpus(dir, cfg.corpus.test_scenes).map_err(|e| Failure::from(e).at(dir))?
        }
        None => build_corpus(
            cfg,
            source
                .corpus_seed
                .unwrap_or_else(|| default_corpus_seed(cfg)),
        )?,
    })
}

fn load_checkpoint(cfg: &TrainingConfig, path: &Path) -> Result<Checkpoint, Failure> {
    let ckpt = Checkpoint::load(path).map_err(|e| Failure::from(e).at(path))?;
    check_compatible(cfg, &ckpt).map_err(|e| Failure::from(e).at(path))?;
    Ok(ckpt)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn run(command: Command) -> Result<bool, Failure> {
    match command {
        Command::GenCorpus {
            common,
            out,
            corpus_seed,
            format,
        } => {
            let cfg = resolve(&common)?;
            write_lock(&cfg, &out)?;
            let corpus = build_corpus(
                &cfg,
                corpus_seed.unwrap_or_else(|| default_corpus_seed(&cfg)),
            )?;
            let format = match format {
                FileFormat::Text => Format::Text,
                FileFormat::Binary => Format::Binary,
            };
            for (i, pc) in corpus.all().enumerate() {
                io::write(&out.join(format!("scene_{i:04}.pcsp")), pc, format)?;
            }
            println!(
                "wrote {} train and {} test scenes to {}",
                corpus.train.len(),
                corpus.test.len(),
                out.display()
            );
        }
        Command::Pretrain {
            common,
            source,
            out,
        } => {
            let cfg = resolve(&common)?;
            write_lock(&cfg, &out)?;
            let corpus = load_corpus(&cfg, &source)?;
            let run = run_pretrain(&cfg, &corpus.train, &out)?;
            if let (Some(first), Some(last)) = (run.log.first(), run.log.last()) {
                println!(
                    "loss {:.6} -> {:.6} over {} steps",
                    first.loss_total,
                    last.loss_total,
                    run.log.len()
                );
            }
            println!(
                "checkpoint at step {} in {}",
                run.checkpoint.step,
                out.display()
            );
        }
        Command::Finetune {
            common,
            source,
            checkpoint,
            out,
        } => {
            let cfg = resolve(&common)?;
            write_lock(&cfg, &out)?;
            let pretrained = checkpoint.map(|p| load_checkpoint(&cfg, &p)).transpose()?;
            let corpus = load_corpus(&cfg, &source)?;
            let run = run_finetune(&cfg, pretrained.as_ref(), &corpus.train, &corpus.test, &out)?;
            let s = &run.summary;
            println!("val_acc {:.4}", run.final_val_acc());
            println!(
                "acc_knn {:.4}  acc_linear {:.4}  miou {:.4}",
                s.acc_knn, s.acc_linear, s.miou
            );
            println!("consistency_ratio {}", opt(s.consistency_ratio));
        }
        Command::Ablate {
            common,
            out,
            corpus_seeds,
            sweep,
            no_sweep,
            parallel,
        } => {
            let cfg = resolve(&common)?;
            write_lock(&cfg, &out)?;
            let matrix = AblationMatrix {
                sweep_batch_sizes: if no_sweep { Vec::new() } else { sweep },
                ..AblationMatrix::four_arm(corpus_seeds)
            };
            matrix.validate().map_err(Failure::Validation)?;
            let report = run_ablation(&matrix, &cfg, &out, parallel)?;
            println!(
                "{:<12} {:<9} {:>8} {:>8} {:>8} {:>8}",
                "corpus", "arm", "knn", "linear", "miou", "ratio"
            );
            for r in &report.rows {
                println!(
                    "{:<12} {:<9} {:>8.4} {:>8.4} {:>8.4} {:>8}",
                    r.corpus_seed.unwrap_or_default(),
                    r.arm,
                    r.acc_knn,
                    r.acc_linear,
                    r.miou,
                    opt(r.consistency_ratio)
                );
            }
            for r in &report.sweep {
                println!(
                    "sweep bf={:<3} val_acc {:.4}  miou {:.4}",
                    r.batch_size, r.val_acc, r.miou
                );
            }
        }
        Command::Eval {
            common,
            source,
            checkpoint,
            out,
        } => {
            let cfg = resolve(&common)?;
            write_lock(&cfg, &out)?;
            let ckpt = load_checkpoint(&cfg, &checkpoint)?;
            let corpus = load_corpus(&cfg, &source)?;
            let opts = eval_options(&cfg);
            let s = evaluate(
                &ckpt.student,
                &cfg.model,
                &corpus.train,
                &corpus.test,
                cfg.corpus.classes as usize,
                &opts,
            )?;
            write_json(&out.join("metrics").join("eval.json"), &s)?;
            println!(
                "acc_knn {:.4}  acc_linear {:.4}  miou {:.4}",
                s.acc_knn, s.acc_linear, s.miou
            );
            if let Some(acc) = s.acc_task {
                println!("acc_task {acc:.4}");
            }
            println!("consistency_ratio {}", opt(s.consistency_ratio));
        }
        Command::ExportEmbeddings {
            common,
            source,
            checkpoint,
            split,
            out,
        } => {
            let cfg = resolve(&common)?;
            write_lock(&cfg, &out)?;
            let ckpt = load_checkpoint(&cfg, &checkpoint)?;
            let corpus = load_corpus(&cfg, &source)?;
            let scenes = match split {
                Split::Train => &corpus.train,
                Split::Test => &corpus.test,
            };
            let (set, _) = embed_scenes(
                &ckpt.student,
                &cfg.model,
                scenes,
                cfg.views.target_points,
                1,
            )?;
            let path = out.join("embeddings.csv");
            export_embeddings(&set, &path)?;
            println!("wrote {} embeddings to {}", set.len(), path.display());
        }
        Command::GradCheck { common, seeds, out } => {
            let cfg = resolve(&common)?;
            if let Some(out) = &out {
                write_lock(&cfg, out)?;
            }
            let seeds: Vec<u64> = (0..seeds).map(|i| cfg.run.seed.wrapping_add(i)).collect();
            let rows = grad_check_suite(&cfg, &seeds)?;
            println!(
                "{:<16} {:>6} {:>14}  status",
                "loss", "seeds", "max_rel_error"
            );
            for r in &rows {
                let status = if r.passes(GRAD_TOLERANCE) {
                    "ok"
                } else {
                    "FAIL"
                };
                println!(
                    "{:<16} {:>6} {:>14.3e}  {status}",
                    r.loss, r.seeds, r.max_rel_error
                );
            }
            if let Some(out) = &out {
                write_json(&out.join("metrics").join("grad_check.json"), &rows)?;
            }
            return Ok(rows.iter().all(|r| r.passes(GRAD_TOLERANCE)));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
