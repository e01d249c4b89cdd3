//! Flat `section.key = value` configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys, repeated
//! keys, malformed values and out-of-range values are all errors, reported
//! with 1-based line and column. Keys absent from the file keep their
//! defaults. [`TrainingConfig::to_text`] renders every key and is what
//! `config.lock` contains; parsing it back gives the same config.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, SsmVariant};
use crate::distillation::{DistillConfig, PretrainSettings};
use crate::geometry::{GeoLayer, GeoSupervision};
use crate::numerics::{AdamWConfig, LrSchedule, Transition};
use crate::pointcloud::{AugmentConfig, SceneSpec};
use crate::spd::{FinetuneSettings, SpdConfig};

/// One located configuration problem. Line 0 means the value did not come
/// from a file (a default or an override).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(
                f,
                "line {}, column {}: {}",
                self.line, self.column, self.message
            )
        }
    }
}

/// Every problem found, sorted by position.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl ConfigErrors {
    pub fn first(&self) -> &ConfigError {
        &self.0[0]
    }
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

trait ConfigValue: Sized {
    fn parse_value(raw: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for usize {
    fn parse_value(raw: &str) -> Result<Self, String> {
        raw.parse()
            .map_err(|_| format!("expected a non-negative integer, found `{raw}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(raw: &str) -> Result<Self, String> {
        raw.parse()
            .map_err(|_| format!("expected a non-negative integer, found `{raw}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u32 {
    fn parse_value(raw: &str) -> Result<Self, String> {
        raw.parse()
            .map_err(|_| format!("expected a non-negative integer, found `{raw}`"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    fn parse_value(raw: &str) -> Result<Self, String> {
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("expected a finite number, found `{raw}`")),
        }
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    fn parse_value(raw: &str) -> Result<Self, String> {
        match raw {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("expected `true` or `false`, found `{raw}`")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Vec<f64> {
    fn parse_value(raw: &str) -> Result<Self, String> {
        raw.split(',').map(|p| f64::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter()
            .map(|v| v.render())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl ConfigValue for SsmVariant {
    fn parse_value(raw: &str) -> Result<Self, String> {
        match raw {
            "static" => Ok(SsmVariant::Static),
            "gated" => Ok(SsmVariant::Selective),
            _ => Err(format!("expected `static` or `gated`, found `{raw}`")),
        }
    }
    fn render(&self) -> String {
        self.as_str().to_string()
    }
}

impl ConfigValue for Transition {
    fn parse_value(raw: &str) -> Result<Self, String> {
        match raw {
            "identity" => Ok(Transition::Identity),
            "gated_tanh" => Ok(Transition::GatedTanh),
            _ => Err(format!(
                "expected `identity` or `gated_tanh`, found `{raw}`"
            )),
        }
    }
    fn render(&self) -> String {
        match self {
            Transition::Identity => "identity",
            Transition::GatedTanh => "gated_tanh",
        }
        .to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSection {
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusSection {
    pub scenes: usize,
    pub test_scenes: usize,
    pub classes: u32,
    pub objects_per_scene: usize,
    pub points_per_object: usize,
    pub noise_sigma: f64,
    pub room_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewsSection {
    pub n_global: usize,
    pub n_local: usize,
    pub target_points: usize,
    pub candidate_ratio: f64,
    pub global_min: f64,
    pub global_max: f64,
    pub local_min: f64,
    pub local_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeoSection {
    pub samples: usize,
    /// One weight per tapped layer.
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimSection {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainSection {
    pub batch_size: usize,
    pub total_steps: usize,
    pub checkpoint_every: usize,
    pub lambda_geo: f64,
    pub csp_enabled: bool,
    pub shuffle: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneSection {
    pub batch_size: usize,
    pub total_steps: usize,
    pub eval_every: usize,
    pub lambda_spd: f64,
    pub lambda_geo: f64,
    pub gamma_ft: f64,
    pub spd_enabled: bool,
    pub shuffle: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSection {
    pub knn_k: usize,
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub consistency_per_group: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingConfig {
    pub run: RunSection,
    pub corpus: CorpusSection,
    pub model: BackboneConfig,
    pub views: ViewsSection,
    pub distill: DistillConfig,
    pub geo: GeoSection,
    pub optim: OptimSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let model = BackboneConfig::default();
        let depth = model.depth();
        Self {
            run: RunSection { seed: 0 },
            corpus: CorpusSection {
                scenes: 16,
                test_scenes: 4,
                classes: 6,
                objects_per_scene: 4,
                points_per_object: 300,
                noise_sigma: 0.005,
                room_size: 4.0,
            },
            model,
            views: ViewsSection {
                n_global: 2,
                n_local: 8,
                target_points: 256,
                candidate_ratio: 0.6,
                global_min: 0.4,
                global_max: 0.8,
                local_min: 0.1,
                local_max: 0.3,
            },
            distill: DistillConfig::default(),
            geo: GeoSection {
                samples: 64,
                alpha: vec![1.0 / depth as f64; depth],
            },
            optim: OptimSection {
                lr_max: 1e-3,
                lr_min: 0.0,
                warmup_fraction: 0.05,
                weight_decay: 0.05,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            pretrain: PretrainSection {
                batch_size: 4,
                total_steps: 500,
                checkpoint_every: 100,
                lambda_geo: 0.1,
                csp_enabled: true,
                shuffle: true,
            },
            finetune: FinetuneSection {
                batch_size: 4,
                total_steps: 300,
                eval_every: 50,
                lambda_spd: 0.5,
                lambda_geo: 0.1,
                gamma_ft: 0.999,
                spd_enabled: true,
                shuffle: true,
            },
            eval: EvalSection {
                knn_k: 5,
                probe_steps: 300,
                probe_lr: 0.05,
                consistency_per_group: 24,
            },
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $sec:ident . $field:ident),* $(,)?) => {
        /// Every accepted key, in `config.lock` order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl TrainingConfig {
            fn set_raw(&mut self, key: &str, raw: &str) -> Result<(), String> {
                match key {
                    $($key => self.$sec.$field = ConfigValue::parse_value(raw)?,)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            fn get_raw(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$sec.$field.render()),)*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "run.seed" => run.seed,
    "corpus.scenes" => corpus.scenes,
    "corpus.test_scenes" => corpus.test_scenes,
    "corpus.classes" => corpus.classes,
    "corpus.objects_per_scene" => corpus.objects_per_scene,
    "corpus.points_per_object" => corpus.points_per_object,
    "corpus.noise_sigma" => corpus.noise_sigma,
    "corpus.room_size" => corpus.room_size,
    "model.c_in" => model.c_in,
    "model.channels" => model.channels,
    "model.c_out" => model.c_out,
    "model.state_width" => model.state_width,
    "model.ssm_variant" => model.ssm_variant,
    "model.transition" => model.transition,
    "views.n_global" => views.n_global,
    "views.n_local" => views.n_local,
    "views.target_points" => views.target_points,
    "views.candidate_ratio" => views.candidate_ratio,
    "views.global_min" => views.global_min,
    "views.global_max" => views.global_max,
    "views.local_min" => views.local_min,
    "views.local_max" => views.local_max,
    "distill.k_proto" => distill.k_proto,
    "distill.tau_s" => distill.tau_s,
    "distill.tau_t" => distill.tau_t,
    "distill.gamma" => distill.gamma,
    "distill.center_momentum" => distill.center_momentum,
    "distill.exclude_same_view" => distill.exclude_same_view,
    "geo.samples" => geo.samples,
    "geo.alpha" => geo.alpha,
    "optim.lr_max" => optim.lr_max,
    "optim.lr_min" => optim.lr_min,
    "optim.warmup_fraction" => optim.warmup_fraction,
    "optim.weight_decay" => optim.weight_decay,
    "optim.beta1" => optim.beta1,
    "optim.beta2" => optim.beta2,
    "optim.eps" => optim.eps,
    "pretrain.batch_size" => pretrain.batch_size,
    "pretrain.total_steps" => pretrain.total_steps,
    "pretrain.checkpoint_every" => pretrain.checkpoint_every,
    "pretrain.lambda_geo" => pretrain.lambda_geo,
    "pretrain.csp_enabled" => pretrain.csp_enabled,
    "pretrain.shuffle" => pretrain.shuffle,
    "finetune.batch_size" => finetune.batch_size,
    "finetune.total_steps" => finetune.total_steps,
    "finetune.eval_every" => finetune.eval_every,
    "finetune.lambda_spd" => finetune.lambda_spd,
    "finetune.lambda_geo" => finetune.lambda_geo,
    "finetune.gamma_ft" => finetune.gamma_ft,
    "finetune.spd_enabled" => finetune.spd_enabled,
    "finetune.shuffle" => finetune.shuffle,
    "eval.knn_k" => eval.knn_k,
    "eval.probe_steps" => eval.probe_steps,
    "eval.probe_lr" => eval.probe_lr,
    "eval.consistency_per_group" => eval.consistency_per_group,
}

/// Where each key was set: `(line, column of the value)`.
type Origins = BTreeMap<String, (usize, usize)>;

fn range_checks(cfg: &TrainingConfig) -> Vec<(&'static str, String)> {
    let mut out: Vec<(&'static str, String)> = Vec::new();
    let mut check = |ok: bool, key: &'static str, msg: &str| {
        if !ok {
            out.push((key, msg.to_string()));
        }
    };
    let unit = |v: f64| v > 0.0 && v <= 1.0;
    let prob = |v: f64| (0.0..1.0).contains(&v);

    check(
        cfg.corpus.scenes >= 2,
        "corpus.scenes",
        "corpus.scenes must be at least 2",
    );
    check(
        cfg.corpus.test_scenes >= 1 && cfg.corpus.test_scenes < cfg.corpus.scenes,
        "corpus.test_scenes",
        "corpus.test_scenes must be in [1, corpus.scenes)",
    );
    check(
        cfg.corpus.classes >= 1,
        "corpus.classes",
        "corpus.classes must be at least 1",
    );
    check(
        cfg.corpus.objects_per_scene >= 1,
        "corpus.objects_per_scene",
        "corpus.objects_per_scene must be at least 1",
    );
    check(
        cfg.corpus.points_per_object >= 1,
        "corpus.points_per_object",
        "corpus.points_per_object must be at least 1",
    );
    check(
        cfg.corpus.noise_sigma >= 0.0,
        "corpus.noise_sigma",
        "corpus.noise_sigma must be >= 0",
    );
    check(
        cfg.corpus.room_size > 0.0,
        "corpus.room_size",
        "corpus.room_size must be > 0",
    );

    check(
        cfg.model.c_in == 3,
        "model.c_in",
        "model.c_in must be 3 (xyz input)",
    );
    for (key, v) in [
        ("model.channels", cfg.model.channels),
        ("model.c_out", cfg.model.c_out),
        ("model.state_width", cfg.model.state_width),
    ] {
        check(
            (1..=4096).contains(&v),
            key,
            &format!("{key} must be in [1, 4096]"),
        );
    }

    check(
        cfg.views.n_global >= 1,
        "views.n_global",
        "views.n_global must be at least 1",
    );
    check(
        cfg.views.target_points >= 1,
        "views.target_points",
        "views.target_points must be at least 1",
    );
    check(
        unit(cfg.views.candidate_ratio),
        "views.candidate_ratio",
        "views.candidate_ratio must be in (0, 1]",
    );
    check(
        unit(cfg.views.global_min),
        "views.global_min",
        "views.global_min must be in (0, 1]",
    );
    check(
        unit(cfg.views.global_max) && cfg.views.global_max >= cfg.views.global_min,
        "views.global_max",
        "views.global_max must be in [views.global_min, 1]",
    );
    check(
        unit(cfg.views.local_min),
        "views.local_min",
        "views.local_min must be in (0, 1]",
    );
    check(
        unit(cfg.views.local_max) && cfg.views.local_max >= cfg.views.local_min,
        "views.local_max",
        "views.local_max must be in [views.local_min, 1]",
    );

    check(
        cfg.distill.k_proto >= 1,
        "distill.k_proto",
        "distill.k_proto must be at least 1",
    );
    check(
        cfg.distill.tau_s > 0.0,
        "distill.tau_s",
        "distill.tau_s must be > 0",
    );
    check(
        cfg.distill.tau_t > 0.0,
        "distill.tau_t",
        "distill.tau_t must be > 0",
    );
    check(
        prob(cfg.distill.gamma),
        "distill.gamma",
        "distill.gamma must satisfy γ ∈ [0,1)",
    );
    check(
        (0.0..=1.0).contains(&cfg.distill.center_momentum),
        "distill.center_momentum",
        "distill.center_momentum must be in [0, 1]",
    );

    check(
        cfg.geo.samples >= 1,
        "geo.samples",
        "geo.samples must be at least 1",
    );
    check(
        cfg.geo.samples <= cfg.views.target_points,
        "geo.samples",
        "geo.samples must not exceed views.target_points",
    );
    check(
        cfg.geo.alpha.len() == cfg.model.depth(),
        "geo.alpha",
        &format!(
            "geo.alpha needs one weight per tapped layer ({})",
            cfg.model.depth()
        ),
    );
    check(
        cfg.geo.alpha.iter().all(|&a| a >= 0.0) && cfg.geo.alpha.iter().sum::<f64>() > 0.0,
        "geo.alpha",
        "geo.alpha weights must be >= 0 with a positive sum",
    );

    check(
        cfg.optim.lr_max > 0.0,
        "optim.lr_max",
        "optim.lr_max must be > 0",
    );
    check(
        cfg.optim.lr_min >= 0.0 && cfg.optim.lr_min <= cfg.optim.lr_max,
        "optim.lr_min",
        "optim.lr_min must be in [0, optim.lr_max]",
    );
    check(
        prob(cfg.optim.warmup_fraction),
        "optim.warmup_fraction",
        "optim.warmup_fraction must be in [0, 1)",
    );
    check(
        cfg.optim.weight_decay >= 0.0,
        "optim.weight_decay",
        "optim.weight_decay must be >= 0",
    );
    check(
        prob(cfg.optim.beta1),
        "optim.beta1",
        "optim.beta1 must be in [0, 1)",
    );
    check(
        prob(cfg.optim.beta2),
        "optim.beta2",
        "optim.beta2 must be in [0, 1)",
    );
    check(cfg.optim.eps > 0.0, "optim.eps", "optim.eps must be > 0");

    check(
        cfg.pretrain.batch_size >= 1,
        "pretrain.batch_size",
        "pretrain.batch_size must be at least 1",
    );
    check(
        cfg.pretrain.checkpoint_every >= 1,
        "pretrain.checkpoint_every",
        "pretrain.checkpoint_every must be at least 1",
    );
    check(
        cfg.pretrain.lambda_geo >= 0.0,
        "pretrain.lambda_geo",
        "pretrain.lambda_geo must be >= 0",
    );

    check(
        cfg.finetune.batch_size >= 1,
        "finetune.batch_size",
        "finetune.batch_size must be at least 1",
    );
    check(
        cfg.finetune.eval_every >= 1,
        "finetune.eval_every",
        "finetune.eval_every must be at least 1",
    );
    check(
        cfg.finetune.lambda_spd >= 0.0,
        "finetune.lambda_spd",
        "finetune.lambda_spd must be >= 0",
    );
    check(
        cfg.finetune.lambda_geo >= 0.0,
        "finetune.lambda_geo",
        "finetune.lambda_geo must be >= 0",
    );
    check(
        (0.0..=1.0).contains(&cfg.finetune.gamma_ft),
        "finetune.gamma_ft",
        "finetune.gamma_ft must be in [0, 1]",
    );

    check(
        cfg.eval.knn_k >= 1,
        "eval.knn_k",
        "eval.knn_k must be at least 1",
    );
    check(
        cfg.eval.probe_steps >= 1,
        "eval.probe_steps",
        "eval.probe_steps must be at least 1",
    );
    check(
        cfg.eval.probe_lr > 0.0,
        "eval.probe_lr",
        "eval.probe_lr must be > 0",
    );
    check(
        cfg.eval.consistency_per_group >= 1,
        "eval.consistency_per_group",
        "eval.consistency_per_group must be at least 1",
    );
    out
}

impl TrainingConfig {
    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self, ConfigErrors> {
        let mut cfg = Self::default();
        let origins = cfg.apply_text(text)?;
        cfg.validate_with(&origins)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ConfigErrors(vec![ConfigError {
                line: 0,
                column: 0,
                message: format!("cannot read {}: {e}", path.display()),
            }])
        })?;
        Self::parse(&text)
    }

    fn apply_text(&mut self, text: &str) -> Result<Origins, ConfigErrors> {
        let mut errors = Vec::new();
        let mut origins = Origins::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw_line.split('#').next().unwrap_or("");
            if content.trim().is_empty() {
                continue;
            }
            let col_of = |s: &str| s.as_ptr() as usize - raw_line.as_ptr() as usize + 1;
            let Some(eq) = content.find('=') else {
                errors.push(ConfigError {
                    line,
                    column: col_of(content.trim_start()),
                    message: "expected `key = value`".into(),
                });
                continue;
            };
            let key = content[..eq].trim();
            let value = content[eq + 1..].trim();
            let key_col = col_of(content.trim_start());
            let value_col = if value.is_empty() {
                eq + 2
            } else {
                col_of(content[eq + 1..].trim_start())
            };
            if origins.contains_key(key) {
                errors.push(ConfigError {
                    line,
                    column: key_col,
                    message: format!("key `{key}` set twice"),
                });
                continue;
            }
            if !KEYS.contains(&key) {
                errors.push(ConfigError {
                    line,
                    column: key_col,
                    message: format!("unknown key `{key}`"),
                });
                continue;
            }
            match self.set_raw(key, value) {
                Ok(()) => {
                    origins.insert(key.to_string(), (line, value_col));
                }
                Err(message) => errors.push(ConfigError {
                    line,
                    column: value_col,
                    message: format!("{key}: {message}"),
                }),
            }
        }
        if errors.is_empty() {
            Ok(origins)
        } else {
            Err(ConfigErrors(errors))
        }
    }

    /// Applies `key=value` overrides (later ones win) and revalidates.
    pub fn with_overrides(mut self, overrides: &[(String, String)]) -> Result<Self, ConfigErrors> {
        let mut errors = Vec::new();
        for (key, value) in overrides {
            if let Err(message) = self.set_raw(key.trim(), value.trim()) {
                errors.push(ConfigError {
                    line: 0,
                    column: 0,
                    message: format!("override {key}: {message}"),
                });
            }
        }
        if !errors.is_empty() {
            return Err(ConfigErrors(errors));
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigErrors> {
        self.validate_with(&Origins::new())
    }

    fn validate_with(&self, origins: &Origins) -> Result<(), ConfigErrors> {
        let mut errors: Vec<ConfigError> = range_checks(self)
            .into_iter()
            .map(|(key, message)| {
                let (line, column) = origins.get(key).copied().unwrap_or((0, 0));
                ConfigError {
                    line,
                    column,
                    message,
                }
            })
            .collect();
        if errors.is_empty() {
            return Ok(());
        }
        errors.sort_by_key(|e| (e.line == 0, e.line, e.column));
        Err(ConfigErrors(errors))
    }

    /// The fully resolved config, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for key in KEYS {
            let sec = key.split('.').next().unwrap_or("");
            if sec != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                section = sec;
            }
            s.push_str(key);
            s.push_str(" = ");
            s.push_str(&self.get_raw(key).expect("listed key"));
            s.push('\n');
        }
        s
    }

    /// Hex SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn scene_spec(&self, corpus_seed: u64) -> SceneSpec {
        SceneSpec {
            classes: self.corpus.classes,
            objects_per_scene: self.corpus.objects_per_scene,
            points_per_object: self.corpus.points_per_object,
            noise_sigma: self.corpus.noise_sigma,
            room_size: self.corpus.room_size,
            seed: corpus_seed,
        }
    }

    pub fn geo_supervision(&self) -> GeoSupervision {
        GeoSupervision {
            layers: self
                .geo
                .alpha
                .iter()
                .enumerate()
                .map(|(i, &alpha)| GeoLayer {
                    layer: i + 1,
                    samples: self.geo.samples,
                    alpha,
                })
                .collect(),
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            n_global: self.views.n_global,
            n_local: self.views.n_local,
            target_points: self.views.target_points,
            candidate_ratio: self.views.candidate_ratio,
            global_ratio: (self.views.global_min, self.views.global_max),
            local_ratio: (self.views.local_min, self.views.local_max),
        }
    }

    pub fn pretrain_settings(&self) -> PretrainSettings {
        PretrainSettings {
            model: self.model.clone(),
            augment: self.augment_config(),
            distill: self.distill.clone(),
            geo: self.geo_supervision(),
            lambda_geo: self.pretrain.lambda_geo,
            csp_enabled: self.pretrain.csp_enabled,
            shuffle: self.pretrain.shuffle,
        }
    }

    pub fn finetune_settings(&self) -> FinetuneSettings {
        FinetuneSettings {
            model: self.model.clone(),
            geo: self.geo_supervision(),
            spd: SpdConfig {
                lambda_spd: self.finetune.lambda_spd,
                lambda_geo: self.finetune.lambda_geo,
                gamma_ft: self.finetune.gamma_ft,
                spd_enabled: self.finetune.spd_enabled,
            },
            classes: self.corpus.classes as usize,
            csp_enabled: self.pretrain.csp_enabled,
            shuffle: self.finetune.shuffle,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
            weight_decay: self.optim.weight_decay,
        }
    }

    pub fn schedule(&self, total_steps: usize) -> LrSchedule {
        let warmup = (self.optim.warmup_fraction * total_steps as f64).round() as usize;
        LrSchedule {
            warmup_steps: warmup.min(total_steps.saturating_sub(1)),
            total_steps,
            lr_max: self.optim.lr_max,
            lr_min: self.optim.lr_min,
        }
    }
}

/// Splits `key=value` as given on a command line.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, found `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
