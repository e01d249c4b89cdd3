//! Point feature extractor.
//!
//! Per-point linear embedding, residual MLP, the state-space stage, a second
//! residual MLP and an output projection. A feature tap is recorded after
//! each of the three stages. With cross-sample propagation on, the
//! state-space stage runs over all samples of the batch serialized into one
//! (optionally shuffled) token sequence; with it off, every sample is
//! scanned on its own from a fresh zero state.

mod serialize;
mod ssm;

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, ParamStore, Tape, Tensor, Transition, Var};

pub use serialize::{
    invert_permutation, serialize, spans, token_permutation, FeatureSequence, SerializedBatch,
};
pub use ssm::{ssm_scan, ssm_scan_segments, GateParams, GateVars, SsmBlock, SsmVariant, SsmVars};

pub const PREFIX: &str = "backbone";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("state width mismatch: expected {expected}, found {found}")]
    StateWidth { expected: usize, found: usize },
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite state-space state")]
    NonFiniteState,
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub c_in: usize,
    pub channels: usize,
    pub c_out: usize,
    pub state_width: usize,
    pub ssm_variant: SsmVariant,
    pub transition: Transition,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            c_in: 3,
            channels: 32,
            c_out: 32,
            state_width: 32,
            ssm_variant: SsmVariant::Static,
            transition: Transition::GatedTanh,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("c_in", self.c_in),
            ("channels", self.channels),
            ("c_out", self.c_out),
            ("state_width", self.state_width),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        3
    }
}

/// How the state-space stage sees the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Propagation {
    pub cross_sample: bool,
    /// Token shuffle seed; only used when `cross_sample` is set.
    pub shuffle_seed: Option<u64>,
}

impl Propagation {
    pub const PER_SAMPLE: Self = Self {
        cross_sample: false,
        shuffle_seed: None,
    };

    pub fn cross_sample(shuffle_seed: Option<u64>) -> Self {
        Self {
            cross_sample: true,
            shuffle_seed,
        }
    }
}

fn dense<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("std");
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| normal.sample(rng)).collect(),
    )
    .expect("shape")
}

fn init_mlp<R: Rng + ?Sized>(params: &mut ParamStore, name: &str, c: usize, rng: &mut R) {
    params.insert(format!("{PREFIX}.{name}.ln.g"), Tensor::filled(&[c], 1.0));
    params.insert(format!("{PREFIX}.{name}.ln.b"), Tensor::zeros(&[c]));
    params.insert(format!("{PREFIX}.{name}.w1"), dense(c, c, rng));
    params.insert(format!("{PREFIX}.{name}.b1"), Tensor::zeros(&[c]));
    params.insert(
        format!("{PREFIX}.{name}.w2"),
        dense(c, c, rng).map(|v| 0.5 * v),
    );
    params.insert(format!("{PREFIX}.{name}.b2"), Tensor::zeros(&[c]));
}

/// Random initial parameters. `A` starts near `0.5 I`.
pub fn init_backbone<R: Rng + ?Sized>(
    cfg: &BackboneConfig,
    rng: &mut R,
) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let (c, h) = (cfg.channels, cfg.state_width);
    let mut params = ParamStore::new();
    params.insert(format!("{PREFIX}.embed.w"), dense(cfg.c_in, c, rng));
    params.insert(format!("{PREFIX}.embed.b"), Tensor::zeros(&[c]));
    init_mlp(&mut params, "mlp1", c, rng);
    params.insert(format!("{PREFIX}.ssm.ln.g"), Tensor::filled(&[c], 1.0));
    params.insert(format!("{PREFIX}.ssm.ln.b"), Tensor::zeros(&[c]));
    let mut a = dense(h, h, rng).map(|v| 0.1 * v);
    for i in 0..h {
        a.data_mut()[i * h + i] += 0.5;
    }
    let gate = match cfg.ssm_variant {
        SsmVariant::Static => GateParams::Static(Tensor::zeros(&[h])),
        SsmVariant::Selective => GateParams::Selective {
            weight: dense(c, h, rng).map(|v| 0.1 * v),
            bias: Tensor::zeros(&[h]),
        },
    };
    let block = SsmBlock {
        a,
        b: dense(c, h, rng),
        c: dense(h, c, rng).map(|v| 0.5 * v),
        gate,
        transition: cfg.transition,
    };
    block.write_params(&mut params, &format!("{PREFIX}.ssm"));
    init_mlp(&mut params, "mlp2", c, rng);
    params.insert(format!("{PREFIX}.out.w"), dense(c, cfg.c_out, rng));
    params.insert(format!("{PREFIX}.out.b"), Tensor::zeros(&[cfg.c_out]));
    Ok(params)
}

/// Tape outputs of one batch forward. All tensors are in plain batch order:
/// sample `s` occupies rows `spans[s]`.
pub struct BackboneOutput<'t> {
    /// One `[sum L, C]` tap per stage.
    pub taps: Vec<Var<'t>>,
    /// `[sum L, C_f]`.
    pub features: Var<'t>,
    pub spans: Vec<Range<usize>>,
    /// Serialization order used by the state-space stage, if any.
    pub permutation: Option<Vec<usize>>,
}

impl BackboneOutput<'_> {
    /// Rows of `features` belonging to sample `s`.
    pub fn sample_features(&self, s: usize) -> Tensor {
        let all = self.features.value();
        let span = self.spans[s].clone();
        let c = all.cols();
        Tensor::new(
            vec![span.len(), c],
            all.data()[span.start * c..span.end * c].to_vec(),
        )
        .expect("shape")
    }
}

fn param<'t>(tape: &'t Tape, params: &ParamStore, name: &str) -> Result<Var<'t>, ModelError> {
    let full = format!("{PREFIX}.{name}");
    Ok(tape.param(&full, params.get(&full)?))
}

fn residual_mlp<'t>(
    tape: &'t Tape,
    params: &ParamStore,
    name: &str,
    h: Var<'t>,
) -> Result<Var<'t>, ModelError> {
    let p = |n: &str| param(tape, params, &format!("{name}.{n}"));
    let z = h.layer_norm(p("ln.g")?, p("ln.b")?, LN_EPS);
    let z = z.matmul(p("w1")?).add_row(p("b1")?).tanh();
    Ok(h + z.matmul(p("w2")?).add_row(p("b2")?))
}

/// Differentiable forward over a batch of `[L_s, C_in]` inputs.
pub fn forward<'t>(
    tape: &'t Tape,
    params: &ParamStore,
    cfg: &BackboneConfig,
    inputs: &[Tensor],
    propagation: Propagation,
) -> Result<BackboneOutput<'t>, ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for x in inputs {
        if x.cols() != cfg.c_in {
            return Err(ModelError::ChannelMismatch {
                expected: cfg.c_in,
                found: x.cols(),
            });
        }
    }
    let spans = spans(inputs.iter().map(|x| x.rows()));
    let total = spans.last().map_or(0, |r| r.end);
    let x = tape.constant(Tensor::new(
        vec![total, cfg.c_in],
        inputs
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect(),
    )?);
    forward_rows(tape, params, cfg, x, spans, propagation)
}

/// Forward over an already concatenated `[sum L, C_in]` input whose samples
/// occupy `spans`. Useful when the input itself must carry gradients.
pub fn forward_rows<'t>(
    tape: &'t Tape,
    params: &ParamStore,
    cfg: &BackboneConfig,
    x: Var<'t>,
    spans: Vec<Range<usize>>,
    propagation: Propagation,
) -> Result<BackboneOutput<'t>, ModelError> {
    let total = spans.last().map_or(0, |r| r.end);
    if x.shape() != [total, cfg.c_in] {
        return Err(ModelError::ChannelMismatch {
            expected: cfg.c_in,
            found: x.shape().get(1).copied().unwrap_or(0),
        });
    }
    let h0 = x
        .matmul(param(tape, params, "embed.w")?)
        .add_row(param(tape, params, "embed.b")?);
    let h1 = residual_mlp(tape, params, "mlp1", h0)?;

    let z = h1.layer_norm(
        param(tape, params, "ssm.ln.g")?,
        param(tape, params, "ssm.ln.b")?,
        LN_EPS,
    );
    let vars = SsmVars::register(tape, params, &format!("{PREFIX}.ssm"), cfg.transition)?;
    let state0 = vec![0.0; cfg.state_width];
    let (y, permutation) = if propagation.cross_sample {
        let perm = token_permutation(total, propagation.shuffle_seed);
        let y = if propagation.shuffle_seed.is_some() {
            let ys = vars.scan(z.gather_rows(&perm), &state0, vec![0..total]);
            ys.gather_rows(&invert_permutation(&perm))
        } else {
            vars.scan(z, &state0, vec![0..total])
        };
        (y, Some(perm))
    } else {
        (vars.scan(z, &state0, spans.clone()), None)
    };
    let h2 = h1 + y;
    let h3 = residual_mlp(tape, params, "mlp2", h2)?;
    let features = h3
        .matmul(param(tape, params, "out.w")?)
        .add_row(param(tape, params, "out.b")?);
    tape.check_finite()?;
    Ok(BackboneOutput {
        taps: vec![h1, h2, h3],
        features,
        spans,
        permutation,
    })
}

/// Value-only forward; returns per-sample `(taps, features)`.
pub fn forward_values(
    params: &ParamStore,
    cfg: &BackboneConfig,
    inputs: &[Tensor],
    propagation: Propagation,
) -> Result<Vec<(Vec<Tensor>, Tensor)>, ModelError> {
    let tape = Tape::new();
    let out = forward(&tape, params, cfg, inputs, propagation)?;
    let taps: Vec<Tensor> = out.taps.iter().map(|t| t.value()).collect();
    let feats = out.features.value();
    Ok(out
        .spans
        .iter()
        .map(|span| {
            (
                taps.iter().map(|t| rows_of(t, span.clone())).collect(),
                rows_of(&feats, span.clone()),
            )
        })
        .collect())
}

/// Features of a single sample, computed with no other sample present.
pub fn infer(
    params: &ParamStore,
    cfg: &BackboneConfig,
    input: &Tensor,
) -> Result<Tensor, ModelError> {
    let mut out = forward_values(
        params,
        cfg,
        std::slice::from_ref(input),
        Propagation::PER_SAMPLE,
    )?;
    Ok(out.pop().expect("one sample").1)
}

pub(crate) fn rows_of(t: &Tensor, span: Range<usize>) -> Tensor {
    let c = t.cols();
    Tensor::new(
        vec![span.len(), c],
        t.data()[span.start * c..span.end * c].to_vec(),
    )
    .expect("shape")
}
