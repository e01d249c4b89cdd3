//! Per-layer coordinate reconstruction.
//!
//! Each supervised backbone tap gets a small decoder `C -> C/2 -> 3` (tanh
//! hidden layer). A layer's loss is the mean squared Euclidean error of the
//! decoded coordinates of `K_s` randomly sampled tokens against their
//! normalized view coordinates; layer losses are combined with weights
//! `alpha_l`.

use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, ParamStore, Tape, Tensor, Var};

pub const PREFIX: &str = "geo";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("feature width {found} does not match decoder input {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("{features} features for {coords} coordinates")]
    CountMismatch { features: usize, coords: usize },
    #[error("layer {layer}: K_s = {k} exceeds {tokens} tokens")]
    TooManySamples {
        layer: usize,
        k: usize,
        tokens: usize,
    },
    #[error("no tap for supervised layer {0}")]
    MissingLayer(usize),
    #[error("invalid geometric supervision: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoLayer {
    /// 1-based backbone tap index.
    pub layer: usize,
    pub samples: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoSupervision {
    pub layers: Vec<GeoLayer>,
}

impl GeoSupervision {
    /// Layers `1..=depth`, `K_s` samples each, `alpha_l = 1/depth`.
    pub fn uniform(depth: usize, samples: usize) -> Self {
        Self {
            layers: (1..=depth)
                .map(|layer| GeoLayer {
                    layer,
                    samples,
                    alpha: 1.0 / depth as f64,
                })
                .collect(),
        }
    }

    /// Full check including `sum(alpha) > 0`.
    pub fn validate(&self) -> Result<(), GeometryError> {
        self.validate_layers()?;
        if self.layers.iter().map(|l| l.alpha).sum::<f64>() <= 0.0 {
            return Err(GeometryError::Invalid("alpha weights sum to zero".into()));
        }
        Ok(())
    }

    /// Structural check only; all-zero weights are allowed and give a zero
    /// loss.
    pub fn validate_layers(&self) -> Result<(), GeometryError> {
        if self.layers.is_empty() {
            return Err(GeometryError::Invalid("no supervised layers".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.layers {
            if !seen.insert(l.layer) {
                return Err(GeometryError::Invalid(format!(
                    "layer {} listed twice",
                    l.layer
                )));
            }
            if l.samples == 0 {
                return Err(GeometryError::Invalid(format!(
                    "layer {}: K_s must be >= 1",
                    l.layer
                )));
            }
            if !(l.alpha >= 0.0 && l.alpha.is_finite()) {
                return Err(GeometryError::Invalid(format!(
                    "layer {}: alpha must be finite and >= 0",
                    l.layer
                )));
            }
        }
        Ok(())
    }
}

/// Two-layer coordinate decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub fn hidden_width(channels: usize) -> usize {
    (channels / 2).max(1)
}

impl Decoder {
    pub fn zeros(channels: usize) -> Self {
        let h = hidden_width(channels);
        Self {
            w1: Tensor::zeros(&[channels, h]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[h, 3]),
            b2: Tensor::zeros(&[3]),
        }
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let h = hidden_width(channels);
        let mut d = Self::zeros(channels);
        let n1 = Normal::new(0.0, 1.0 / (channels as f64).sqrt()).expect("std");
        let n2 = Normal::new(0.0, 1.0 / (h as f64).sqrt()).expect("std");
        d.w1.data_mut().iter_mut().for_each(|v| *v = n1.sample(rng));
        d.w2.data_mut().iter_mut().for_each(|v| *v = n2.sample(rng));
        d
    }

    pub fn input_width(&self) -> usize {
        self.w1.rows()
    }

    fn names(layer: usize) -> [String; 4] {
        ["w1", "b1", "w2", "b2"].map(|n| format!("{PREFIX}.{layer}.{n}"))
    }

    pub fn write_params(&self, params: &mut ParamStore, layer: usize) {
        let [w1, b1, w2, b2] = Self::names(layer);
        params.insert(w1, self.w1.clone());
        params.insert(b1, self.b1.clone());
        params.insert(w2, self.w2.clone());
        params.insert(b2, self.b2.clone());
    }

    pub fn from_params(params: &ParamStore, layer: usize) -> Result<Self, GeometryError> {
        let [w1, b1, w2, b2] = Self::names(layer);
        Ok(Self {
            w1: params.get(&w1)?.clone(),
            b1: params.get(&b1)?.clone(),
            w2: params.get(&w2)?.clone(),
            b2: params.get(&b2)?.clone(),
        })
    }
}

/// Adds one random decoder per supervised layer to `params`.
pub fn init_decoders<R: Rng + ?Sized>(
    sup: &GeoSupervision,
    channels: usize,
    params: &mut ParamStore,
    rng: &mut R,
) {
    for l in &sup.layers {
        Decoder::random(channels, rng).write_params(params, l.layer);
    }
}

fn add_bias(mut t: Tensor, b: &Tensor) -> Tensor {
    let n = b.len();
    for row in t.data_mut().chunks_mut(n) {
        for (v, &x) in row.iter_mut().zip(b.data()) {
            *v += x;
        }
    }
    t
}

/// Decoded coordinates `[K, 3]` for features `[K, C]`.
pub fn decode_coords(features: &Tensor, decoder: &Decoder) -> Result<Tensor, GeometryError> {
    if features.cols() != decoder.input_width() {
        return Err(GeometryError::WidthMismatch {
            expected: decoder.input_width(),
            found: features.cols(),
        });
    }
    let hidden = add_bias(features.matmul(&decoder.w1), &decoder.b1).map(f64::tanh);
    Ok(add_bias(hidden.matmul(&decoder.w2), &decoder.b2))
}

/// Mean squared reconstruction error of one layer.
pub fn geo_loss_layer(
    features: &Tensor,
    coords: &Tensor,
    decoder: &Decoder,
) -> Result<f64, GeometryError> {
    if features.rows() != coords.rows() || coords.cols() != 3 {
        return Err(GeometryError::CountMismatch {
            features: features.rows(),
            coords: coords.rows(),
        });
    }
    let pred = decode_coords(features, decoder)?;
    let k = features.rows().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(coords.data())
        .map(|(p, x)| (p - x) * (p - x))
        .sum::<f64>()
        / k)
}

/// Row indices to supervise for every layer: `K_s` tokens drawn without
/// replacement from every span, independently per layer.
pub fn sample_rows<R: Rng + ?Sized>(
    sup: &GeoSupervision,
    spans: &[Range<usize>],
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, GeometryError> {
    sup.layers
        .iter()
        .map(|l| {
            let mut rows = Vec::with_capacity(l.samples * spans.len());
            for span in spans {
                if l.samples > span.len() {
                    return Err(GeometryError::TooManySamples {
                        layer: l.layer,
                        k: l.samples,
                        tokens: span.len(),
                    });
                }
                rows.extend(
                    sample(rng, span.len(), l.samples)
                        .into_iter()
                        .map(|i| span.start + i),
                );
            }
            Ok(rows)
        })
        .collect()
}

/// Weighted multi-layer loss on values. `taps[l - 1]` is the `[sum L, C]`
/// output of layer `l`; `coords` holds the matching `[sum L, 3]` targets.
pub fn geo_loss<R: Rng + ?Sized>(
    sup: &GeoSupervision,
    decoders: &[Decoder],
    taps: &[Tensor],
    coords: &Tensor,
    spans: &[Range<usize>],
    rng: &mut R,
) -> Result<f64, GeometryError> {
    sup.validate_layers()?;
    let rows = sample_rows(sup, spans, rng)?;
    let mut total = 0.0;
    for ((l, dec), idx) in sup.layers.iter().zip(decoders).zip(&rows) {
        let tap = taps
            .get(l.layer - 1)
            .ok_or(GeometryError::MissingLayer(l.layer))?;
        let f = gather(tap, idx);
        let x = gather(coords, idx);
        total += l.alpha * geo_loss_layer(&f, &x, dec)?;
    }
    Ok(total)
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), c], data).expect("shape")
}

/// Differentiable counterpart of [`geo_loss`] using decoders stored in
/// `params` under `geo.<layer>.*`.
pub fn geo_loss_tape<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    params: &ParamStore,
    sup: &GeoSupervision,
    taps: &[Var<'t>],
    coords: &Tensor,
    spans: &[Range<usize>],
    rng: &mut R,
) -> Result<Var<'t>, GeometryError> {
    sup.validate_layers()?;
    let rows = sample_rows(sup, spans, rng)?;
    let mut total: Option<Var<'t>> = None;
    for (l, idx) in sup.layers.iter().zip(&rows) {
        let tap = *taps
            .get(l.layer - 1)
            .ok_or(GeometryError::MissingLayer(l.layer))?;
        let [w1, b1, w2, b2] = Decoder::names(l.layer);
        let p = |n: &str| -> Result<Var<'t>, GeometryError> { Ok(tape.param(n, params.get(n)?)) };
        let f = tap.gather_rows(idx);
        let width = params.get(&w1)?.rows();
        if f.shape()[1] != width {
            return Err(GeometryError::WidthMismatch {
                expected: width,
                found: f.shape()[1],
            });
        }
        let pred = f
            .matmul(p(&w1)?)
            .add_row(p(&b1)?)
            .tanh()
            .matmul(p(&w2)?)
            .add_row(p(&b2)?);
        let diff = pred - tape.constant(gather(coords, idx));
        let term = diff.square().sum().scale(l.alpha / idx.len() as f64);
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    Ok(total.expect("validated non-empty"))
}
