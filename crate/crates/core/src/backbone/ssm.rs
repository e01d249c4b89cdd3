//! State-space block `h_t = f(A h_{t-1} + B x_t)`, `y_t = C h_t`.
//!
//! Matrices are stored for row-vector products: `B` is `[C, C_h]`, `C` is
//! `[C_h, C]`, `A` is `[C_h, C_h]` and acts as `A h` on column states.
//! The transition `f` is either the identity or `sigmoid(g) * tanh(z)`,
//! where the gate logits `g` are a learned vector (static variant) or a
//! linear function of the input token (selective variant).

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::{recurrence, ParamStore, Tape, Tensor, Transition, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsmVariant {
    Static,
    #[serde(rename = "gated")]
    Selective,
}

impl SsmVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            SsmVariant::Static => "static",
            SsmVariant::Selective => "gated",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GateParams {
    Static(Tensor),
    Selective { weight: Tensor, bias: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsmBlock {
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub gate: GateParams,
    pub transition: Transition,
}

impl SsmBlock {
    pub fn channels(&self) -> usize {
        self.b.rows()
    }

    pub fn state_width(&self) -> usize {
        self.a.rows()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (c, h) = (self.b.rows(), self.b.cols());
        let check = |name: &'static str, t: &Tensor, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(ModelError::ParamShape {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: t.shape().to_vec(),
                })
            }
        };
        check("A", &self.a, &[h, h])?;
        check("C", &self.c, &[h, c])?;
        match &self.gate {
            GateParams::Static(g) => check("gate", g, &[h])?,
            GateParams::Selective { weight, bias } => {
                check("gate_w", weight, &[c, h])?;
                check("gate_b", bias, &[h])?;
            }
        }
        Ok(())
    }

    pub fn variant(&self) -> SsmVariant {
        match self.gate {
            GateParams::Static(_) => SsmVariant::Static,
            GateParams::Selective { .. } => SsmVariant::Selective,
        }
    }

    /// Reads the block stored under `prefix` (e.g. `backbone.ssm`).
    pub fn from_params(
        params: &ParamStore,
        prefix: &str,
        transition: Transition,
    ) -> Result<Self, ModelError> {
        let get = |n: &str| params.get(&format!("{prefix}.{n}")).cloned();
        let gate = if params.contains(&format!("{prefix}.gate")) {
            GateParams::Static(get("gate")?)
        } else {
            GateParams::Selective {
                weight: get("gate_w")?,
                bias: get("gate_b")?,
            }
        };
        let block = Self {
            a: get("A")?,
            b: get("B")?,
            c: get("C")?,
            gate,
            transition,
        };
        block.validate()?;
        Ok(block)
    }

    pub fn write_params(&self, params: &mut ParamStore, prefix: &str) {
        params.insert(format!("{prefix}.A"), self.a.clone());
        params.insert(format!("{prefix}.B"), self.b.clone());
        params.insert(format!("{prefix}.C"), self.c.clone());
        match &self.gate {
            GateParams::Static(g) => params.insert(format!("{prefix}.gate"), g.clone()),
            GateParams::Selective { weight, bias } => {
                params.insert(format!("{prefix}.gate_w"), weight.clone());
                params.insert(format!("{prefix}.gate_b"), bias.clone());
            }
        }
    }

    fn gate_logits(&self, tokens: &Tensor) -> Option<Tensor> {
        if self.transition == Transition::Identity {
            return None;
        }
        let t = tokens.rows();
        Some(match &self.gate {
            GateParams::Static(g) => {
                let mut data = Vec::with_capacity(t * g.len());
                for _ in 0..t {
                    data.extend_from_slice(g.data());
                }
                Tensor::new(vec![t, g.len()], data).expect("shape")
            }
            GateParams::Selective { weight, bias } => {
                let mut z = tokens.matmul(weight);
                let h = bias.len();
                for row in z.data_mut().chunks_mut(h) {
                    for (v, &b) in row.iter_mut().zip(bias.data()) {
                        *v += b;
                    }
                }
                z
            }
        })
    }
}

/// Runs the block over `tokens` (`[T, C]`) in row order, restarting from
/// `h0` at the start of every segment. Returns `y` (`[T, C]`) and the state
/// after the last token of the last segment.
pub fn ssm_scan_segments(
    tokens: &Tensor,
    block: &SsmBlock,
    h0: &[f64],
    segments: &[Range<usize>],
) -> Result<(Tensor, Vec<f64>), ModelError> {
    block.validate()?;
    let h = block.state_width();
    if tokens.cols() != block.channels() {
        return Err(ModelError::ChannelMismatch {
            expected: block.channels(),
            found: tokens.cols(),
        });
    }
    if h0.len() != h {
        return Err(ModelError::StateWidth {
            expected: h,
            found: h0.len(),
        });
    }
    let u = tokens.matmul(&block.b);
    let gate = block.gate_logits(tokens);
    let trace = recurrence::forward(
        u.data(),
        gate.as_ref().map(|g| g.data()),
        block.a.data(),
        h0,
        h,
        block.transition,
        segments,
    );
    let states = Tensor::new(vec![tokens.rows(), h], trace.states).expect("shape");
    if !states.is_finite() {
        return Err(ModelError::NonFiniteState);
    }
    let last = segments
        .iter()
        .rev()
        .find(|s| !s.is_empty())
        .map(|s| states.row(s.end - 1).to_vec())
        .unwrap_or_else(|| h0.to_vec());
    Ok((states.matmul(&block.c), last))
}

/// Single left-to-right pass over all tokens.
pub fn ssm_scan(
    tokens: &Tensor,
    block: &SsmBlock,
    h0: &[f64],
) -> Result<(Tensor, Vec<f64>), ModelError> {
    ssm_scan_segments(tokens, block, h0, &[0..tokens.rows()])
}

/// Tape handles of an [`SsmBlock`]'s parameters.
pub struct SsmVars<'t> {
    pub a: Var<'t>,
    pub b: Var<'t>,
    pub c: Var<'t>,
    pub gate: GateVars<'t>,
    pub transition: Transition,
}

pub enum GateVars<'t> {
    Static(Var<'t>),
    Selective { weight: Var<'t>, bias: Var<'t> },
}

impl<'t> SsmVars<'t> {
    pub fn register(
        tape: &'t Tape,
        params: &ParamStore,
        prefix: &str,
        transition: Transition,
    ) -> Result<Self, ModelError> {
        let p = |n: &str| -> Result<Var<'t>, ModelError> {
            Ok(tape.param(
                &format!("{prefix}.{n}"),
                params.get(&format!("{prefix}.{n}"))?,
            ))
        };
        let gate = if params.contains(&format!("{prefix}.gate")) {
            GateVars::Static(p("gate")?)
        } else {
            GateVars::Selective {
                weight: p("gate_w")?,
                bias: p("gate_b")?,
            }
        };
        Ok(Self {
            a: p("A")?,
            b: p("B")?,
            c: p("C")?,
            gate,
            transition,
        })
    }

    /// Differentiable scan of `x` (`[T, C]`) over `segments`.
    pub fn scan(&self, x: Var<'t>, h0: &[f64], segments: Vec<Range<usize>>) -> Var<'t> {
        let tape = x.tape();
        let rows = x.shape()[0];
        let u = x.matmul(self.b);
        let gate = match self.transition {
            Transition::Identity => None,
            Transition::GatedTanh => Some(match &self.gate {
                GateVars::Static(g) => g.broadcast_rows(rows),
                GateVars::Selective { weight, bias } => x.matmul(*weight).add_row(*bias),
            }),
        };
        let states = tape.recurrence(u, self.a, gate, h0, self.transition, segments);
        states.matmul(self.c)
    }
}
