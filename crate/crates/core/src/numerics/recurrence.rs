//! Kernel for the gated linear recurrence `h_t = f(A h_{t-1} + u_t)`.
//!
//! The input projection `u_t = B x_t` and the output projection `y_t = C h_t`
//! are ordinary matmuls; only the sequential part lives here so that it can
//! be recorded on the tape as a single node with a hand-written backward
//! pass (backpropagation through time).

use std::ops::Range;

use super::tensor::Scalar;

/// Elementwise transition applied to the pre-activation `A h_{t-1} + u_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    /// `h_t = z_t`.
    Identity,
    /// `h_t = sigmoid(g_t) * tanh(z_t)`, with gate logits `g_t` per token.
    GatedTanh,
}

/// Saved forward state needed by [`backward`].
#[derive(Clone, Debug)]
pub struct RecurrenceTrace<T> {
    /// Pre-activations `z_t`, `[steps, width]`.
    pub pre: Vec<T>,
    /// Hidden states `h_t`, `[steps, width]`.
    pub states: Vec<T>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn matvec_add<T: Scalar>(a: &[T], v: &[T], out: &mut [T], width: usize) {
    for (i, o) in out.iter_mut().enumerate() {
        let row = &a[i * width..(i + 1) * width];
        let mut acc = *o;
        for (&x, &y) in row.iter().zip(v) {
            acc = acc + x * y;
        }
        *o = acc;
    }
}

/// Runs the recurrence over every segment. The state restarts from `h0` at
/// the first token of each segment; tokens outside all segments are left at
/// zero.
pub fn forward<T: Scalar>(
    u: &[T],
    gate: Option<&[T]>,
    a: &[T],
    h0: &[T],
    width: usize,
    transition: Transition,
    segments: &[Range<usize>],
) -> RecurrenceTrace<T> {
    let steps = u.len() / width;
    let mut pre = vec![T::zero(); steps * width];
    let mut states = vec![T::zero(); steps * width];
    let mut prev = vec![T::zero(); width];
    let mut z = vec![T::zero(); width];
    for seg in segments {
        prev.copy_from_slice(h0);
        for t in seg.clone() {
            let span = t * width..(t + 1) * width;
            z.copy_from_slice(&u[span.clone()]);
            matvec_add(a, &prev, &mut z, width);
            pre[span.clone()].copy_from_slice(&z);
            match transition {
                Transition::Identity => prev.copy_from_slice(&z),
                Transition::GatedTanh => {
                    let g = &gate.expect("gated transition needs gate logits")[span.clone()];
                    for ((p, &zi), &gi) in prev.iter_mut().zip(&z).zip(g) {
                        *p = sigmoid(gi) * zi.tanh();
                    }
                }
            }
            states[span].copy_from_slice(&prev);
        }
    }
    RecurrenceTrace { pre, states }
}

/// Gradients of [`forward`] with respect to `u`, the gate logits and `A`.
pub struct RecurrenceGrads<T> {
    pub u: Vec<T>,
    pub gate: Vec<T>,
    pub a: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    trace: &RecurrenceTrace<T>,
    grad_states: &[T],
    gate: Option<&[T]>,
    a: &[T],
    h0: &[T],
    width: usize,
    transition: Transition,
    segments: &[Range<usize>],
) -> RecurrenceGrads<T> {
    let n = grad_states.len();
    let mut du = vec![T::zero(); n];
    let mut dgate = vec![T::zero(); if gate.is_some() { n } else { 0 }];
    let mut da = vec![T::zero(); width * width];
    let mut carry = vec![T::zero(); width];
    let mut dz = vec![T::zero(); width];
    for seg in segments {
        carry.iter_mut().for_each(|c| *c = T::zero());
        for t in seg.clone().rev() {
            let span = t * width..(t + 1) * width;
            for k in 0..width {
                let dh = grad_states[t * width + k] + carry[k];
                dz[k] = match transition {
                    Transition::Identity => dh,
                    Transition::GatedTanh => {
                        let g = gate.expect("gated transition needs gate logits")[t * width + k];
                        let s = sigmoid(g);
                        let th = trace.pre[t * width + k].tanh();
                        dgate[t * width + k] = dh * th * s * (T::one() - s);
                        dh * s * (T::one() - th * th)
                    }
                };
            }
            du[span].copy_from_slice(&dz);
            let prev: &[T] = if t == seg.start {
                h0
            } else {
                &trace.states[(t - 1) * width..t * width]
            };
            for i in 0..width {
                let row = &mut da[i * width..(i + 1) * width];
                let d = dz[i];
                for (r, &p) in row.iter_mut().zip(prev) {
                    *r = *r + d * p;
                }
            }
            // carry = A^T dz
            carry.iter_mut().for_each(|c| *c = T::zero());
            for i in 0..width {
                let row = &a[i * width..(i + 1) * width];
                let d = dz[i];
                for (c, &x) in carry.iter_mut().zip(row) {
                    *c = *c + x * d;
                }
            }
        }
    }
    RecurrenceGrads {
        u: du,
        gate: dgate,
        a: da,
    }
}
