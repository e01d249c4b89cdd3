//! Central finite-difference checks of tape gradients.

use super::{NumericsError, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Perturbation size.
    pub eps: f64,
    /// Upper bound on the number of entries probed per parameter tensor.
    /// Entries are chosen with a fixed stride so the check is deterministic.
    pub max_entries_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries_per_param: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_abs_error: f64,
    /// `max |analytic - numeric| / max(max |numeric|, max |analytic|)` over
    /// the probed entries of this tensor.
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() <= tol
    }
}

/// Compares the tape gradient of `loss` against central differences for
/// every parameter in `params`.
///
/// `loss` must register each entry of `params` on the tape via
/// [`Tape::param`] under its own name, and must be a deterministic function
/// of the parameter values.
pub fn check_gradients<F>(
    params: &ParamStore,
    loss: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Var<'t>,
{
    let tape = Tape::new();
    let out = loss(&tape, params);
    let grads = out.backward()?;

    let eval = |p: &ParamStore| -> Result<f64, NumericsError> {
        let tape = Tape::new();
        let v = loss(&tape, p).value();
        tape.check_finite()?;
        Ok(v.item())
    };

    let mut report = Vec::new();
    let mut probe = params.clone();
    for (name, value) in params.iter() {
        let analytic = grads.get(name)?;
        let n = value.len();
        let stride = n.div_ceil(opts.max_entries_per_param.max(1)).max(1);
        let mut max_abs: f64 = 0.0;
        let mut scale: f64 = 0.0;
        let mut entries = 0;
        for i in (0..n).step_by(stride) {
            let orig = value.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + opts.eps;
            let plus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - opts.eps;
            let minus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[i];
            max_abs = max_abs.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            entries += 1;
        }
        let rel_error = if scale > 0.0 { max_abs / scale } else { 0.0 };
        report.push(ParamCheck {
            name: name.clone(),
            entries,
            max_abs_error: max_abs,
            rel_error,
        });
    }
    Ok(GradCheckReport { params: report })
}
