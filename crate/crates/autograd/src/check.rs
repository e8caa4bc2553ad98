//! Central finite-difference checks of tape gradients.

use crate::{Matrix, ParamId, ParamStore, Tape, Var};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Multiple of the rounding noise of a central difference, `ε·|loss| / FD_STEP`,
/// below which a gradient entry is indistinguishable from zero.
pub const ROUNDING_MARGIN: f64 = 64.0;

/// Worst per-tensor relative error found by a check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `(tensor name, ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖))`. A tensor whose
    /// analytic and numeric gradients both lie within the rounding band
    /// scores 0: its true gradient vanishes (an attention key bias, say) and a
    /// ratio of two rounding residues means nothing.
    pub errors: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.errors.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn rounding_band(loss: f64) -> f64 {
    ROUNDING_MARGIN * f64::EPSILON * loss.abs().max(1.0) / FD_STEP
}

fn relative_error(analytic: &Matrix, numeric: &Matrix, band: f64) -> f64 {
    let within = |m: &Matrix| m.iter().all(|v| v.abs() <= band);
    if within(analytic) && within(numeric) {
        return 0.0;
    }
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let scale = analytic.mapv(|v| v * v).sum().sqrt().max(numeric.mapv(|v| v * v).sum().sqrt());
    diff / scale
}

/// Compares the tape gradient of the scalar `loss` with central differences
/// for every parameter in `params`.
pub fn check_params(store: &ParamStore, params: &[ParamId], loss: impl for<'t, 'p> Fn(&'t Tape<'p>) -> Var<'t, 'p>) -> GradCheck {
    let tape = Tape::new(store);
    let out = loss(&tape);
    let band = rounding_band(out.scalar());
    let grads = tape.backward(out);
    drop(tape);
    let mut scratch = store.clone();
    let mut errors = Vec::new();
    for &id in params {
        let base = store.get(id).clone();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Matrix::zeros(base.dim()));
        let mut numeric = Matrix::zeros(base.dim());
        for idx in 0..base.len() {
            let (r, c) = (idx / base.ncols(), idx % base.ncols());
            let mut eval = |delta: f64| {
                scratch.get_mut(id)[[r, c]] = base[[r, c]] + delta;
                let tape = Tape::new(&scratch);
                loss(&tape).scalar()
            };
            numeric[[r, c]] = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            scratch.get_mut(id)[[r, c]] = base[[r, c]];
        }
        errors.push((store.name(id).to_string(), relative_error(&analytic, &numeric, band)));
    }
    GradCheck { errors }
}

/// Compares the gradient with respect to an input leaf built from `x0`.
pub fn check_input(
    store: &ParamStore,
    x0: &Matrix,
    loss: impl for<'t, 'p> Fn(&'t Tape<'p>, Var<'t, 'p>) -> Var<'t, 'p>,
) -> GradCheck {
    let tape = Tape::new(store);
    let x = tape.input(x0.clone());
    let out = loss(&tape, x);
    let band = rounding_band(out.scalar());
    let (_, mut inputs) = tape.backward_with_inputs(out, &[x]);
    let analytic = inputs.remove(0);
    let mut numeric = Matrix::zeros(x0.dim());
    for idx in 0..x0.len() {
        let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
        let eval = |delta: f64| {
            let mut xp = x0.clone();
            xp[[r, c]] += delta;
            let tape = Tape::new(store);
            let x = tape.input(xp);
            loss(&tape, x).scalar()
        };
        numeric[[r, c]] = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
    }
    GradCheck { errors: vec![("input".to_string(), relative_error(&analytic, &numeric, band))] }
}
