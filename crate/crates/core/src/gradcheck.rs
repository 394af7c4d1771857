//! Central finite-difference gradient checking.

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so entries whose true gradient
/// is (near) zero are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, input: usize, idx: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((input, idx, analytic, numeric));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Check the gradient of `f` with respect to every entry of `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |f: &mut F, xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zero(&tape, v)).collect();

    let mut report = GradCheckReport::default();
    let mut xs = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..xs[t].len() {
            let orig = xs[t].data()[i];
            xs[t].data_mut()[i] = orig + h;
            let plus = eval(&mut f, &xs)?;
            xs[t].data_mut()[i] = orig - h;
            let minus = eval(&mut f, &xs)?;
            xs[t].data_mut()[i] = orig;
            report.record(t, i, grad.data()[i], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Check the gradient of `f` with respect to stored parameters.
///
/// When `coords_per_param` is set, only that many seeded-random entries of
/// each parameter are perturbed.
pub fn check_params<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    h: f64,
    coords_per_param: Option<usize>,
    seed: u64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    store.accumulate(&tape, &grads);
    let analytic: Vec<Tensor> = params.iter().map(|&p| store.get(p).grad_or_zero()).collect();
    store.zero_grad();

    let mut rng = SeededRng::new(seed);
    let mut report = GradCheckReport::default();
    for (t, &pid) in params.iter().enumerate() {
        let n = store.value(pid).len();
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < n => (0..k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.value(pid).data()[i];
            store.value_mut(pid).data_mut()[i] = orig + h;
            let mut tape = Tape::new();
            let out = f(&mut tape, store)?;
            let plus = tape.value(out).item();
            store.value_mut(pid).data_mut()[i] = orig - h;
            let mut tape = Tape::new();
            let out = f(&mut tape, store)?;
            let minus = tape.value(out).item();
            store.value_mut(pid).data_mut()[i] = orig;
            report.record(t, i, analytic[t].data()[i], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}
