//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Grads, ParamId, ParamStore, Var};
use crate::scalar::Scalar;

/// Denominator floor of the relative error, so that gradients that are
/// essentially zero are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a kink
    /// (a ReLU sign flip or a sparsemax support change).
    pub skipped: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient of `loss` against central differences with
/// step `h` for every entry of the parameters in `params` (all parameters
/// when empty).
pub fn check_gradients<T, F>(store: &mut ParamStore<T>, params: &[ParamId], h: f64, mut loss: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<'_, T>) -> Result<Var>,
{
    let ids: Vec<ParamId> = if params.is_empty() { store.ids().collect() } else { params.to_vec() };
    let mut grads = Grads::zeros_like(store);
    let base_sig = {
        let mut g = Graph::new(store);
        let root = loss(&mut g)?;
        g.backward(root, &mut grads)?;
        g.kink_signature()
    };
    let mut eval = |store: &ParamStore<T>| -> Result<(f64, u64)> {
        let mut g = Graph::new(store);
        let root = loss(&mut g)?;
        Ok((g.value(root).item().as_f64(), g.kink_signature()))
    };
    let mut report = GradCheckReport::default();
    let step = T::lit(h);
    for id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let (plus, sig_p) = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - step;
            let (minus, sig_m) = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).data()[i].as_f64();
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), i, analytic, numeric));
                }
            }
        }
    }
    Ok(report)
}
