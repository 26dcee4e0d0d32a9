//! Central finite-difference verification of analytic gradients.

use super::params::ParamStore;
use super::tensor::Tensor;

/// Floor applied to the relative-error denominator so that gradients that are
/// zero up to rounding are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Step used to re-check coordinates whose stencil straddles a kink.
pub const FINE_STEP: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(slot name, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Coordinates whose difference quotient had not converged at `step`;
    /// these were compared at [`FINE_STEP`] instead.
    pub non_smooth: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn central<L: FnMut(&ParamStore) -> f64>(store: &mut ParamStore, id: usize, i: usize, h: f64, loss: &mut L) -> f64 {
    let orig = store.get(id).data()[i];
    store.get_mut(id).data_mut()[i] = orig + h;
    let up = loss(store);
    store.get_mut(id).data_mut()[i] = orig - h;
    let down = loss(store);
    store.get_mut(id).data_mut()[i] = orig;
    (up - down) / (2.0 * h)
}

/// Compare `analytic` (indexed by slot) against `(f(p + h) − f(p − h)) / 2h`
/// for every element of every trainable slot in `ids`.
///
/// When an element misses `tol` the quotient is recomputed at `h / 10`. If the
/// mismatch comes from the analytic side both quotients agree with each other
/// and the element fails. If instead the two quotients differ by more than
/// `tol`, the one at `h` is not accurate to `tol` (typically because the
/// stencil crosses ReLU, |·| or clamp kinks) and the element is judged at
/// [`FINE_STEP`]. A probe at `h / 2` is not enough: with several kinks between
/// `h / 10` and `h` both wide stencils can be off by the same amount.
///
/// `loss` must be a deterministic function of the store (fixed dropout masks,
/// fixed inputs). Parameters are perturbed in `f64`; the store is restored
/// afterwards.
pub fn check_gradients(
    store: &mut ParamStore,
    ids: &[usize],
    analytic: &[Option<Tensor>],
    step: f64,
    tol: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        non_smooth: 0,
    };
    for &id in ids {
        if !store.entry(id).trainable {
            continue;
        }
        for i in 0..store.get(id).len() {
            let a = analytic[id].as_ref().map_or(0.0, |t| t.data()[i]);
            let mut numeric = central(store, id, i, step, &mut loss);
            let mut err = relative_error(a, numeric);
            if err >= tol {
                let narrow = central(store, id, i, step / 10.0, &mut loss);
                if relative_error(numeric, narrow) > tol {
                    report.non_smooth += 1;
                    numeric = central(store, id, i, FINE_STEP, &mut loss);
                    err = relative_error(a, numeric);
                }
            }
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.entry(id).name.clone(), i, a, numeric));
            }
        }
    }
    report
}
