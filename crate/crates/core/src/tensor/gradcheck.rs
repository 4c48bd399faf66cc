//! Central finite-difference gradient checking.

use super::{Graph, Mode, ParamStore, TensorError, Var};

/// Largest deviation found by [`check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward-pass gradients of `loss` against central differences
/// with step `eps` for every element of every trainable parameter.
///
/// `loss` must build the same computation each time it is called; each call
/// gets a fresh graph in `mode` seeded with `seed`, so dropout masks repeat.
/// At most `max_per_param` elements are probed per parameter (evenly spaced).
pub fn check<F>(
    store: &ParamStore,
    mode: Mode,
    seed: u64,
    eps: f64,
    max_per_param: usize,
    loss: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph) -> Result<Var, TensorError>,
{
    let eval = |s: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::with_seed(s, mode, seed);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let grads = {
        let mut g = Graph::with_seed(store, mode, seed);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let step = n.div_ceil(max_per_param.max(1)).max(1);
        for i in (0..n).step_by(step) {
            let orig = p.value.data()[i];
            probe.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let rel = rel_error(analytic, numeric, 1e-6);
            report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{}[{i}]", p.name);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
