//! Central-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Precision, Var};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_coords_per_param: Option<usize>,
    /// Adds this offset to the first analytic gradient coordinate. Exists so
    /// harnesses can prove they detect a broken gradient.
    pub corrupt: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_param: None,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

pub fn grad_check<F>(store: &mut ParamStore, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_with(
        store,
        &GradCheckOptions {
            step,
            ..Default::default()
        },
        f,
    )
}

/// Compares the analytic gradient of `f` against central differences for
/// every parameter in `store`, always in 64-bit mode.
pub fn grad_check_with<F>(
    store: &mut ParamStore,
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(TensorError::Invalid("grad_check: step must be positive".into()));
    }
    let mut g = Graph::new(Precision::F64);
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|(_, p)| vec![0.0; p.value.len()])
        .collect();
    for (id, t) in grads.param_grads(&g) {
        for (a, v) in analytic[id.index()].iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    if let Some(delta) = opts.corrupt {
        if let Some(first) = analytic.iter_mut().find(|a| !a.is_empty()) {
            first[0] += delta;
        }
    }
    drop(g);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(Precision::F64);
        let l = f(&mut g, store)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.len();
        let stride = match opts.max_coords_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.step;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - opts.step;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let non_finite = || TensorError::NonFiniteEval {
                param: store.get(id).name.clone(),
                index: i,
            };
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(TensorError::NonFinite { .. }), _)
                | (_, Err(TensorError::NonFinite { .. }))
                | (Ok(_), Ok(_)) => return Err(non_finite()),
                (Err(e), _) | (_, Err(e)) => return Err(e),
            };
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[id.index()][i];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
