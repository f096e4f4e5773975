//! Central finite-difference oracle for reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{DecaError, Result};
use crate::real::Real;
use crate::tensor::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates of each parameter, chosen
    /// deterministically from `seed`. `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

fn evaluate<T, F>(store: &ParamStore<T>, f: &F) -> Result<f64>
where
    T: Real,
    F: for<'g> Fn(&'g Graph<T>, &ParamStore<T>) -> Result<Var<'g, T>>,
{
    let g = Graph::new();
    let out = f(&g, store)?;
    if out.numel() != 1 {
        return Err(DecaError::Contract(format!(
            "finite_diff_check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    let v = out.item().as_f64();
    if !v.is_finite() {
        return Err(DecaError::Numeric(format!("function evaluated to {v}")));
    }
    Ok(v)
}

/// Gradients of `f` at the current parameters, computed by `backward`.
pub fn analytic_gradients<T, F>(store: &mut ParamStore<T>, f: &F) -> Result<Vec<Vec<T>>>
where
    T: Real,
    F: for<'g> Fn(&'g Graph<T>, &ParamStore<T>) -> Result<Var<'g, T>>,
{
    store.zero_grad();
    let g = Graph::new();
    let out = f(&g, store)?;
    g.backward(out, store)?;
    Ok(store
        .iter()
        .map(|p| p.tensor.grad.clone().expect("grads allocated by backward"))
        .collect())
}

/// Compares `backward` against central differences and reports the
/// largest relative error `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<T, F>(
    store: &mut ParamStore<T>,
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    T: Real,
    F: for<'g> Fn(&'g Graph<T>, &ParamStore<T>) -> Result<Var<'g, T>>,
{
    let analytic = analytic_gradients(store, &f)?;
    finite_diff_compare(store, opts, f, &analytic)
}

/// Same as [`finite_diff_check`] but against caller-supplied gradients.
pub fn finite_diff_compare<T, F>(
    store: &mut ParamStore<T>,
    opts: &GradCheckOptions,
    f: F,
    analytic: &[Vec<T>],
) -> Result<GradCheckReport>
where
    T: Real,
    F: for<'g> Fn(&'g Graph<T>, &ParamStore<T>) -> Result<Var<'g, T>>,
{
    if opts.eps <= 0.0 {
        return Err(DecaError::Contract("eps must be positive".into()));
    }
    if analytic.len() != store.len() {
        return Err(DecaError::Contract(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            store.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = store.get(id).tensor.numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.get(id).tensor.data()[i];
            let x = orig.as_f64();
            store.get_mut(id).tensor.data_mut()[i] = T::from_f64(x + opts.eps);
            let plus = evaluate(store, &f);
            store.get_mut(id).tensor.data_mut()[i] = T::from_f64(x - opts.eps);
            let minus = evaluate(store, &f);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = analytic[pi][i].as_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if report.coords_checked == 1 || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
