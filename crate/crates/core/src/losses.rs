//! Task losses and the self-balancing aggregate `Σ_τ (s_τ + e^{−s_τ}·L_τ)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{DecaError, Result};
use crate::model::Task;
use crate::real::Real;
use crate::tensor::{ParamId, ParamStore};

fn same_shape<T: Real>(what: &str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<usize> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.is_empty() {
        return Err(DecaError::Dimension(format!(
            "{what}: prediction {sa:?} and target {sb:?} differ"
        )));
    }
    Ok(sa[0])
}

/// Squared error summed over every element, divided by the batch size
/// (the leading dimension).
pub fn mse_loss<'g, T: Real>(pred: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    let bs = same_shape("mse_loss", &pred, &target)?;
    Ok(pred.sub(target)?.square().sum().scale(T::from_f64(1.0 / bs as f64)))
}

/// `Σ (mask·|y − ŷ| + |y − ŷ|) / (2·BS)` with `mask = target > threshold`.
pub fn masked_l1_loss<'g, T: Real>(pred: Var<'g, T>, target: Var<'g, T>, depth_threshold: f64) -> Result<Var<'g, T>> {
    let bs = same_shape("masked_l1_loss", &pred, &target)?;
    let weights: Vec<T> = target.with_data(|t| {
        t.iter()
            .map(|&v| if v.as_f64() > depth_threshold { T::from_f64(2.0) } else { T::one() })
            .collect()
    });
    let w = pred.graph().input(&pred.shape(), weights)?;
    Ok(pred.sub(target)?.abs().mul(w)?.sum().scale(T::from_f64(0.5 / bs as f64)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseGraphicsMode {
    /// Mean of `‖ŷ_W[j]·W[i,j] − I‖_F`.
    #[default]
    IdentityResidual,
    /// Mean of `‖ŷ_W[j]·W[i,j]‖_F`; minimized by `ŷ_W = 0`.
    ProductNorm,
}

/// Mean Frobenius residual over every `(i, j)` transform of the class
/// layer. `y: [J,4,4]`, `w: [T,J,4,4]`.
pub fn inverse_graphics_loss<'g, T: Real>(
    y: Var<'g, T>,
    w: Var<'g, T>,
    mode: InverseGraphicsMode,
) -> Result<Var<'g, T>> {
    let (ys, ws) = (y.shape(), w.shape());
    if ys.len() != 3 || ws.len() != 4 || ys[1..] != [4, 4] || ws[2..] != [4, 4] || ys[0] != ws[1] {
        return Err(DecaError::Dimension(format!(
            "inverse_graphics_loss expects [J,4,4] and [T,J,4,4], got {ys:?} and {ws:?}"
        )));
    }
    let (t, j) = (ws[0], ws[1]);
    let mut prod = y.reshape(&[1, j, 4, 4])?.matmul(w)?;
    if mode == InverseGraphicsMode::IdentityResidual {
        let mut eye = vec![T::zero(); 16];
        (0..4).for_each(|i| eye[i * 5] = T::one());
        prod = prod.sub(y.graph().input(&[4, 4], eye)?)?;
    }
    let norms = prod.square().reshape(&[t * j, 16])?.sum_axis(1)?.sqrt();
    Ok(norms.mean())
}

/// `Σ_τ (s_τ + e^{−s_τ}·L_τ)` over tasks; the key sets must coincide.
pub fn total_loss<'g, T: Real>(
    g: &'g Graph<T>,
    store: &ParamStore<T>,
    weights: &BTreeMap<Task, ParamId>,
    losses: &BTreeMap<Task, Var<'g, T>>,
) -> Result<Var<'g, T>> {
    let s: BTreeMap<Task, Var<'g, T>> = weights.iter().map(|(&t, &id)| (t, g.param(store, id))).collect();
    weighted_total(&s, losses)
}

/// [`total_loss`] with the `s_τ` already on the graph.
pub fn weighted_total<'g, T: Real>(
    s: &BTreeMap<Task, Var<'g, T>>,
    losses: &BTreeMap<Task, Var<'g, T>>,
) -> Result<Var<'g, T>> {
    if !s.keys().eq(losses.keys()) || s.is_empty() {
        return Err(DecaError::Config(format!(
            "loss weights for {:?} but losses for {:?}",
            s.keys().collect::<Vec<_>>(),
            losses.keys().collect::<Vec<_>>()
        )));
    }
    let mut total: Option<Var<'g, T>> = None;
    for (task, &st) in s {
        let l = losses[task];
        if l.numel() != 1 {
            return Err(DecaError::Contract(format!("loss for {task} is not a scalar")));
        }
        let term = st.add(st.neg().exp().mul(l.reshape(&[1])?)?)?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    Ok(total.expect("non-empty").reshape(&[1])?)
}
