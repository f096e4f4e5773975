//! Multi-seed drivers for the variant ladder and the viewpoint-transfer
//! study.

use deca_core::data::{Dataset, Split, ViewTag};
use deca_core::metrics::MetricsReport;
use deca_core::model::{DecaConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::pipeline::{evaluate_checkpoint, train_model, transfer, TransferReport};

/// `base` with the variant (and its task set) replaced.
pub fn with_variant(base: &RunConfig, variant: Variant, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.model = DecaConfig { variant, input_channels: variant.domain().channels(), ..base.model.clone() };
    cfg.train.seed = seed;
    cfg
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LadderRun {
    pub variant: Variant,
    pub seed: u64,
    pub test: MetricsReport,
}

/// Trains every `(variant, seed)` on `view` and evaluates on that view's
/// test split. `keep` receives each trained checkpoint.
pub fn ablation_ladder(
    base: &RunConfig,
    dataset: &Dataset,
    view: Option<ViewTag>,
    variants: &[Variant],
    seeds: &[u64],
    mut keep: impl FnMut(&LadderRun, &Checkpoint),
) -> CliResult<Vec<LadderRun>> {
    let mut out = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let cfg = with_variant(base, variant, seed);
            let ck = train_model(&cfg, dataset, view, None, |_| Ok(()))?;
            let run = LadderRun { variant, seed, test: evaluate_checkpoint(&ck, dataset, view, Some(Split::Test))? };
            keep(&run, &ck);
            out.push(run);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferRun {
    pub seed: u64,
    pub report: TransferReport,
}

/// Trains on view `a` for each seed and reports transfer to view `b`.
pub fn transfer_study(base: &RunConfig, dataset: &Dataset, a: ViewTag, b: ViewTag, seeds: &[u64]) -> CliResult<Vec<TransferRun>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        let ck = train_model(&cfg, dataset, Some(a), None, |_| Ok(()))?;
        out.push(TransferRun { seed, report: transfer(&ck, dataset, a, b)? });
    }
    Ok(out)
}

/// Median of a non-empty list (mean of the middle pair for even length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
