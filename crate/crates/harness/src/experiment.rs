//! Train-and-evaluate runs over a prepared dataset, and ablation sweeps.

use std::path::Path;

use stmformer_core::model::{Stmformer, Variant};

use crate::bundle::DatasetBundle;
use crate::config::RunConfig;
use crate::data::{preprocess, Prepared};
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsReport;
use crate::train::{evaluate, train, TrainOutcome, TrainStatus};

/// A model for the extents of `bundle`.
pub fn build_model(run: &RunConfig, bundle: &DatasetBundle) -> Result<Stmformer> {
    let mut cfg = run.model.clone();
    cfg.t = bundle.config.t;
    cfg.n = bundle.config.n;
    cfg.c = bundle.config.c;
    cfg.ablation = run.variant.ablation();
    Ok(Stmformer::new(cfg)?)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub variant: Variant,
    pub outcome: TrainOutcome,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

/// Trains on the train split and evaluates on val and test.
pub fn run_experiment(
    bundle: &DatasetBundle,
    prepared: &Prepared,
    run: &RunConfig,
    on_update: impl FnMut(usize, f64),
) -> Result<RunResult> {
    let model = build_model(run, bundle)?;
    let outcome = train(model, &prepared.train, &bundle.deployment, &run.train, on_update)?;
    if let TrainStatus::Diverged { update } = outcome.status {
        return Err(HarnessError::NonFiniteLoss { update });
    }
    let norm = Some(&prepared.normalizer);
    let val = evaluate(&outcome.model, &prepared.val, &bundle.deployment, norm)?;
    let test = evaluate(&outcome.model, &prepared.test, &bundle.deployment, norm)?;
    Ok(RunResult {
        variant: run.variant,
        outcome,
        val,
        test,
    })
}

/// Trains and evaluates each variant with the seeds and budget of `run`.
/// The adjacency file is only read for variants that use it.
pub fn ablate(data: &Path, variants: &[Variant], run: &RunConfig, mut on_update: impl FnMut(Variant, usize, f64)) -> Result<Vec<RunResult>> {
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let bundle = DatasetBundle::load(data, !v.ablation().no_adjacency)?;
        let prepared = preprocess(&bundle)?;
        let run = run.clone().with_variant(v);
        out.push(run_experiment(&bundle, &prepared, &run, |u, l| on_update(v, u, l))?);
    }
    Ok(out)
}

