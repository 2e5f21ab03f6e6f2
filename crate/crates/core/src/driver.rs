//! In-process client loop: drives a [`Recommender`] through a run.

use std::sync::Arc;

use thiserror::Error;
use uuid::Uuid;

use crate::algorithms::{self, ModelDefaults, ModelError, ModelParams, Recommender};
use crate::interactions::{Interaction, InteractionLog};
use crate::metrics::MetricReport;
use crate::protocol::{
    EvaluationContext, Metadata, PredictionSubmission, ProtocolError, ResultRelease, RunPhase, RunRegistry,
};
use crate::split::{self, PredictionRequest, SplitConfig};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Interactions a client learns from a result release: each request paired
/// with its revealed item, plus the remaining interactions, in timeline order.
pub fn release_batch(requests: &[PredictionRequest], release: &ResultRelease) -> Vec<Interaction> {
    let mut batch: Vec<Interaction> = requests
        .iter()
        .filter_map(|r| {
            let item = release.ground_truth.get(&r.request_id)?;
            Some(Interaction::new(r.user_id.clone(), item.clone(), r.timestamp, 0))
        })
        .collect();
    batch.extend(release.remaining.iter().cloned());
    batch.sort_by_key(|r| r.timestamp);
    batch
}

/// Metadata recorded for a built-in model.
pub fn model_metadata(name: &str, params: &ModelParams) -> Metadata {
    let mut meta = Metadata::new();
    meta.insert("model".into(), name.into());
    meta.insert("params".into(), serde_json::to_value(params).expect("params serialize"));
    meta
}

pub fn model_defaults(ctx: &EvaluationContext) -> ModelDefaults {
    let first = ctx.windows[0];
    ModelDefaults {
        window_width: (first.t_end - first.t_start).max(1),
    }
}

/// Restores a model's state for a run that is already past training release,
/// by refitting everything the run has released so far.
fn catch_up(registry: &RunRegistry, run_id: Uuid, model: &mut dyn Recommender) -> Result<RunPhase, DriverError> {
    let run = registry.run(run_id)?;
    let run = run.lock();
    let ctx = run.context().clone();
    if run.phase() != RunPhase::Registered {
        model.fit(split::background_data(&ctx.log, &ctx.config).records());
        for m in run.released_windows() {
            let release = ResultRelease {
                window_index: m.window.index,
                ground_truth: m.ground_truth.clone(),
                remaining: m.remaining.clone(),
            };
            model.fit(&release_batch(&m.requests, &release));
        }
    }
    Ok(run.phase())
}

/// Runs `model` through every remaining phase of `run_id` and returns the final report.
///
/// Works for fresh runs and for runs resumed after a restart. `on_window` is
/// called with `(completed_windows, total_windows)` after each result release.
pub fn drive(
    registry: &RunRegistry,
    run_id: Uuid,
    model: &mut dyn Recommender,
    mut on_window: impl FnMut(usize, usize),
) -> Result<MetricReport, DriverError> {
    let (k, total) = {
        let run = registry.run(run_id)?;
        let run = run.lock();
        (run.context().config.max_k(), run.context().n_windows())
    };
    let mut phase = catch_up(registry, run_id, model)?;
    let mut pending: Vec<PredictionRequest> = Vec::new();
    loop {
        match phase {
            RunPhase::Registered => {
                let background = registry.get_training_data(run_id)?;
                model.fit(background.records());
            }
            RunPhase::AwaitingPrediction(w) => {
                let requests = registry.get_unlabeled_data(run_id)?;
                let lists = model.predict(&requests, k);
                let predictions = requests
                    .iter()
                    .zip(lists)
                    .map(|(r, l)| (r.request_id.clone(), l.into_iter().take(k).collect()))
                    .collect();
                registry.submit_prediction(
                    run_id,
                    PredictionSubmission {
                        window_index: w,
                        predictions,
                    },
                )?;
                pending = requests;
            }
            RunPhase::PredictionReceived(w) => {
                let release = registry.get_results(run_id)?;
                if pending.is_empty() {
                    // resumed between submission and release: the requests are no longer
                    // served, so take them from the run's released window
                    let run = registry.run(run_id)?;
                    let run = run.lock();
                    pending = run
                        .released_windows()
                        .last()
                        .map(|m| m.requests.clone())
                        .unwrap_or_default();
                }
                model.fit(&release_batch(&pending, &release));
                pending.clear();
                on_window(w + 1, total);
            }
            RunPhase::Completed => return Ok(registry.get_report(run_id, false)?),
            RunPhase::TrainingReleased | RunPhase::ResultsReleased(_) | RunPhase::Failed => {
                return Err(ProtocolError::OutOfOrder { call: "drive", phase }.into());
            }
        }
        phase = registry.status(run_id)?.phase;
    }
}

/// Evaluates a built-in model on `log` in-process and returns its report.
pub fn evaluate(
    log: Arc<InteractionLog>,
    config: SplitConfig,
    model_name: &str,
    params: &ModelParams,
) -> Result<MetricReport, DriverError> {
    let ctx = Arc::new(EvaluationContext::new(log, config).map_err(ProtocolError::from)?);
    let name = algorithms::canonical_model_name(model_name)?;
    let mut model = algorithms::build_model(name, params, model_defaults(&ctx))?;
    let registry = RunRegistry::default();
    let run_id = registry.register_with(ctx, model_metadata(name, params))?;
    drive(&registry, run_id, model.as_mut(), |_, _| {})
}
