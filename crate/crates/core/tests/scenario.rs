//! Three users over January to April, background Jan-Feb, windows March and April.

use std::sync::Arc;

use nbeval_core::algorithms::{self, ModelParams};
use nbeval_core::driver;
use nbeval_core::protocol::{
    EvaluationContext, MemorySink, Metadata, PredictionSubmission, Run, RunPhase, RunRegistry,
};
use nbeval_core::{InteractionLog, SplitConfig};

const MARCH: i64 = 100;

fn fixture() -> Arc<InteractionLog> {
    Arc::new(InteractionLog::from_triples([
        ("u1", "1", 10),
        ("u2", "4", 20),
        ("u1", "3", 30),
        ("u2", "2", 40),
        ("u2", "6", 50),
        ("u2", "5", 60),
        ("u2", "9", 70),
        ("u2", "8", 80),
        ("u2", "10", 90),
        ("u2", "7", 95),
        ("u1", "2", 110),
        ("u1", "6", 120),
        ("u2", "5", 130),
        ("u3", "9", 140),
        ("u1", "7", 150),
        ("u3", "10", 260),
        ("u2", "8", 300),
    ]))
}

fn context(unknown_users: bool) -> Arc<EvaluationContext> {
    let mut config = SplitConfig::new(MARCH, 2);
    config.include_unknown_users = unknown_users;
    Arc::new(EvaluationContext::new(fixture(), config).unwrap())
}

fn users(requests: &[nbeval_core::PredictionRequest]) -> Vec<&str> {
    requests.iter().map(|r| r.user_id.as_str()).collect()
}

#[test]
fn march_and_april_with_unknown_users_disabled() {
    let registry = RunRegistry::default();
    let id = registry.register_with(context(false), Metadata::new()).unwrap();
    let background = registry.get_training_data(id).unwrap();
    assert!(background.iter().all(|r| r.timestamp < MARCH));
    assert!(background.iter().all(|r| r.user_id != "u3"));

    let march = registry.get_unlabeled_data(id).unwrap();
    assert_eq!(users(&march), ["u1", "u1", "u2"]);
    assert_eq!(march.iter().map(|r| r.timestamp).collect::<Vec<_>>(), [110, 120, 130]);

    let sub = PredictionSubmission {
        window_index: 0,
        predictions: [(march[0].request_id.clone(), vec!["2".into(), "6".into()])].into(),
    };
    let scores = registry.submit_prediction(id, sub).unwrap();
    assert_eq!((scores.n_users, scores.n_requests), (2, 3));

    let release = registry.get_results(id).unwrap();
    let truth: Vec<&str> = march
        .iter()
        .map(|r| release.ground_truth[&r.request_id].as_str())
        .collect();
    assert_eq!(truth, ["2", "6", "5"]);
    let remaining: Vec<(&str, &str)> = release
        .remaining
        .iter()
        .map(|r| (r.user_id.as_str(), r.item_id.as_str()))
        .collect();
    assert_eq!(remaining, [("u3", "9"), ("u1", "7")]);

    let run = registry.run(id).unwrap();
    assert!(run.lock().is_known_user("u3"));
    let april = registry.get_unlabeled_data(id).unwrap();
    assert_eq!(users(&april), ["u3", "u2"]);
}

#[test]
fn unknown_user_gets_a_request_when_enabled() {
    let registry = RunRegistry::default();
    let id = registry.register_with(context(true), Metadata::new()).unwrap();
    registry.get_training_data(id).unwrap();
    let march = registry.get_unlabeled_data(id).unwrap();
    assert_eq!(users(&march), ["u1", "u1", "u2", "u3"]);
}

fn full_report(ctx: Arc<EvaluationContext>, model: &str) -> String {
    let mut m = algorithms::build_model(model, &ModelParams::new(), driver::model_defaults(&ctx)).unwrap();
    let registry = RunRegistry::default();
    let id = registry
        .register_with(ctx, driver::model_metadata(model, &ModelParams::new()))
        .unwrap();
    driver::drive(&registry, id, m.as_mut(), |_, _| {}).unwrap().to_json()
}

#[test]
fn resumed_runs_report_like_uninterrupted_ones() {
    let ctx = context(true);
    for model in ["recent_popularity", "decay_popularity", "item_knn_incremental"] {
        let expected = full_report(ctx.clone(), model);
        // stop after every possible number of protocol steps, then recover from the event log
        for stop_after in 0..=5 {
            let sink = Arc::new(MemorySink::default());
            let registry = RunRegistry::new(sink.clone());
            let params = ModelParams::new();
            let id = registry
                .register_with(ctx.clone(), driver::model_metadata(model, &params))
                .unwrap();
            let mut m = algorithms::build_model(model, &params, driver::model_defaults(&ctx)).unwrap();
            let mut steps = 0;
            let mut pending = Vec::new();
            while steps < stop_after {
                match registry.status(id).unwrap().phase {
                    RunPhase::Registered => m.fit(registry.get_training_data(id).unwrap().records()),
                    RunPhase::AwaitingPrediction(w) => {
                        let requests = registry.get_unlabeled_data(id).unwrap();
                        let lists = m.predict(&requests, 10);
                        let predictions = requests.iter().map(|r| r.request_id.clone()).zip(lists).collect();
                        registry
                            .submit_prediction(
                                id,
                                PredictionSubmission {
                                    window_index: w,
                                    predictions,
                                },
                            )
                            .unwrap();
                        pending = requests;
                    }
                    RunPhase::PredictionReceived(_) => {
                        let release = registry.get_results(id).unwrap();
                        m.fit(&driver::release_batch(&pending, &release));
                    }
                    _ => break,
                }
                steps += 1;
            }
            drop(registry);

            let run = Run::replay(ctx.clone(), &sink.events(id)).unwrap();
            let recovered = RunRegistry::new(sink.clone());
            recovered.insert_recovered(run);
            let mut fresh = algorithms::build_model(model, &params, driver::model_defaults(&ctx)).unwrap();
            let report = driver::drive(&recovered, id, fresh.as_mut(), |_, _| {})
                .unwrap()
                .to_json();
            assert_eq!(report, expected, "{model} resumed after {stop_after} steps");
        }
    }
}
