//! Feeding a model one event at a time must leave it in the same state as one batch.

use nbeval_core::algorithms::{self, ModelDefaults, ModelParams};
use nbeval_core::{Interaction, InteractionLog, PredictionRequest};
use proptest::prelude::*;

const MODELS: [&str; 3] = ["recent_popularity", "decay_popularity", "item_knn_incremental"];

fn log_strategy() -> impl Strategy<Value = InteractionLog> {
    prop::collection::vec((0u8..8, 0u8..15, 0i64..1_000), 1..=200).prop_map(|rows| {
        InteractionLog::from_triples(rows.into_iter().map(|(u, i, t)| (format!("u{u}"), format!("i{i}"), t)))
    })
}

fn requests() -> Vec<PredictionRequest> {
    (0..9)
        .map(|u| PredictionRequest {
            request_id: format!("r{u}"),
            user_id: format!("u{u}"),
            timestamp: 1_000,
            window_index: 0,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn one_at_a_time_equals_batch(log in log_strategy(), horizon in 1i64..600, probe_every in 1usize..20) {
        let defaults = ModelDefaults { window_width: horizon };
        let requests = requests();
        for name in MODELS {
            let params = ModelParams::new();
            let mut batch = algorithms::build_model(name, &params, defaults).unwrap();
            let mut stream = algorithms::build_model(name, &params, defaults).unwrap();
            batch.fit(log.records());
            for (n, event) in log.records().iter().enumerate() {
                stream.fit(std::slice::from_ref::<Interaction>(event));
                if n % probe_every == 0 {
                    // predictions in between must not disturb the incremental state
                    stream.predict(&requests, 5);
                }
            }
            prop_assert_eq!(batch.predict(&requests, 10), stream.predict(&requests, 10), "model {}", name);
        }
    }
}
