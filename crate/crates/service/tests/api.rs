use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nbeval_service::{AppState, FileStore};
use reqwest::multipart::{Form, Part};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

struct Server {
    base: String,
    client: Client,
    token: Option<String>,
    handle: JoinHandle<()>,
}

impl Drop for Server {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

async fn start(dir: &Path, token: Option<&str>) -> Server {
    let store = FileStore::open(dir).unwrap();
    let state = AppState::open(Arc::new(store), 2, token.map(str::to_string)).unwrap();
    state.resume_jobs();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let handle = tokio::spawn(async move {
        axum::serve(listener, nbeval_service::router(state)).await.unwrap();
    });
    Server {
        base,
        client: Client::new(),
        token: token.map(str::to_string),
        handle,
    }
}

/// 12 users over t in [0, 1200); background ends at 400.
fn dataset_csv() -> String {
    let mut out = String::from("user_id,item_id,timestamp\n");
    for t in 0..1200i64 {
        if t % 7 == 0 {
            let user = (t * 5) % 12;
            let item = (t * 3 + user) % 9;
            out.push_str(&format!("u{user},i{item},{t}\n"));
        }
    }
    out
}

impl Server {
    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn auth(&self, rb: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        }
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let resp = self.client.get(self.url(path)).send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let resp = self
            .auth(self.client.post(self.url(path)))
            .json(&body)
            .send()
            .await
            .unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn upload(&self, csv: String) -> (StatusCode, Value) {
        let form = Form::new().part("file", Part::text(csv).file_name("toy.csv"));
        let resp = self
            .auth(self.client.post(self.url("/v1/datasets")))
            .multipart(form)
            .send()
            .await
            .unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap())
    }

    async fn setup(&self, n_windows: usize) -> (String, String) {
        let (status, dataset) = self.upload(dataset_csv()).await;
        assert_eq!(status, StatusCode::CREATED, "{dataset}");
        let config = json!({ "t_background_end": 400, "n_windows": n_windows, "k_values": [5, 10], "include_unknown_users": true });
        let (status, config) = self.post("/v1/configs", config).await;
        assert_eq!(status, StatusCode::CREATED, "{config}");
        (
            dataset["id"].as_str().unwrap().into(),
            config["id"].as_str().unwrap().into(),
        )
    }

    async fn new_run(&self, dataset: &str, config: &str) -> String {
        let (status, run) = self
            .post("/v1/runs", json!({ "dataset_id": dataset, "config_id": config }))
            .await;
        assert_eq!(status, StatusCode::CREATED, "{run}");
        assert_eq!(run["phase"], "REGISTERED");
        run["run_id"].as_str().unwrap().into()
    }

    /// Predicts a fixed list for every outstanding request and releases the results.
    async fn play_window(&self, run: &str) -> Value {
        let (status, unlabeled) = self.get(&format!("/v1/runs/{run}/unlabeled")).await;
        assert_eq!(status, StatusCode::OK, "{unlabeled}");
        let w = unlabeled["window_index"].as_u64().unwrap();
        let predictions: serde_json::Map<String, Value> = unlabeled["requests"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| {
                (
                    r["request_id"].as_str().unwrap().to_string(),
                    json!(["i0", "i1", "i2", "i3"]),
                )
            })
            .collect();
        let (status, body) = self
            .post(
                &format!("/v1/runs/{run}/predictions"),
                json!({ "window_index": w, "predictions": predictions }),
            )
            .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let (status, results) = self.get(&format!("/v1/runs/{run}/results")).await;
        assert_eq!(status, StatusCode::OK, "{results}");
        results
    }

    async fn training(&self, run: &str) -> String {
        let resp = self
            .client
            .get(self.url(&format!("/v1/runs/{run}/training-data")))
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        resp.text().await.unwrap()
    }

    async fn report_text(&self, run: &str, query: &str) -> (StatusCode, String) {
        let resp = self
            .client
            .get(self.url(&format!("/v1/runs/{run}/report{query}")))
            .send()
            .await
            .unwrap();
        (resp.status(), resp.text().await.unwrap())
    }
}

#[tokio::test]
async fn protocol_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path(), None).await;
    assert_eq!(server.get("/health").await, (StatusCode::OK, json!({ "status": "ok" })));
    let (dataset, config) = server.setup(3).await;
    let run = server.new_run(&dataset, &config).await;

    let (status, err) = server.get(&format!("/v1/runs/{run}/unlabeled")).await;
    assert_eq!(
        (status, err["error"].as_str()),
        (StatusCode::CONFLICT, Some("OutOfOrder"))
    );

    let training = server.training(&run).await;
    assert!(training.starts_with("user_id,item_id,timestamp\n"));
    assert!(training
        .lines()
        .skip(1)
        .all(|l| l.rsplit(',').next().unwrap().parse::<i64>().unwrap() < 400));
    let resp = server
        .client
        .get(server.url(&format!("/v1/runs/{run}/training-data")))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::CONFLICT);

    let (_, unlabeled) = server.get(&format!("/v1/runs/{run}/unlabeled")).await;
    let rid = unlabeled["requests"][0]["request_id"].as_str().unwrap().to_string();
    let cases = [
        (
            json!({ "window_index": 1, "predictions": {} }),
            StatusCode::CONFLICT,
            "StaleWindow",
        ),
        (
            json!({ "window_index": 0, "predictions": { &rid: ["a", "a"] } }),
            StatusCode::UNPROCESSABLE_ENTITY,
            "DuplicateInRanking",
        ),
        (
            json!({ "window_index": 0, "predictions": { &rid: (0..11).map(|i| format!("x{i}")).collect::<Vec<_>>() } }),
            StatusCode::UNPROCESSABLE_ENTITY,
            "RankingTooLong",
        ),
        (
            json!({ "window_index": 0, "predictions": { "nope": [] } }),
            StatusCode::NOT_FOUND,
            "UnknownRequestId",
        ),
        (json!({ "window_index": "zero" }), StatusCode::UNPROCESSABLE_ENTITY, ""),
    ];
    for (body, expected, code) in cases {
        let (status, err) = server.post(&format!("/v1/runs/{run}/predictions"), body).await;
        if code.is_empty() {
            assert!(status.is_client_error(), "{err}");
            assert_eq!(err["error"], "MalformedRequest");
        } else {
            assert_eq!((status, err["error"].as_str().unwrap()), (expected, code));
        }
    }
    let resp = server
        .client
        .post(server.url(&format!("/v1/runs/{run}/predictions")))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);

    let (status, _) = server.get(&format!("/v1/runs/{run}/results")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = server.report_text(&run, "").await;
    assert_eq!(status, StatusCode::CONFLICT);

    for w in 0..3 {
        let results = server.play_window(&run).await;
        assert_eq!(results["window_index"], w);
        let expected = if w < 2 { "AWAITING_PREDICTION" } else { "COMPLETED" };
        assert_eq!(results["phase"], expected);
        if w == 0 {
            let (status, partial) = server.report_text(&run, "?partial=true").await;
            assert_eq!(status, StatusCode::OK);
            assert_eq!(serde_json::from_str::<Value>(&partial).unwrap()["partial"], true);
        }
    }
    let (status, report) = server.report_text(&run, "").await;
    assert_eq!(status, StatusCode::OK);
    let report: Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["windows"].as_array().unwrap().len(), 3);
    assert!(report["macro"]["hit_rate@10"].is_number());
    let (_, csv) = server.report_text(&run, "?format=csv").await;
    assert!(csv.starts_with("window_index,metric,k,value,n_users\n"));
    assert_eq!(csv.lines().count(), 1 + (3 + 2) * 8);

    let (status, err) = server.get("/v1/runs/00000000-0000-0000-0000-000000000000").await;
    assert_eq!(
        (status, err["error"].as_str()),
        (StatusCode::NOT_FOUND, Some("UnknownRun"))
    );
    let (status, _) = server.post(&format!("/v1/runs/{run}/abort"), json!({})).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path(), None).await;
    let (status, err) = server
        .post("/v1/configs", json!({ "t_background_end": 1, "n_windows": 0 }))
        .await;
    assert_eq!(
        (status, err["error"].as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, Some("InvalidConfig"))
    );
    let (status, err) = server.upload("user_id,item_id,timestamp\na,b,x\nc,d,y\n".into()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{err}");

    let (dataset, _) = server.setup(2).await;
    let (_, config) = server
        .post("/v1/configs", json!({ "t_background_end": 5000, "n_windows": 2 }))
        .await;
    let (status, err) = server
        .post("/v1/runs", json!({ "dataset_id": dataset, "config_id": config["id"] }))
        .await;
    assert_eq!(
        (status, err["error"].as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, Some("SplitOutOfRange"))
    );
    let (status, _) = server
        .post(
            "/v1/runs",
            json!({ "dataset_id": "missing", "config_id": config["id"] }),
        )
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, err) = server
        .post(
            "/v1/jobs",
            json!({ "dataset_id": dataset, "config_id": config["id"], "model": "svd" }),
        )
        .await;
    assert_eq!(
        (status, err["error"].as_str()),
        (StatusCode::UNPROCESSABLE_ENTITY, Some("UnknownModel"))
    );
}

#[tokio::test]
async fn write_requests_need_the_token() {
    let dir = tempfile::tempdir().unwrap();
    let mut server = start(dir.path(), Some("s3cret")).await;
    server.token = None;
    let (status, err) = server
        .post("/v1/configs", json!({ "t_background_end": 1, "n_windows": 1 }))
        .await;
    assert_eq!(
        (status, err["error"].as_str()),
        (StatusCode::UNAUTHORIZED, Some("Unauthorized"))
    );
    assert_eq!(server.get("/v1/configs").await.0, StatusCode::OK);
    server.token = Some("s3cret".into());
    let (status, _) = server
        .post("/v1/configs", json!({ "t_background_end": 1, "n_windows": 1 }))
        .await;
    assert_eq!(status, StatusCode::CREATED);
}

async fn wait_for_job(server: &Server, job: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let (_, record) = server.get(&format!("/v1/jobs/{job}")).await;
        if record["status"] == "COMPLETED" || record["status"] == "FAILED" {
            return record;
        }
        assert!(Instant::now() < deadline, "job did not finish: {record}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn jobs_run_in_the_background() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path(), None).await;
    let (dataset, config) = server.setup(4).await;
    for model in ["RecentPopularity", "decay_popularity", "ItemKNNIncremental"] {
        let started = Instant::now();
        let (status, job) = server
            .post(
                "/v1/jobs",
                json!({ "dataset_id": dataset, "config_id": config, "model": model }),
            )
            .await;
        assert!(started.elapsed() < Duration::from_millis(100));
        assert_eq!(status, StatusCode::ACCEPTED, "{job}");
        assert_eq!(job["status"], "QUEUED");
        let done = wait_for_job(&server, job["job_id"].as_str().unwrap()).await;
        assert_eq!(done["status"], "COMPLETED", "{done}");
        assert_eq!(done["progress"], json!({ "completed_windows": 4, "total_windows": 4 }));
        let run = done["run_id"].as_str().unwrap();
        let (status, report) = server.get(&format!("/v1/runs/{run}/report")).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(
            report["model"]["model"],
            json!(nbeval_core::algorithms::canonical_model_name(model).unwrap())
        );
    }
    assert_eq!(server.get("/v1/jobs").await.1.as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn runs_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (expected, run) = {
        let server = start(dir.path(), None).await;
        let (dataset, config) = server.setup(3).await;
        let reference = server.new_run(&dataset, &config).await;
        server.training(&reference).await;
        for _ in 0..3 {
            server.play_window(&reference).await;
        }
        let (_, expected) = server.report_text(&reference, "").await;

        let run = server.new_run(&dataset, &config).await;
        server.training(&run).await;
        server.play_window(&run).await;
        (expected, run)
    };
    std::fs::write(
        dir.path()
            .join("runs")
            .join("11111111-1111-1111-1111-111111111111.jsonl"),
        "{\"event\":\"regis",
    )
    .unwrap();

    let server = start(dir.path(), None).await;
    let (_, status) = server.get(&format!("/v1/runs/{run}")).await;
    assert_eq!(status["phase"], "AWAITING_PREDICTION");
    assert_eq!(status["window"], 1);
    for _ in 1..3 {
        server.play_window(&run).await;
    }
    let (_, report) = server.report_text(&run, "").await;
    assert_eq!(report, expected);

    let (_, broken) = server.get("/v1/runs/11111111-1111-1111-1111-111111111111").await;
    assert_eq!(broken["phase"], "FAILED");
    let (status, err) = server
        .get("/v1/runs/11111111-1111-1111-1111-111111111111/unlabeled")
        .await;
    assert_eq!(
        (status, err["error"].as_str()),
        (StatusCode::CONFLICT, Some("RunFailed"))
    );
}
