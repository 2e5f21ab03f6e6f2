//! Evaluation run lifecycle.
//!
//! A run moves through a fixed sequence of phases:
//!
//! ```text
//! REGISTERED -> TRAINING_RELEASED
//!   -> [AWAITING_PREDICTION(w) -> PREDICTION_RECEIVED(w) -> RESULTS_RELEASED(w)] for each window w
//!   -> COMPLETED
//! ```
//!
//! Every state change is an event appended to the run's log before it is
//! applied, so a [`Run`] is a pure fold over its events and can be rebuilt
//! after a restart with [`Run::replay`]. The run is the only component that
//! decides what the evaluated model may see: ground truth is released only
//! after the window's predictions were accepted.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::interactions::{Interaction, InteractionLog};
use crate::metrics::{self, MetricReport, MetricValues, MetricsError, RequestOutcome, WindowScore};
use crate::split::{self, EvaluationWindow, PredictionRequest, SplitConfig, SplitError, WindowMaterialization};

pub type Metadata = BTreeMap<String, serde_json::Value>;

/// A dataset bound to a validated split configuration.
#[derive(Debug)]
pub struct EvaluationContext {
    pub log: Arc<InteractionLog>,
    pub config: SplitConfig,
    pub windows: Vec<EvaluationWindow>,
    /// Identifiers that let a persisted run find its inputs again.
    pub dataset_ref: Option<String>,
    pub config_ref: Option<String>,
}

impl EvaluationContext {
    pub fn new(log: Arc<InteractionLog>, config: SplitConfig) -> Result<Self, SplitError> {
        let windows = split::plan_windows(&log, &config)?;
        Ok(EvaluationContext {
            log,
            config,
            windows,
            dataset_ref: None,
            config_ref: None,
        })
    }

    pub fn with_refs(mut self, dataset_ref: impl Into<String>, config_ref: impl Into<String>) -> Self {
        self.dataset_ref = Some(dataset_ref.into());
        self.config_ref = Some(config_ref.into());
        self
    }

    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", content = "window", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunPhase {
    Registered,
    TrainingReleased,
    AwaitingPrediction(usize),
    PredictionReceived(usize),
    ResultsReleased(usize),
    Completed,
    Failed,
}

impl RunPhase {
    /// Position in the canonical phase order.
    pub fn ordinal(self) -> usize {
        match self {
            RunPhase::Registered => 0,
            RunPhase::TrainingReleased => 1,
            RunPhase::AwaitingPrediction(w) => 2 + 3 * w,
            RunPhase::PredictionReceived(w) => 3 + 3 * w,
            RunPhase::ResultsReleased(w) => 4 + 3 * w,
            RunPhase::Completed => usize::MAX - 1,
            RunPhase::Failed => usize::MAX,
        }
    }

    pub fn window(self) -> Option<usize> {
        match self {
            RunPhase::AwaitingPrediction(w) | RunPhase::PredictionReceived(w) | RunPhase::ResultsReleased(w) => Some(w),
            _ => None,
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, RunPhase::Completed | RunPhase::Failed)
    }
}

impl fmt::Display for RunPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunPhase::Registered => f.write_str("REGISTERED"),
            RunPhase::TrainingReleased => f.write_str("TRAINING_RELEASED"),
            RunPhase::AwaitingPrediction(w) => write!(f, "AWAITING_PREDICTION({w})"),
            RunPhase::PredictionReceived(w) => write!(f, "PREDICTION_RECEIVED({w})"),
            RunPhase::ResultsReleased(w) => write!(f, "RESULTS_RELEASED({w})"),
            RunPhase::Completed => f.write_str("COMPLETED"),
            RunPhase::Failed => f.write_str("FAILED"),
        }
    }
}

/// One entry of a run's append-only log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    Registered {
        run_id: Uuid,
        metadata: Metadata,
        config: SplitConfig,
        dataset_ref: Option<String>,
        config_ref: Option<String>,
    },
    TrainingReleased,
    PredictionsAccepted {
        window_index: usize,
        rankings: BTreeMap<String, Vec<String>>,
    },
    ResultsReleased {
        window_index: usize,
    },
    Failed {
        reason: String,
    },
}

/// Receives every event before it is applied. Failing to persist aborts the call.
pub trait EventSink: Send + Sync {
    fn append(&self, run_id: Uuid, event: &RunEvent) -> std::io::Result<()>;
}

/// Discards events; for in-process runs that need no recovery.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl EventSink for NullSink {
    fn append(&self, _run_id: Uuid, _event: &RunEvent) -> std::io::Result<()> {
        Ok(())
    }
}

/// Keeps every run's events in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    events: Mutex<HashMap<Uuid, Vec<RunEvent>>>,
}

impl MemorySink {
    pub fn events(&self, run_id: Uuid) -> Vec<RunEvent> {
        self.events.lock().get(&run_id).cloned().unwrap_or_default()
    }
}

impl EventSink for MemorySink {
    fn append(&self, run_id: Uuid, event: &RunEvent) -> std::io::Result<()> {
        self.events.lock().entry(run_id).or_default().push(event.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("unknown run {0}")]
    UnknownRun(Uuid),
    #[error("{call} is not allowed in phase {phase}")]
    OutOfOrder { call: &'static str, phase: RunPhase },
    #[error("submission is for window {got} but the run awaits window {expected}")]
    StaleWindow { expected: usize, got: usize },
    #[error("request {request_id} is not outstanding in window {window_index}")]
    UnknownRequestId { request_id: String, window_index: usize },
    #[error("ranking for {request_id} lists item {item_id:?} more than once")]
    DuplicateInRanking { request_id: String, item_id: String },
    #[error("ranking for {request_id} has {len} items; at most {max} allowed")]
    RankingTooLong { request_id: String, len: usize, max: usize },
    #[error("no dataset and configuration bound")]
    ConfigMissing,
    #[error("no window has any evaluated user")]
    NoEvaluableWindows,
    #[error("run failed: {0}")]
    RunFailed(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(#[from] SplitError),
    #[error("event log is corrupt: {0}")]
    CorruptLog(String),
    #[error("could not persist event: {0}")]
    Storage(String),
}

impl ProtocolError {
    /// Stable identifier used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::UnknownRun(_) => "UnknownRun",
            ProtocolError::OutOfOrder { .. } => "OutOfOrder",
            ProtocolError::StaleWindow { .. } => "StaleWindow",
            ProtocolError::UnknownRequestId { .. } => "UnknownRequestId",
            ProtocolError::DuplicateInRanking { .. } => "DuplicateInRanking",
            ProtocolError::RankingTooLong { .. } => "RankingTooLong",
            ProtocolError::ConfigMissing => "ConfigMissing",
            ProtocolError::NoEvaluableWindows => "NoEvaluableWindows",
            ProtocolError::RunFailed(_) => "RunFailed",
            ProtocolError::InvalidConfig(e) => e.code(),
            ProtocolError::CorruptLog(_) => "CorruptLog",
            ProtocolError::Storage(_) => "Storage",
        }
    }
}

impl From<MetricsError> for ProtocolError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::DuplicateInRanking { request_id, item_id } => {
                ProtocolError::DuplicateInRanking { request_id, item_id }
            }
            MetricsError::EmptyWindow(_) | MetricsError::NoEvaluableWindows => ProtocolError::NoEvaluableWindows,
        }
    }
}

pub type ProtocolResult<T> = Result<T, ProtocolError>;

/// Ranked answers for the outstanding requests of one window.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSubmission {
    pub window_index: usize,
    /// request id -> ranked item ids. Missing requests are scored as empty lists.
    pub predictions: BTreeMap<String, Vec<String>>,
}

/// Scores of the window just submitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvisionalScores {
    pub window_index: usize,
    pub n_requests: usize,
    pub n_users: usize,
    /// `None` when the window had no requests.
    pub metrics: Option<MetricValues>,
}

/// What the model receives once a window's predictions are in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRelease {
    pub window_index: usize,
    pub ground_truth: BTreeMap<String, String>,
    pub remaining: InteractionLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: Uuid,
    #[serde(flatten)]
    pub phase: RunPhase,
    pub n_windows: usize,
    pub metadata: Metadata,
    pub dataset_ref: Option<String>,
    pub config_ref: Option<String>,
    pub failure: Option<String>,
}

#[derive(Debug)]
pub struct Run {
    id: Uuid,
    metadata: Metadata,
    ctx: Arc<EvaluationContext>,
    phase: RunPhase,
    phase_history: Vec<RunPhase>,
    known_users: HashSet<String>,
    known_items: HashSet<String>,
    current: Option<WindowMaterialization>,
    released: Vec<WindowMaterialization>,
    outcomes: Vec<RequestOutcome>,
    scored: Vec<(EvaluationWindow, Option<WindowScore>)>,
    failure: Option<String>,
    events: Vec<RunEvent>,
}

impl Run {
    fn registered(id: Uuid, metadata: Metadata, ctx: Arc<EvaluationContext>) -> (Run, RunEvent) {
        let event = RunEvent::Registered {
            run_id: id,
            metadata: metadata.clone(),
            config: ctx.config.clone(),
            dataset_ref: ctx.dataset_ref.clone(),
            config_ref: ctx.config_ref.clone(),
        };
        let run = Run {
            id,
            metadata,
            ctx,
            phase: RunPhase::Registered,
            phase_history: vec![RunPhase::Registered],
            known_users: HashSet::new(),
            known_items: HashSet::new(),
            current: None,
            released: Vec::new(),
            outcomes: Vec::new(),
            scored: Vec::new(),
            failure: None,
            events: Vec::new(),
        };
        (run, event)
    }

    /// Rebuilds a run from its event log. `ctx` must be the context the run was registered with.
    pub fn replay(ctx: Arc<EvaluationContext>, events: &[RunEvent]) -> ProtocolResult<Run> {
        let (first, rest) = events
            .split_first()
            .ok_or_else(|| ProtocolError::CorruptLog("empty event log".into()))?;
        let RunEvent::Registered {
            run_id,
            metadata,
            config,
            ..
        } = first
        else {
            return Err(ProtocolError::CorruptLog(
                "log does not start with a registration".into(),
            ));
        };
        if *config != ctx.config {
            return Err(ProtocolError::CorruptLog(
                "configuration differs from the registered one".into(),
            ));
        }
        let (mut run, event) = Run::registered(*run_id, metadata.clone(), ctx);
        run.events.push(event);
        for event in rest {
            run.apply(event.clone())
                .map_err(|e| ProtocolError::CorruptLog(format!("event rejected on replay: {e}")))?;
        }
        Ok(run)
    }

    pub fn id(&self) -> Uuid {
        self.id
    }

    pub fn phase(&self) -> RunPhase {
        self.phase
    }

    /// Every phase the run has passed through, in order.
    pub fn phase_history(&self) -> &[RunPhase] {
        &self.phase_history
    }

    pub fn metadata(&self) -> &Metadata {
        &self.metadata
    }

    pub fn context(&self) -> &Arc<EvaluationContext> {
        &self.ctx
    }

    pub fn events(&self) -> &[RunEvent] {
        &self.events
    }

    pub fn outcomes(&self) -> &[RequestOutcome] {
        &self.outcomes
    }

    /// Windows whose results have been released, in order.
    pub fn released_windows(&self) -> &[WindowMaterialization] {
        &self.released
    }

    pub fn is_known_user(&self, user: &str) -> bool {
        self.known_users.contains(user)
    }

    pub fn is_known_item(&self, item: &str) -> bool {
        self.known_items.contains(item)
    }

    pub fn status(&self) -> RunStatus {
        RunStatus {
            run_id: self.id,
            phase: self.phase,
            n_windows: self.ctx.n_windows(),
            metadata: self.metadata.clone(),
            dataset_ref: self.ctx.dataset_ref.clone(),
            config_ref: self.ctx.config_ref.clone(),
            failure: self.failure.clone(),
        }
    }

    fn out_of_order(&self, call: &'static str) -> ProtocolError {
        match (&self.failure, self.phase) {
            (Some(reason), RunPhase::Failed) => ProtocolError::RunFailed(reason.clone()),
            _ => ProtocolError::OutOfOrder {
                call,
                phase: self.phase,
            },
        }
    }

    fn set_phase(&mut self, phase: RunPhase) {
        self.phase = phase;
        self.phase_history.push(phase);
    }

    fn learn(&mut self, interactions: &[Interaction]) {
        for r in interactions {
            if !self.known_users.contains(&r.user_id) {
                self.known_users.insert(r.user_id.clone());
            }
            if !self.known_items.contains(&r.item_id) {
                self.known_items.insert(r.item_id.clone());
            }
        }
    }

    fn open_window(&mut self, index: usize) {
        let window = self.ctx.windows[index];
        let m = split::materialize_window(
            &self.ctx.log,
            &window,
            &self.ctx.config,
            &self.known_users,
            &self.known_items,
        );
        self.current = Some(m);
        self.set_phase(RunPhase::AwaitingPrediction(index));
    }

    fn commit(&mut self, sink: &dyn EventSink, event: RunEvent) -> ProtocolResult<()> {
        sink.append(self.id, &event)
            .map_err(|e| ProtocolError::Storage(e.to_string()))?;
        self.apply(event)
    }

    fn validate_submission(&self, window_index: usize, rankings: &BTreeMap<String, Vec<String>>) -> ProtocolResult<()> {
        let expected = match self.phase {
            RunPhase::AwaitingPrediction(w) => w,
            _ => return Err(self.out_of_order("submit_prediction")),
        };
        if window_index != expected {
            return Err(ProtocolError::StaleWindow {
                expected,
                got: window_index,
            });
        }
        let current = self
            .current
            .as_ref()
            .expect("a window is open while awaiting predictions");
        let max = self.ctx.config.max_k();
        for (request_id, ranked) in rankings {
            if !current.ground_truth.contains_key(request_id) {
                return Err(ProtocolError::UnknownRequestId {
                    request_id: request_id.clone(),
                    window_index,
                });
            }
            metrics::check_no_duplicates(request_id, ranked)?;
            if ranked.len() > max {
                return Err(ProtocolError::RankingTooLong {
                    request_id: request_id.clone(),
                    len: ranked.len(),
                    max,
                });
            }
        }
        Ok(())
    }

    /// Applies an event whose preconditions hold, or reports why they do not.
    fn apply(&mut self, event: RunEvent) -> ProtocolResult<()> {
        match &event {
            RunEvent::Registered { .. } => return Err(ProtocolError::CorruptLog("duplicate registration".into())),
            RunEvent::TrainingReleased => {
                if self.phase != RunPhase::Registered {
                    return Err(self.out_of_order("get_training_data"));
                }
                self.set_phase(RunPhase::TrainingReleased);
                let background = split::background_data(&self.ctx.log, &self.ctx.config);
                self.learn(background.records());
                self.open_window(0);
            }
            RunEvent::PredictionsAccepted { window_index, rankings } => {
                self.validate_submission(*window_index, rankings)?;
                let current = self.current.as_ref().expect("window open");
                let empty = Vec::new();
                let outcomes: Vec<RequestOutcome> = current
                    .requests
                    .iter()
                    .map(|req| {
                        let ranked = rankings.get(&req.request_id).unwrap_or(&empty);
                        RequestOutcome {
                            request_id: req.request_id.clone(),
                            user_id: req.user_id.clone(),
                            window_index: *window_index,
                            rank: metrics::rank_of(ranked, &current.ground_truth[&req.request_id]),
                            list_length: ranked.len(),
                        }
                    })
                    .collect();
                let score = if outcomes.is_empty() {
                    None
                } else {
                    Some(metrics::score_window(
                        *window_index,
                        &outcomes,
                        &self.ctx.config.k_values,
                    )?)
                };
                self.scored.push((current.window, score));
                self.outcomes.extend(outcomes);
                self.set_phase(RunPhase::PredictionReceived(*window_index));
            }
            RunEvent::ResultsReleased { window_index } => {
                if self.phase != RunPhase::PredictionReceived(*window_index) {
                    return Err(self.out_of_order("get_results"));
                }
                let m = self.current.take().expect("window open");
                self.learn(&m.targets);
                self.learn(m.remaining.records());
                self.released.push(m);
                self.set_phase(RunPhase::ResultsReleased(*window_index));
                let next = window_index + 1;
                if next < self.ctx.n_windows() {
                    self.open_window(next);
                } else {
                    self.set_phase(RunPhase::Completed);
                }
            }
            RunEvent::Failed { reason } => {
                if self.phase.is_terminal() {
                    return Err(self.out_of_order("abort"));
                }
                self.failure = Some(reason.clone());
                self.current = None;
                self.set_phase(RunPhase::Failed);
            }
        }
        self.events.push(event);
        Ok(())
    }

    /// Releases the background segment. Allowed exactly once, right after registration.
    pub fn get_training_data(&mut self, sink: &dyn EventSink) -> ProtocolResult<InteractionLog> {
        if self.phase != RunPhase::Registered {
            return Err(self.out_of_order("get_training_data"));
        }
        self.commit(sink, RunEvent::TrainingReleased)?;
        Ok(split::background_data(&self.ctx.log, &self.ctx.config))
    }

    /// The current window's masked requests. Repeatable while awaiting predictions.
    pub fn get_unlabeled_data(&self) -> ProtocolResult<Vec<PredictionRequest>> {
        match (self.phase, &self.current) {
            (RunPhase::AwaitingPrediction(_), Some(m)) => Ok(m.requests.clone()),
            _ => Err(self.out_of_order("get_unlabeled_data")),
        }
    }

    pub fn submit_prediction(
        &mut self,
        sink: &dyn EventSink,
        submission: PredictionSubmission,
    ) -> ProtocolResult<ProvisionalScores> {
        self.validate_submission(submission.window_index, &submission.predictions)?;
        let window_index = submission.window_index;
        self.commit(
            sink,
            RunEvent::PredictionsAccepted {
                window_index,
                rankings: submission.predictions,
            },
        )?;
        let (_, score) = self.scored.last().expect("window scored");
        Ok(ProvisionalScores {
            window_index,
            n_requests: score.as_ref().map_or(0, |s| s.n_requests),
            n_users: score.as_ref().map_or(0, |s| s.n_users),
            metrics: score.as_ref().map(|s| s.values.clone()),
        })
    }

    /// Releases the window's ground truth and remaining interactions, then opens the next window.
    pub fn get_results(&mut self, sink: &dyn EventSink) -> ProtocolResult<ResultRelease> {
        let window_index = match self.phase {
            RunPhase::PredictionReceived(w) => w,
            _ => return Err(self.out_of_order("get_results")),
        };
        self.commit(sink, RunEvent::ResultsReleased { window_index })?;
        let m = self.released.last().expect("window released");
        Ok(ResultRelease {
            window_index,
            ground_truth: m.ground_truth.clone(),
            remaining: m.remaining.clone(),
        })
    }

    pub fn abort(&mut self, sink: &dyn EventSink, reason: impl Into<String>) -> ProtocolResult<()> {
        if self.phase.is_terminal() {
            return Err(self.out_of_order("abort"));
        }
        self.commit(sink, RunEvent::Failed { reason: reason.into() })
    }

    /// The full report once completed; with `partial`, a report over the windows scored so far.
    pub fn get_report(&self, partial: bool) -> ProtocolResult<MetricReport> {
        let completed = self.phase == RunPhase::Completed;
        if !completed {
            let past_first_release = self.phase_history.contains(&RunPhase::ResultsReleased(0));
            if !partial || !past_first_release {
                return Err(self.out_of_order("get_report"));
            }
        }
        if self.scored.iter().all(|(_, s)| s.is_none()) {
            return Err(ProtocolError::NoEvaluableWindows);
        }
        Ok(MetricReport::build(
            self.metadata.clone(),
            self.ctx.config.clone(),
            &self.scored,
            !completed,
        )?)
    }
}

/// All runs known to one evaluation server, each behind its own lock.
pub struct RunRegistry {
    bound: RwLock<Option<Arc<EvaluationContext>>>,
    runs: RwLock<HashMap<Uuid, Arc<Mutex<Run>>>>,
    broken: RwLock<BTreeMap<Uuid, String>>,
    sink: Arc<dyn EventSink>,
}

impl Default for RunRegistry {
    fn default() -> Self {
        RunRegistry::new(Arc::new(NullSink))
    }
}

impl RunRegistry {
    pub fn new(sink: Arc<dyn EventSink>) -> Self {
        RunRegistry {
            bound: RwLock::new(None),
            runs: RwLock::new(HashMap::new()),
            broken: RwLock::new(BTreeMap::new()),
            sink,
        }
    }

    /// Binds the dataset and configuration used by [`register_model`](Self::register_model).
    pub fn bind(&self, ctx: Arc<EvaluationContext>) {
        *self.bound.write() = Some(ctx);
    }

    pub fn register_model(&self, metadata: Metadata) -> ProtocolResult<Uuid> {
        let ctx = self.bound.read().clone().ok_or(ProtocolError::ConfigMissing)?;
        self.register_with(ctx, metadata)
    }

    pub fn register_with(&self, ctx: Arc<EvaluationContext>, metadata: Metadata) -> ProtocolResult<Uuid> {
        let id = Uuid::new_v4();
        let (mut run, event) = Run::registered(id, metadata, ctx);
        self.sink
            .append(id, &event)
            .map_err(|e| ProtocolError::Storage(e.to_string()))?;
        run.events.push(event);
        self.runs.write().insert(id, Arc::new(Mutex::new(run)));
        Ok(id)
    }

    /// Adds a run rebuilt from its log.
    pub fn insert_recovered(&self, run: Run) {
        self.runs.write().insert(run.id, Arc::new(Mutex::new(run)));
    }

    /// Records a run whose log could not be replayed. It is listed as FAILED.
    pub fn insert_broken(&self, run_id: Uuid, reason: impl Into<String>) {
        self.broken.write().insert(run_id, reason.into());
    }

    pub fn run(&self, id: Uuid) -> ProtocolResult<Arc<Mutex<Run>>> {
        if let Some(run) = self.runs.read().get(&id) {
            return Ok(run.clone());
        }
        match self.broken.read().get(&id) {
            Some(reason) => Err(ProtocolError::RunFailed(reason.clone())),
            None => Err(ProtocolError::UnknownRun(id)),
        }
    }

    /// Runs `f` under the run's lock with the registry's event sink.
    pub fn with_run<T>(
        &self,
        id: Uuid,
        f: impl FnOnce(&mut Run, &dyn EventSink) -> ProtocolResult<T>,
    ) -> ProtocolResult<T> {
        let run = self.run(id)?;
        let mut guard = run.lock();
        f(&mut guard, self.sink.as_ref())
    }

    pub fn get_training_data(&self, id: Uuid) -> ProtocolResult<InteractionLog> {
        self.with_run(id, |run, sink| run.get_training_data(sink))
    }

    pub fn get_unlabeled_data(&self, id: Uuid) -> ProtocolResult<Vec<PredictionRequest>> {
        self.with_run(id, |run, _| run.get_unlabeled_data())
    }

    pub fn submit_prediction(&self, id: Uuid, submission: PredictionSubmission) -> ProtocolResult<ProvisionalScores> {
        self.with_run(id, |run, sink| run.submit_prediction(sink, submission))
    }

    pub fn get_results(&self, id: Uuid) -> ProtocolResult<ResultRelease> {
        self.with_run(id, |run, sink| run.get_results(sink))
    }

    pub fn get_report(&self, id: Uuid, partial: bool) -> ProtocolResult<MetricReport> {
        self.with_run(id, |run, _| run.get_report(partial))
    }

    pub fn abort(&self, id: Uuid, reason: &str) -> ProtocolResult<()> {
        self.with_run(id, |run, sink| run.abort(sink, reason))
    }

    pub fn status(&self, id: Uuid) -> ProtocolResult<RunStatus> {
        if let Some(reason) = self.broken.read().get(&id) {
            return Ok(broken_status(id, reason));
        }
        self.with_run(id, |run, _| Ok(run.status()))
    }

    /// Status of every run, ordered by id.
    pub fn list(&self) -> Vec<RunStatus> {
        let runs: Vec<Arc<Mutex<Run>>> = self.runs.read().values().cloned().collect();
        let mut out: Vec<RunStatus> = runs.iter().map(|r| r.lock().status()).collect();
        out.extend(self.broken.read().iter().map(|(id, reason)| broken_status(*id, reason)));
        out.sort_by_key(|s| s.run_id);
        out
    }

    pub fn run_ids(&self) -> BTreeSet<Uuid> {
        let mut ids: BTreeSet<Uuid> = self.runs.read().keys().copied().collect();
        ids.extend(self.broken.read().keys().copied());
        ids
    }
}

fn broken_status(run_id: Uuid, reason: &str) -> RunStatus {
    RunStatus {
        run_id,
        phase: RunPhase::Failed,
        n_windows: 0,
        metadata: Metadata::new(),
        dataset_ref: None,
        config_ref: None,
        failure: Some(reason.to_string()),
    }
}
