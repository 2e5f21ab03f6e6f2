//! Partitioning of the global timeline into a background segment and
//! evaluation windows, and per-window selection of prediction targets.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interactions::{Interaction, InteractionLog, Timestamp};

/// Evaluation settings shared by the CLI, the REST API and stored runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Exclusive end of the background (initial training) segment.
    pub t_background_end: Timestamp,
    pub n_windows: usize,
    #[serde(default = "default_max_requests")]
    pub n_max_requests_per_user: usize,
    #[serde(default)]
    pub include_unknown_users: bool,
    #[serde(default)]
    pub include_unknown_items: bool,
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
}

pub const DEFAULT_MAX_REQUESTS_PER_USER: usize = 2;

fn default_max_requests() -> usize {
    DEFAULT_MAX_REQUESTS_PER_USER
}

fn default_k_values() -> Vec<usize> {
    vec![10]
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SplitError {
    #[error("invalid split configuration: {0}")]
    InvalidConfig(String),
    #[error("background end {t} is outside the dataset span [{t_min}, {t_max}]")]
    SplitOutOfRange {
        t: Timestamp,
        t_min: Timestamp,
        t_max: Timestamp,
    },
    #[error("background end {0} equals the last timestamp; nothing left to evaluate")]
    DegenerateSpan(Timestamp),
    #[error("dataset is empty")]
    EmptyLog,
}

impl SplitError {
    pub fn code(&self) -> &'static str {
        match self {
            SplitError::InvalidConfig(_) => "InvalidConfig",
            SplitError::SplitOutOfRange { .. } => "SplitOutOfRange",
            SplitError::DegenerateSpan(_) => "DegenerateSpan",
            SplitError::EmptyLog => "EmptyDataset",
        }
    }
}

impl SplitConfig {
    pub fn new(t_background_end: Timestamp, n_windows: usize) -> Self {
        SplitConfig {
            t_background_end,
            n_windows,
            n_max_requests_per_user: DEFAULT_MAX_REQUESTS_PER_USER,
            include_unknown_users: false,
            include_unknown_items: false,
            k_values: default_k_values(),
        }
    }

    /// Largest cutoff; submitted lists may not be longer than this.
    pub fn max_k(&self) -> usize {
        self.k_values.last().copied().unwrap_or(0)
    }

    /// Checks the dataset-independent invariants.
    pub fn validate(&self) -> Result<(), SplitError> {
        if self.n_windows == 0 {
            return Err(SplitError::InvalidConfig("n_windows must be at least 1".into()));
        }
        if self.n_max_requests_per_user == 0 {
            return Err(SplitError::InvalidConfig(
                "n_max_requests_per_user must be at least 1".into(),
            ));
        }
        if self.k_values.is_empty() {
            return Err(SplitError::InvalidConfig("k_values must not be empty".into()));
        }
        if self.k_values[0] == 0 {
            return Err(SplitError::InvalidConfig("k_values must be positive".into()));
        }
        if self.k_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SplitError::InvalidConfig("k_values must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Checks the config against a dataset span.
    pub fn validate_for(&self, log: &InteractionLog) -> Result<(), SplitError> {
        self.validate()?;
        let (t_min, t_max) = log.span().ok_or(SplitError::EmptyLog)?;
        if self.t_background_end < t_min || self.t_background_end > t_max {
            return Err(SplitError::SplitOutOfRange {
                t: self.t_background_end,
                t_min,
                t_max,
            });
        }
        if self.t_background_end == t_max {
            return Err(SplitError::DegenerateSpan(t_max));
        }
        Ok(())
    }
}

/// One test window. All windows are half-open except the last, which also
/// contains `t_end` so the final interaction is evaluable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationWindow {
    pub index: usize,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub closed_end: bool,
}

impl EvaluationWindow {
    pub fn contains(&self, t: Timestamp) -> bool {
        t >= self.t_start && (t < self.t_end || (self.closed_end && t == self.t_end))
    }

    pub fn records<'a>(&self, log: &'a InteractionLog) -> &'a [Interaction] {
        if self.closed_end {
            log.slice_closed(self.t_start, self.t_end)
        } else {
            log.slice_records(self.t_start, self.t_end)
        }
    }
}

/// `round(num / den)` with halves rounded up, for non-negative operands.
fn div_round(num: i128, den: i128) -> i128 {
    (2 * num + den) / (2 * den)
}

/// Splits `[t_background_end, t_max]` into `n_windows` equal-width windows.
///
/// Boundary `i` is `t_background_end + round(i * (t_max - t_background_end) / n_windows)`,
/// computed in exact integer arithmetic.
pub fn plan_windows(log: &InteractionLog, config: &SplitConfig) -> Result<Vec<EvaluationWindow>, SplitError> {
    config.validate_for(log)?;
    let (_, t_max) = log.span().ok_or(SplitError::EmptyLog)?;
    let start = config.t_background_end as i128;
    let width = t_max as i128 - start;
    let n = config.n_windows as i128;
    let boundary = |i: i128| (start + div_round(i * width, n)) as Timestamp;
    Ok((0..config.n_windows)
        .map(|i| EvaluationWindow {
            index: i,
            t_start: boundary(i as i128),
            t_end: boundary(i as i128 + 1),
            closed_end: i + 1 == config.n_windows,
        })
        .collect())
}

/// Everything strictly before `t_background_end`.
pub fn background_data(log: &InteractionLog, config: &SplitConfig) -> InteractionLog {
    match log.span() {
        Some((t_min, _)) => log.slice(t_min, config.t_background_end),
        None => InteractionLog::empty(),
    }
}

/// A masked interaction the model must predict. The item is withheld; only
/// the user and the exact timestamp are released.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PredictionRequest {
    pub request_id: String,
    pub user_id: String,
    pub timestamp: Timestamp,
    pub window_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowMaterialization {
    pub window: EvaluationWindow,
    /// Requests in `(timestamp, seq)` order of their targets.
    pub requests: Vec<PredictionRequest>,
    pub ground_truth: BTreeMap<String, String>,
    /// In-window interactions that were not selected as targets.
    pub remaining: InteractionLog,
    /// The target interactions, aligned with `requests`.
    pub targets: Vec<Interaction>,
}

impl WindowMaterialization {
    pub fn request(&self, request_id: &str) -> Option<&PredictionRequest> {
        self.requests.iter().find(|r| r.request_id == request_id)
    }

    /// Every interaction of the window: targets and remaining, merged in timeline order.
    pub fn released_interactions(&self) -> InteractionLog {
        let mut all = self.targets.clone();
        all.extend(self.remaining.iter().cloned());
        InteractionLog::from_records(all)
    }
}

pub fn request_id(window_index: usize, ordinal: usize) -> String {
    format!("w{window_index}-r{ordinal}")
}

/// Selects prediction targets for one window.
///
/// For each eligible user the earliest `n_max_requests_per_user` in-window
/// interactions become targets. `known_users` and `known_items` must hold
/// exactly the identifiers released before `window.t_start`.
pub fn materialize_window(
    log: &InteractionLog,
    window: &EvaluationWindow,
    config: &SplitConfig,
    known_users: &HashSet<String>,
    known_items: &HashSet<String>,
) -> WindowMaterialization {
    let in_window = window.records(log);
    let mut taken: HashMap<&str, usize> = HashMap::new();
    let mut targets = Vec::new();
    let mut remaining = Vec::new();

    for interaction in in_window {
        let user = interaction.user_id.as_str();
        let eligible = config.include_unknown_users || known_users.contains(user);
        let slot = taken.entry(user).or_insert(0);
        let selected = eligible && *slot < config.n_max_requests_per_user;
        if selected {
            *slot += 1;
        }
        let item_ok = config.include_unknown_items || known_items.contains(&interaction.item_id);
        if selected && item_ok {
            targets.push(interaction.clone());
        } else {
            remaining.push(interaction.clone());
        }
    }

    let requests: Vec<PredictionRequest> = targets
        .iter()
        .enumerate()
        .map(|(ordinal, t)| PredictionRequest {
            request_id: request_id(window.index, ordinal),
            user_id: t.user_id.clone(),
            timestamp: t.timestamp,
            window_index: window.index,
        })
        .collect();
    let ground_truth = requests
        .iter()
        .zip(&targets)
        .map(|(r, t)| (r.request_id.clone(), t.item_id.clone()))
        .collect();

    WindowMaterialization {
        window: *window,
        requests,
        ground_truth,
        remaining: InteractionLog::from_records(remaining),
        targets,
    }
}
