//! Request-level top-k scoring and the user / window / macro / micro aggregation.
//!
//! Every request carries exactly one ground-truth item, so the per-request
//! scores are all functions of the rank at which that item was submitted:
//!
//! * hit@k = 1 if rank <= k
//! * ndcg@k = 1 / log2(rank + 1) if rank <= k (the ideal DCG is 1)
//! * precision@k = hit@k / k
//! * recall@k = hit@k
//!
//! A user's score in a window is the mean over their requests, a window's
//! score the unweighted mean over its users. Macro averages weigh windows
//! equally; micro averages weigh every (user, window) pair equally.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::interactions::Timestamp;
use crate::split::{EvaluationWindow, SplitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    HitRate,
    Ndcg,
    Precision,
    Recall,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::HitRate, Metric::Ndcg, Metric::Precision, Metric::Recall];

    pub fn name(self) -> &'static str {
        match self {
            Metric::HitRate => "hit_rate",
            Metric::Ndcg => "ndcg",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

/// A metric at a cutoff, written `hit_rate@10` on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MetricKey {
    pub metric: Metric,
    pub k: usize,
}

impl MetricKey {
    pub fn new(metric: Metric, k: usize) -> Self {
        MetricKey { metric, k }
    }

    /// All metrics at all cutoffs, in report order.
    pub fn all(k_values: &[usize]) -> Vec<MetricKey> {
        Metric::ALL
            .into_iter()
            .flat_map(|m| k_values.iter().map(move |&k| MetricKey::new(m, k)))
            .collect()
    }
}

impl fmt::Display for MetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.metric, self.k)
    }
}

impl FromStr for MetricKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, k) = s
            .split_once('@')
            .ok_or_else(|| format!("expected metric@k, got {s:?}"))?;
        let k = k.parse().map_err(|_| format!("bad cutoff in {s:?}"))?;
        Ok(MetricKey::new(m.parse()?, k))
    }
}

impl Serialize for MetricKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MetricKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub type MetricValues = BTreeMap<MetricKey, f64>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("ranking for {request_id} lists item {item_id:?} more than once")]
    DuplicateInRanking { request_id: String, item_id: String },
    #[error("window {0} has no evaluated users")]
    EmptyWindow(usize),
    #[error("no window has any evaluated user")]
    NoEvaluableWindows,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        iter.into_iter().for_each(|v| s.add(v));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestScores {
    pub hit: f64,
    pub ndcg: f64,
    pub precision: f64,
    pub recall: f64,
}

impl RequestScores {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::HitRate => self.hit,
            Metric::Ndcg => self.ndcg,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
        }
    }
}

/// 1-based position of `truth` in `ranked`.
pub fn rank_of(ranked: &[String], truth: &str) -> Option<usize> {
    ranked.iter().position(|i| i == truth).map(|p| p + 1)
}

pub fn scores_from_rank(rank: Option<usize>, k: usize) -> RequestScores {
    match rank {
        Some(r) if r <= k => RequestScores {
            hit: 1.0,
            ndcg: 1.0 / ((r + 1) as f64).log2(),
            precision: 1.0 / k as f64,
            recall: 1.0,
        },
        _ => RequestScores {
            hit: 0.0,
            ndcg: 0.0,
            precision: 0.0,
            recall: 0.0,
        },
    }
}

/// Scores one ranked list against its single ground-truth item.
pub fn score_request(ranked: &[String], truth: &str, k: usize) -> RequestScores {
    scores_from_rank(rank_of(ranked, truth), k)
}

pub fn check_no_duplicates(request_id: &str, ranked: &[String]) -> Result<(), MetricsError> {
    let mut seen = HashSet::with_capacity(ranked.len());
    for item in ranked {
        if !seen.insert(item.as_str()) {
            return Err(MetricsError::DuplicateInRanking {
                request_id: request_id.to_string(),
                item_id: item.clone(),
            });
        }
    }
    Ok(())
}

/// The scored result of one prediction request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub request_id: String,
    pub user_id: String,
    pub window_index: usize,
    pub rank: Option<usize>,
    pub list_length: usize,
}

impl RequestOutcome {
    pub fn score(&self, key: MetricKey) -> f64 {
        scores_from_rank(self.rank, key.k).get(key.metric)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserWindowScore {
    pub user_id: String,
    pub window_index: usize,
    pub n_requests: usize,
    pub values: MetricValues,
}

/// Mean request score per metric@k for one user in one window.
pub fn user_window_score(outcomes: &[RequestOutcome], k_values: &[usize]) -> UserWindowScore {
    assert!(!outcomes.is_empty(), "a user-window score needs at least one request");
    let n = outcomes.len() as f64;
    let values = MetricKey::all(k_values)
        .into_iter()
        .map(|key| {
            let sum: CompensatedSum = outcomes.iter().map(|o| o.score(key)).collect();
            (key, sum.value() / n)
        })
        .collect();
    UserWindowScore {
        user_id: outcomes[0].user_id.clone(),
        window_index: outcomes[0].window_index,
        n_requests: outcomes.len(),
        values,
    }
}

/// Window-level totals. Values are `sums / n_users`; the sums are kept for micro averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowScore {
    pub window_index: usize,
    pub n_users: usize,
    pub n_requests: usize,
    pub sums: MetricValues,
    pub values: MetricValues,
}

pub fn window_score(window_index: usize, users: &[UserWindowScore]) -> Result<WindowScore, MetricsError> {
    if users.is_empty() {
        return Err(MetricsError::EmptyWindow(window_index));
    }
    let keys: Vec<MetricKey> = users[0].values.keys().copied().collect();
    let n = users.len() as f64;
    let mut sums = MetricValues::new();
    let mut values = MetricValues::new();
    for key in keys {
        let sum: CompensatedSum = users.iter().map(|u| u.values[&key]).collect();
        sums.insert(key, sum.value());
        values.insert(key, sum.value() / n);
    }
    Ok(WindowScore {
        window_index,
        n_users: users.len(),
        n_requests: users.iter().map(|u| u.n_requests).sum(),
        sums,
        values,
    })
}

/// Groups a window's outcomes by user (in first-request order) and scores it.
pub fn score_window(
    window_index: usize,
    outcomes: &[RequestOutcome],
    k_values: &[usize],
) -> Result<WindowScore, MetricsError> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_user: BTreeMap<&str, Vec<RequestOutcome>> = BTreeMap::new();
    for o in outcomes {
        let entry = by_user.entry(o.user_id.as_str()).or_default();
        if entry.is_empty() {
            order.push(o.user_id.as_str());
        }
        entry.push(o.clone());
    }
    let users: Vec<UserWindowScore> = order.iter().map(|u| user_window_score(&by_user[u], k_values)).collect();
    window_score(window_index, &users)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub macro_avg: MetricValues,
    pub micro_avg: MetricValues,
    pub n_windows: usize,
    pub n_user_windows: usize,
}

/// Macro and micro averages over windows with at least one evaluated user.
pub fn aggregate<'a>(windows: impl IntoIterator<Item = &'a WindowScore>) -> Result<Aggregate, MetricsError> {
    let windows: Vec<&WindowScore> = windows.into_iter().filter(|w| w.n_users > 0).collect();
    let first = windows.first().ok_or(MetricsError::NoEvaluableWindows)?;
    let n_windows = windows.len();
    let n_user_windows: usize = windows.iter().map(|w| w.n_users).sum();
    let mut macro_avg = MetricValues::new();
    let mut micro_avg = MetricValues::new();
    for key in first.values.keys().copied() {
        let window_sum: CompensatedSum = windows.iter().map(|w| w.values[&key]).collect();
        let user_sum: CompensatedSum = windows.iter().map(|w| w.sums[&key]).collect();
        macro_avg.insert(key, window_sum.value() / n_windows as f64);
        micro_avg.insert(key, user_sum.value() / n_user_windows as f64);
    }
    Ok(Aggregate {
        macro_avg,
        micro_avg,
        n_windows,
        n_user_windows,
    })
}

/// Reported values are rounded to this many decimals when serialized.
pub const REPORT_DECIMALS: i32 = 5;

pub fn round_report(v: f64) -> f64 {
    let scale = 10f64.powi(REPORT_DECIMALS);
    (v * scale).round() / scale
}

mod rounded {
    use super::*;

    pub fn serialize<S: Serializer>(values: &MetricValues, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_map(values.iter().map(|(k, v)| (k, round_report(*v))))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<MetricValues, D::Error> {
        MetricValues::deserialize(deserializer)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(values: &Option<MetricValues>, serializer: S) -> Result<S::Ok, S::Error> {
            match values {
                Some(v) => super::serialize(v, serializer),
                None => serializer.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Option<MetricValues>, D::Error> {
            Option::<MetricValues>::deserialize(deserializer)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub window_index: usize,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub n_users: usize,
    pub n_requests: usize,
    /// `None` when the window had no evaluated users.
    #[serde(with = "rounded::option")]
    pub metrics: Option<MetricValues>,
}

/// Final or partial evaluation report for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub partial: bool,
    pub model: BTreeMap<String, serde_json::Value>,
    pub config: SplitConfig,
    pub windows: Vec<WindowRow>,
    #[serde(rename = "macro", with = "rounded")]
    pub macro_avg: MetricValues,
    #[serde(rename = "micro", with = "rounded")]
    pub micro_avg: MetricValues,
    pub n_evaluated_windows: usize,
    pub n_user_windows: usize,
}

impl MetricReport {
    /// `windows` pairs each reported window with its score, `None` if nobody was evaluated.
    pub fn build(
        model: BTreeMap<String, serde_json::Value>,
        config: SplitConfig,
        windows: &[(EvaluationWindow, Option<WindowScore>)],
        partial: bool,
    ) -> Result<MetricReport, MetricsError> {
        let agg = aggregate(windows.iter().filter_map(|(_, s)| s.as_ref()))?;
        let rows = windows
            .iter()
            .map(|(w, score)| WindowRow {
                window_index: w.index,
                t_start: w.t_start,
                t_end: w.t_end,
                n_users: score.as_ref().map_or(0, |s| s.n_users),
                n_requests: score.as_ref().map_or(0, |s| s.n_requests),
                metrics: score.as_ref().filter(|s| s.n_users > 0).map(|s| s.values.clone()),
            })
            .collect();
        Ok(MetricReport {
            partial,
            model,
            config,
            windows: rows,
            macro_avg: agg.macro_avg,
            micro_avg: agg.micro_avg,
            n_evaluated_windows: agg.n_windows,
            n_user_windows: agg.n_user_windows,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `window_index,metric,k,value,n_users`, then macro and micro rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("window_index,metric,k,value,n_users\n");
        let keys: Vec<MetricKey> = self.macro_avg.keys().copied().collect();
        for row in &self.windows {
            for key in &keys {
                let value = row
                    .metrics
                    .as_ref()
                    .and_then(|m| m.get(key))
                    .map(|v| format!("{:.5}", round_report(*v)))
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.window_index, key.metric, key.k, value, row.n_users
                ));
            }
        }
        for (label, values) in [("macro", &self.macro_avg), ("micro", &self.micro_avg)] {
            for (key, v) in values {
                out.push_str(&format!(
                    "{label},{},{},{:.5},{}\n",
                    key.metric,
                    key.k,
                    round_report(*v),
                    self.n_user_windows
                ));
            }
        }
        out
    }

    /// Per-window series for plotting: one row per (metric@k, window).
    pub fn to_series_csv(&self) -> String {
        let mut out = String::from("metric,k,window_index,t_start,t_end,n_users,value\n");
        for key in self.macro_avg.keys() {
            for row in &self.windows {
                let value = row
                    .metrics
                    .as_ref()
                    .and_then(|m| m.get(key))
                    .map(|v| format!("{:.5}", round_report(*v)))
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    key.metric, key.k, row.window_index, row.t_start, row.t_end, row.n_users, value
                ));
            }
        }
        out
    }

    /// The per-window series of one metric, `None` for windows without users.
    pub fn series(&self, key: MetricKey) -> Vec<Option<f64>> {
        self.windows
            .iter()
            .map(|w| w.metrics.as_ref().and_then(|m| m.get(&key).copied()))
            .collect()
    }
}
