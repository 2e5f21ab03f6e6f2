//! Reference incremental recommenders.
//!
//! They exist to drive the harness end to end: each one learns cumulatively
//! from released batches and answers prediction requests with a ranked list.
//! Ties are always broken by ascending item id so results are reproducible.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::interactions::{Interaction, Timestamp};
use crate::split::PredictionRequest;

/// Client side of the evaluation loop.
pub trait Recommender: Send {
    fn name(&self) -> &'static str;

    /// Learns from a newly released batch. Calls are cumulative.
    fn fit(&mut self, batch: &[Interaction]);

    /// One ranked list of at most `k` items per request, in request order.
    fn predict(&mut self, requests: &[PredictionRequest], k: usize) -> Vec<Vec<String>>;
}

pub type ModelParams = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("unknown model {0:?}; expected recent_popularity, decay_popularity or item_knn_incremental")]
    UnknownModel(String),
    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: String, reason: String },
}

/// Dense ids for item strings, assigned in order of first appearance.
#[derive(Debug, Default, Clone)]
struct Catalog {
    ids: Vec<String>,
    index: HashMap<String, u32>,
}

impl Catalog {
    fn intern(&mut self, id: &str) -> u32 {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len() as u32;
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }

    fn name(&self, i: u32) -> &str {
        &self.ids[i as usize]
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Sorts `(item, score)` by descending score, then ascending item id, and keeps `k`.
fn top_k<S: Copy>(
    catalog: &Catalog,
    mut scored: Vec<(u32, S)>,
    k: usize,
    cmp: impl Fn(S, S) -> Ordering,
) -> Vec<String> {
    scored.sort_by(|a, b| cmp(b.1, a.1).then_with(|| catalog.name(a.0).cmp(catalog.name(b.0))));
    scored
        .into_iter()
        .take(k)
        .map(|(i, _)| catalog.name(i).to_string())
        .collect()
}

/// Most interacted items within a trailing time horizon.
#[derive(Debug, Clone)]
pub struct RecentPopularity {
    horizon: Timestamp,
    catalog: Catalog,
    events: BTreeMap<Timestamp, Vec<u32>>,
    counts: HashMap<u32, u64>,
    newest: Option<Timestamp>,
}

impl RecentPopularity {
    /// Counts events in `(newest - horizon, newest]`.
    pub fn new(horizon: Timestamp) -> Self {
        RecentPopularity {
            horizon,
            catalog: Catalog::default(),
            events: BTreeMap::new(),
            counts: HashMap::new(),
            newest: None,
        }
    }

    fn evict(&mut self) {
        let Some(newest) = self.newest else { return };
        let cutoff = newest.saturating_sub(self.horizon);
        while let Some(entry) = self.events.first_entry() {
            if *entry.key() > cutoff {
                break;
            }
            for item in entry.remove() {
                let count = self.counts.get_mut(&item).expect("counted");
                *count -= 1;
                if *count == 0 {
                    self.counts.remove(&item);
                }
            }
        }
    }

    pub fn ranking(&self, k: usize) -> Vec<String> {
        let scored: Vec<(u32, u64)> = self.counts.iter().map(|(&i, &c)| (i, c)).collect();
        top_k(&self.catalog, scored, k, |a, b| a.cmp(&b))
    }
}

impl Recommender for RecentPopularity {
    fn name(&self) -> &'static str {
        "recent_popularity"
    }

    fn fit(&mut self, batch: &[Interaction]) {
        for r in batch {
            let item = self.catalog.intern(&r.item_id);
            self.events.entry(r.timestamp).or_default().push(item);
            *self.counts.entry(item).or_default() += 1;
            self.newest = Some(self.newest.map_or(r.timestamp, |n| n.max(r.timestamp)));
            self.evict();
        }
    }

    fn predict(&mut self, requests: &[PredictionRequest], k: usize) -> Vec<Vec<String>> {
        let ranking = self.ranking(k);
        vec![ranking; requests.len()]
    }
}

/// Popularity with exponential time decay, updated lazily per item.
#[derive(Debug, Clone)]
pub struct DecayPopularity {
    lambda: f64,
    catalog: Catalog,
    /// Per item: decayed score as of `last_update`, and `last_update`.
    state: Vec<(f64, Timestamp)>,
    newest: Option<Timestamp>,
}

impl DecayPopularity {
    /// `lambda` is the decay rate per second; 0 gives all-time counts.
    pub fn new(lambda: f64) -> Self {
        DecayPopularity {
            lambda,
            catalog: Catalog::default(),
            state: Vec::new(),
            newest: None,
        }
    }

    fn decay(&self, dt: Timestamp) -> f64 {
        (-self.lambda * dt as f64).exp()
    }

    /// Decayed scores as of the newest seen timestamp.
    pub fn scores(&self) -> Vec<(u32, f64)> {
        let Some(now) = self.newest else { return Vec::new() };
        self.state
            .iter()
            .enumerate()
            .map(|(i, &(s, last))| (i as u32, s * self.decay(now - last)))
            .collect()
    }

    pub fn ranking(&self, k: usize) -> Vec<String> {
        top_k(&self.catalog, self.scores(), k, |a: f64, b: f64| a.total_cmp(&b))
    }
}

impl Recommender for DecayPopularity {
    fn name(&self) -> &'static str {
        "decay_popularity"
    }

    fn fit(&mut self, batch: &[Interaction]) {
        for r in batch {
            let item = self.catalog.intern(&r.item_id) as usize;
            if item == self.state.len() {
                self.state.push((0.0, r.timestamp));
            }
            let (s, last) = self.state[item];
            self.state[item] = if r.timestamp >= last {
                (s * self.decay(r.timestamp - last) + 1.0, r.timestamp)
            } else {
                // late event: add its contribution decayed to `last`
                (s + self.decay(last - r.timestamp), last)
            };
            self.newest = Some(self.newest.map_or(r.timestamp, |n| n.max(r.timestamp)));
        }
    }

    fn predict(&mut self, requests: &[PredictionRequest], k: usize) -> Vec<Vec<String>> {
        let ranking = self.ranking(k);
        vec![ranking; requests.len()]
    }
}

pub const DEFAULT_NEIGHBORS: usize = 50;

/// Item-based kNN on binary user vectors with incrementally maintained co-occurrence counts.
#[derive(Debug, Clone)]
pub struct ItemKnnIncremental {
    neighbors: usize,
    catalog: Catalog,
    histories: HashMap<String, BTreeSet<u32>>,
    /// Distinct users per item.
    user_counts: Vec<u32>,
    /// Raw interaction counts per item, for the cold-start fallback.
    event_counts: Vec<u64>,
    cooccurrence: Vec<HashMap<u32, u32>>,
    /// For each item `i`, the items `j` that have `i` among their nearest neighbours.
    reverse_neighbors: Option<Vec<Vec<(u32, f64)>>>,
}

impl ItemKnnIncremental {
    pub fn new(neighbors: usize) -> Self {
        ItemKnnIncremental {
            neighbors,
            catalog: Catalog::default(),
            histories: HashMap::new(),
            user_counts: Vec::new(),
            event_counts: Vec::new(),
            cooccurrence: Vec::new(),
            reverse_neighbors: None,
        }
    }

    fn item_index(&self, id: &str) -> Option<u32> {
        self.catalog.index.get(id).copied()
    }

    /// Cosine similarity of the binary user vectors of two items.
    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        match (self.item_index(a), self.item_index(b)) {
            (Some(i), Some(j)) => self.sim(i, j),
            _ => 0.0,
        }
    }

    fn sim(&self, i: u32, j: u32) -> f64 {
        let (ni, nj) = (self.user_counts[i as usize], self.user_counts[j as usize]);
        if ni == 0 || nj == 0 {
            return 0.0;
        }
        let c = if i == j {
            ni
        } else {
            self.cooccurrence[i as usize].get(&j).copied().unwrap_or(0)
        };
        c as f64 / ((ni as f64) * (nj as f64)).sqrt()
    }

    fn nearest(&self, j: u32) -> Vec<(u32, f64)> {
        let mut candidates: Vec<(u32, f64)> = self.cooccurrence[j as usize]
            .keys()
            .map(|&i| (i, self.sim(i, j)))
            .collect();
        candidates.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.catalog.name(a.0).cmp(self.catalog.name(b.0)))
        });
        candidates.truncate(self.neighbors);
        candidates
    }

    fn reverse_index(&mut self) -> &Vec<Vec<(u32, f64)>> {
        if self.reverse_neighbors.is_none() {
            let mut rev = vec![Vec::new(); self.catalog.len()];
            for j in 0..self.catalog.len() as u32 {
                for (i, s) in self.nearest(j) {
                    rev[i as usize].push((j, s));
                }
            }
            self.reverse_neighbors = Some(rev);
        }
        self.reverse_neighbors.as_ref().expect("just built")
    }

    fn popularity(&self, k: usize) -> Vec<String> {
        let scored: Vec<(u32, u64)> = self
            .event_counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as u32, c))
            .collect();
        top_k(&self.catalog, scored, k, |a, b| a.cmp(&b))
    }

    fn recommend(&mut self, user: &str, k: usize) -> Vec<String> {
        let Some(history) = self.histories.get(user).cloned() else {
            return self.popularity(k);
        };
        let rev = self.reverse_index();
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for &i in &history {
            for &(j, s) in &rev[i as usize] {
                if !history.contains(&j) {
                    *scores.entry(j).or_default() += s;
                }
            }
        }
        let scored: Vec<(u32, f64)> = scores.into_iter().filter(|(_, s)| *s > 0.0).collect();
        top_k(&self.catalog, scored, k, |a: f64, b: f64| a.total_cmp(&b))
    }
}

impl Recommender for ItemKnnIncremental {
    fn name(&self) -> &'static str {
        "item_knn_incremental"
    }

    fn fit(&mut self, batch: &[Interaction]) {
        if batch.is_empty() {
            return;
        }
        self.reverse_neighbors = None;
        for r in batch {
            let item = self.catalog.intern(&r.item_id);
            if item as usize == self.user_counts.len() {
                self.user_counts.push(0);
                self.event_counts.push(0);
                self.cooccurrence.push(HashMap::new());
            }
            self.event_counts[item as usize] += 1;
            let history = self.histories.entry(r.user_id.clone()).or_default();
            if !history.insert(item) {
                continue;
            }
            self.user_counts[item as usize] += 1;
            for &other in history.iter().filter(|&&o| o != item) {
                *self.cooccurrence[item as usize].entry(other).or_default() += 1;
                *self.cooccurrence[other as usize].entry(item).or_default() += 1;
            }
        }
    }

    fn predict(&mut self, requests: &[PredictionRequest], k: usize) -> Vec<Vec<String>> {
        let mut cache: HashMap<String, Vec<String>> = HashMap::new();
        requests
            .iter()
            .map(|req| {
                if let Some(hit) = cache.get(&req.user_id) {
                    return hit.clone();
                }
                let list = self.recommend(&req.user_id, k);
                cache.insert(req.user_id.clone(), list.clone());
                list
            })
            .collect()
    }
}

/// Defaults that depend on the evaluation setup rather than on the model.
#[derive(Debug, Clone, Copy)]
pub struct ModelDefaults {
    /// Width of one evaluation window, used as the default popularity horizon.
    pub window_width: Timestamp,
}

pub const DEFAULT_DECAY_LAMBDA: f64 = 1e-6;

fn number_param(params: &ModelParams, name: &str) -> Result<Option<f64>, ModelError> {
    let Some(value) = params.get(name) else { return Ok(None) };
    let parsed = match value {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    };
    match parsed {
        Some(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(ModelError::InvalidParam {
            name: name.to_string(),
            reason: format!("expected a number, got {value}"),
        }),
    }
}

fn check_known(params: &ModelParams, allowed: &[&str]) -> Result<(), ModelError> {
    match params.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(ModelError::InvalidParam {
            name: k.clone(),
            reason: format!("not a parameter of this model (expected one of {allowed:?})"),
        }),
        None => Ok(()),
    }
}

/// Canonical model name for a user-supplied one (`ItemKNNIncremental` and
/// `item_knn_incremental` are the same model).
pub fn canonical_model_name(name: &str) -> Result<&'static str, ModelError> {
    let folded: String = name
        .chars()
        .filter(|c| *c != '_' && *c != '-')
        .flat_map(char::to_lowercase)
        .collect();
    match folded.as_str() {
        "recentpopularity" => Ok("recent_popularity"),
        "decaypopularity" => Ok("decay_popularity"),
        "itemknnincremental" | "itemknn" => Ok("item_knn_incremental"),
        _ => Err(ModelError::UnknownModel(name.to_string())),
    }
}

/// Instantiates a built-in model by name.
///
/// Parameters: `horizon` (seconds) for recent_popularity, `lambda` (per second)
/// for decay_popularity, `neighbors` for item_knn_incremental.
pub fn build_model(
    name: &str,
    params: &ModelParams,
    defaults: ModelDefaults,
) -> Result<Box<dyn Recommender>, ModelError> {
    match canonical_model_name(name)? {
        "recent_popularity" => {
            check_known(params, &["horizon"])?;
            let horizon = number_param(params, "horizon")?.unwrap_or(defaults.window_width as f64);
            if horizon <= 0.0 {
                return Err(ModelError::InvalidParam {
                    name: "horizon".into(),
                    reason: "must be positive".into(),
                });
            }
            Ok(Box::new(RecentPopularity::new(horizon.round() as Timestamp)))
        }
        "decay_popularity" => {
            check_known(params, &["lambda"])?;
            let lambda = number_param(params, "lambda")?.unwrap_or(DEFAULT_DECAY_LAMBDA);
            if lambda < 0.0 {
                return Err(ModelError::InvalidParam {
                    name: "lambda".into(),
                    reason: "must not be negative".into(),
                });
            }
            Ok(Box::new(DecayPopularity::new(lambda)))
        }
        _ => {
            check_known(params, &["neighbors"])?;
            let n = number_param(params, "neighbors")?.unwrap_or(DEFAULT_NEIGHBORS as f64);
            if n < 1.0 || n.fract() != 0.0 {
                return Err(ModelError::InvalidParam {
                    name: "neighbors".into(),
                    reason: "must be a positive integer".into(),
                });
            }
            Ok(Box::new(ItemKnnIncremental::new(n as usize)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interactions::InteractionLog;

    fn events(triples: &[(&str, &str, Timestamp)]) -> Vec<Interaction> {
        InteractionLog::from_triples(triples.iter().cloned()).records().to_vec()
    }

    fn request(user: &str) -> PredictionRequest {
        PredictionRequest {
            request_id: "r".into(),
            user_id: user.into(),
            timestamp: 0,
            window_index: 0,
        }
    }

    #[test]
    fn recent_popularity_counts() {
        let mut m = RecentPopularity::new(1_000);
        m.fit(&events(&[
            ("a", "i1", 1),
            ("b", "i1", 2),
            ("c", "i2", 3),
            ("d", "i1", 4),
        ]));
        assert_eq!(m.ranking(2), vec!["i1", "i2"]);

        let mut tie = RecentPopularity::new(1_000);
        tie.fit(&events(&[
            ("a", "i2", 1),
            ("b", "i1", 2),
            ("c", "i2", 3),
            ("d", "i1", 4),
        ]));
        assert_eq!(tie.ranking(2), vec!["i1", "i2"]);
    }

    #[test]
    fn recent_popularity_horizon() {
        let mut m = RecentPopularity::new(10);
        m.fit(&events(&[
            ("a", "i1", 0),
            ("b", "i1", 0),
            ("c", "i1", 0),
            ("d", "i2", 20),
        ]));
        assert_eq!(m.ranking(5), vec!["i2"]);
        assert!(RecentPopularity::new(10).ranking(5).is_empty());
    }

    #[test]
    fn decay_popularity_scores() {
        let mut m = DecayPopularity::new(0.01);
        m.fit(&events(&[("a", "i1", 0), ("b", "i2", 100)]));
        let scores: HashMap<String, f64> = m
            .scores()
            .into_iter()
            .map(|(i, s)| (m.catalog.name(i).to_string(), s))
            .collect();
        assert!((scores["i1"] - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(scores["i2"], 1.0);
        assert_eq!(m.ranking(2), vec!["i2", "i1"]);

        let mut single = DecayPopularity::new(0.5);
        single.fit(&events(&[("a", "only", 3)]));
        assert_eq!(single.ranking(10), vec!["only"]);
        assert!(DecayPopularity::new(0.5).ranking(10).is_empty());
    }

    #[test]
    fn strong_decay_ranks_by_recency() {
        // i3 popular long ago, i1 most recent
        let mut m = DecayPopularity::new(1.0);
        m.fit(&events(&[
            ("a", "i3", 0),
            ("b", "i3", 1),
            ("c", "i3", 2),
            ("d", "i2", 100),
            ("e", "i1", 200),
        ]));
        assert_eq!(m.ranking(3), vec!["i1", "i2", "i3"]);
    }

    #[test]
    fn item_knn_similarity_and_prediction() {
        let mut m = ItemKnnIncremental::new(DEFAULT_NEIGHBORS);
        m.fit(&events(&[
            ("a", "i1", 1),
            ("a", "i2", 2),
            ("b", "i1", 3),
            ("b", "i2", 4),
            ("c", "i1", 5),
        ]));
        // users of i1: {a,b,c}, users of i2: {a,b}
        let expected = 2.0 / (3.0f64 * 2.0).sqrt();
        assert!((m.similarity("i1", "i2") - expected).abs() < 1e-15);
        assert_eq!(m.similarity("i1", "i2"), m.similarity("i2", "i1"));
        assert_eq!(m.similarity("i1", "i1"), 1.0);
        assert_eq!(m.predict(&[request("c")], 5), vec![vec!["i2".to_string()]]);
        // full catalog in history
        assert_eq!(m.predict(&[request("a")], 5), vec![Vec::<String>::new()]);
        // unknown user falls back to popularity
        assert_eq!(
            m.predict(&[request("zz")], 5),
            vec![vec!["i1".to_string(), "i2".to_string()]]
        );
        assert!(ItemKnnIncremental::new(5).predict(&[request("x")], 3)[0].is_empty());
    }

    #[test]
    fn factory() {
        let d = ModelDefaults { window_width: 100 };
        assert_eq!(
            build_model("RecentPopularity", &ModelParams::new(), d).unwrap().name(),
            "recent_popularity"
        );
        assert_eq!(
            build_model("ItemKNNIncremental", &ModelParams::new(), d)
                .unwrap()
                .name(),
            "item_knn_incremental"
        );
        let params: ModelParams = [("lambda".to_string(), serde_json::json!("1e-6"))].into();
        assert_eq!(
            build_model("decay_popularity", &params, d).unwrap().name(),
            "decay_popularity"
        );
        assert!(matches!(
            build_model("svd", &ModelParams::new(), d),
            Err(ModelError::UnknownModel(_))
        ));
        let bad: ModelParams = [("lambda".to_string(), serde_json::json!(-1))].into();
        assert!(matches!(
            build_model("decay_popularity", &bad, d),
            Err(ModelError::InvalidParam { .. })
        ));
        let typo: ModelParams = [("lamda".to_string(), serde_json::json!(1))].into();
        assert!(matches!(
            build_model("decay_popularity", &typo, d),
            Err(ModelError::InvalidParam { .. })
        ));
    }
}
