//! Grouping of tuning keys by their best canonical optimization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autotune::{load_key_record, KeyRecord, TuneError, TuneKey, Tuner, TuneConfig};
use crate::flagspace::ChoiceVector;
use crate::repo::Repo;
use crate::statistics;

/// Speedups strictly above this count as improvements.
pub const IMPROVED_THRESHOLD: f64 = 1.1;
/// Speedups strictly below this count as slowdowns.
pub const SLOWDOWN_THRESHOLD: f64 = 0.96;
/// Clusters cross-evaluated on every key by default.
pub const DEFAULT_TOP_K: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("no frontier for key {0}")]
    NoFrontier(String),
    #[error("no reliable reference time for key {0}")]
    NoReference(String),
    #[error(transparent)]
    Tune(#[from] TuneError),
}

pub type Result<T, E = ClusterError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedupClass {
    Improved,
    Neutral,
    Slowdown,
}

pub fn classify(speedup: f64) -> SpeedupClass {
    if speedup > IMPROVED_THRESHOLD {
        SpeedupClass::Improved
    } else if speedup < SLOWDOWN_THRESHOLD {
        SpeedupClass::Slowdown
    } else {
        SpeedupClass::Neutral
    }
}

/// One key and its speedup under a cluster's choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub key: TuneKey,
    pub speedup: f64,
    /// False when the frontier solution had no canonical form and its raw
    /// choice was used with `-fno-ALL` appended.
    #[serde(default = "yes")]
    pub reduced: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationCluster {
    pub canonical_choice: ChoiceVector,
    /// Keys whose best choice is this cluster's.
    pub members: Vec<ClusterMember>,
    /// Cross-evaluation results over all keys; empty until stats are computed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evaluated: Vec<ClusterMember>,
    pub max_speedup: f64,
    pub n_improved: usize,
    pub n_slowdown: usize,
    pub n_neutral: usize,
}

impl OptimizationCluster {
    /// Clustering identity: the canonical render, which lists flags and
    /// params in sorted order.
    pub fn id(&self) -> String {
        cluster_key(&self.canonical_choice)
    }

    pub fn has_stats(&self) -> bool {
        !self.evaluated.is_empty()
    }
}

pub fn cluster_key(choice: &ChoiceVector) -> String {
    choice.clone().with_no_all().render()
}

/// Fastest frontier solution of a key and its speedup over the reference.
pub fn best_choice(repo: &Repo, key: &TuneKey) -> Result<(ChoiceVector, f64)> {
    let (choice, speedup, _) = best_of(repo, key)?;
    Ok((choice, speedup))
}

fn best_of(repo: &Repo, key: &TuneKey) -> Result<(ChoiceVector, f64, bool)> {
    let resolved = key.resolve(repo)?;
    let record = load_key_record(repo, &resolved)?.ok_or_else(|| ClusterError::NoFrontier(key.to_string()))?;
    best_of_record(&record, key)
}

fn best_of_record(record: &KeyRecord, key: &TuneKey) -> Result<(ChoiceVector, f64, bool)> {
    let best = record.fastest().ok_or_else(|| ClusterError::NoFrontier(key.to_string()))?;
    let speedup = record.best_speedup().ok_or_else(|| ClusterError::NoReference(key.to_string()))?;
    let (choice, reduced) = match &best.canonical {
        Some(c) => (c.clone(), true),
        None => (best.choice.clone().with_no_all(), false),
    };
    Ok((choice, speedup, reduced))
}

/// Group keys by identical canonical choice, sorted by max speedup descending.
pub fn build_clusters(repo: &Repo, keys: &[TuneKey]) -> Result<Vec<OptimizationCluster>> {
    let mut best = Vec::with_capacity(keys.len());
    for key in keys {
        let (choice, speedup, reduced) = best_of(repo, key)?;
        best.push((key.clone(), choice, speedup, reduced));
    }
    Ok(group(best))
}

/// Grouping step of [`build_clusters`] over already computed best choices.
pub fn group(best: Vec<(TuneKey, ChoiceVector, f64, bool)>) -> Vec<OptimizationCluster> {
    let mut by_key: BTreeMap<String, OptimizationCluster> = BTreeMap::new();
    for (key, choice, speedup, reduced) in best {
        let canonical = choice.with_no_all();
        let cluster = by_key.entry(cluster_key(&canonical)).or_insert_with(|| OptimizationCluster {
            canonical_choice: canonical,
            members: Vec::new(),
            evaluated: Vec::new(),
            max_speedup: f64::NEG_INFINITY,
            n_improved: 0,
            n_slowdown: 0,
            n_neutral: 0,
        });
        cluster.max_speedup = cluster.max_speedup.max(speedup);
        cluster.members.push(ClusterMember { key, speedup, reduced });
    }
    let mut clusters: Vec<_> = by_key.into_values().collect();
    for c in &mut clusters {
        c.members.sort_by(|a, b| a.key.cmp(&b.key));
    }
    clusters.sort_by(|a, b| b.max_speedup.total_cmp(&a.max_speedup).then_with(|| a.id().cmp(&b.id())));
    clusters
}

/// Record cross-evaluation speedups and recount the classes.
pub fn apply_stats(mut cluster: OptimizationCluster, evaluated: Vec<ClusterMember>) -> OptimizationCluster {
    cluster.n_improved = 0;
    cluster.n_slowdown = 0;
    cluster.n_neutral = 0;
    for m in &evaluated {
        match classify(m.speedup) {
            SpeedupClass::Improved => cluster.n_improved += 1,
            SpeedupClass::Slowdown => cluster.n_slowdown += 1,
            SpeedupClass::Neutral => cluster.n_neutral += 1,
        }
    }
    if let Some(max) = evaluated.iter().map(|m| m.speedup).reduce(f64::max) {
        cluster.max_speedup = max;
    }
    cluster.evaluated = evaluated;
    cluster
}

/// Measures a choice on a key relative to the key's reference.
pub trait SpeedupEvaluator {
    /// `None` when the measurement is unreliable. Failed builds or runs are
    /// reported as speedup 0.
    fn speedup(&mut self, key: &TuneKey, choice: &ChoiceVector) -> Result<Option<f64>>;
}

impl<F> SpeedupEvaluator for F
where
    F: FnMut(&TuneKey, &ChoiceVector) -> Result<Option<f64>>,
{
    fn speedup(&mut self, key: &TuneKey, choice: &ChoiceVector) -> Result<Option<f64>> {
        self(key, choice)
    }
}

impl SpeedupEvaluator for Tuner<'_> {
    fn speedup(&mut self, key: &TuneKey, choice: &ChoiceVector) -> Result<Option<f64>> {
        let config = TuneConfig::default();
        let reference = self.reference_behavior(key, &config)?;
        let behavior = self.probe(key, choice, config.probe_repeats)?;
        if behavior.failed {
            return Ok(Some(0.0));
        }
        match (&reference.summary, &behavior.summary) {
            (Some(r), Some(c)) => Ok(statistics::speedup(r, c).ok()),
            _ => Ok(None),
        }
    }
}

/// Cross-evaluate a cluster's choice on every key.
pub fn cluster_stats<E: SpeedupEvaluator + ?Sized>(
    cluster: OptimizationCluster,
    all_keys: &[TuneKey],
    evaluator: &mut E,
) -> Result<OptimizationCluster> {
    let mut evaluated = Vec::with_capacity(all_keys.len());
    for key in all_keys {
        if let Some(speedup) = evaluator.speedup(key, &cluster.canonical_choice)? {
            evaluated.push(ClusterMember {
                key: key.clone(),
                speedup,
                reduced: true,
            });
        }
    }
    Ok(apply_stats(cluster, evaluated))
}

/// Compute stats for the `k` clusters with the highest max speedup; the rest
/// are returned unevaluated. Order is preserved.
pub fn evaluate_top<E: SpeedupEvaluator + ?Sized>(
    clusters: Vec<OptimizationCluster>,
    all_keys: &[TuneKey],
    evaluator: &mut E,
    k: usize,
) -> Result<Vec<OptimizationCluster>> {
    clusters
        .into_iter()
        .enumerate()
        .map(|(i, c)| if i < k { cluster_stats(c, all_keys, evaluator) } else { Ok(c) })
        .collect()
}

/// Evaluated clusters that slowed nothing down, most improvements first.
pub fn safe_default_candidates(clusters: &[OptimizationCluster]) -> Vec<OptimizationCluster> {
    let mut out: Vec<_> = clusters
        .iter()
        .filter(|c| c.has_stats() && c.n_slowdown == 0)
        .cloned()
        .collect();
    out.sort_by_key(|c| std::cmp::Reverse(c.n_improved));
    out
}

/// One species per cluster: the member with the highest speedup, ties to the
/// smallest species uid.
pub fn representative_benchmark(clusters: &[OptimizationCluster]) -> Vec<String> {
    clusters
        .iter()
        .filter_map(|c| {
            c.members
                .iter()
                .max_by(|a, b| {
                    a.speedup
                        .total_cmp(&b.speedup)
                        .then_with(|| b.key.species.cmp(&a.key.species))
                })
                .map(|m| m.key.species.clone())
        })
        .collect()
}

/// The `sh cluster` report document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub clusters: Vec<ClusterSummary>,
    pub representative: Vec<String>,
    pub safe_defaults: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub canonical: String,
    pub max_speedup: f64,
    pub n_improved: usize,
    pub n_slowdown: usize,
    pub n_neutral: usize,
    pub members: Vec<ClusterMember>,
}

impl ClusterReport {
    pub fn new(clusters: &[OptimizationCluster]) -> Self {
        ClusterReport {
            clusters: clusters
                .iter()
                .map(|c| ClusterSummary {
                    canonical: c.id(),
                    max_speedup: c.max_speedup,
                    n_improved: c.n_improved,
                    n_slowdown: c.n_slowdown,
                    n_neutral: c.n_neutral,
                    members: c.members.clone(),
                })
                .collect(),
            representative: representative_benchmark(clusters),
            safe_defaults: safe_default_candidates(clusters).iter().map(|c| c.id()).collect(),
        }
    }
}
