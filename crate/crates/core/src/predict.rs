//! Feature vectors, decision trees, nearest neighbors and leave-one-out
//! evaluation for predicting optimization clusters.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::measurement::COUNTER_NAMES;
use crate::repo::{EntryId, EntryKind, Repo, RepoError};

#[derive(Debug, thiserror::Error)]
pub enum PredictError {
    #[error("no training samples")]
    NoSamples,
    #[error("{features} feature vectors but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("feature `{0}` missing from query")]
    MissingFeature(String),
    #[error("invalid feature vector: {0}")]
    InvalidFeatures(String),
    #[error("cannot mix {0:?} and {1:?} feature vectors in one model")]
    MixedProvenance(FeatureProvenance, FeatureProvenance),
    #[error("malformed model: {0}")]
    MalformedModel(String),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PredictError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureProvenance {
    Imported,
    Extracted,
    Synthetic,
}

static FT_NAME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^ft[0-9]+$").unwrap());

/// Prefix of static features computed by [`extract_source_features`].
pub const EXTRACTED_PREFIX: &str = "src_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub species: String,
    #[serde(rename = "static", default)]
    pub static_features: BTreeMap<String, f64>,
    /// Counters per retired instruction.
    #[serde(default)]
    pub dynamic: BTreeMap<String, f64>,
    pub provenance: FeatureProvenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_counters: Option<BTreeMap<String, u64>>,
}

impl FeatureVector {
    pub fn new(species: &str, provenance: FeatureProvenance) -> Self {
        FeatureVector {
            species: species.to_string(),
            static_features: BTreeMap::new(),
            dynamic: BTreeMap::new(),
            provenance,
            raw_counters: None,
        }
    }

    pub fn with_static(mut self, name: &str, value: f64) -> Self {
        self.static_features.insert(name.to_string(), value);
        self
    }

    pub fn with_counters(mut self, raw: &BTreeMap<String, u64>) -> Result<Self> {
        self.dynamic = normalize_dynamic(raw)?;
        self.raw_counters = Some(raw.clone());
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PredictError::InvalidFeatures(format!("{}: {m}", self.species)));
        for (k, v) in self.static_features.iter().chain(&self.dynamic) {
            if !v.is_finite() {
                return bad(format!("`{k}` is {v}"));
            }
        }
        for k in self.dynamic.keys() {
            if !COUNTER_NAMES.contains(&k.as_str()) {
                return bad(format!("unknown counter `{k}`"));
            }
        }
        for k in self.static_features.keys() {
            let ok = match self.provenance {
                FeatureProvenance::Extracted => k.starts_with(EXTRACTED_PREFIX),
                _ => FT_NAME.is_match(k),
            };
            if !ok {
                return bad(format!("static feature name `{k}`"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: FeatureVector = serde_json::from_str(text)?;
        v.validate()?;
        Ok(v)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.static_features.get(name).or_else(|| self.dynamic.get(name)).copied()
    }

    /// Static and dynamic features in one map.
    pub fn values(&self) -> BTreeMap<String, f64> {
        self.static_features
            .iter()
            .chain(&self.dynamic)
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    pub fn without(&self, name: &str) -> Self {
        let mut out = self.clone();
        out.static_features.remove(name);
        out.dynamic.remove(name);
        out
    }
}

/// Divide every canonical counter by the retired instruction count.
pub fn normalize_dynamic(raw: &BTreeMap<String, u64>) -> Result<BTreeMap<String, f64>> {
    let instructions = match raw.get("instructions") {
        Some(&n) if n > 0 => n as f64,
        _ => return Err(PredictError::InvalidFeatures("no instruction count".into())),
    };
    Ok(raw
        .iter()
        .filter(|(k, _)| COUNTER_NAMES.contains(&k.as_str()))
        .map(|(k, &v)| (k.clone(), v as f64 / instructions))
        .collect())
}

/// Crude source counters for species without imported feature vectors.
pub fn extract_source_features(species: &str, source: &str) -> FeatureVector {
    static LOOP: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(for|while|do)\b").unwrap());
    static BRANCH: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(if|case)\b|\?").unwrap());
    static CALL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([A-Za-z_][A-Za-z0-9_]*)\s*\(").unwrap());
    const NOT_CALLS: [&str; 6] = ["if", "for", "while", "switch", "return", "sizeof"];

    let code: String = source
        .lines()
        .map(|l| l.split("//").next().unwrap_or(""))
        .collect::<Vec<_>>()
        .join("\n");
    let calls = CALL
        .captures_iter(&code)
        .filter(|c| !NOT_CALLS.contains(&&c[1]))
        .count();
    let mut v = FeatureVector::new(species, FeatureProvenance::Extracted);
    for (name, count) in [
        ("src_lines", source.lines().filter(|l| !l.trim().is_empty()).count()),
        ("src_loops", LOOP.find_iter(&code).count()),
        ("src_branches", BRANCH.find_iter(&code).count()),
        ("src_calls", calls),
        ("src_subscripts", code.matches('[').count()),
    ] {
        v.static_features.insert(name.to_string(), count as f64);
    }
    v
}

fn check_provenance(features: &[FeatureVector]) -> Result<()> {
    let Some(first) = features.first() else {
        return Ok(());
    };
    let base = first.provenance == FeatureProvenance::Extracted;
    for f in features {
        f.validate()?;
        if (f.provenance == FeatureProvenance::Extracted) != base {
            return Err(PredictError::MixedProvenance(first.provenance, f.provenance));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: String,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        label: String,
        /// Training label counts that reached this leaf.
        counts: BTreeMap<String, usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub impurity: String,
    pub max_depth: usize,
    pub samples: usize,
}

/// Binary tree in a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTreeModel {
    pub nodes: Vec<Node>,
    pub depth: usize,
    /// Features available at training time.
    pub features: Vec<String>,
    pub training: TrainingMeta,
}

/// A prediction and the share of training samples in its leaf that carry it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub confidence: f64,
}

impl DecisionTreeModel {
    /// Check the arena is a tree rooted at 0 with in-range children.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(PredictError::MalformedModel("no nodes".into()));
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                return Err(PredictError::MalformedModel(format!("node {i} reached twice")));
            }
            if let Node::Split { feature, left, right, .. } = &self.nodes[i] {
                if !self.features.contains(feature) {
                    return Err(PredictError::MalformedModel(format!("unknown feature `{feature}`")));
                }
                for &c in [left, right] {
                    if c >= self.nodes.len() {
                        return Err(PredictError::MalformedModel(format!("child {c} out of range")));
                    }
                    stack.push(c);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(PredictError::MalformedModel("unreachable nodes".into()));
        }
        Ok(())
    }

    /// Features tested by split nodes, sorted.
    pub fn features_used(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(feature),
                Node::Leaf { .. } => None,
            })
            .collect();
        set.into_iter().cloned().collect()
    }

    /// Distinct leaf labels, sorted.
    pub fn labels(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { label, .. } => Some(label),
                Node::Split { .. } => None,
            })
            .collect();
        set.into_iter().cloned().collect()
    }

    pub fn predict_with<F>(&self, lookup: F) -> Result<Prediction>
    where
        F: Fn(&str) -> Option<f64>,
    {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let v = lookup(feature).ok_or_else(|| PredictError::MissingFeature(feature.clone()))?;
                    i = if v < *threshold { *left } else { *right };
                }
                Node::Leaf { label, counts } => {
                    let total: usize = counts.values().sum();
                    let confidence = if total == 0 {
                        1.0
                    } else {
                        counts.get(label).copied().unwrap_or(0) as f64 / total as f64
                    };
                    return Ok(Prediction {
                        label: label.clone(),
                        confidence,
                    });
                }
            }
        }
    }

    pub fn predict_map(&self, f: &BTreeMap<String, f64>) -> Result<Prediction> {
        self.predict_with(|k| f.get(k).copied())
    }
}

pub fn predict(model: &DecisionTreeModel, f: &FeatureVector) -> Result<String> {
    Ok(model.predict_with(|k| f.get(k))?.label)
}

/// Train on feature vectors; see [`train_on_maps`].
pub fn train_tree(features: &[FeatureVector], labels: &[String], max_depth: usize, seed: u64) -> Result<DecisionTreeModel> {
    check_provenance(features)?;
    let rows: Vec<BTreeMap<String, f64>> = features.iter().map(FeatureVector::values).collect();
    train_on_maps(&rows, labels, max_depth, seed)
}

/// Greedy CART with Gini impurity. Candidate features are those present in
/// every row. Split ties go to the lowest feature name, then the lowest
/// threshold; thresholds sit midway between adjacent training values.
pub fn train_on_maps(
    rows: &[BTreeMap<String, f64>],
    labels: &[String],
    max_depth: usize,
    seed: u64,
) -> Result<DecisionTreeModel> {
    if rows.len() != labels.len() {
        return Err(PredictError::LengthMismatch {
            features: rows.len(),
            labels: labels.len(),
        });
    }
    if rows.is_empty() {
        return Err(PredictError::NoSamples);
    }
    let mut features: Vec<String> = rows[0].keys().cloned().collect();
    features.retain(|f| rows.iter().all(|r| r.contains_key(f)));
    for r in rows {
        if let Some((k, v)) = r.iter().find(|(_, v)| !v.is_finite()) {
            return Err(PredictError::InvalidFeatures(format!("`{k}` is {v}")));
        }
    }
    let mut builder = Builder {
        rows,
        labels,
        features: &features,
        nodes: Vec::new(),
        depth: 0,
    };
    let all: Vec<usize> = (0..rows.len()).collect();
    builder.grow(&all, 0, max_depth);
    let depth = builder.depth;
    let nodes = builder.nodes;
    Ok(DecisionTreeModel {
        nodes,
        depth,
        features,
        training: TrainingMeta {
            seed,
            impurity: "gini".to_string(),
            max_depth,
            samples: rows.len(),
        },
    })
}

struct Builder<'a> {
    rows: &'a [BTreeMap<String, f64>],
    labels: &'a [String],
    features: &'a [String],
    nodes: Vec<Node>,
    depth: usize,
}

fn gini(counts: &BTreeMap<&str, usize>, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.values().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

const IMPURITY_EPS: f64 = 1e-12;

/// Midpoint of `lo < hi` that still sends `lo` left.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo { mid } else { hi }
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for &i in idx {
            *m.entry(self.labels[i].as_str()).or_insert(0) += 1;
        }
        m
    }

    fn leaf(&mut self, idx: &[usize]) -> usize {
        let counts = self.counts(idx);
        // Majority label; BTreeMap order breaks ties toward the smallest label.
        let label = counts
            .iter()
            .fold(None::<(&str, usize)>, |best, (&l, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((l, c)),
            })
            .map(|(l, _)| l.to_string())
            .unwrap_or_default();
        self.nodes.push(Node::Leaf {
            label,
            counts: counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        });
        self.nodes.len() - 1
    }

    fn best_split(&self, idx: &[usize]) -> Option<(String, f64)> {
        let parent = gini(&self.counts(idx), idx.len());
        let mut best: Option<(f64, &String, f64)> = None;
        for feature in self.features {
            let mut sorted: Vec<(f64, &str)> = idx
                .iter()
                .map(|&i| (self.rows[i][feature], self.labels[i].as_str()))
                .collect();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left: BTreeMap<&str, usize> = BTreeMap::new();
            let mut right = self.counts(idx);
            for k in 1..sorted.len() {
                let moved = sorted[k - 1].1;
                *left.entry(moved).or_insert(0) += 1;
                if let Some(c) = right.get_mut(moved) {
                    *c -= 1;
                    if *c == 0 {
                        right.remove(moved);
                    }
                }
                if sorted[k].0 == sorted[k - 1].0 {
                    continue;
                }
                let n = sorted.len() as f64;
                let score = (k as f64 / n) * gini(&left, k) + ((n - k as f64) / n) * gini(&right, sorted.len() - k);
                if best.is_none_or(|(s, _, _)| score < s - IMPURITY_EPS) {
                    best = Some((score, feature, midpoint(sorted[k - 1].0, sorted[k].0)));
                }
            }
        }
        best.filter(|(s, _, _)| *s < parent - IMPURITY_EPS)
            .map(|(_, f, t)| (f.clone(), t))
    }

    fn grow(&mut self, idx: &[usize], depth: usize, max_depth: usize) -> usize {
        self.depth = self.depth.max(depth);
        let pure = self.counts(idx).len() <= 1;
        let split = if pure || depth >= max_depth { None } else { self.best_split(idx) };
        let Some((feature, threshold)) = split else {
            return self.leaf(idx);
        };
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            label: String::new(),
            counts: BTreeMap::new(),
        });
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.rows[i][&feature] < threshold);
        let left = self.grow(&l, depth + 1, max_depth);
        let right = self.grow(&r, depth + 1, max_depth);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

fn distance2(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .map(|k| {
            let d = a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0);
            d * d
        })
        .sum()
}

/// Majority label of the `k` nearest rows (Euclidean, absent keys as 0).
/// Neighbors are ordered by distance then label; vote ties go to the smaller
/// distance sum, then the smaller label.
pub fn knn_on_maps(rows: &[BTreeMap<String, f64>], labels: &[String], f: &BTreeMap<String, f64>, k: usize) -> Result<String> {
    if rows.len() != labels.len() {
        return Err(PredictError::LengthMismatch {
            features: rows.len(),
            labels: labels.len(),
        });
    }
    if rows.is_empty() {
        return Err(PredictError::NoSamples);
    }
    let mut scored: Vec<(f64, &str)> = rows
        .iter()
        .zip(labels)
        .map(|(r, l)| (distance2(r, f).sqrt(), l.as_str()))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let mut votes: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (d, l) in scored.iter().take(k.max(1)) {
        let e = votes.entry(l).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += d;
    }
    let winner = votes
        .into_iter()
        .min_by(|a, b| {
            b.1 .0
                .cmp(&a.1 .0)
                .then_with(|| a.1 .1.total_cmp(&b.1 .1))
                .then_with(|| a.0.cmp(b.0))
        })
        .map(|(l, _)| l.to_string())
        .expect("at least one neighbor");
    Ok(winner)
}

pub fn knn_predict(features: &[FeatureVector], labels: &[String], f: &FeatureVector, k: usize) -> Result<String> {
    let rows: Vec<_> = features.iter().map(FeatureVector::values).collect();
    knn_on_maps(&rows, labels, &f.values(), k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    Tree { max_depth: usize },
    Knn { k: usize },
}

impl Default for ModelKind {
    fn default() -> Self {
        ModelKind::Tree { max_depth: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MispredictionRecord {
    pub species: String,
    pub predicted: String,
    pub actual: String,
    pub features: FeatureVector,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoocvResult {
    pub accuracy: f64,
    pub mispredictions: Vec<MispredictionRecord>,
}

/// Leave-one-out cross-validation.
pub fn loocv(features: &[FeatureVector], labels: &[String], kind: ModelKind) -> Result<LoocvResult> {
    if features.len() != labels.len() {
        return Err(PredictError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.len() < 2 {
        return Err(PredictError::NoSamples);
    }
    check_provenance(features)?;
    let rows: Vec<BTreeMap<String, f64>> = features.iter().map(FeatureVector::values).collect();
    let mut correct = 0;
    let mut mispredictions = Vec::new();
    for held in 0..rows.len() {
        let train_rows: Vec<_> = rows.iter().enumerate().filter(|(i, _)| *i != held).map(|(_, r)| r.clone()).collect();
        let train_labels: Vec<_> = labels.iter().enumerate().filter(|(i, _)| *i != held).map(|(_, l)| l.clone()).collect();
        let predicted = match kind {
            ModelKind::Tree { max_depth } => {
                train_on_maps(&train_rows, &train_labels, max_depth, 0)?
                    .predict_map(&rows[held])?
                    .label
            }
            ModelKind::Knn { k } => knn_on_maps(&train_rows, &train_labels, &rows[held], k)?,
        };
        if predicted == labels[held] {
            correct += 1;
        } else {
            mispredictions.push(MispredictionRecord {
                species: features[held].species.clone(),
                predicted,
                actual: labels[held].clone(),
                features: features[held].clone(),
                timestamp: Utc::now(),
            });
        }
    }
    Ok(LoocvResult {
        accuracy: correct as f64 / rows.len() as f64,
        mispredictions,
    })
}

/// Store misprediction records as experiment entries; re-logging the same
/// (species, predicted, actual) replaces the earlier record.
pub fn log_mispredictions(repo: &Repo, records: &[MispredictionRecord]) -> Result<Vec<EntryId>> {
    records
        .iter()
        .map(|r| {
            let alias = format!(
                "mispredict-{}",
                crate::autotune::short_hash(&[&r.species, &r.predicted, &r.actual])
            );
            let meta = json!({"type": "misprediction", "record": r});
            Ok(repo.put_entry(EntryKind::Experiment, &alias, &meta)?)
        })
        .collect()
}

/// Accuracy lost when each feature is removed alone, largest first (ties by name).
pub fn feature_ablation(features: &[FeatureVector], labels: &[String], kind: ModelKind) -> Result<Vec<(String, f64)>> {
    let base = loocv(features, labels, kind)?.accuracy;
    let names: BTreeSet<String> = features.iter().flat_map(|f| f.values().into_keys()).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let reduced: Vec<FeatureVector> = features.iter().map(|f| f.without(&name)).collect();
        let acc = loocv(&reduced, labels, kind)?.accuracy;
        out.push((name, base - acc));
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Store a trained model as a `model` entry.
pub fn save_model(repo: &Repo, alias: &str, model: &DecisionTreeModel, extra: serde_json::Value) -> Result<EntryId> {
    let meta = json!({"model": model, "info": extra});
    Ok(repo.put_entry(EntryKind::Model, alias, &meta)?)
}

pub fn load_model(repo: &Repo, reference: &str) -> Result<DecisionTreeModel> {
    let entry = repo.load(EntryKind::Model, reference)?;
    let model: DecisionTreeModel = serde_json::from_value(entry.meta["model"].clone())?;
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(species: &str, vals: &[(&str, f64)]) -> FeatureVector {
        vals.iter()
            .fold(FeatureVector::new(species, FeatureProvenance::Synthetic), |v, (k, x)| v.with_static(k, *x))
    }

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn validation() {
        assert!(fv("s", &[("ft29", 1.0)]).validate().is_ok());
        assert!(fv("s", &[("ft29", f64::NAN)]).validate().is_err());
        assert!(fv("s", &[("phi", 1.0)]).validate().is_err());
        let mut v = fv("s", &[]);
        v.dynamic.insert("cycles".into(), 1.0);
        assert!(v.validate().is_ok());
        v.dynamic.insert("bogus".into(), 1.0);
        assert!(v.validate().is_err());
    }

    #[test]
    fn json_document() {
        let text = r#"{"species":"s1","static":{"ft1":2.0},"dynamic":{"cycles":1.5},"provenance":"imported"}"#;
        let v = FeatureVector::from_json(text).unwrap();
        assert_eq!(v.get("ft1"), Some(2.0));
        assert_eq!(v.get("cycles"), Some(1.5));
        assert_eq!(v.provenance, FeatureProvenance::Imported);
    }

    #[test]
    fn per_instruction_normalization() {
        let raw: BTreeMap<String, u64> = [("instructions", 200), ("cycles", 100), ("weird", 5)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let n = normalize_dynamic(&raw).unwrap();
        assert_eq!(n["cycles"], 0.5);
        assert_eq!(n["instructions"], 1.0);
        assert!(!n.contains_key("weird"));
        assert!(normalize_dynamic(&BTreeMap::new()).is_err());
    }

    #[test]
    fn separable_threshold() {
        let xs = [1.0, 2.0, 3.0, 4.9, 5.0, 6.0, 9.0];
        let feats: Vec<_> = xs.iter().map(|&x| fv("s", &[("ft1", x)])).collect();
        let ls: Vec<String> = xs.iter().map(|&x| if x < 5.0 { "A" } else { "B" }.to_string()).collect();
        let m = train_tree(&feats, &ls, 4, 0).unwrap();
        assert_eq!(m.depth, 1);
        match &m.nodes[0] {
            Node::Split { threshold, .. } => assert!(*threshold > 4.9 && *threshold <= 5.0, "{threshold}"),
            n => panic!("{n:?}"),
        }
        let Node::Split { threshold, .. } = m.nodes[0] else { unreachable!() };
        assert_eq!(predict(&m, &fv("q", &[("ft1", threshold)])).unwrap(), "B");
        assert_eq!(predict(&m, &fv("q", &[("ft1", 4.9)])).unwrap(), "A");
        assert!(matches!(predict(&m, &fv("q", &[])), Err(PredictError::MissingFeature(_))));
    }

    #[test]
    fn single_label_is_a_leaf() {
        let feats = vec![fv("a", &[("ft1", 1.0)]), fv("b", &[("ft1", 2.0)])];
        let m = train_tree(&feats, &labels(&["X", "X"]), 4, 0).unwrap();
        assert_eq!(m.nodes.len(), 1);
        assert_eq!(predict(&m, &fv("q", &[("ft1", 100.0)])).unwrap(), "X");
        assert!(matches!(train_tree(&[], &[], 4, 0), Err(PredictError::NoSamples)));
    }

    #[test]
    fn split_ties_prefer_lowest_feature_name() {
        let feats = vec![
            fv("a", &[("ft2", 0.0), ("ft1", 0.0)]),
            fv("b", &[("ft2", 1.0), ("ft1", 1.0)]),
        ];
        let m = train_tree(&feats, &labels(&["A", "B"]), 3, 0).unwrap();
        assert!(matches!(&m.nodes[0], Node::Split { feature, .. } if feature == "ft1"));
    }

    #[test]
    fn two_feature_training_set_replays() {
        let mut feats = Vec::new();
        let mut ls = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                feats.push(fv("s", &[("ft1", i as f64), ("ft2", j as f64)]));
                ls.push(if i >= 3 { "hi" } else if j >= 2 { "mid" } else { "lo" }.to_string());
            }
        }
        let m = train_tree(&feats, &ls, 5, 1).unwrap();
        m.validate().unwrap();
        for (f, l) in feats.iter().zip(&ls) {
            assert_eq!(&predict(&m, f).unwrap(), l);
        }
        assert_eq!(train_tree(&feats, &ls, 5, 1).unwrap(), m);
    }

    #[test]
    fn confidence_from_leaf_counts() {
        let feats = vec![fv("a", &[("ft1", 0.0)]), fv("b", &[("ft1", 0.0)]), fv("c", &[("ft1", 0.0)])];
        let m = train_tree(&feats, &labels(&["A", "A", "B"]), 3, 0).unwrap();
        let p = m.predict_with(|_| Some(0.0)).unwrap();
        assert_eq!(p.label, "A");
        assert!((p.confidence - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn knn_rules() {
        let feats = vec![fv("a", &[("ft1", 0.0)]), fv("b", &[("ft1", 2.0)])];
        assert_eq!(knn_predict(&feats, &labels(&["Z", "Y"]), &fv("q", &[("ft1", 0.0)]), 1).unwrap(), "Z");
        // Equidistant: the smaller label wins.
        assert_eq!(knn_predict(&feats, &labels(&["Z", "Y"]), &fv("q", &[("ft1", 1.0)]), 1).unwrap(), "Y");
        // Absent keys count as 0.
        assert_eq!(knn_predict(&feats, &labels(&["Z", "Y"]), &fv("q", &[]), 1).unwrap(), "Z");
        // Vote tie at k=2 goes to the smaller distance sum.
        assert_eq!(knn_predict(&feats, &labels(&["Z", "Y"]), &fv("q", &[("ft1", 0.5)]), 2).unwrap(), "Z");
    }

    #[test]
    fn loocv_separable_and_logging() {
        let xs = [1.0, 2.0, 3.0, 7.0, 8.0, 9.0];
        let feats: Vec<_> = xs.iter().enumerate().map(|(i, &x)| fv(&format!("s{i}"), &[("ft1", x)])).collect();
        let ls: Vec<String> = xs.iter().map(|&x| if x < 5.0 { "A" } else { "B" }.to_string()).collect();
        for kind in [ModelKind::Tree { max_depth: 3 }, ModelKind::Knn { k: 1 }] {
            let r = loocv(&feats, &ls, kind).unwrap();
            assert_eq!(r.accuracy, 1.0);
            assert!(r.mispredictions.is_empty());
        }
        let mut flipped = ls.clone();
        flipped[0] = "B".into();
        let r = loocv(&feats, &flipped, ModelKind::Knn { k: 1 }).unwrap();
        assert!(r.accuracy < 1.0);
        assert!(r.mispredictions.iter().all(|m| m.predicted != m.actual));

        let dir = tempfile::tempdir().unwrap();
        let repo = Repo::init(dir.path()).unwrap();
        let ids = log_mispredictions(&repo, &r.mispredictions).unwrap();
        log_mispredictions(&repo, &r.mispredictions).unwrap();
        let stored = repo
            .find_entries(EntryKind::Experiment, &crate::repo::MetaFilter::new().eq("type", "misprediction"))
            .unwrap();
        assert_eq!(stored.len(), ids.len());
    }

    #[test]
    fn mixed_provenance_rejected() {
        let feats = vec![
            fv("a", &[("ft1", 0.0)]),
            extract_source_features("b", "int main() { return 0; }"),
        ];
        assert!(matches!(
            train_tree(&feats, &labels(&["A", "B"]), 3, 0),
            Err(PredictError::MixedProvenance(..))
        ));
    }

    #[test]
    fn source_extractor_counts() {
        let src = "int f(int *a, int n) {\n  int s = 0;\n  for (int i = 0; i < n; i++) {\n    if (a[i] > 0) s += g(a[i]);\n  }\n  // while (x) {}\n  return s;\n}\n";
        let v = extract_source_features("s", src);
        v.validate().unwrap();
        assert_eq!(v.get("src_lines"), Some(8.0));
        assert_eq!(v.get("src_loops"), Some(1.0));
        assert_eq!(v.get("src_branches"), Some(1.0));
        assert_eq!(v.get("src_calls"), Some(2.0));
        assert_eq!(v.get("src_subscripts"), Some(2.0));
    }

    #[test]
    fn ablation_single_feature_gives_majority_accuracy() {
        let xs = [1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0];
        let feats: Vec<_> = xs.iter().map(|&x| fv("s", &[("ft1", x)])).collect();
        let ls: Vec<String> = xs.iter().map(|&x| if x <= 3.0 { "B" } else { "A" }.to_string()).collect();
        let ablation = feature_ablation(&feats, &ls, ModelKind::Tree { max_depth: 3 }).unwrap();
        assert_eq!(ablation.len(), 1);
        // Without features every fold predicts the majority label A: 7 of 10 correct.
        assert!((ablation[0].1 - (1.0 - 0.7)).abs() < 1e-12);
    }

    #[test]
    fn model_round_trip() {
        let feats = vec![fv("a", &[("ft1", 0.0)]), fv("b", &[("ft1", 1.0)])];
        let m = train_tree(&feats, &labels(&["A", "B"]), 3, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let repo = Repo::init(dir.path()).unwrap();
        save_model(&repo, "m1", &m, json!({})).unwrap();
        assert_eq!(load_model(&repo, "m1").unwrap(), m);
        let mut broken = m.clone();
        broken.nodes.truncate(1);
        assert!(broken.validate().is_err());
    }
}
