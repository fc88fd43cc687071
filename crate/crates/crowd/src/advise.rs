//! Optimization advice from stored frontiers or a trained cluster model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crowdtune::autotune::{all_key_records, TuneKey};
use crowdtune::pareto::Direction;
use crowdtune::predict::{load_model, PredictError};
use crowdtune::repo::{EntryKind, Repo, RepoError};

use crate::{CrowdError, Result};

/// Model consulted for species without a frontier.
pub const DEFAULT_MODEL_ALIAS: &str = "cluster-model";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdviceQuery {
    #[serde(default)]
    pub species: Option<String>,
    #[serde(default)]
    pub platform: Option<String>,
    #[serde(default)]
    pub features: BTreeMap<String, f64>,
    /// Objective name -> weight. Empty means exec_time_s alone.
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
    #[serde(default)]
    pub model: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdviceSource {
    Frontier,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSolution {
    /// Frontier answers only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<TuneKey>,
    pub choice: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub behavior: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advice {
    pub source: AdviceSource,
    pub solutions: Vec<RankedSolution>,
}

fn not_found_as_none<T>(r: std::result::Result<T, RepoError>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(RepoError::NotFound { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn advise(repo: &Repo, query: &AdviceQuery) -> Result<Advice> {
    let mut weights = query.weights.clone();
    if weights.is_empty() {
        weights.insert("exec_time_s".into(), 1.0);
    }
    if let Some((k, w)) = weights.iter().find(|(_, w)| !w.is_finite()) {
        return Err(CrowdError::InvalidQuery(format!("weight {k}={w}")));
    }

    let species = match &query.species {
        Some(s) => not_found_as_none(repo.resolve_ref(EntryKind::Species, s))?,
        None => None,
    };
    let platform = match &query.platform {
        Some(p) => match not_found_as_none(repo.resolve_ref(EntryKind::Platform, p))? {
            Some(uid) => Some(uid),
            None => return Err(CrowdError::NoKnowledge),
        },
        None => None,
    };

    if let Some(uid) = &species {
        let mut ranked = Vec::new();
        for record in all_key_records(repo)? {
            if record.key.species != *uid || platform.as_ref().is_some_and(|p| *p != record.key.platform) {
                continue;
            }
            let spec = record.frontier.spec();
            for name in weights.keys() {
                if spec.index_of(name).is_none() {
                    return Err(CrowdError::InvalidQuery(format!("objective `{name}` is not tracked")));
                }
            }
            for s in record.frontier.solutions() {
                let behavior: BTreeMap<String, f64> = spec
                    .dims()
                    .iter()
                    .zip(&s.behavior)
                    .map(|(d, v)| (d.name.clone(), *v))
                    .collect();
                // Lower is better; maximized objectives count negatively.
                let score = weights
                    .iter()
                    .map(|(n, w)| {
                        let dim = &spec.dims()[spec.index_of(n).expect("checked above")];
                        let sign = if dim.direction == Direction::Maximize { -1.0 } else { 1.0 };
                        w * sign * behavior[n]
                    })
                    .sum();
                ranked.push(RankedSolution {
                    key: Some(record.display.clone()),
                    choice: s.choice.render(),
                    canonical: s.canonical.as_ref().map(|c| c.render()),
                    behavior,
                    score: Some(score),
                    confidence: None,
                });
            }
        }
        if !ranked.is_empty() {
            ranked.sort_by(|a, b| {
                a.score
                    .unwrap_or(f64::INFINITY)
                    .total_cmp(&b.score.unwrap_or(f64::INFINITY))
                    .then_with(|| a.choice.cmp(&b.choice))
            });
            return Ok(Advice {
                source: AdviceSource::Frontier,
                solutions: ranked,
            });
        }
    }

    if query.features.is_empty() {
        return Err(CrowdError::NoKnowledge);
    }
    let alias = query.model.as_deref().unwrap_or(DEFAULT_MODEL_ALIAS);
    let model = match load_model(repo, alias) {
        Ok(m) => m,
        Err(PredictError::Repo(RepoError::NotFound { .. })) => return Err(CrowdError::NoKnowledge),
        Err(e) => return Err(e.into()),
    };
    let prediction = model.predict_map(&query.features)?;
    Ok(Advice {
        source: AdviceSource::Model,
        solutions: vec![RankedSolution {
            key: None,
            choice: prediction.label,
            canonical: None,
            behavior: BTreeMap::new(),
            score: None,
            confidence: Some(prediction.confidence),
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crowdtune::autotune::{ensure_key_record, offer_solution};
    use crowdtune::flagspace::{ChoiceVector, FlagSetting};
    use crowdtune::pareto::{FrontierSolution, ObjectiveSpec};
    use crowdtune::predict::{save_model, train_on_maps};
    use serde_json::json;

    fn repo() -> (tempfile::TempDir, Repo) {
        let d = tempfile::tempdir().unwrap();
        let r = Repo::init(d.path()).unwrap();
        (d, r)
    }

    #[test]
    fn empty_repo_has_no_knowledge() {
        let (_d, r) = repo();
        let q = AdviceQuery {
            species: Some("nothing".into()),
            ..Default::default()
        };
        assert!(matches!(advise(&r, &q), Err(CrowdError::NoKnowledge)));
        let q = AdviceQuery {
            features: [("ft1".to_string(), 1.0)].into(),
            ..Default::default()
        };
        assert!(matches!(advise(&r, &q), Err(CrowdError::NoKnowledge)));
    }

    #[test]
    fn known_species_ranked_by_weighted_objective() {
        let (_d, r) = repo();
        r.create_entry(EntryKind::Species, Some("s"), &json!({})).unwrap();
        r.create_entry(EntryKind::Dataset, Some("d"), &json!({})).unwrap();
        r.create_entry(EntryKind::Platform, Some("p"), &json!({})).unwrap();
        let key = TuneKey::new("s", "d", "p", "gcc-4.6");
        let spec = ObjectiveSpec::minimize(&["exec_time_s", "binary_size_bytes"]).unwrap();
        let rec = ensure_key_record(&r, &key, &spec).unwrap();
        let fast = ChoiceVector::base("-O3").with("unroll-loops", FlagSetting::On);
        let small = ChoiceVector::base("-O3").with("unroll-loops", FlagSetting::Off);
        offer_solution(&r, &rec.key, FrontierSolution::new(small.clone(), vec![2.0, 100.0])).unwrap();
        offer_solution(&r, &rec.key, FrontierSolution::new(fast.clone(), vec![1.0, 300.0])).unwrap();

        let q = AdviceQuery {
            species: Some("s".into()),
            ..Default::default()
        };
        let a = advise(&r, &q).unwrap();
        assert_eq!(a.source, AdviceSource::Frontier);
        let order: Vec<_> = a.solutions.iter().map(|s| s.choice.clone()).collect();
        assert_eq!(order, vec![fast.render(), small.render()]);

        let q = AdviceQuery {
            weights: [("binary_size_bytes".to_string(), 1.0)].into(),
            ..q
        };
        let a = advise(&r, &q).unwrap();
        assert_eq!(a.solutions[0].choice, small.render());
        assert_eq!(a.solutions[0].score, Some(100.0));

        let q = AdviceQuery {
            platform: Some("elsewhere".into()),
            ..q
        };
        assert!(matches!(advise(&r, &q), Err(CrowdError::NoKnowledge)));
    }

    #[test]
    fn unknown_species_routed_through_model() {
        let (_d, r) = repo();
        let rows: Vec<BTreeMap<String, f64>> = [1.0, 2.0, 3.0, 10.0, 11.0, 12.0]
            .iter()
            .map(|v| [("ft29".to_string(), *v)].into())
            .collect();
        let labels: Vec<String> = ["-O3 -fa -fno-ALL"; 3]
            .into_iter()
            .chain(["-O3 -fb -fno-ALL"; 3])
            .map(String::from)
            .collect();
        let model = train_on_maps(&rows, &labels, 4, 0).unwrap();
        save_model(&r, DEFAULT_MODEL_ALIAS, &model, json!({})).unwrap();
        let q = AdviceQuery {
            species: Some("new-one".into()),
            features: [("ft29".to_string(), 11.5)].into(),
            ..Default::default()
        };
        let a = advise(&r, &q).unwrap();
        assert_eq!(a.source, AdviceSource::Model);
        assert_eq!(a.solutions[0].choice, "-O3 -fb -fno-ALL");
        assert_eq!(a.solutions[0].confidence, Some(1.0));
    }
}
