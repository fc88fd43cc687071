//! Random exploration of flag choices per tuning key.
//!
//! Each iteration samples a choice, measures it, and offers it to the key's
//! frontier. Accepted winners are reduced to their `-fno-ALL` canonical form.
//! Per-key state (reference behavior, frontier, counters) lives in a
//! `solution` repo entry and is updated under the entry lock.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::flagspace::{self, ChoiceVector, FlagError, DEFAULT_REDUCE_TOLERANCE};
use crate::measurement::{BehaviorVector, DatasetDescriptor, MeasureError, Measurer, SpeciesDescriptor, StateVector};
use crate::pareto::{Frontier, FrontierSolution, ObjectiveSpec, ParetoError, Verdict};
use crate::repo::{EntryId, EntryKind, Repo, RepoError};
use crate::statistics;

#[derive(Debug, thiserror::Error)]
pub enum TuneError {
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Pareto(#[from] ParetoError),
    #[error(transparent)]
    Flags(#[from] FlagError),
    #[error("invalid tuning key `{0}`: expected species:dataset:platform")]
    InvalidKey(String),
    #[error("key {0} is untunable: its reference build or run failed")]
    Untunable(String),
    #[error("key compiler `{key}` does not match flag space `{space}`")]
    CompilerMismatch { key: String, space: String },
    #[error("no state recorded for key {0}")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("corrupt key record: {0}")]
    Corrupt(#[from] serde_json::Error),
}

pub type Result<T, E = TuneError> = std::result::Result<T, E>;

/// What a frontier is tracked for.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TuneKey {
    pub species: String,
    pub dataset: String,
    pub platform: String,
    pub compiler: String,
}

impl TuneKey {
    pub fn new(species: &str, dataset: &str, platform: &str, compiler: &str) -> Self {
        TuneKey {
            species: species.to_string(),
            dataset: dataset.to_string(),
            platform: platform.to_string(),
            compiler: compiler.to_string(),
        }
    }

    /// Parse `species:dataset:platform`.
    pub fn parse(text: &str, compiler: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
            return Err(TuneError::InvalidKey(text.to_string()));
        }
        Ok(Self::new(parts[0], parts[1], parts[2], compiler))
    }

    /// Resolve every reference to its uid.
    pub fn resolve(&self, repo: &Repo) -> Result<TuneKey> {
        Ok(TuneKey {
            species: repo.resolve_ref(EntryKind::Species, &self.species)?,
            dataset: repo.resolve_ref(EntryKind::Dataset, &self.dataset)?,
            platform: repo.resolve_ref(EntryKind::Platform, &self.platform)?,
            compiler: self.compiler.clone(),
        })
    }

    /// Stable alias of the key's `solution` entry. Expects a resolved key.
    pub fn entry_alias(&self) -> String {
        format!("key-{}", short_hash(&[&self.species, &self.dataset, &self.platform, &self.compiler]))
    }
}

impl std::fmt::Display for TuneKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}@{}", self.species, self.dataset, self.platform, self.compiler)
    }
}

/// Hex prefix of sha256 over NUL-terminated parts.
pub fn short_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(&h.finalize()[..10])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub objective: ObjectiveSpec,
    pub repeats: usize,
    pub density: f64,
    pub budget: usize,
    pub seed: u64,
    pub reduce_tolerance: f64,
    /// Repetitions per reduction probe; at least 3.
    pub probe_repeats: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            objective: ObjectiveSpec::tuning_default(),
            repeats: 3,
            density: 0.5,
            budget: 200,
            seed: 0,
            reduce_tolerance: DEFAULT_REDUCE_TOLERANCE,
            probe_repeats: 3,
        }
    }
}

impl TuneConfig {
    fn check(&self) -> Result<()> {
        if self.objective.index_of("exec_time_s").is_none() {
            return Err(TuneError::InvalidConfig("objective must include exec_time_s".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(TuneError::InvalidConfig(format!("density {} outside (0, 1]", self.density)));
        }
        if self.repeats == 0 {
            return Err(TuneError::InvalidConfig("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyCounters {
    pub experiments: u64,
    pub failures: u64,
    pub accepted: u64,
    pub unreliable: u64,
    /// Crowd results that matched the frontier and were only counted.
    pub summarized: u64,
    /// Crowd results stored raw because they contradicted the frontier.
    pub anomalies: u64,
}

/// Persistent per-key state: the meta of a key's `solution` entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRecord {
    /// Resolved (uid) key.
    pub key: TuneKey,
    /// Key as the user named it.
    pub display: TuneKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<BehaviorVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_experiment: Option<String>,
    #[serde(default)]
    pub untunable: bool,
    pub frontier: Frontier,
    #[serde(default)]
    pub counters: KeyCounters,
}

impl KeyRecord {
    /// Reference execution time, when the reference run was reliable.
    pub fn reference_time(&self) -> Option<f64> {
        self.reference
            .as_ref()
            .filter(|r| r.is_reliable())
            .and_then(|r| r.exec_time_s)
    }

    /// Speedup of the fastest frontier solution over the reference.
    pub fn best_speedup(&self) -> Option<f64> {
        let reference = self.reference_time()?;
        let idx = self.frontier.spec().index_of("exec_time_s")?;
        let best = self.frontier.best_by(idx)?;
        Some(reference / best.behavior[idx])
    }

    /// The fastest frontier solution.
    pub fn fastest(&self) -> Option<&FrontierSolution> {
        let idx = self.frontier.spec().index_of("exec_time_s")?;
        self.frontier.best_by(idx)
    }
}

/// Load the record of a resolved key.
pub fn load_key_record(repo: &Repo, key: &TuneKey) -> Result<Option<KeyRecord>> {
    match repo.load(EntryKind::Solution, &key.entry_alias()) {
        Ok(e) => Ok(Some(serde_json::from_value(e.meta)?)),
        Err(RepoError::NotFound { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// All key records in the repository, ordered by entry uid.
pub fn all_key_records(repo: &Repo) -> Result<Vec<KeyRecord>> {
    let entries = repo.find_entries(EntryKind::Solution, &Default::default())?;
    entries
        .into_iter()
        .filter(|e| e.meta.get("frontier").is_some() && e.meta.get("key").is_some())
        .map(|e| serde_json::from_value(e.meta).map_err(TuneError::from))
        .collect()
}

/// Read-modify-write a key record under the entry lock.
pub fn modify_key_record<T, F>(repo: &Repo, key: &TuneKey, f: F) -> Result<T>
where
    F: FnOnce(&mut KeyRecord) -> Result<T>,
{
    let uid = repo.resolve_ref(EntryKind::Solution, &key.entry_alias()).map_err(|e| match e {
        RepoError::NotFound { .. } => TuneError::UnknownKey(key.to_string()),
        other => other.into(),
    })?;
    let mut out = None;
    repo.modify_meta(EntryKind::Solution, &uid, |meta| {
        let mut record: KeyRecord = serde_json::from_value(meta)?;
        out = Some(f(&mut record)?);
        Ok::<Value, TuneError>(serde_json::to_value(&record)?)
    })?;
    Ok(out.expect("closure ran"))
}

/// Create the key's record if missing; returns the stored record.
pub fn ensure_key_record(repo: &Repo, display: &TuneKey, objective: &ObjectiveSpec) -> Result<KeyRecord> {
    let key = display.resolve(repo)?;
    if let Some(r) = load_key_record(repo, &key)? {
        return Ok(r);
    }
    let record = KeyRecord {
        key: key.clone(),
        display: display.clone(),
        reference: None,
        reference_experiment: None,
        untunable: false,
        frontier: Frontier::new(objective.clone()),
        counters: KeyCounters::default(),
    };
    match repo.create_entry(EntryKind::Solution, Some(&key.entry_alias()), &serde_json::to_value(&record)?) {
        Ok(_) | Err(RepoError::DuplicateAlias { .. }) => {}
        Err(e) => return Err(e.into()),
    }
    Ok(load_key_record(repo, &key)?.expect("just created"))
}

/// Offer a measured solution to a key's frontier.
pub fn offer_solution(repo: &Repo, key: &TuneKey, solution: FrontierSolution) -> Result<Verdict> {
    modify_key_record(repo, key, |record| Ok(record.frontier.insert_mut(solution)?))
}

/// Result of one exploration step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub record: EntryId,
    pub choice: ChoiceVector,
    /// `None` when the experiment failed or was unreliable and never reached the frontier.
    pub verdict: Option<Verdict>,
    pub speedup: Option<f64>,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical: Option<ChoiceVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyReport {
    pub key: TuneKey,
    pub frontier_size: usize,
    pub best_speedup: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_choice: Option<String>,
    pub iterations: usize,
    pub accepted: usize,
    pub failures: usize,
    pub untunable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub seed: u64,
    pub budget: usize,
    pub keys: Vec<KeyReport>,
    #[serde(default)]
    pub interrupted: bool,
}

impl CampaignReport {
    pub fn total_failures(&self) -> usize {
        self.keys.iter().map(|k| k.failures).sum()
    }
}

/// `-O3` when the space offers it, otherwise its first base level.
pub fn reference_choice(space: &flagspace::FlagSpace) -> ChoiceVector {
    let level = space
        .base_levels
        .iter()
        .find(|l| *l == "-O3")
        .unwrap_or(&space.base_levels[0]);
    ChoiceVector::base(level)
}

/// One planned exploration step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedUnit {
    pub key_index: usize,
    pub iteration: u64,
    pub choice: ChoiceVector,
}

/// The seeded sequence of (key, choice) draws a campaign explores: each
/// iteration picks a key uniformly, then samples a choice.
pub fn plan_units(n_keys: usize, space: &flagspace::FlagSpace, config: &TuneConfig) -> Vec<PlannedUnit> {
    if n_keys == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.budget)
        .map(|i| {
            let key_index = rng.random_range(0..n_keys);
            let choice = flagspace::sample_with(space, &mut rng, config.density);
            PlannedUnit {
                key_index,
                iteration: i as u64,
                choice,
            }
        })
        .collect()
}

/// Experiment alias for a planned unit of a resolved key.
pub fn experiment_alias(key: &TuneKey, seed: u64, iteration: u64, choice: &ChoiceVector) -> String {
    format!(
        "exp-{}",
        short_hash(&[&key.entry_alias(), &seed.to_string(), &iteration.to_string(), &choice.render()])
    )
}

#[derive(Clone)]
struct KeyContext {
    key: TuneKey,
    species: SpeciesDescriptor,
    dataset: DatasetDescriptor,
}

/// Drives exploration for one flag space and toolchain.
pub struct Tuner<'a> {
    pub measurer: Measurer<'a>,
    pub state: StateVector,
    contexts: BTreeMap<TuneKey, KeyContext>,
    interrupt: Option<Arc<AtomicBool>>,
}

impl<'a> Tuner<'a> {
    pub fn new(measurer: Measurer<'a>, state: StateVector) -> Self {
        Tuner {
            measurer,
            state,
            contexts: BTreeMap::new(),
            interrupt: None,
        }
    }

    /// Campaigns stop before the next experiment once `flag` is set.
    pub fn with_interrupt(mut self, flag: Arc<AtomicBool>) -> Self {
        self.interrupt = Some(flag);
        self
    }

    fn interrupted(&self) -> bool {
        self.interrupt.as_ref().is_some_and(|f| f.load(Ordering::SeqCst))
    }

    fn repo(&self) -> &'a Repo {
        self.measurer.repo
    }

    fn context(&mut self, display: &TuneKey) -> Result<KeyContext> {
        if !self.contexts.contains_key(display) {
            if display.compiler != self.measurer.space.id() {
                return Err(TuneError::CompilerMismatch {
                    key: display.compiler.clone(),
                    space: self.measurer.space.id(),
                });
            }
            let key = display.resolve(self.repo())?;
            let species = SpeciesDescriptor::load(self.repo(), &key.species)?;
            let dataset = DatasetDescriptor::load(self.repo(), &key.dataset)?;
            self.contexts.insert(
                display.clone(),
                KeyContext {
                    key,
                    species,
                    dataset,
                },
            );
        }
        Ok(self.contexts[display].clone())
    }

    fn state_for(&self, ctx: &KeyContext) -> StateVector {
        StateVector {
            platform_id: ctx.key.platform.clone(),
            ..self.state.clone()
        }
    }

    /// The bare base-level behavior for a key, measured once and cached in the repo.
    pub fn reference_behavior(&mut self, display: &TuneKey, config: &TuneConfig) -> Result<BehaviorVector> {
        config.check()?;
        let record = ensure_key_record(self.repo(), display, &config.objective)?;
        if let Some(r) = record.reference {
            return Ok(r);
        }
        let base = self.reference_choice();
        let ctx = self.context(display)?;
        let state = self.state_for(&ctx);
        let alias = format!("ref-{}", short_hash(&[&ctx.key.entry_alias()]));
        let (behavior, id) = self.measurer.measure(
            &ctx.species,
            &base,
            &ctx.dataset,
            &state,
            config.repeats.max(config.probe_repeats),
            Some(&alias),
            Some(json!({"role": "reference", "key": ctx.key})),
        )?;
        let key = ctx.key.clone();
        modify_key_record(self.repo(), &key, |r| {
            r.untunable = behavior.failed;
            r.reference = Some(behavior.clone());
            r.reference_experiment = Some(id.uid.clone());
            Ok(())
        })?;
        Ok(behavior)
    }

    pub fn reference_choice(&self) -> ChoiceVector {
        reference_choice(self.measurer.space)
    }

    /// One exploration step with a freshly sampled choice.
    pub fn iterate<R: Rng + ?Sized>(
        &mut self,
        display: &TuneKey,
        config: &TuneConfig,
        rng: &mut R,
        iteration: u64,
    ) -> Result<ExperimentOutcome> {
        let choice = flagspace::sample_with(self.measurer.space, rng, config.density);
        self.evaluate_choice(display, config, choice, iteration)
    }

    /// Measure a given choice for a key and offer it to the frontier.
    pub fn evaluate_choice(
        &mut self,
        display: &TuneKey,
        config: &TuneConfig,
        choice: ChoiceVector,
        iteration: u64,
    ) -> Result<ExperimentOutcome> {
        config.check()?;
        let reference = self.reference_behavior(display, config)?;
        let ctx = self.context(display)?;
        let key = ctx.key.clone();
        if reference.failed {
            return Err(TuneError::Untunable(display.to_string()));
        }
        let state = self.state_for(&ctx);
        let alias = experiment_alias(&key, config.seed, iteration, &choice);
        let context = json!({"key": key, "iteration": iteration, "seed": config.seed});
        let measured = self.measurer.measure(
            &ctx.species,
            &choice,
            &ctx.dataset,
            &state,
            config.repeats,
            Some(&alias),
            Some(context.clone()),
        );
        let (behavior, record) = match measured {
            Ok(ok) => ok,
            Err(e) => {
                // Measurement errors become failed experiment records.
                let behavior = BehaviorVector::failure(0.0, e.to_string());
                let meta = json!({
                    "status": "error",
                    "provenance": self.measurer.provenance(&ctx.species, &choice, &ctx.dataset, &state, config.repeats),
                    "behavior": behavior,
                    "context": context,
                });
                let id = self.repo().put_entry(crate::repo::EntryKind::Experiment, &alias, &meta)?;
                (behavior, id)
            }
        };

        let point = behavior.point(&config.objective).filter(|_| !behavior.failed);
        let reliable = behavior.is_reliable();
        let speedup = match (&reference.summary, &behavior.summary) {
            (Some(r), Some(c)) if reliable => statistics::speedup(r, c).ok(),
            _ => None,
        };

        let verdict = match point {
            Some(p) if reliable => {
                let solution = FrontierSolution::new(choice.clone(), p).with_experiment(record.uid.clone());
                Some(offer_solution(self.repo(), &key, solution)?)
            }
            _ => None,
        };

        let canonical = if verdict == Some(Verdict::Accepted) {
            let reduced = self.canonicalize(display, &choice, config);
            if let Some(c) = &reduced {
                let exp = record.uid.clone();
                let c = c.clone();
                modify_key_record(self.repo(), &key, |r| {
                    if let Some(s) = r.frontier.solutions_mut().iter_mut().find(|s| s.experiment.as_deref() == Some(&exp)) {
                        s.canonical = Some(c);
                    }
                    Ok(())
                })?;
            }
            reduced
        } else {
            None
        };

        let failed = behavior.failed;
        modify_key_record(self.repo(), &key, |r| {
            r.counters.experiments += 1;
            r.counters.failures += u64::from(failed);
            r.counters.unreliable += u64::from(!failed && !reliable);
            r.counters.accepted += u64::from(verdict == Some(Verdict::Accepted));
            Ok(())
        })?;
        self.repo().modify_meta(EntryKind::Experiment, &record.uid, |mut meta| {
            meta["verdict"] = json!(verdict);
            meta["speedup"] = json!(speedup);
            Ok::<_, RepoError>(meta)
        })?;

        Ok(ExperimentOutcome {
            record,
            choice,
            verdict,
            speedup,
            failed,
            canonical,
        })
    }

    /// Measure a choice on a key without recording an experiment.
    pub fn probe(&mut self, display: &TuneKey, choice: &ChoiceVector, repeats: usize) -> Result<BehaviorVector> {
        let ctx = self.context(display)?;
        let state = self.state_for(&ctx);
        Ok(self.measurer.evaluate(&ctx.species, choice, &ctx.dataset, &state, repeats)?)
    }

    /// Reduce a choice against this key's measurements. `None` when probing
    /// is unreliable or unstable.
    pub fn canonicalize(&mut self, display: &TuneKey, choice: &ChoiceVector, config: &TuneConfig) -> Option<ChoiceVector> {
        let repeats = config.probe_repeats.max(3);
        let ctx = self.context(display).ok()?;
        let state = self.state_for(&ctx);
        let measurer = &self.measurer;
        let mut probe = |c: &ChoiceVector| -> Result<f64, FlagError> {
            let b = measurer
                .evaluate(&ctx.species, c, &ctx.dataset, &state, repeats)
                .map_err(|e| FlagError::Probe(e.to_string()))?;
            match b.exec_time_s {
                Some(t) if b.is_reliable() => Ok(t),
                _ => Err(FlagError::Probe(format!("unreliable probe of `{c}`"))),
            }
        };
        flagspace::reduce(choice, &mut probe, config.reduce_tolerance).ok()
    }

    /// Fill in missing canonical forms on a key's frontier.
    pub fn canonicalize_frontier(&mut self, display: &TuneKey, config: &TuneConfig) -> Result<usize> {
        let key = self.context(display)?.key.clone();
        let record = load_key_record(self.repo(), &key)?.ok_or_else(|| TuneError::UnknownKey(display.to_string()))?;
        let mut filled = 0;
        for s in record.frontier.solutions().iter().filter(|s| s.canonical.is_none()) {
            if let Some(c) = self.canonicalize(display, &s.choice, config) {
                let target = s.choice.clone();
                modify_key_record(self.repo(), &key, |r| {
                    if let Some(sol) = r.frontier.solutions_mut().iter_mut().find(|x| x.choice == target) {
                        sol.canonical = Some(c);
                    }
                    Ok(())
                })?;
                filled += 1;
            }
        }
        Ok(filled)
    }

    /// Run `config.budget` iterations spread uniformly at random over `keys`.
    pub fn campaign(&mut self, keys: &[TuneKey], config: &TuneConfig) -> Result<CampaignReport> {
        config.check()?;
        if keys.is_empty() {
            return Err(TuneError::InvalidConfig("campaign needs at least one key".into()));
        }
        let mut per_key: Vec<(usize, usize, usize, bool)> = vec![(0, 0, 0, false); keys.len()];
        for (i, key) in keys.iter().enumerate() {
            let r = self.reference_behavior(key, config)?;
            per_key[i].3 = r.failed;
        }
        let mut interrupted = false;
        for unit in plan_units(keys.len(), self.measurer.space, config) {
            if self.interrupted() {
                interrupted = true;
                break;
            }
            let (k, choice, iteration) = (unit.key_index, unit.choice, unit.iteration);
            if per_key[k].3 {
                per_key[k].0 += 1;
                per_key[k].2 += 1;
                continue;
            }
            let outcome = self.evaluate_choice(&keys[k], config, choice, iteration)?;
            per_key[k].0 += 1;
            per_key[k].1 += usize::from(outcome.verdict == Some(Verdict::Accepted));
            per_key[k].2 += usize::from(outcome.failed);
        }
        let mut reports = Vec::with_capacity(keys.len());
        for (key, (iterations, accepted, failures, untunable)) in keys.iter().zip(per_key) {
            let resolved = key.resolve(self.repo())?;
            let record = load_key_record(self.repo(), &resolved)?.ok_or_else(|| TuneError::UnknownKey(key.to_string()))?;
            reports.push(KeyReport {
                key: key.clone(),
                frontier_size: record.frontier.len(),
                best_speedup: record.best_speedup(),
                best_choice: record.fastest().map(|s| s.best_choice().render()),
                iterations,
                accepted,
                failures,
                untunable,
            });
        }
        let report = CampaignReport {
            seed: config.seed,
            budget: config.budget,
            keys: reports,
            interrupted,
        };
        self.persist_report(keys, &report)?;
        Ok(report)
    }

    fn persist_report(&self, keys: &[TuneKey], report: &CampaignReport) -> Result<EntryId> {
        let mut parts: Vec<String> = keys.iter().map(|k| k.to_string()).collect();
        parts.push(report.seed.to_string());
        parts.push(report.budget.to_string());
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        let alias = format!("campaign-{}", short_hash(&refs));
        let meta = json!({"type": "campaign-report", "report": report});
        Ok(self.repo().put_entry(EntryKind::Cluster, &alias, &meta)?)
    }
}

/// Campaign reports stored in the repository.
pub fn campaign_reports(repo: &Repo) -> Result<Vec<CampaignReport>> {
    let filter = crate::repo::MetaFilter::new().eq("type", "campaign-report");
    repo.find_entries(EntryKind::Cluster, &filter)?
        .into_iter()
        .map(|e| serde_json::from_value(e.meta["report"].clone()).map_err(TuneError::from))
        .collect()
}
