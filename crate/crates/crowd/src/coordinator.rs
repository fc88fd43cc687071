//! Work queue, leases and result intake.
//!
//! The queue lives in memory. Results are folded into the repo's key records;
//! frontier updates for one key are serialized by a per-key lock.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crowdtune::autotune::{
    ensure_key_record, modify_key_record, plan_units, reference_choice, short_hash, TuneConfig, TuneError, TuneKey,
};
use crowdtune::flagspace::FlagSpace;
use crowdtune::measurement::SpeciesDescriptor;
use crowdtune::pareto::{FrontierSolution, ObjectiveSpec, Verdict};
use crowdtune::repo::{EntryKind, Repo};
use crowdtune::statistics::DEFAULT_RELIABILITY_THRESHOLD;

use crate::{
    CrowdError, PullRequest, RejectReason, ResultSubmission, Result, Storage, SubmitVerdict, UnitRole, WorkUnit,
};

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub lease: chrono::Duration,
    /// Re-issues after expiry before a unit is parked.
    pub max_reissues: u32,
    /// Relative band within which a result matches the frontier.
    pub tolerance: f64,
    pub objective: ObjectiveSpec,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig {
            lease: chrono::Duration::minutes(15),
            max_reissues: 3,
            tolerance: DEFAULT_RELIABILITY_THRESHOLD,
            objective: ObjectiveSpec::tuning_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Status {
    Queued,
    Leased { worker: String, deadline: DateTime<Utc> },
    Completing { worker: String, deadline: DateTime<Utc> },
    Done,
    Parked,
}

#[derive(Debug, Clone)]
struct Slot {
    unit: WorkUnit,
    status: Status,
    issues: u32,
    holders: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerStats {
    pub pulls: u64,
    pub issued: u64,
    pub submitted: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub summarized: u64,
    pub anomalies: u64,
}

impl WorkerStats {
    /// Share of accepted submissions flagged as anomalous.
    pub fn anomaly_rate(&self) -> f64 {
        if self.accepted == 0 {
            0.0
        } else {
            self.anomalies as f64 / self.accepted as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorStatus {
    pub queued: usize,
    pub leased: usize,
    pub done: usize,
    pub parked: usize,
    pub workers: BTreeMap<String, WorkerStats>,
}

impl CoordinatorStatus {
    /// No unit is waiting or leased.
    pub fn drained(&self) -> bool {
        self.queued == 0 && self.leased == 0
    }
}

#[derive(Default)]
struct State {
    slots: BTreeMap<String, Slot>,
    queue: VecDeque<String>,
    workers: BTreeMap<String, WorkerStats>,
}

pub struct Coordinator {
    repo: Repo,
    config: CoordinatorConfig,
    state: Mutex<State>,
    key_locks: Mutex<HashMap<TuneKey, Arc<Mutex<()>>>>,
}

impl Coordinator {
    pub fn new(repo: Repo, config: CoordinatorConfig) -> Self {
        Coordinator {
            repo,
            config,
            state: Mutex::new(State::default()),
            key_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn repo(&self) -> &Repo {
        &self.repo
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.config
    }

    /// Queue units; ids already known are skipped. Returns how many were added.
    pub fn enqueue(&self, units: Vec<WorkUnit>) -> usize {
        let mut st = self.state.lock().unwrap();
        let mut added = 0;
        for unit in units {
            if st.slots.contains_key(&unit.unit_id) {
                continue;
            }
            st.queue.push_back(unit.unit_id.clone());
            st.slots.insert(
                unit.unit_id.clone(),
                Slot {
                    unit,
                    status: Status::Queued,
                    issues: 0,
                    holders: BTreeSet::new(),
                },
            );
            added += 1;
        }
        added
    }

    pub fn pull(&self, req: &PullRequest) -> Option<WorkUnit> {
        self.pull_at(req, Utc::now())
    }

    pub fn pull_at(&self, req: &PullRequest, now: DateTime<Utc>) -> Option<WorkUnit> {
        let mut st = self.state.lock().unwrap();
        self.sweep(&mut st, now);
        st.workers.entry(req.worker_id.clone()).or_default().pulls += 1;
        let caps = &req.capabilities;
        let pos = st.queue.iter().position(|id| {
            let u = &st.slots[id].unit;
            caps.compilers.contains(&u.key.compiler)
                && caps
                    .platform
                    .as_ref()
                    .is_none_or(|p| *p == u.key.platform || *p == u.display.platform)
        })?;
        let id = st.queue.remove(pos).expect("position in range");
        let deadline = now + self.config.lease;
        let slot = st.slots.get_mut(&id).expect("queued id has a slot");
        slot.status = Status::Leased {
            worker: req.worker_id.clone(),
            deadline,
        };
        slot.issues += 1;
        slot.holders.insert(req.worker_id.clone());
        let mut unit = slot.unit.clone();
        unit.deadline = Some(deadline);
        st.workers.get_mut(&req.worker_id).expect("registered above").issued += 1;
        Some(unit)
    }

    fn sweep(&self, st: &mut State, now: DateTime<Utc>) {
        let mut requeue = Vec::new();
        for (id, slot) in st.slots.iter_mut() {
            if let Status::Leased { deadline, .. } = &slot.status {
                if *deadline <= now {
                    if slot.issues > self.config.max_reissues {
                        slot.status = Status::Parked;
                    } else {
                        slot.status = Status::Queued;
                        requeue.push(id.clone());
                    }
                }
            }
        }
        // Expired units go ahead of fresh ones.
        for id in requeue.into_iter().rev() {
            st.queue.push_front(id);
        }
    }

    pub fn submit(&self, sub: &ResultSubmission) -> Result<SubmitVerdict> {
        self.submit_at(sub, Utc::now())
    }

    pub fn submit_at(&self, sub: &ResultSubmission, now: DateTime<Utc>) -> Result<SubmitVerdict> {
        let (unit, lease) = {
            let mut st = self.state.lock().unwrap();
            self.sweep(&mut st, now);
            let decision = match st.slots.get(&sub.unit_id) {
                None => Err(RejectReason::UnknownUnit),
                Some(slot) => match &slot.status {
                    Status::Done | Status::Completing { .. } => Err(RejectReason::Duplicate),
                    Status::Parked => Err(RejectReason::Expired),
                    Status::Leased { worker, deadline } if *worker == sub.worker_id => {
                        if sub.digest != slot.unit.digest {
                            Err(RejectReason::DigestMismatch)
                        } else {
                            Ok((worker.clone(), *deadline))
                        }
                    }
                    _ if slot.holders.contains(&sub.worker_id) => Err(RejectReason::Expired),
                    _ => Err(RejectReason::UnknownUnit),
                },
            };
            let stats = st.workers.entry(sub.worker_id.clone()).or_default();
            stats.submitted += 1;
            match decision {
                Err(reason) => {
                    stats.rejected += 1;
                    return Ok(SubmitVerdict::Rejected { reason });
                }
                Ok((worker, deadline)) => {
                    let slot = st.slots.get_mut(&sub.unit_id).expect("checked above");
                    slot.status = Status::Completing { worker, deadline };
                    (slot.unit.clone(), (sub.worker_id.clone(), deadline))
                }
            }
        };

        let outcome = {
            let lock = self.key_lock(&unit.key);
            let _guard = lock.lock().unwrap();
            self.record(&unit, sub)
        };

        let mut st = self.state.lock().unwrap();
        match outcome {
            Ok(verdict) => {
                st.slots.get_mut(&unit.unit_id).expect("slot").status = Status::Done;
                let stats = st.workers.entry(sub.worker_id.clone()).or_default();
                stats.accepted += 1;
                if let SubmitVerdict::Accepted { stored, anomaly, .. } = &verdict {
                    stats.summarized += u64::from(*stored == Storage::Summarized);
                    stats.anomalies += u64::from(*anomaly);
                }
                Ok(verdict)
            }
            Err(e) => {
                // Give the lease back so the worker may retry.
                st.slots.get_mut(&unit.unit_id).expect("slot").status = Status::Leased {
                    worker: lease.0,
                    deadline: lease.1,
                };
                Err(e)
            }
        }
    }

    fn key_lock(&self, key: &TuneKey) -> Arc<Mutex<()>> {
        self.key_locks.lock().unwrap().entry(key.clone()).or_default().clone()
    }

    fn raw_meta(&self, unit: &WorkUnit, sub: &ResultSubmission, verdict: Option<Verdict>, anomaly: bool) -> serde_json::Value {
        json!({
            "status": "done",
            "provenance": {
                "species": unit.key.species,
                "dataset": unit.key.dataset,
                "choice": unit.choice,
                "flags": unit.choice.render(),
                "state": sub.state,
                "repeats": unit.repeats,
                "toolchain": sub.toolchain,
                "flagspace": unit.key.compiler,
            },
            "behavior": sub.behavior,
            "verdict": verdict,
            "context": {
                "key": unit.key,
                "role": unit.role,
                "iteration": unit.iteration,
                "unit": unit.unit_id,
                "worker": sub.worker_id,
                "anomaly": anomaly,
            },
        })
    }

    fn store_raw(&self, unit: &WorkUnit, sub: &ResultSubmission, verdict: Option<Verdict>, anomaly: bool) -> Result<String> {
        let alias = format!("crowd-{}", unit.unit_id);
        let id = self
            .repo
            .put_entry(EntryKind::Experiment, &alias, &self.raw_meta(unit, sub, verdict, anomaly))?;
        Ok(id.uid)
    }

    fn record(&self, unit: &WorkUnit, sub: &ResultSubmission) -> Result<SubmitVerdict> {
        let behavior = &sub.behavior;
        if unit.role == UnitRole::Reference {
            let uid = self.store_raw(unit, sub, None, false)?;
            modify_key_record(&self.repo, &unit.key, |r| {
                if r.reference.is_none() {
                    r.untunable = behavior.failed;
                    r.reference = Some(behavior.clone());
                    r.reference_experiment = Some(uid.clone());
                }
                Ok(())
            })?;
            return Ok(SubmitVerdict::Accepted {
                verdict: None,
                stored: Storage::Raw,
                anomaly: false,
            });
        }

        let reliable = behavior.is_reliable();
        let point = behavior
            .point(&self.config.objective)
            .filter(|_| !behavior.failed && reliable);
        let Some(point) = point else {
            self.store_raw(unit, sub, None, true)?;
            modify_key_record(&self.repo, &unit.key, |r| {
                r.counters.experiments += 1;
                r.counters.failures += u64::from(behavior.failed);
                r.counters.unreliable += u64::from(!behavior.failed && !reliable);
                r.counters.anomalies += 1;
                Ok(())
            })?;
            return Ok(SubmitVerdict::Accepted {
                verdict: None,
                stored: Storage::Raw,
                anomaly: true,
            });
        };

        let exec_idx = self.config.objective.index_of("exec_time_s");
        let tolerance = self.config.tolerance;
        let choice = unit.choice.clone();
        modify_key_record(&self.repo, &unit.key, |r| {
            if r.frontier.spec() != &self.config.objective {
                return Err(TuneError::InvalidConfig(format!(
                    "key {} tracks a different objective",
                    r.display
                )));
            }
            // The frontier's prediction for this choice, if it holds it.
            let predicted = r
                .frontier
                .solutions()
                .iter()
                .find(|s| s.choice == choice || s.equivalent_choices.contains(&choice))
                .and_then(|s| exec_idx.map(|i| s.behavior[i]));
            let candidate = FrontierSolution::new(choice.clone(), point.clone());
            let (next, verdict) = r.frontier.insert(candidate.clone())?;
            r.counters.experiments += 1;
            let out = match verdict {
                Verdict::Accepted => {
                    let uid = self.store_raw(unit, sub, Some(verdict), false).map_err(into_tune)?;
                    r.frontier.insert_mut(candidate.with_experiment(uid))?;
                    r.counters.accepted += 1;
                    SubmitVerdict::Accepted {
                        verdict: Some(verdict),
                        stored: Storage::Raw,
                        anomaly: false,
                    }
                }
                Verdict::Dominated | Verdict::Duplicate => {
                    r.frontier = next;
                    let deviates = match (predicted, exec_idx) {
                        (Some(p), Some(i)) => ((point[i] - p) / p).abs() > tolerance,
                        _ => false,
                    };
                    if deviates {
                        self.store_raw(unit, sub, Some(verdict), true).map_err(into_tune)?;
                        r.counters.anomalies += 1;
                        SubmitVerdict::Accepted {
                            verdict: Some(verdict),
                            stored: Storage::Raw,
                            anomaly: true,
                        }
                    } else {
                        r.counters.summarized += 1;
                        SubmitVerdict::Accepted {
                            verdict: Some(verdict),
                            stored: Storage::Summarized,
                            anomaly: false,
                        }
                    }
                }
            };
            Ok(out)
        })
        .map_err(CrowdError::from)
    }

    pub fn status(&self) -> CoordinatorStatus {
        self.status_at(Utc::now())
    }

    pub fn status_at(&self, now: DateTime<Utc>) -> CoordinatorStatus {
        let mut st = self.state.lock().unwrap();
        self.sweep(&mut st, now);
        let mut out = CoordinatorStatus {
            workers: st.workers.clone(),
            ..Default::default()
        };
        for slot in st.slots.values() {
            match slot.status {
                Status::Queued => out.queued += 1,
                Status::Leased { .. } | Status::Completing { .. } => out.leased += 1,
                Status::Done => out.done += 1,
                Status::Parked => out.parked += 1,
            }
        }
        out
    }
}

fn into_tune(e: CrowdError) -> TuneError {
    match e {
        CrowdError::Tune(t) => t,
        CrowdError::Repo(r) => TuneError::Repo(r),
        CrowdError::Measure(m) => TuneError::Measure(m),
        other => TuneError::InvalidConfig(other.to_string()),
    }
}

/// Work units for a seeded campaign: one reference unit per key still lacking
/// a reference, then the same (key, choice) draws a single-process campaign
/// with this config would explore.
pub fn plan_campaign(repo: &Repo, keys: &[TuneKey], space: &FlagSpace, config: &TuneConfig) -> Result<Vec<WorkUnit>> {
    if keys.is_empty() {
        return Err(TuneError::InvalidConfig("campaign needs at least one key".into()).into());
    }
    let mut resolved = Vec::with_capacity(keys.len());
    let mut units = Vec::new();
    for display in keys {
        if display.compiler != space.id() {
            return Err(TuneError::CompilerMismatch {
                key: display.compiler.clone(),
                space: space.id(),
            }
            .into());
        }
        let record = ensure_key_record(repo, display, &config.objective)?;
        let key = record.key.clone();
        let digest = SpeciesDescriptor::load(repo, &key.species)?.digest()?;
        if record.reference.is_none() {
            units.push(WorkUnit {
                unit_id: format!("r-{}", short_hash(&[&key.entry_alias()])),
                key: key.clone(),
                display: display.clone(),
                role: UnitRole::Reference,
                iteration: 0,
                choice: reference_choice(space),
                repeats: config.repeats.max(config.probe_repeats),
                deadline: None,
                digest: digest.clone(),
            });
        }
        resolved.push((key, display.clone(), digest));
    }
    for p in plan_units(keys.len(), space, config) {
        let (key, display, digest) = &resolved[p.key_index];
        units.push(WorkUnit {
            unit_id: format!(
                "u-{}",
                short_hash(&[&key.entry_alias(), &config.seed.to_string(), &p.iteration.to_string(), &p.choice.render()])
            ),
            key: key.clone(),
            display: display.clone(),
            role: UnitRole::Explore,
            iteration: p.iteration,
            choice: p.choice,
            repeats: config.repeats,
            deadline: None,
            digest: digest.clone(),
        });
    }
    Ok(units)
}
