//! Distributed crowd-tuning: a coordinator that hands out pre-sampled work
//! units over HTTP and folds submitted results into per-key frontiers, and a
//! worker that pulls, measures and submits.

pub mod advise;
pub mod coordinator;
pub mod server;
pub mod worker;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crowdtune::autotune::{TuneError, TuneKey};
use crowdtune::flagspace::ChoiceVector;
use crowdtune::measurement::{BehaviorVector, MeasureError, StateVector};
use crowdtune::pareto::Verdict;
use crowdtune::repo::RepoError;

pub use advise::{advise, Advice, AdviceQuery, AdviceSource, RankedSolution, DEFAULT_MODEL_ALIAS};
pub use coordinator::{plan_campaign, Coordinator, CoordinatorConfig, CoordinatorStatus, WorkerStats};
pub use server::{router, serve, ServerHandle};
pub use worker::{run_worker, ToolchainKind, ToolchainSpec, WorkerConfig, WorkerSummary};

#[derive(Debug, thiserror::Error)]
pub enum CrowdError {
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Predict(#[from] crowdtune::predict::PredictError),
    #[error(transparent)]
    Flags(#[from] crowdtune::flagspace::FlagError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed submission: {0}")]
    MalformedSubmission(String),
    #[error("no knowledge: no frontier or model matches the query")]
    NoKnowledge,
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("worker config: {0}")]
    Config(String),
    #[error("transport: {0}")]
    Transport(String),
}

pub type Result<T, E = CrowdError> = std::result::Result<T, E>;

/// What a worker can execute.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    /// Flag space ids, as used in tuning keys (`gcc-4.6`).
    pub compilers: Vec<String>,
    /// Platform entry the worker runs on; `None` accepts any platform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PullRequest {
    pub worker_id: String,
    pub capabilities: Capabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullResponse {
    pub unit: Option<WorkUnit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitRole {
    /// Measures the key's reference choice.
    Reference,
    Explore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkUnit {
    pub unit_id: String,
    /// Resolved key.
    pub key: TuneKey,
    pub display: TuneKey,
    pub role: UnitRole,
    pub iteration: u64,
    pub choice: ChoiceVector,
    pub repeats: usize,
    /// Set when leased.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline: Option<DateTime<Utc>>,
    /// Species digest the worker must reproduce.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSubmission {
    pub unit_id: String,
    pub worker_id: String,
    pub behavior: BehaviorVector,
    pub state: StateVector,
    /// Toolchain fingerprint.
    pub toolchain: String,
    pub digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    /// Written as an experiment entry.
    Raw,
    /// Only counted on the key record.
    Summarized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    UnknownUnit,
    Duplicate,
    Expired,
    DigestMismatch,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RejectReason::UnknownUnit => "unknown-unit",
            RejectReason::Duplicate => "duplicate",
            RejectReason::Expired => "expired",
            RejectReason::DigestMismatch => "digest-mismatch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum SubmitVerdict {
    Accepted {
        /// Frontier verdict; absent for references and for failed or
        /// unreliable results.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        verdict: Option<Verdict>,
        stored: Storage,
        #[serde(default)]
        anomaly: bool,
    },
    Rejected {
        reason: RejectReason,
    },
}

impl SubmitVerdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, SubmitVerdict::Accepted { .. })
    }

    pub fn frontier_verdict(&self) -> Option<Verdict> {
        match self {
            SubmitVerdict::Accepted { verdict, .. } => *verdict,
            SubmitVerdict::Rejected { .. } => None,
        }
    }
}
