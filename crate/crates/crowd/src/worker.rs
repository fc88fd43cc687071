//! Worker client: pull a unit, measure it locally, submit the result.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crowdtune::flagspace::FlagSpace;
use crowdtune::measurement::{
    BehaviorVector, DatasetDescriptor, Measurer, MockToolchain, ShellToolchain, SpeciesDescriptor, StateVector, Toolchain,
};
use crowdtune::repo::Repo;

use crate::{Capabilities, CrowdError, PullRequest, PullResponse, ResultSubmission, Result, SubmitVerdict, WorkUnit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolchainKind {
    Mock,
    Shell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolchainSpec {
    pub kind: ToolchainKind,
    /// Compiler command for shell toolchains.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cc: Option<String>,
    /// Builtin flag space name or path to a flag space file.
    pub flagspace: String,
}

fn default_poll_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub coordinator: String,
    pub worker_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform: Option<String>,
    pub work_dir: PathBuf,
    /// Local repository holding the species and datasets.
    pub repo: PathBuf,
    /// Keyed by flag space id (`gcc-4.6`).
    pub toolchains: BTreeMap<String, ToolchainSpec>,
    #[serde(default = "default_poll_ms")]
    pub poll_ms: u64,
    /// Exit after this many consecutive empty or failed polls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idle_exit_polls: Option<u32>,
    /// Extra copies of every submission, for testing idempotence.
    #[serde(default)]
    pub resubmit: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_units: Option<usize>,
}

impl WorkerConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CrowdError::Config(format!("{}: {e}", path.display())))
    }

    pub fn capabilities(&self) -> Capabilities {
        Capabilities {
            compilers: self.toolchains.keys().cloned().collect(),
            platform: self.platform.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerSummary {
    pub units: usize,
    pub submissions: usize,
    pub accepted: usize,
    /// Rejection reason -> count.
    pub rejected: BTreeMap<String, usize>,
}

struct Loaded {
    toolchain: Box<dyn Toolchain>,
    space: FlagSpace,
}

fn load_toolchains(config: &WorkerConfig) -> Result<BTreeMap<String, Loaded>> {
    let mut out = BTreeMap::new();
    for (id, spec) in &config.toolchains {
        let space = match FlagSpace::builtin(&spec.flagspace) {
            Ok(s) => s,
            Err(_) => FlagSpace::load(Path::new(&spec.flagspace))?,
        };
        if space.id() != *id {
            return Err(CrowdError::Config(format!(
                "toolchain `{id}` points at flag space `{}`",
                space.id()
            )));
        }
        let toolchain: Box<dyn Toolchain> = match spec.kind {
            ToolchainKind::Mock => Box::new(MockToolchain),
            ToolchainKind::Shell => {
                let cc = spec
                    .cc
                    .as_deref()
                    .ok_or_else(|| CrowdError::Config(format!("shell toolchain `{id}` needs `cc`")))?;
                Box::new(ShellToolchain::detect(cc)?)
            }
        };
        out.insert(id.clone(), Loaded { toolchain, space });
    }
    Ok(out)
}

/// Measure one unit against the local repo.
pub fn execute_unit(
    repo: &Repo,
    toolchain: &dyn Toolchain,
    space: &FlagSpace,
    work_dir: &Path,
    worker_id: &str,
    unit: &WorkUnit,
) -> Result<ResultSubmission> {
    let species = SpeciesDescriptor::load(repo, &unit.key.species)?;
    let digest = species.digest()?;
    let state = StateVector::capture(&unit.key.platform);
    let behavior = if digest != unit.digest {
        // The coordinator rejects this; nothing is run on foreign sources.
        BehaviorVector::failure(0.0, "species digest differs from the unit's")
    } else {
        let dataset = DatasetDescriptor::load(repo, &unit.key.dataset)?;
        let measurer = Measurer::new(repo, toolchain, space, work_dir);
        measurer
            .evaluate(&species, &unit.choice, &dataset, &state, unit.repeats)
            .unwrap_or_else(|e| BehaviorVector::failure(0.0, e.to_string()))
    };
    Ok(ResultSubmission {
        unit_id: unit.unit_id.clone(),
        worker_id: worker_id.to_string(),
        behavior,
        state,
        toolchain: toolchain.fingerprint(),
        digest,
    })
}

struct Client {
    agent: ureq::Agent,
    base: String,
}

impl Client {
    fn new(base: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Client {
            agent,
            base: base.trim_end_matches('/').to_string(),
        }
    }

    fn post<T: Serialize, R: serde::de::DeserializeOwned>(&self, path: &str, body: &T) -> Result<R> {
        self.agent
            .post(format!("{}{path}", self.base))
            .send_json(body)
            .map_err(|e| CrowdError::Transport(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| CrowdError::Transport(e.to_string()))
    }
}

/// Pull and execute units until the idle or unit limit is reached.
pub fn run_worker(config: &WorkerConfig) -> Result<WorkerSummary> {
    let toolchains = load_toolchains(config)?;
    let repo = Repo::open(&config.repo)?;
    std::fs::create_dir_all(&config.work_dir)?;
    let client = Client::new(&config.coordinator);
    let request = PullRequest {
        worker_id: config.worker_id.clone(),
        capabilities: config.capabilities(),
    };
    let mut summary = WorkerSummary::default();
    let mut idle = 0u32;
    loop {
        if config.max_units.is_some_and(|m| summary.units >= m) {
            break;
        }
        let unit = match client.post::<_, PullResponse>("/v1/work/pull", &request) {
            Ok(r) => r.unit,
            Err(_) => None,
        };
        let Some(unit) = unit else {
            idle += 1;
            if config.idle_exit_polls.is_some_and(|n| idle >= n) {
                break;
            }
            std::thread::sleep(Duration::from_millis(config.poll_ms));
            continue;
        };
        idle = 0;
        summary.units += 1;
        let loaded = toolchains
            .get(&unit.key.compiler)
            .ok_or_else(|| CrowdError::Config(format!("issued a unit for `{}`", unit.key.compiler)))?;
        let sub = execute_unit(
            &repo,
            loaded.toolchain.as_ref(),
            &loaded.space,
            &config.work_dir,
            &config.worker_id,
            &unit,
        )?;
        for _ in 0..=config.resubmit {
            let verdict: SubmitVerdict = client.post("/v1/work/submit", &sub)?;
            summary.submissions += 1;
            match verdict {
                SubmitVerdict::Accepted { .. } => summary.accepted += 1,
                SubmitVerdict::Rejected { reason } => *summary.rejected.entry(reason.to_string()).or_default() += 1,
            }
        }
    }
    Ok(summary)
}
