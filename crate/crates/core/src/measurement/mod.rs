//! The behavior function: build a species with a choice, run it on a dataset,
//! validate the output and summarize the costs.
//!
//! Toolchains are pluggable. [`MockToolchain`] evaluates a scenario document
//! deterministically and needs no compiler; [`ShellToolchain`] runs the
//! species' command templates through the host shell.

mod mock;
mod perf;
mod shell;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::flagspace::{self, ChoiceVector, FlagError, FlagSpace, RenderMode};
use crate::pareto::ObjectiveSpec;
use crate::repo::{EntryId, EntryKind, FileLock, Repo, RepoError};
use crate::statistics::{self, SampleSet, StatSummary, StatsError};

pub use mock::{MockScenario, MockToolchain};
pub use perf::{parse_perf_csv, PerfStat, Profiler, COUNTER_NAMES};
pub use shell::ShellToolchain;

pub const DEFAULT_BUILD_TIMEOUT: Duration = Duration::from_secs(300);
pub const DEFAULT_RUN_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, thiserror::Error)]
pub enum MeasureError {
    #[error("toolchain missing: {0}")]
    ToolchainMissing(String),
    #[error("build exceeded {0:?}")]
    BuildTimeout(Duration),
    #[error("invalid species descriptor: {0}")]
    InvalidSpecies(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("experiment record cannot be replayed: {0}")]
    Replay(String),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Flags(#[from] FlagError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MeasureError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Validation {
    ByteCompareReference,
    #[default]
    None,
}

/// A tunable program piece, read from a `species` repo entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesDescriptor {
    #[serde(skip)]
    pub id: Option<EntryId>,
    /// Entry directory holding sources and reference outputs.
    #[serde(skip)]
    pub dir: PathBuf,
    #[serde(default)]
    pub sources: Vec<String>,
    /// Placeholders: `{FLAGS}`, `{OUT}`; optionally `{CC}` and `{SRC}`.
    #[serde(default)]
    pub build_template: String,
    /// Placeholders: `{BIN}`, `{DATASET}`, `{OUT}`.
    #[serde(default)]
    pub run_template: String,
    #[serde(default)]
    pub validate: Validation,
    /// Dataset reference (uid or alias) -> payload file in this entry.
    #[serde(default)]
    pub reference_outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Scenario for the mock toolchain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockScenario>,
}

impl SpeciesDescriptor {
    pub fn from_meta(meta: &Value) -> Result<Self> {
        let d: SpeciesDescriptor = serde_json::from_value(meta.clone())?;
        d.check_templates()?;
        Ok(d)
    }

    pub fn to_meta(&self) -> Value {
        serde_json::to_value(self).expect("descriptor serializes")
    }

    /// Load from the repo and check that referenced datasets exist.
    pub fn load(repo: &Repo, reference: &str) -> Result<Self> {
        let entry = repo.load(EntryKind::Species, reference)?;
        let mut d = Self::from_meta(&entry.meta)?;
        for dataset in d.reference_outputs.keys() {
            repo.resolve_ref(EntryKind::Dataset, dataset).map_err(|_| {
                MeasureError::InvalidSpecies(format!("reference output for unknown dataset `{dataset}`"))
            })?;
        }
        d.dir = repo.entry_dir(EntryKind::Species, &entry.id.uid);
        d.id = Some(entry.id);
        Ok(d)
    }

    fn check_templates(&self) -> Result<()> {
        if self.mock.is_some() && self.build_template.is_empty() && self.run_template.is_empty() {
            return Ok(());
        }
        for (template, needed) in [
            (&self.build_template, &["{FLAGS}", "{OUT}"][..]),
            (&self.run_template, &["{BIN}", "{DATASET}", "{OUT}"][..]),
        ] {
            if let Some(p) = needed.iter().find(|p| !template.contains(*p)) {
                return Err(MeasureError::InvalidSpecies(format!(
                    "template `{template}` lacks {p}"
                )));
            }
        }
        for s in &self.sources {
            if !crate::repo::is_safe_relative(s) {
                return Err(MeasureError::InvalidSpecies(format!("source path `{s}`")));
            }
        }
        Ok(())
    }

    /// Hex sha256 over the canonical meta and every source file, in order.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(crate::repo::canonical_json(&self.to_meta()).as_bytes());
        for s in &self.sources {
            h.update([0u8]);
            h.update(s.as_bytes());
            h.update([0u8]);
            h.update(fs::read(self.dir.join(s))?);
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn uid(&self) -> &str {
        self.id.as_ref().map(|i| i.uid.as_str()).unwrap_or("")
    }

    /// Reference output path for a dataset, by uid or alias.
    pub fn reference_for(&self, dataset: &DatasetDescriptor) -> Option<PathBuf> {
        let by_uid = self.reference_outputs.get(&dataset.id.uid);
        let by_alias = dataset
            .id
            .alias
            .as_ref()
            .and_then(|a| self.reference_outputs.get(a));
        by_uid.or(by_alias).map(|f| self.dir.join(f))
    }
}

/// An input for a species, read from a `dataset` repo entry.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetDescriptor {
    pub id: EntryId,
    pub path: Option<PathBuf>,
    pub features: BTreeMap<String, f64>,
    pub tags: Vec<String>,
}

impl DatasetDescriptor {
    pub fn load(repo: &Repo, reference: &str) -> Result<Self> {
        let entry = repo.load(EntryKind::Dataset, reference)?;
        let path = match entry.meta.get("file").and_then(Value::as_str) {
            Some(f) => Some(repo.payload_path(EntryKind::Dataset, &entry.id.uid, f)?),
            None => None,
        };
        let features = match entry.meta.get("features") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| MeasureError::InvalidDataset(format!("features: {e}")))?,
            None => BTreeMap::new(),
        };
        let tags = match entry.meta.get("tags") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| MeasureError::InvalidDataset(format!("tags: {e}")))?,
            None => Vec::new(),
        };
        Ok(DatasetDescriptor {
            id: entry.id,
            path,
            features,
            tags,
        })
    }

    /// A dataset with no backing entry, for in-process use.
    pub fn named(alias: &str) -> Self {
        DatasetDescriptor {
            id: EntryId {
                uid: String::new(),
                alias: Some(alias.to_string()),
            },
            path: None,
            features: BTreeMap::new(),
            tags: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        self.id.display_name()
    }
}

/// Environment context of a run.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StateVector {
    pub platform_id: String,
    #[serde(default)]
    pub cpu_model: String,
    #[serde(default)]
    pub frequency_policy: String,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub wallclock_context: BTreeMap<String, i64>,
}

impl StateVector {
    pub fn for_platform(platform_id: &str) -> Self {
        StateVector {
            platform_id: platform_id.to_string(),
            ..Default::default()
        }
    }

    /// Capture the host's CPU model, frequency governor and local hour.
    pub fn capture(platform_id: &str) -> Self {
        use chrono::Timelike;
        let cpu_model = fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|t| {
                t.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_default();
        let frequency_policy =
            fs::read_to_string("/sys/devices/system/cpu/cpu0/cpufreq/scaling_governor")
                .map(|s| s.trim().to_string())
                .unwrap_or_else(|_| "unknown".to_string());
        let mut wallclock_context = BTreeMap::new();
        wallclock_context.insert("hour_of_day".to_string(), chrono::Local::now().hour() as i64);
        StateVector {
            platform_id: platform_id.to_string(),
            cpu_model,
            frequency_policy,
            env: BTreeMap::new(),
            wallclock_context,
        }
    }
}

mod failed_flag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        Ok(u8::deserialize(d)? != 0)
    }
}

/// Measured costs of one build + run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BehaviorVector {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exec_time_s: Option<f64>,
    pub compile_time_s: f64,
    pub binary_size_bytes: u64,
    pub max_rss_bytes: u64,
    #[serde(with = "failed_flag")]
    pub failed: bool,
    /// Reserved; never measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_j: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counters: Option<BTreeMap<String, u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<SampleSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<StatSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<String>,
}

impl BehaviorVector {
    pub fn failure(compile_time_s: f64, log: impl Into<String>) -> Self {
        BehaviorVector {
            compile_time_s,
            failed: true,
            log: Some(log.into()),
            ..Default::default()
        }
    }

    /// Successful run with a reliable timing.
    pub fn is_reliable(&self) -> bool {
        !self.failed && self.summary.as_ref().is_some_and(|s| s.reliable)
    }

    /// Value of a named objective dimension.
    pub fn objective(&self, name: &str) -> Option<f64> {
        match name {
            "exec_time_s" => self.exec_time_s,
            "compile_time_s" => Some(self.compile_time_s),
            "binary_size_bytes" => Some(self.binary_size_bytes as f64),
            "max_rss_bytes" => Some(self.max_rss_bytes as f64),
            "failed" => Some(if self.failed { 1.0 } else { 0.0 }),
            "energy_j" => self.energy_j,
            other => self
                .counters
                .as_ref()
                .and_then(|c| c.get(other))
                .map(|v| *v as f64),
        }
    }

    /// Projection onto an objective spec; `None` when a dimension is unavailable.
    pub fn point(&self, spec: &ObjectiveSpec) -> Option<Vec<f64>> {
        spec.dims().iter().map(|d| self.objective(&d.name)).collect()
    }
}

/// Outcome of compiling one choice.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildResult {
    pub ok: bool,
    pub compile_time_s: f64,
    pub binary_size_bytes: u64,
    pub log: String,
    pub artifact: Option<PathBuf>,
    pub choice: ChoiceVector,
}

/// Outcome of one timed execution.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSample {
    pub seconds: f64,
    pub exit_ok: bool,
    pub timed_out: bool,
    pub max_rss_bytes: u64,
    pub counters: Option<BTreeMap<String, u64>>,
    /// Output file produced by the run, for byte comparison.
    pub output: Option<PathBuf>,
    /// Verdict when the toolchain validates by itself.
    pub valid: Option<bool>,
    pub log: String,
}

/// A build-and-run backend.
pub trait Toolchain: Send + Sync {
    fn name(&self) -> String;
    fn version(&self) -> String;

    fn fingerprint(&self) -> String {
        format!("{}/{}", self.name(), self.version())
    }

    fn build(
        &self,
        species: &SpeciesDescriptor,
        choice: &ChoiceVector,
        flags: &str,
        scratch: &Path,
        timeout: Duration,
    ) -> Result<BuildResult>;

    fn run_once(
        &self,
        species: &SpeciesDescriptor,
        build: &BuildResult,
        dataset: &DatasetDescriptor,
        state: &StateVector,
        scratch: &Path,
        timeout: Duration,
    ) -> Result<RunSample>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureOptions {
    pub build_timeout: Duration,
    pub run_timeout: Duration,
    pub reliability_threshold: f64,
    pub keep_scratch: bool,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        MeasureOptions {
            build_timeout: DEFAULT_BUILD_TIMEOUT,
            run_timeout: DEFAULT_RUN_TIMEOUT,
            reliability_threshold: statistics::DEFAULT_RELIABILITY_THRESHOLD,
            keep_scratch: false,
        }
    }
}

/// Build a species with a choice (flags rendered in expanded form).
pub fn build(
    toolchain: &dyn Toolchain,
    species: &SpeciesDescriptor,
    choice: &ChoiceVector,
    space: &FlagSpace,
    scratch: &Path,
    options: &MeasureOptions,
) -> Result<BuildResult> {
    let flags = flagspace::render(choice, RenderMode::Expanded, Some(space));
    fs::create_dir_all(scratch)?;
    toolchain.build(species, choice, &flags, scratch, options.build_timeout)
}

/// Run a built artifact `repeats` times and summarize.
///
/// Any nonzero exit, timeout or validation mismatch marks the behavior failed.
/// Timed runs hold the host-level run lock in `lock_dir`.
#[allow(clippy::too_many_arguments)]
pub fn run(
    toolchain: &dyn Toolchain,
    species: &SpeciesDescriptor,
    build: &BuildResult,
    dataset: &DatasetDescriptor,
    repeats: usize,
    state: &StateVector,
    scratch: &Path,
    lock_dir: &Path,
    options: &MeasureOptions,
) -> Result<BehaviorVector> {
    let repeats = repeats.max(1);
    let mut behavior = BehaviorVector {
        compile_time_s: build.compile_time_s,
        binary_size_bytes: build.binary_size_bytes,
        ..Default::default()
    };
    if !build.ok {
        behavior.failed = true;
        behavior.log = Some(build.log.clone());
        return Ok(behavior);
    }
    let reference = match species.validate {
        Validation::ByteCompareReference => match species.reference_for(dataset) {
            Some(p) => Some(fs::read(&p)?),
            None => None,
        },
        Validation::None => None,
    };

    let mut seconds = Vec::with_capacity(repeats);
    let mut counters: Option<BTreeMap<String, u64>> = None;
    {
        let _lock = FileLock::acquire(&lock_dir.join(".run.lock"))?;
        for _ in 0..repeats {
            let sample = toolchain.run_once(species, build, dataset, state, scratch, options.run_timeout)?;
            behavior.max_rss_bytes = behavior.max_rss_bytes.max(sample.max_rss_bytes);
            let reason = if sample.timed_out {
                Some(format!("run exceeded {:?}", options.run_timeout))
            } else if !sample.exit_ok {
                Some(format!("run exited with failure: {}", sample.log))
            } else if sample.valid == Some(false) {
                Some("output failed validation".to_string())
            } else if let (Some(expected), Some(out)) = (&reference, &sample.output) {
                let got = fs::read(out).unwrap_or_default();
                (&got != expected).then(|| "output differs from reference".to_string())
            } else {
                None
            };
            if let Some(reason) = reason {
                behavior.failed = true;
                behavior.log = Some(reason);
                return Ok(behavior);
            }
            if let Some(c) = sample.counters {
                counters = Some(c);
            }
            seconds.push(sample.seconds.max(f64::MIN_POSITIVE));
        }
    }
    let samples = SampleSet::seconds(seconds)?;
    let summary = statistics::characterize(&samples, options.reliability_threshold);
    behavior.exec_time_s = Some(summary.expected);
    behavior.summary = Some(summary);
    behavior.samples = Some(samples);
    behavior.counters = counters;
    Ok(behavior)
}

/// Everything needed to re-issue a measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub species: String,
    pub dataset: String,
    pub choice: ChoiceVector,
    pub flags: String,
    pub state: StateVector,
    pub repeats: usize,
    pub toolchain: String,
    pub flagspace: String,
}

/// Binds a repository, toolchain and flag space for measurements.
pub struct Measurer<'a> {
    pub repo: &'a Repo,
    pub toolchain: &'a dyn Toolchain,
    pub space: &'a FlagSpace,
    pub work_dir: PathBuf,
    pub options: MeasureOptions,
}

impl<'a> Measurer<'a> {
    pub fn new(repo: &'a Repo, toolchain: &'a dyn Toolchain, space: &'a FlagSpace, work_dir: impl Into<PathBuf>) -> Self {
        Measurer {
            repo,
            toolchain,
            space,
            work_dir: work_dir.into(),
            options: MeasureOptions::default(),
        }
    }

    /// Build and run without recording anything.
    pub fn evaluate(
        &self,
        species: &SpeciesDescriptor,
        choice: &ChoiceVector,
        dataset: &DatasetDescriptor,
        state: &StateVector,
        repeats: usize,
    ) -> Result<BehaviorVector> {
        fs::create_dir_all(&self.work_dir)?;
        let scratch = tempfile::Builder::new().prefix("eval-").tempdir_in(&self.work_dir)?;
        let result = self.evaluate_in(species, choice, dataset, state, repeats, scratch.path());
        if self.options.keep_scratch {
            let _ = scratch.keep();
        }
        result
    }

    fn evaluate_in(
        &self,
        species: &SpeciesDescriptor,
        choice: &ChoiceVector,
        dataset: &DatasetDescriptor,
        state: &StateVector,
        repeats: usize,
        scratch: &Path,
    ) -> Result<BehaviorVector> {
        let built = build(self.toolchain, species, choice, self.space, scratch, &self.options)?;
        run(
            self.toolchain,
            species,
            &built,
            dataset,
            repeats,
            state,
            scratch,
            &self.work_dir,
            &self.options,
        )
    }

    /// Build, run, and write an experiment entry with full provenance.
    ///
    /// With an alias the entry is created or replaced, so repeating the call
    /// does not duplicate records.
    #[allow(clippy::too_many_arguments)]
    pub fn measure(
        &self,
        species: &SpeciesDescriptor,
        choice: &ChoiceVector,
        dataset: &DatasetDescriptor,
        state: &StateVector,
        repeats: usize,
        alias: Option<&str>,
        extra: Option<Value>,
    ) -> Result<(BehaviorVector, EntryId)> {
        let provenance = self.provenance(species, choice, dataset, state, repeats);
        let mut meta = json!({ "provenance": provenance, "status": "running" });
        let id = match alias {
            Some(a) => self.repo.put_entry(EntryKind::Experiment, a, &meta)?,
            None => self.repo.create_entry(EntryKind::Experiment, None, &meta)?,
        };
        let scratch = self.work_dir.join(&id.uid);
        let behavior = match self.evaluate_in(species, choice, dataset, state, repeats, &scratch) {
            Ok(b) => b,
            Err(e @ (MeasureError::BuildTimeout(_) | MeasureError::Io(_))) => {
                BehaviorVector::failure(0.0, e.to_string())
            }
            Err(e) => return Err(e),
        };
        if !self.options.keep_scratch {
            let _ = fs::remove_dir_all(&scratch);
        }
        meta["status"] = json!("done");
        meta["behavior"] = serde_json::to_value(&behavior)?;
        if let Some(extra) = extra {
            meta["context"] = extra;
        }
        self.repo.update_meta(EntryKind::Experiment, &id.uid, &meta)?;
        Ok((behavior, id))
    }

    pub fn provenance(
        &self,
        species: &SpeciesDescriptor,
        choice: &ChoiceVector,
        dataset: &DatasetDescriptor,
        state: &StateVector,
        repeats: usize,
    ) -> Provenance {
        Provenance {
            species: species.uid().to_string(),
            dataset: if dataset.id.uid.is_empty() {
                dataset.name().to_string()
            } else {
                dataset.id.uid.clone()
            },
            choice: choice.clone(),
            flags: choice.render(),
            state: state.clone(),
            repeats,
            toolchain: self.toolchain.fingerprint(),
            flagspace: self.space.id(),
        }
    }

    /// Re-issue the measurement an experiment entry records.
    pub fn replay(&self, experiment: &str) -> Result<BehaviorVector> {
        let entry = self.repo.load(EntryKind::Experiment, experiment)?;
        let provenance: Provenance = serde_json::from_value(
            entry
                .meta
                .get("provenance")
                .cloned()
                .ok_or_else(|| MeasureError::Replay("no provenance".into()))?,
        )?;
        if provenance.toolchain != self.toolchain.fingerprint() {
            return Err(MeasureError::Replay(format!(
                "recorded toolchain {} differs from {}",
                provenance.toolchain,
                self.toolchain.fingerprint()
            )));
        }
        let species = SpeciesDescriptor::load(self.repo, &provenance.species)?;
        let dataset = DatasetDescriptor::load(self.repo, &provenance.dataset)
            .unwrap_or_else(|_| DatasetDescriptor::named(&provenance.dataset));
        self.evaluate(
            &species,
            &provenance.choice,
            &dataset,
            &provenance.state,
            provenance.repeats,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flagspace::FlagSetting;

    fn space() -> FlagSpace {
        FlagSpace {
            compiler: "mock".into(),
            version: "1".into(),
            base_levels: vec!["-O3".into()],
            booleans: vec!["fast".into(), "noop".into(), "broken".into(), "wrong".into()],
            params: BTreeMap::new(),
        }
    }

    fn scenario() -> MockScenario {
        MockScenario {
            base_time: 1.0,
            flag_effects: [("fast".to_string(), 0.5)].into_iter().collect(),
            dataset_terms: [("big".to_string(), 0.25)].into_iter().collect(),
            size_per_flag: 100,
            fail_flags: vec!["broken".into()],
            invalid_flags: vec!["wrong".into()],
            ..MockScenario::default()
        }
    }

    struct Fixture {
        _dir: tempfile::TempDir,
        repo: Repo,
        work: PathBuf,
        species: SpeciesDescriptor,
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let repo = Repo::init(dir.path().join("repo")).unwrap();
        let meta = SpeciesDescriptor {
            id: None,
            dir: PathBuf::new(),
            sources: vec![],
            build_template: String::new(),
            run_template: String::new(),
            validate: Validation::None,
            reference_outputs: BTreeMap::new(),
            tags: vec![],
            mock: Some(scenario()),
        }
        .to_meta();
        repo.create_entry(EntryKind::Species, Some("toy"), &meta).unwrap();
        repo.create_entry(EntryKind::Dataset, Some("big"), &json!({})).unwrap();
        let species = SpeciesDescriptor::load(&repo, "toy").unwrap();
        let work = dir.path().join("work");
        Fixture {
            _dir: dir,
            repo,
            work,
            species,
        }
    }

    #[test]
    fn mock_is_pure_function_of_choice_and_dataset() {
        let f = fixture();
        let sp = space();
        let m = Measurer::new(&f.repo, &MockToolchain, &sp, &f.work);
        let ds = DatasetDescriptor::load(&f.repo, "big").unwrap();
        let state = StateVector::for_platform("p");
        let c = ChoiceVector::base("-O3").with("fast", FlagSetting::On);
        let a = m.evaluate(&f.species, &c, &ds, &state, 3).unwrap();
        let b = m.evaluate(&f.species, &c, &ds, &state, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.exec_time_s, Some(0.75));
        assert_eq!(a.summary.as_ref().unwrap().variation, 0.0);
        assert_eq!(a.samples.as_ref().unwrap().len(), 3);
        assert!(a.is_reliable());
    }

    #[test]
    fn size_depends_on_flag_count() {
        let f = fixture();
        let sp = space();
        let c0 = ChoiceVector::base("-O3");
        let c2 = c0.clone().with("fast", FlagSetting::On).with("noop", FlagSetting::On);
        let scratch = f.work.join("s");
        let b0 = build(&MockToolchain, &f.species, &c0, &sp, &scratch, &MeasureOptions::default()).unwrap();
        let b2 = build(&MockToolchain, &f.species, &c2, &sp, &scratch, &MeasureOptions::default()).unwrap();
        assert!(b0.ok && b2.ok);
        assert_eq!(b2.binary_size_bytes - b0.binary_size_bytes, 200);
    }

    #[test]
    fn uninfluential_flag_keeps_time() {
        let f = fixture();
        let sp = space();
        let m = Measurer::new(&f.repo, &MockToolchain, &sp, &f.work);
        let ds = DatasetDescriptor::named("small");
        let state = StateVector::for_platform("p");
        let a = m.evaluate(&f.species, &ChoiceVector::base("-O3"), &ds, &state, 1).unwrap();
        let b = m
            .evaluate(&f.species, &ChoiceVector::base("-O3").with("noop", FlagSetting::On), &ds, &state, 1)
            .unwrap();
        assert_eq!(a.exec_time_s, b.exec_time_s);
    }

    #[test]
    fn failed_build_attaches_log() {
        let f = fixture();
        let sp = space();
        let m = Measurer::new(&f.repo, &MockToolchain, &sp, &f.work);
        let c = ChoiceVector::base("-O3").with("broken", FlagSetting::On);
        let (b, id) = m
            .measure(&f.species, &c, &DatasetDescriptor::named("x"), &StateVector::for_platform("p"), 3, None, None)
            .unwrap();
        assert!(b.failed);
        assert!(b.exec_time_s.is_none());
        assert!(b.log.as_deref().unwrap().contains("broken"));
        assert!(!b.is_reliable());
        let e = f.repo.load(EntryKind::Experiment, &id.uid).unwrap();
        assert_eq!(e.meta["behavior"]["failed"], json!(1));
    }

    #[test]
    fn validation_mismatch_fails() {
        let f = fixture();
        let sp = space();
        let m = Measurer::new(&f.repo, &MockToolchain, &sp, &f.work);
        let c = ChoiceVector::base("-O3").with("wrong", FlagSetting::On);
        let b = m
            .evaluate(&f.species, &c, &DatasetDescriptor::named("x"), &StateVector::for_platform("p"), 2)
            .unwrap();
        assert!(b.failed);
    }

    #[test]
    fn string_round_trip_does_not_perturb() {
        let f = fixture();
        let sp = space();
        let m = Measurer::new(&f.repo, &MockToolchain, &sp, &f.work);
        let ds = DatasetDescriptor::named("big");
        let state = StateVector::for_platform("p");
        let c = ChoiceVector::base("-O3").with("fast", FlagSetting::On).with("noop", FlagSetting::Off);
        let reparsed = flagspace::parse(&c.render()).unwrap();
        assert_eq!(
            m.evaluate(&f.species, &c, &ds, &state, 1).unwrap(),
            m.evaluate(&f.species, &reparsed, &ds, &state, 1).unwrap()
        );
    }

    #[test]
    fn experiment_replays() {
        let f = fixture();
        let sp = space();
        let m = Measurer::new(&f.repo, &MockToolchain, &sp, &f.work);
        let ds = DatasetDescriptor::load(&f.repo, "big").unwrap();
        let c = ChoiceVector::base("-O3").with("fast", FlagSetting::On);
        let (b, id) = m
            .measure(&f.species, &c, &ds, &StateVector::for_platform("p"), 2, Some("exp-1"), None)
            .unwrap();
        assert_eq!(m.replay(&id.uid).unwrap(), b);
        // Aliased measurement is an upsert.
        m.measure(&f.species, &c, &ds, &StateVector::for_platform("p"), 2, Some("exp-1"), None)
            .unwrap();
        let all = f.repo.find_entries(EntryKind::Experiment, &Default::default()).unwrap();
        assert_eq!(all.len(), 1);
    }

    #[test]
    fn behavior_serializes_failed_as_int() {
        let b = BehaviorVector::failure(0.5, "x");
        let v = serde_json::to_value(&b).unwrap();
        assert_eq!(v["failed"], json!(1));
        assert_eq!(serde_json::from_value::<BehaviorVector>(v).unwrap(), b);
    }

    #[test]
    fn descriptor_template_checks() {
        let bad = json!({"build_template": "cc -o {OUT} k.c", "run_template": "{BIN} {DATASET} {OUT}"});
        assert!(matches!(
            SpeciesDescriptor::from_meta(&bad),
            Err(MeasureError::InvalidSpecies(_))
        ));
        let good = json!({"build_template": "cc {FLAGS} -o {OUT} k.c", "run_template": "{BIN} {DATASET} {OUT}", "sources": ["k.c"]});
        SpeciesDescriptor::from_meta(&good).unwrap();
        let escape = json!({"build_template": "cc {FLAGS} -o {OUT}", "run_template": "{BIN} {DATASET} {OUT}", "sources": ["../k.c"]});
        assert!(SpeciesDescriptor::from_meta(&escape).is_err());
    }

    #[test]
    fn reference_outputs_must_name_existing_datasets() {
        let f = fixture();
        let meta = json!({
            "build_template": "cc {FLAGS} -o {OUT} k.c",
            "run_template": "{BIN} {DATASET} {OUT}",
            "reference_outputs": {"nope": "ref/nope.out"}
        });
        f.repo.create_entry(EntryKind::Species, Some("bad"), &meta).unwrap();
        assert!(matches!(
            SpeciesDescriptor::load(&f.repo, "bad"),
            Err(MeasureError::InvalidSpecies(_))
        ));
    }

    #[test]
    fn point_projection() {
        let b = BehaviorVector {
            exec_time_s: Some(1.5),
            compile_time_s: 0.2,
            binary_size_bytes: 100,
            ..Default::default()
        };
        assert_eq!(
            b.point(&ObjectiveSpec::tuning_default()),
            Some(vec![1.5, 100.0, 0.2, 0.0])
        );
        assert_eq!(BehaviorVector::failure(0.1, "x").point(&ObjectiveSpec::tuning_default()), None);
    }
}
