//! `sh`: command line front end.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crowdtune::autotune::{all_key_records, campaign_reports, load_key_record, KeyRecord, TuneConfig, TuneKey, Tuner};
use crowdtune::clustering::{build_clusters, evaluate_top, ClusterReport, DEFAULT_TOP_K};
use crowdtune::dispatch::{build_dispatch_tree, emit_dispatcher, DispatchTable, LabeledRun, VariantSet};
use crowdtune::flagspace::FlagSpace;
use crowdtune::measurement::{MockToolchain, ShellToolchain, StateVector, Toolchain};
use crowdtune::pareto::{Objective, ObjectiveSpec};
use crowdtune::predict::{
    extract_source_features, feature_ablation, log_mispredictions, loocv, save_model, train_tree, FeatureVector, ModelKind,
};
use crowdtune::repo::{resolve_cid, EntryKind, MetaFilter, Repo};
use crowdtune_crowd::{
    advise, plan_campaign, AdviceQuery, Coordinator, CoordinatorConfig, CrowdError, ServerHandle, WorkerConfig,
    DEFAULT_MODEL_ALIAS,
};

#[derive(Parser)]
#[command(name = "sh", version, about = "Crowd-style compiler flag autotuning")]
struct Cli {
    /// Repository root.
    #[arg(long, env = "SH_REPO", global = true)]
    repo: Option<PathBuf>,
    /// Print one JSON document on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create and inspect repository entries.
    Repo {
        #[command(subcommand)]
        cmd: RepoCmd,
    },
    /// Run a seeded random exploration campaign.
    Tune(TuneArgs),
    /// Group tuned keys by winning canonical choice.
    Cluster(ClusterArgs),
    /// Train, evaluate and ablate the optimization predictor.
    Predict {
        #[command(subcommand)]
        cmd: PredictCmd,
    },
    /// Build adaptive dispatchers from labelled runs.
    Dispatch {
        #[command(subcommand)]
        cmd: DispatchCmd,
    },
    /// Run the crowd coordinator.
    Serve(ServeArgs),
    /// Run a crowd worker.
    Work(WorkArgs),
    /// Ask for optimization advice.
    Advise(AdviseArgs),
    /// Emit report data files.
    Report {
        #[command(subcommand)]
        cmd: ReportCmd,
    },
}

#[derive(Subcommand)]
enum RepoCmd {
    /// Create (or reopen) a repository.
    Init,
    /// Create or replace an entry.
    Add {
        kind: String,
        #[arg(long)]
        alias: Option<String>,
        /// Meta as inline JSON, or `@path` to a JSON file.
        #[arg(long, default_value = "{}")]
        meta: String,
        /// Payload file, `path` or `path:name`. Repeatable.
        #[arg(long = "file")]
        files: Vec<String>,
    },
    /// Show an entry by CID (`repo:kind:entry`, `kind:entry`).
    Show { cid: String },
    /// List entries of a kind.
    Find {
        kind: String,
        /// `path=value` meta filter; value is JSON or a plain string. Repeatable.
        #[arg(long = "where")]
        filters: Vec<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ToolchainChoice {
    Mock,
    Shell,
}

#[derive(Args, Clone)]
struct ToolchainArgs {
    /// Flag space id; needed when keys lack `@compiler`.
    #[arg(long)]
    compiler: Option<String>,
    /// Builtin flag space name or path to a flag space file.
    #[arg(long)]
    flagspace: Option<String>,
    #[arg(long, value_enum, default_value = "shell")]
    toolchain: ToolchainChoice,
    #[arg(long, default_value = "cc")]
    cc: String,
    /// Scratch directory for builds.
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CampaignArgs {
    #[arg(long, default_value_t = 200)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Comma separated objectives to minimize.
    #[arg(long)]
    objective: Option<String>,
}

#[derive(Args)]
struct TuneArgs {
    /// `species:dataset:platform[@compiler]`. Repeatable.
    #[arg(long = "key", required = true)]
    keys: Vec<String>,
    #[command(flatten)]
    toolchain: ToolchainArgs,
    #[command(flatten)]
    campaign: CampaignArgs,
}

#[derive(Args)]
struct ClusterArgs {
    /// Keys to cluster; all tuned keys when omitted.
    #[arg(long = "key")]
    keys: Vec<String>,
    /// Cross-evaluate the top K clusters (default 20) on every key.
    #[arg(long, num_args = 0..=1)]
    evaluate_top: Option<Option<usize>>,
    #[command(flatten)]
    toolchain: ToolchainArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindChoice {
    Tree,
    Knn,
}

#[derive(Args)]
struct DataArgs {
    /// JSON array of feature vectors.
    #[arg(long)]
    features: PathBuf,
    /// JSON object species -> label. Defaults to current cluster membership.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tree")]
    kind: KindChoice,
    #[arg(long, default_value_t = 8)]
    max_depth: usize,
    #[arg(long, default_value_t = 1)]
    k: usize,
}

#[derive(Subcommand)]
enum PredictCmd {
    /// Train a decision tree and store it as a model entry.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = DEFAULT_MODEL_ALIAS)]
        alias: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Leave-one-out accuracy.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Store mispredictions as experiment entries.
        #[arg(long)]
        log_mispredictions: bool,
    },
    /// Accuracy drop when each feature is removed.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Static source features of a C file.
    Extract {
        source: PathBuf,
        #[arg(long)]
        species: String,
    },
}

#[derive(Subcommand)]
enum DispatchCmd {
    /// Train the dispatch tree and emit table and C stub.
    Build {
        /// Variant set JSON.
        #[arg(long)]
        variants: PathBuf,
        /// JSON array of labelled runs.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        stub: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        max_depth: usize,
    },
    /// Variant a table picks for a feature point.
    Select {
        #[arg(long)]
        table: PathBuf,
        /// `name=value,...`
        #[arg(long)]
        features: String,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    /// Write the bound port here once listening.
    #[arg(long)]
    port_file: Option<PathBuf>,
    /// Keys to plan a campaign for. Repeatable.
    #[arg(long = "key")]
    keys: Vec<String>,
    #[arg(long)]
    compiler: Option<String>,
    #[arg(long)]
    flagspace: Option<String>,
    #[command(flatten)]
    campaign: CampaignArgs,
    #[arg(long, default_value_t = 900)]
    lease_secs: i64,
    /// Stop once every unit is done or parked.
    #[arg(long)]
    exit_when_drained: bool,
}

#[derive(Args)]
struct WorkArgs {
    /// Worker config JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    coordinator: Option<String>,
    #[arg(long)]
    worker_id: Option<String>,
    #[arg(long)]
    resubmit: Option<u32>,
}

#[derive(Args)]
struct AdviseArgs {
    #[arg(long)]
    species: Option<String>,
    #[arg(long)]
    platform: Option<String>,
    /// `name=value,...`
    #[arg(long)]
    features: Option<String>,
    /// `objective=weight,...`
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Ask a running coordinator instead of the local repository.
    #[arg(long)]
    coordinator: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Gnuplot,
}

#[derive(Subcommand)]
enum ReportCmd {
    /// A key's frontier.
    Frontier {
        #[arg(long)]
        key: String,
        #[arg(long)]
        compiler: Option<String>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stored campaign reports.
    Campaigns,
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Verb result: a JSON document and its human rendering.
struct Output {
    doc: Value,
    text: String,
}

impl Output {
    fn new(doc: Value, text: impl Into<String>) -> Self {
        Output { doc, text: text.into() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let json_mode = cli.json;
    match run(cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let _ = if json_mode {
                writeln!(stdout, "{}", out.doc)
            } else if out.text.ends_with('\n') || out.text.is_empty() {
                write!(stdout, "{}", out.text)
            } else {
                writeln!(stdout, "{}", out.text)
            };
            ExitCode::SUCCESS
        }
        Err(e) => {
            let is_usage = e.downcast_ref::<UsageError>().is_some();
            if json_mode {
                eprintln!("{}", json!({"error": format!("{e:#}"), "usage": is_usage}));
            } else {
                eprintln!("error: {e:#}");
                if is_usage {
                    eprintln!("run `sh --help` for usage");
                }
            }
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<Output> {
    let repo_path = cli.repo.clone();
    let open = || -> anyhow::Result<Repo> {
        let p = repo_path.as_ref().ok_or_else(|| usage("no repository: pass --repo or set SH_REPO"))?;
        Repo::open(p).with_context(|| format!("opening repository {}", p.display()))
    };
    match cli.cmd {
        Cmd::Repo { cmd: RepoCmd::Init } => {
            let p = repo_path.ok_or_else(|| usage("no repository: pass --repo or set SH_REPO"))?;
            let repo = Repo::init(&p)?;
            Ok(Output::new(
                json!({"root": p, "uid": repo.id().uid}),
                format!("repository {} at {}", repo.id().uid, p.display()),
            ))
        }
        Cmd::Repo { cmd } => repo_cmd(&open()?, cmd),
        Cmd::Tune(a) => tune(&open()?, a),
        Cmd::Cluster(a) => cluster(&open()?, a),
        Cmd::Predict { cmd } => predict_cmd(repo_path.as_deref(), cmd),
        Cmd::Dispatch { cmd } => dispatch_cmd(cmd),
        Cmd::Serve(a) => serve(open()?, a),
        Cmd::Work(a) => work(a),
        Cmd::Advise(a) => advise_cmd(repo_path.as_deref(), a),
        Cmd::Report { cmd } => report(&open()?, cmd),
    }
}

fn parse_kind(s: &str) -> anyhow::Result<EntryKind> {
    s.parse().map_err(|_| usage(format!("unknown entry kind `{s}`")))
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn repo_cmd(repo: &Repo, cmd: RepoCmd) -> anyhow::Result<Output> {
    match cmd {
        RepoCmd::Init => unreachable!("handled before opening"),
        RepoCmd::Add { kind, alias, meta, files } => {
            let kind = parse_kind(&kind)?;
            let meta: Value = match meta.strip_prefix('@') {
                Some(path) => read_json(Path::new(path))?,
                None => serde_json::from_str(&meta).map_err(|e| usage(format!("--meta is not JSON: {e}")))?,
            };
            let id = match &alias {
                Some(a) => repo.put_entry(kind, a, &meta)?,
                None => repo.create_entry(kind, None, &meta)?,
            };
            let mut added = Vec::new();
            for spec in files {
                let (src, name) = match spec.rsplit_once(':') {
                    Some((s, n)) if !n.is_empty() && !s.is_empty() => (PathBuf::from(s), n.to_string()),
                    _ => {
                        let p = PathBuf::from(&spec);
                        let n = p
                            .file_name()
                            .ok_or_else(|| usage(format!("--file `{spec}` has no file name")))?
                            .to_string_lossy()
                            .into_owned();
                        (p, n)
                    }
                };
                let bytes = std::fs::read(&src).with_context(|| format!("reading {}", src.display()))?;
                repo.add_file(kind, &id.uid, &name, &bytes)?;
                added.push(name);
            }
            Ok(Output::new(
                json!({"kind": kind.as_str(), "uid": id.uid, "alias": id.alias, "files": added}),
                format!("{} {}", kind, id.display_name()),
            ))
        }
        RepoCmd::Show { cid } => {
            let full = if cid.split(':').count() == 2 {
                format!("{}:{cid}", repo.id().uid)
            } else {
                cid
            };
            let cid = resolve_cid(&full)?;
            let entry = repo.load_cid(&cid)?;
            let doc = json!({
                "kind": entry.kind.as_str(),
                "uid": entry.id.uid,
                "alias": entry.id.alias,
                "meta": entry.meta,
                "files": entry.files,
            });
            let text = serde_json::to_string_pretty(&doc)?;
            Ok(Output::new(doc, text))
        }
        RepoCmd::Find { kind, filters } => {
            let kind = parse_kind(&kind)?;
            let mut filter = MetaFilter::new();
            for f in &filters {
                let (path, value) = f
                    .split_once('=')
                    .ok_or_else(|| usage(format!("--where expects path=value, got `{f}`")))?;
                let value: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
                filter = filter.eq(path, value);
            }
            let entries = repo.find_entries(kind, &filter)?;
            let list: Vec<Value> = entries
                .iter()
                .map(|e| json!({"uid": e.id.uid, "alias": e.id.alias}))
                .collect();
            let text = entries.iter().map(|e| format!("{}\n", e.id.display_name())).collect::<String>();
            Ok(Output::new(json!({"kind": kind.as_str(), "entries": list}), text))
        }
    }
}

fn load_space(name: &str) -> anyhow::Result<FlagSpace> {
    match FlagSpace::builtin(name) {
        Ok(s) => Ok(s),
        Err(_) if Path::new(name).exists() => Ok(FlagSpace::load(Path::new(name))?),
        Err(e) => Err(usage(e.to_string())),
    }
}

fn parse_key(text: &str, compiler: Option<&str>) -> anyhow::Result<TuneKey> {
    let (body, comp) = match text.split_once('@') {
        Some((b, c)) => (b, c),
        None => (
            text,
            compiler.ok_or_else(|| usage(format!("key `{text}` needs @compiler or --compiler")))?,
        ),
    };
    TuneKey::parse(body, comp).map_err(|e| usage(e.to_string()))
}

/// Resolve the flag space and keys from the shared options.
fn space_and_keys(
    keys: &[String],
    compiler: Option<&str>,
    flagspace: Option<&str>,
) -> anyhow::Result<(FlagSpace, Vec<TuneKey>)> {
    let space = match flagspace {
        Some(f) => Some(load_space(f)?),
        None => None,
    };
    let default_compiler = compiler.map(String::from).or_else(|| space.as_ref().map(FlagSpace::id));
    let keys: Vec<TuneKey> = keys
        .iter()
        .map(|k| parse_key(k, default_compiler.as_deref()))
        .collect::<anyhow::Result<_>>()?;
    let space = match space {
        Some(s) => s,
        None => {
            let first = keys.first().ok_or_else(|| usage("at least one --key is required"))?;
            load_space(&first.compiler)?
        }
    };
    if let Some(k) = keys.iter().find(|k| k.compiler != space.id()) {
        return Err(usage(format!("key {k} does not use flag space {}", space.id())));
    }
    Ok((space, keys))
}

fn make_toolchain(args: &ToolchainArgs) -> anyhow::Result<Box<dyn Toolchain>> {
    Ok(match args.toolchain {
        ToolchainChoice::Mock => Box::new(MockToolchain),
        ToolchainChoice::Shell => Box::new(ShellToolchain::detect(&args.cc)?),
    })
}

fn work_dir(repo: &Repo, args: &ToolchainArgs) -> PathBuf {
    args.work_dir.clone().unwrap_or_else(|| repo.root().join(".scratch"))
}

fn tune_config(c: &CampaignArgs) -> anyhow::Result<TuneConfig> {
    let mut config = TuneConfig {
        budget: c.budget,
        seed: c.seed,
        density: c.density,
        repeats: c.repeats,
        ..Default::default()
    };
    if let Some(o) = &c.objective {
        let names: Vec<&str> = o.split(',').map(str::trim).collect();
        config.objective = ObjectiveSpec::minimize(&names).map_err(|e| usage(e.to_string()))?;
    }
    Ok(config)
}

fn interrupt_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    // A second handler registration fails; the first one stays active.
    let _ = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst));
    flag
}

fn tune(repo: &Repo, a: TuneArgs) -> anyhow::Result<Output> {
    let (space, keys) = space_and_keys(&a.keys, a.toolchain.compiler.as_deref(), a.toolchain.flagspace.as_deref())?;
    let config = tune_config(&a.campaign)?;
    let toolchain = make_toolchain(&a.toolchain)?;
    let measurer = crowdtune::measurement::Measurer::new(repo, toolchain.as_ref(), &space, work_dir(repo, &a.toolchain));
    let mut tuner = Tuner::new(measurer, StateVector::capture("")).with_interrupt(interrupt_flag());
    let report = tuner.campaign(&keys, &config)?;
    let mut text = String::new();
    for k in &report.keys {
        text.push_str(&format!(
            "{}  frontier={} best_speedup={} best={}{}\n",
            k.key,
            k.frontier_size,
            k.best_speedup.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into()),
            k.best_choice.as_deref().unwrap_or("-"),
            if k.untunable { " (untunable)" } else { "" },
        ));
    }
    if report.interrupted {
        text.push_str("interrupted\n");
    }
    Ok(Output::new(serde_json::to_value(&report)?, text))
}

fn tuned_keys(repo: &Repo, keys: &[String], compiler: Option<&str>) -> anyhow::Result<Vec<TuneKey>> {
    if keys.is_empty() {
        Ok(all_key_records(repo)?.into_iter().map(|r| r.display).collect())
    } else {
        keys.iter().map(|k| parse_key(k, compiler)).collect()
    }
}

fn cluster(repo: &Repo, a: ClusterArgs) -> anyhow::Result<Output> {
    let keys = tuned_keys(repo, &a.keys, a.toolchain.compiler.as_deref())?;
    if keys.is_empty() {
        bail!("no tuned keys in the repository");
    }
    let mut clusters = build_clusters(repo, &keys)?;
    if let Some(k) = a.evaluate_top {
        let space = load_space(a.toolchain.flagspace.as_deref().unwrap_or(&keys[0].compiler))?;
        let toolchain = make_toolchain(&a.toolchain)?;
        let measurer =
            crowdtune::measurement::Measurer::new(repo, toolchain.as_ref(), &space, work_dir(repo, &a.toolchain));
        let mut tuner = Tuner::new(measurer, StateVector::capture(""));
        clusters = evaluate_top(clusters, &keys, &mut tuner, k.unwrap_or(DEFAULT_TOP_K))?;
    }
    let report = ClusterReport::new(&clusters);
    repo.put_entry(
        EntryKind::Cluster,
        "cluster-report",
        &json!({"type": "cluster-report", "report": report}),
    )?;
    let mut text = String::new();
    for c in &report.clusters {
        text.push_str(&format!(
            "{}  members={} max_speedup={:.4} improved={} slowdown={} neutral={}\n",
            c.canonical,
            c.members.len(),
            c.max_speedup,
            c.n_improved,
            c.n_slowdown,
            c.n_neutral
        ));
    }
    Ok(Output::new(serde_json::to_value(&report)?, text))
}

/// Species -> cluster canonical, keyed by both uid and alias.
fn cluster_labels(repo: &Repo) -> anyhow::Result<BTreeMap<String, String>> {
    let keys: Vec<TuneKey> = all_key_records(repo)?.into_iter().map(|r| r.display).collect();
    let mut out = BTreeMap::new();
    for c in build_clusters(repo, &keys)? {
        for m in &c.members {
            out.insert(m.key.species.clone(), c.id());
            if let Ok(uid) = repo.resolve_ref(EntryKind::Species, &m.key.species) {
                out.insert(uid, c.id());
            }
        }
    }
    Ok(out)
}

fn load_data(repo: Option<&Path>, d: &DataArgs) -> anyhow::Result<(Vec<FeatureVector>, Vec<String>)> {
    let features: Vec<FeatureVector> = serde_json::from_value(read_json(&d.features)?)?;
    for f in &features {
        f.validate()?;
    }
    let labels: BTreeMap<String, String> = match &d.labels {
        Some(p) => serde_json::from_value(read_json(p)?)?,
        None => {
            let p = repo.ok_or_else(|| usage("--labels or a repository with clusters is required"))?;
            cluster_labels(&Repo::open(p)?)?
        }
    };
    let mut kept = Vec::new();
    let mut ls = Vec::new();
    for f in features {
        match labels.get(&f.species) {
            Some(l) => {
                ls.push(l.clone());
                kept.push(f);
            }
            None => bail!("no label for species `{}`", f.species),
        }
    }
    Ok((kept, ls))
}

fn model_kind(d: &DataArgs) -> ModelKind {
    match d.kind {
        KindChoice::Tree => ModelKind::Tree { max_depth: d.max_depth },
        KindChoice::Knn => ModelKind::Knn { k: d.k },
    }
}

fn predict_cmd(repo: Option<&Path>, cmd: PredictCmd) -> anyhow::Result<Output> {
    match cmd {
        PredictCmd::Train { data, alias, seed } => {
            let repo_path = repo.ok_or_else(|| usage("no repository: pass --repo or set SH_REPO"))?;
            let (features, labels) = load_data(Some(repo_path), &data)?;
            let model = train_tree(&features, &labels, data.max_depth, seed)?;
            let r = Repo::open(repo_path)?;
            let id = save_model(&r, &alias, &model, json!({"samples": features.len()}))?;
            Ok(Output::new(
                json!({"model": id.uid, "alias": alias, "depth": model.depth, "features_used": model.features_used()}),
                format!("model {alias}: depth {} over {:?}", model.depth, model.features_used()),
            ))
        }
        PredictCmd::Eval { data, log_mispredictions: log } => {
            let (features, labels) = load_data(repo, &data)?;
            let result = loocv(&features, &labels, model_kind(&data))?;
            if log {
                let p = repo.ok_or_else(|| usage("--log-mispredictions needs a repository"))?;
                log_mispredictions(&Repo::open(p)?, &result.mispredictions)?;
            }
            let text = format!(
                "loocv accuracy {:.4} ({} mispredicted)",
                result.accuracy,
                result.mispredictions.len()
            );
            Ok(Output::new(serde_json::to_value(&result)?, text))
        }
        PredictCmd::Ablate { data } => {
            let (features, labels) = load_data(repo, &data)?;
            let ranked = feature_ablation(&features, &labels, model_kind(&data))?;
            let text = ranked.iter().map(|(n, d)| format!("{n}\t{d:+.4}\n")).collect::<String>();
            let doc: Vec<Value> = ranked.iter().map(|(n, d)| json!({"feature": n, "delta": d})).collect();
            Ok(Output::new(json!(doc), text))
        }
        PredictCmd::Extract { source, species } => {
            let src = std::fs::read_to_string(&source).with_context(|| format!("reading {}", source.display()))?;
            let fv = extract_source_features(&species, &src);
            let text = fv
                .values()
                .iter()
                .map(|(k, v)| format!("{k}\t{v}\n"))
                .collect::<String>();
            Ok(Output::new(serde_json::to_value(&fv)?, text))
        }
    }
}

fn parse_pairs(text: &str) -> anyhow::Result<BTreeMap<String, f64>> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, v) = p.split_once('=').ok_or_else(|| usage(format!("expected name=value, got `{p}`")))?;
            let v: f64 = v.trim().parse().map_err(|_| usage(format!("`{v}` is not a number")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

fn dispatch_cmd(cmd: DispatchCmd) -> anyhow::Result<Output> {
    match cmd {
        DispatchCmd::Build {
            variants,
            runs,
            table,
            stub,
            max_depth,
        } => {
            let set: VariantSet = serde_json::from_value(read_json(&variants)?)?;
            set.validate()?;
            let runs: Vec<LabeledRun> = serde_json::from_value(read_json(&runs)?)?;
            let tree = build_dispatch_tree(&runs, max_depth)?;
            let (t, source) = emit_dispatcher(&set, &tree)?;
            crowdtune::repo::atomic_write(&table, t.to_json().as_bytes())?;
            if let Some(stub) = &stub {
                crowdtune::repo::atomic_write(stub, source.as_bytes())?;
            }
            Ok(Output::new(
                json!({"table": table, "stub": stub, "features_required": t.features_required, "depth": t.tree.depth}),
                format!("dispatch table {} over {:?}", table.display(), t.features_required),
            ))
        }
        DispatchCmd::Select { table, features } => {
            let text = std::fs::read_to_string(&table).with_context(|| format!("reading {}", table.display()))?;
            let t = DispatchTable::from_json(&text)?;
            let v = t.select(&parse_pairs(&features)?)?;
            Ok(Output::new(json!({"variant": v.label, "choice": v.choice.render()}), v.label.clone()))
        }
    }
}

fn serve(repo: Repo, a: ServeArgs) -> anyhow::Result<Output> {
    let config = tune_config(&a.campaign)?;
    let units = if a.keys.is_empty() {
        Vec::new()
    } else {
        let (space, keys) = space_and_keys(&a.keys, a.compiler.as_deref(), a.flagspace.as_deref())?;
        plan_campaign(&repo, &keys, &space, &config)?
    };
    let coordinator = Arc::new(Coordinator::new(
        repo,
        CoordinatorConfig {
            lease: chrono::Duration::seconds(a.lease_secs),
            objective: config.objective.clone(),
            ..Default::default()
        },
    ));
    let planned = coordinator.enqueue(units);
    let server = ServerHandle::spawn(coordinator.clone(), &a.listen)?;
    if let Some(p) = &a.port_file {
        crowdtune::repo::atomic_write(p, server.addr.port().to_string().as_bytes())?;
    }
    eprintln!("coordinator listening on {} with {planned} units", server.url());
    let stop = interrupt_flag();
    while !stop.load(Ordering::SeqCst) {
        if a.exit_when_drained && coordinator.status().drained() {
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    server.stop()?;
    let status = coordinator.status();
    let text = format!(
        "done={} parked={} queued={} leased={}",
        status.done, status.parked, status.queued, status.leased
    );
    Ok(Output::new(serde_json::to_value(&status)?, text))
}

fn work(a: WorkArgs) -> anyhow::Result<Output> {
    let mut config = WorkerConfig::load(&a.config)?;
    if let Some(c) = a.coordinator {
        config.coordinator = c;
    }
    if let Some(w) = a.worker_id {
        config.worker_id = w;
    }
    if let Some(r) = a.resubmit {
        config.resubmit = r;
    }
    let summary = crowdtune_crowd::run_worker(&config)?;
    let text = format!(
        "units={} submissions={} accepted={} rejected={:?}",
        summary.units, summary.submissions, summary.accepted, summary.rejected
    );
    Ok(Output::new(serde_json::to_value(&summary)?, text))
}

fn advise_cmd(repo: Option<&Path>, a: AdviseArgs) -> anyhow::Result<Output> {
    let advice: Value = if let Some(url) = &a.coordinator {
        let mut req = ureq::get(format!("{}/v1/advise", url.trim_end_matches('/')));
        for (k, v) in [
            ("species", &a.species),
            ("platform", &a.platform),
            ("features", &a.features),
            ("weights", &a.weights),
            ("model", &a.model),
        ] {
            if let Some(v) = v {
                req = req.query(k, v);
            }
        }
        match req.call() {
            Ok(mut r) => r.body_mut().read_json()?,
            Err(ureq::Error::StatusCode(404)) => return Err(CrowdError::NoKnowledge.into()),
            Err(e) => return Err(anyhow!("coordinator: {e}")),
        }
    } else {
        let p = repo.ok_or_else(|| usage("no repository: pass --repo, set SH_REPO or use --coordinator"))?;
        let query = AdviceQuery {
            species: a.species.clone(),
            platform: a.platform.clone(),
            features: a.features.as_deref().map(parse_pairs).transpose()?.unwrap_or_default(),
            weights: a.weights.as_deref().map(parse_pairs).transpose()?.unwrap_or_default(),
            model: a.model.clone(),
        };
        serde_json::to_value(advise(&Repo::open(p)?, &query)?)?
    };
    let mut text = format!("source: {}\n", advice["source"].as_str().unwrap_or("?"));
    for s in advice["solutions"].as_array().into_iter().flatten() {
        text.push_str(s["choice"].as_str().unwrap_or(""));
        if let Some(score) = s["score"].as_f64() {
            text.push_str(&format!("  score={score}"));
        }
        if let Some(c) = s["confidence"].as_f64() {
            text.push_str(&format!("  confidence={c:.3}"));
        }
        text.push('\n');
    }
    Ok(Output::new(advice, text))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Frontier rows: choice, exec, compile, size, failed.
/// choice, exec time, compile time, size, failed.
type FrontierRow = (String, f64, f64, f64, f64);

fn frontier_rows(repo: &Repo, record: &KeyRecord) -> anyhow::Result<Vec<FrontierRow>> {
    let spec = record.frontier.spec();
    let mut rows = Vec::new();
    for s in record.frontier.solutions() {
        let from_point = |name: &str| spec.index_of(name).map(|i| s.behavior[i]);
        let from_experiment = |name: &str| -> Option<f64> {
            let uid = s.experiment.as_ref()?;
            let e = repo.load(EntryKind::Experiment, uid).ok()?;
            let v = &e.meta["behavior"][name];
            v.as_f64().or_else(|| v.as_bool().map(|b| f64::from(u8::from(b))))
        };
        let get = |name: &str| from_point(name).or_else(|| from_experiment(name)).unwrap_or(f64::NAN);
        rows.push((
            s.choice.render(),
            get("exec_time_s"),
            get("compile_time_s"),
            get("binary_size_bytes"),
            get("failed"),
        ));
    }
    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(rows)
}

fn report(repo: &Repo, cmd: ReportCmd) -> anyhow::Result<Output> {
    match cmd {
        ReportCmd::Frontier {
            key,
            compiler,
            format,
            out,
        } => {
            let display = parse_key(&key, compiler.as_deref())?;
            let resolved = display.resolve(repo)?;
            let record =
                load_key_record(repo, &resolved)?.ok_or_else(|| anyhow!("key {display} has not been tuned"))?;
            let rows = frontier_rows(repo, &record)?;
            let mut csv = String::from("choice,exec_time_s,compile_time_s,binary_size_bytes,failed\n");
            for (c, e, ct, sz, f) in &rows {
                csv.push_str(&format!("{},{e},{ct},{sz},{f}\n", csv_field(c)));
            }
            let doc = json!({
                "key": display,
                "objectives": record.frontier.spec().dims().iter().map(|d: &Objective| d.name.clone()).collect::<Vec<_>>(),
                "solutions": rows.iter().map(|(c, e, ct, sz, f)| json!({
                    "choice": c, "exec_time_s": e, "compile_time_s": ct, "binary_size_bytes": sz, "failed": f
                })).collect::<Vec<_>>(),
                "reference_exec_time_s": record.reference_time(),
            });
            let content = match format {
                Format::Csv => csv,
                Format::Json => format!("{doc}\n"),
                Format::Gnuplot => {
                    let mut g = String::from(
                        "set datafile separator ','\nset xlabel 'binary size (bytes)'\nset ylabel 'execution time (s)'\n",
                    );
                    g.push_str(&format!("set title '{}'\n", display.to_string().replace('\'', "")));
                    g.push_str("$frontier << EOD\n");
                    for (_, e, _, sz, _) in &rows {
                        g.push_str(&format!("{sz},{e}\n"));
                    }
                    g.push_str("EOD\nplot $frontier using 1:2 with points pointtype 7 title 'frontier'\n");
                    g
                }
            };
            let format_name = match format {
                Format::Csv => "csv",
                Format::Json => "json",
                Format::Gnuplot => "gnuplot",
            };
            match out {
                Some(p) => {
                    crowdtune::repo::atomic_write(&p, content.as_bytes())?;
                    Ok(Output::new(
                        json!({"format": format_name, "out": p, "rows": rows.len()}),
                        format!("wrote {}", p.display()),
                    ))
                }
                None if format == Format::Json => Ok(Output::new(doc, content)),
                None => Ok(Output::new(json!({"format": format_name, "content": content}), content)),
            }
        }
        ReportCmd::Campaigns => {
            let reports = campaign_reports(repo)?;
            let text = reports
                .iter()
                .map(|r| format!("seed={} budget={} keys={} failures={}\n", r.seed, r.budget, r.keys.len(), r.total_failures()))
                .collect::<String>();
            Ok(Output::new(serde_json::to_value(&reports)?, text))
        }
    }
}
