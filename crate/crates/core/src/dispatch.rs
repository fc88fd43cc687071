//! Multi-versioned species: label runs by their fastest variant, learn a
//! tree over run-time features, and emit a dispatch table plus a C stub.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::flagspace::ChoiceVector;
use crate::measurement::{BehaviorVector, DatasetDescriptor, Measurer, SpeciesDescriptor, StateVector};
use crate::predict::{self, DecisionTreeModel, Node, PredictError};
use crate::statistics::DEFAULT_RELIABILITY_THRESHOLD;

#[derive(Debug, thiserror::Error)]
pub enum DispatchError {
    #[error("a variant set needs at least two variants, got {0}")]
    TooFewVariants(usize),
    #[error("duplicate variant label `{0}`")]
    DuplicateLabel(String),
    #[error("need at least two labeled runs, got {0}")]
    TooFewRuns(usize),
    #[error("feature `{0}` has no run-time extractor")]
    UnextractableFeature(String),
    #[error("tree label `{0}` is not a variant")]
    UnknownVariant(String),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DispatchError> = std::result::Result<T, E>;

pub const HOUR_OF_DAY: &str = "hour_of_day";
pub const CPU_COUNT: &str = "cpu_count";
pub const DATASET_WIDTH: &str = "dataset_width";
pub const DATASET_HEIGHT: &str = "dataset_height";
pub const DATASET_BYTES: &str = "dataset_bytes";
/// Prefix of boolean dataset-tag features (`tag:<name>`, 1 when present).
pub const TAG_PREFIX: &str = "tag:";

/// Whether the generated stub can compute `name` at call time.
pub fn is_runtime_feature(name: &str) -> bool {
    matches!(name, HOUR_OF_DAY | CPU_COUNT | DATASET_WIDTH | DATASET_HEIGHT | DATASET_BYTES)
        || name.strip_prefix(TAG_PREFIX).is_some_and(|t| !t.is_empty() && !t.contains(','))
}

/// Run-time features of a dataset in a state.
///
/// Width and height come from the dataset's `width`/`height` features, bytes
/// from its file (or a `bytes` feature), the hour from the state's wallclock
/// context and the CPU count from a `cpu_count` context value or the host.
pub fn runtime_features(dataset: &DatasetDescriptor, state: &StateVector) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    if let Some(h) = state.wallclock_context.get(HOUR_OF_DAY) {
        out.insert(HOUR_OF_DAY.to_string(), *h as f64);
    }
    let cpus = state
        .wallclock_context
        .get(CPU_COUNT)
        .map(|&c| c as f64)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1.0, |n| n.get() as f64));
    out.insert(CPU_COUNT.to_string(), cpus);
    for (key, name) in [("width", DATASET_WIDTH), ("height", DATASET_HEIGHT)] {
        if let Some(v) = dataset.features.get(key) {
            out.insert(name.to_string(), *v);
        }
    }
    let bytes = dataset
        .path
        .as_ref()
        .and_then(|p| std::fs::metadata(p).ok())
        .map(|m| m.len() as f64)
        .or_else(|| dataset.features.get("bytes").copied());
    if let Some(b) = bytes {
        out.insert(DATASET_BYTES.to_string(), b);
    }
    for t in &dataset.tags {
        out.insert(format!("{TAG_PREFIX}{t}"), 1.0);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub choice: ChoiceVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSet {
    pub species: String,
    pub variants: Vec<Variant>,
}

impl VariantSet {
    pub fn new(species: &str, variants: Vec<Variant>) -> Result<Self> {
        let set = VariantSet {
            species: species.to_string(),
            variants,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.len() < 2 {
            return Err(DispatchError::TooFewVariants(self.variants.len()));
        }
        let mut seen = BTreeSet::new();
        for v in &self.variants {
            if !seen.insert(&v.label) {
                return Err(DispatchError::DuplicateLabel(v.label.clone()));
            }
        }
        Ok(())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.variants.iter().any(|v| v.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRun {
    pub features: BTreeMap<String, f64>,
    pub best_variant: String,
    /// Time of the runner-up over the best; 1.0 when ambiguous.
    pub margin: f64,
    #[serde(default)]
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRun {
    pub features: BTreeMap<String, f64>,
    pub variant: String,
    pub reason: String,
}

/// Label each feature point with its fastest variant.
///
/// `measure` returns the behavior of one variant at one point. Points where
/// any variant fails or is unreliable are skipped and reported. When the
/// best two times are within the reliability tolerance the point is labeled
/// with the first variant, margin 1.0, and flagged ambiguous.
pub fn label_runs<F>(set: &VariantSet, points: &[BTreeMap<String, f64>], measure: F) -> (Vec<LabeledRun>, Vec<SkippedRun>)
where
    F: FnMut(&Variant, &BTreeMap<String, f64>) -> BehaviorVector,
{
    label_runs_with(set, points, |p| p.clone(), measure)
}

/// [`label_runs`] over arbitrary points with a feature projection.
pub fn label_runs_with<P, G, F>(set: &VariantSet, points: &[P], features_of: G, mut measure: F) -> (Vec<LabeledRun>, Vec<SkippedRun>)
where
    G: Fn(&P) -> BTreeMap<String, f64>,
    F: FnMut(&Variant, &P) -> BehaviorVector,
{
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    'points: for point in points {
        let features = features_of(point);
        let mut times = Vec::with_capacity(set.variants.len());
        for v in &set.variants {
            let b = measure(v, point);
            let reason = if b.failed {
                "failed"
            } else if !b.is_reliable() {
                "unreliable timing"
            } else {
                ""
            };
            match b.exec_time_s {
                Some(t) if reason.is_empty() => times.push((t, v.label.as_str())),
                _ => {
                    skipped.push(SkippedRun {
                        features,
                        variant: v.label.clone(),
                        reason: if reason.is_empty() { "no execution time" } else { reason }.to_string(),
                    });
                    continue 'points;
                }
            }
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].0.total_cmp(&times[b].0).then(a.cmp(&b)));
        let (best, second) = (times[order[0]], times[order[1]]);
        let margin = second.0 / best.0;
        runs.push(if margin < 1.0 + DEFAULT_RELIABILITY_THRESHOLD {
            LabeledRun {
                features,
                best_variant: set.variants[0].label.clone(),
                margin: 1.0,
                ambiguous: true,
            }
        } else {
            LabeledRun {
                features,
                best_variant: best.1.to_string(),
                margin,
                ambiguous: false,
            }
        });
    }
    (runs, skipped)
}

/// [`label_runs`] over measured (dataset, state) pairs.
pub fn label_measured_runs(
    measurer: &Measurer<'_>,
    species: &SpeciesDescriptor,
    set: &VariantSet,
    pairs: &[(DatasetDescriptor, StateVector)],
    repeats: usize,
) -> (Vec<LabeledRun>, Vec<SkippedRun>) {
    label_runs_with(
        set,
        pairs,
        |(d, s)| runtime_features(d, s),
        |variant, (dataset, state)| {
            measurer
                .evaluate(species, &variant.choice, dataset, state, repeats)
                .unwrap_or_else(|e| BehaviorVector::failure(0.0, e.to_string()))
        },
    )
}

/// Train a tree on unambiguous runs.
pub fn build_dispatch_tree(runs: &[LabeledRun], max_depth: usize) -> Result<DecisionTreeModel> {
    if runs.len() < 2 {
        return Err(DispatchError::TooFewRuns(runs.len()));
    }
    let clear: Vec<&LabeledRun> = runs.iter().filter(|r| !r.ambiguous).collect();
    let used: Vec<&LabeledRun> = if clear.is_empty() { runs.iter().collect() } else { clear };
    let rows: Vec<BTreeMap<String, f64>> = used.iter().map(|r| r.features.clone()).collect();
    let labels: Vec<String> = used.iter().map(|r| r.best_variant.clone()).collect();
    Ok(predict::train_on_maps(&rows, &labels, max_depth, 0)?)
}

/// Machine-readable dispatcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchTable {
    pub species: String,
    pub variants: Vec<Variant>,
    pub tree: DecisionTreeModel,
    pub features_required: Vec<String>,
}

impl DispatchTable {
    pub fn validate(&self) -> Result<()> {
        VariantSet {
            species: self.species.clone(),
            variants: self.variants.clone(),
        }
        .validate()?;
        self.tree.validate()?;
        check_tree(&self.tree, &self.variants)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: DispatchTable = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        crate::repo::canonical_json(&serde_json::to_value(self).expect("table serializes"))
    }

    /// Variant for a feature point; always one of `variants`.
    pub fn select(&self, features: &BTreeMap<String, f64>) -> Result<&Variant> {
        let label = self.tree.predict_map(features)?.label;
        self.variants
            .iter()
            .find(|v| v.label == label)
            .ok_or(DispatchError::UnknownVariant(label))
    }
}

fn check_tree(tree: &DecisionTreeModel, variants: &[Variant]) -> Result<()> {
    for f in tree.features_used() {
        if !is_runtime_feature(&f) {
            return Err(DispatchError::UnextractableFeature(f));
        }
    }
    for l in tree.labels() {
        if !variants.iter().any(|v| v.label == l) {
            return Err(DispatchError::UnknownVariant(l));
        }
    }
    Ok(())
}

/// Build the table and a C stub whose `main` walks the tree and calls
/// `<species>_<label>(argc, argv)`.
pub fn emit_dispatcher(set: &VariantSet, tree: &DecisionTreeModel) -> Result<(DispatchTable, String)> {
    set.validate()?;
    tree.validate()?;
    check_tree(tree, &set.variants)?;
    let table = DispatchTable {
        species: set.species.clone(),
        variants: set.variants.clone(),
        tree: tree.clone(),
        features_required: tree.features_used(),
    };
    let stub = c_stub(&table);
    Ok((table, stub))
}

/// Map a name onto a C identifier fragment.
pub fn c_ident(name: &str) -> String {
    let mut s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    if s.starts_with(|c: char| c.is_ascii_digit()) {
        s.insert(0, '_');
    }
    s
}

fn c_feature_expr(name: &str) -> String {
    match name.strip_prefix(TAG_PREFIX) {
        Some(tag) => format!("sh_has_tag(\"{tag}\")"),
        None => format!("sh_{name}(argc, argv)"),
    }
}

const C_PRELUDE: &str = r#"#define _POSIX_C_SOURCE 200809L
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <time.h>
#include <unistd.h>

static double sh_hour_of_day(int argc, char **argv) {
    time_t now = time(NULL);
    struct tm *t = localtime(&now);
    (void)argc; (void)argv;
    return t ? (double)t->tm_hour : 0.0;
}

static double sh_cpu_count(int argc, char **argv) {
    long n = sysconf(_SC_NPROCESSORS_ONLN);
    (void)argc; (void)argv;
    return n > 0 ? (double)n : 1.0;
}

static double sh_dataset_bytes(int argc, char **argv) {
    FILE *f;
    long n;
    if (argc < 2 || !(f = fopen(argv[1], "rb"))) return 0.0;
    fseek(f, 0, SEEK_END);
    n = ftell(f);
    fclose(f);
    return n > 0 ? (double)n : 0.0;
}

/* Width and height from a PGM (P5) header. */
static int sh_pgm_dims(int argc, char **argv, int *w, int *h) {
    FILE *f;
    char magic[3] = {0};
    int ok;
    if (argc < 2 || !(f = fopen(argv[1], "rb"))) return 0;
    ok = fscanf(f, "%2s %d %d", magic, w, h) == 3 && strcmp(magic, "P5") == 0;
    fclose(f);
    return ok;
}

static double sh_dataset_width(int argc, char **argv) {
    int w, h;
    return sh_pgm_dims(argc, argv, &w, &h) ? (double)w : 0.0;
}

static double sh_dataset_height(int argc, char **argv) {
    int w, h;
    return sh_pgm_dims(argc, argv, &w, &h) ? (double)h : 0.0;
}

/* Tags arrive as a comma-separated list in SH_DATASET_TAGS. */
static double sh_has_tag(const char *tag) {
    const char *tags = getenv("SH_DATASET_TAGS");
    size_t n = strlen(tag);
    while (tags && *tags) {
        const char *end = strchr(tags, ',');
        size_t len = end ? (size_t)(end - tags) : strlen(tags);
        if (len == n && strncmp(tags, tag, n) == 0) return 1.0;
        tags = end ? end + 1 : NULL;
    }
    return 0.0;
}
"#;

fn c_stub(table: &DispatchTable) -> String {
    let species = c_ident(&table.species);
    let mut out = format!("/* Dispatcher for {}. Generated; do not edit. */\n", table.species);
    out.push_str(C_PRELUDE);
    out.push('\n');
    for v in &table.variants {
        let _ = writeln!(out, "int {species}_{}(int argc, char **argv);", c_ident(&v.label));
    }
    out.push_str("\nint main(int argc, char **argv) {\n");
    out.push_str("    (void)sh_hour_of_day; (void)sh_cpu_count; (void)sh_dataset_bytes;\n");
    out.push_str("    (void)sh_dataset_width; (void)sh_dataset_height; (void)sh_has_tag;\n");
    emit_node(&table.tree, 0, 1, &species, &mut out);
    out.push_str("}\n");
    out
}

fn emit_node(tree: &DecisionTreeModel, i: usize, depth: usize, species: &str, out: &mut String) {
    let pad = "    ".repeat(depth);
    match &tree.nodes[i] {
        Node::Leaf { label, .. } => {
            let _ = writeln!(out, "{pad}return {species}_{}(argc, argv);", c_ident(label));
        }
        Node::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            let _ = writeln!(out, "{pad}if ({} < {threshold:?}) {{", c_feature_expr(feature));
            emit_node(tree, *left, depth + 1, species, out);
            let _ = writeln!(out, "{pad}}} else {{");
            emit_node(tree, *right, depth + 1, species, out);
            let _ = writeln!(out, "{pad}}}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flagspace::FlagSetting;
    use crate::statistics::{characterize, SampleSet};

    fn set() -> VariantSet {
        VariantSet::new(
            "threshold-filter",
            vec![
                Variant {
                    label: "A".into(),
                    choice: ChoiceVector::base("-O3").with("unroll-loops", FlagSetting::On),
                    artifact: None,
                },
                Variant {
                    label: "B".into(),
                    choice: ChoiceVector::base("-O2"),
                    artifact: None,
                },
            ],
        )
        .unwrap()
    }

    fn timed(t: f64) -> BehaviorVector {
        let samples = SampleSet::seconds(vec![t; 3]).unwrap();
        BehaviorVector {
            exec_time_s: Some(t),
            failed: false,
            log: None,
            summary: Some(characterize(&samples, DEFAULT_RELIABILITY_THRESHOLD)),
            samples: Some(samples),
            ..BehaviorVector::failure(0.0, "")
        }
    }

    fn hour(h: u32) -> BTreeMap<String, f64> {
        [(HOUR_OF_DAY.to_string(), h as f64)].into_iter().collect()
    }

    fn day_night(v: &Variant, p: &BTreeMap<String, f64>) -> BehaviorVector {
        let h = p[HOUR_OF_DAY];
        let day = (6.0..20.0).contains(&h);
        timed(if (v.label == "A") == day { 1.0 } else { 1.25 })
    }

    #[test]
    fn variant_sets_need_two_unique_labels() {
        let one = vec![set().variants[0].clone()];
        assert!(matches!(VariantSet::new("s", one.clone()), Err(DispatchError::TooFewVariants(1))));
        let dup = vec![one[0].clone(), one[0].clone()];
        assert!(matches!(VariantSet::new("s", dup), Err(DispatchError::DuplicateLabel(_))));
    }

    #[test]
    fn labels_follow_the_planted_rule() {
        let points: Vec<_> = (0..24).map(hour).collect();
        let (runs, skipped) = label_runs(&set(), &points, day_night);
        assert!(skipped.is_empty());
        for (h, r) in runs.iter().enumerate() {
            let want = if (6..20).contains(&h) { "A" } else { "B" };
            assert_eq!(r.best_variant, want, "hour {h}");
            assert!((r.margin - 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_and_unreliable_points() {
        let points = vec![hour(1), hour(2), hour(3)];
        let (runs, skipped) = label_runs(&set(), &points, |v, p| match p[HOUR_OF_DAY] as u32 {
            1 => timed(if v.label == "A" { 1.0 } else { 0.99 }),
            2 => {
                let mut b = timed(1.0);
                b.summary.as_mut().unwrap().reliable = false;
                b
            }
            _ => BehaviorVector::failure(0.0, "boom"),
        });
        assert_eq!(runs.len(), 1);
        assert!(runs[0].ambiguous);
        assert_eq!(runs[0].best_variant, "A");
        assert_eq!(runs[0].margin, 1.0);
        assert_eq!(skipped.len(), 2);
    }

    #[test]
    fn one_variant_everywhere_gives_a_leaf_and_direct_call() {
        let points: Vec<_> = (0..24).map(hour).collect();
        let (runs, _) = label_runs(&set(), &points, |v, _| timed(if v.label == "B" { 1.0 } else { 2.0 }));
        assert!(runs.iter().all(|r| r.best_variant == "B"));
        let tree = build_dispatch_tree(&runs, 4).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        let (_, stub) = emit_dispatcher(&set(), &tree).unwrap();
        let body = &stub[stub.find("int main").unwrap()..];
        assert_eq!(body.matches("return threshold_filter_").count(), 1);
        assert!(body.contains("return threshold_filter_B(argc, argv);"));
        assert!(!body.contains("if ("));
    }

    #[test]
    fn day_night_tree_and_stub() {
        let points: Vec<_> = (0..24).map(hour).collect();
        let (runs, _) = label_runs(&set(), &points, day_night);
        let tree = build_dispatch_tree(&runs, 4).unwrap();
        assert!(tree.depth <= 2);
        assert_eq!(tree.features_used(), vec![HOUR_OF_DAY.to_string()]);
        let (table, stub) = emit_dispatcher(&set(), &tree).unwrap();
        for h in 0..24 {
            assert_eq!(table.select(&hour(h)).unwrap().label, runs[h as usize].best_variant);
        }
        let body = &stub[stub.find("int main").unwrap()..];
        let splits = tree.nodes.iter().filter(|n| matches!(n, Node::Split { .. })).count();
        assert_eq!(body.matches("if (sh_hour_of_day(argc, argv) < ").count(), splits);
        assert_eq!(body.matches("return threshold_filter_").count(), splits + 1);
        assert!(body.contains("threshold_filter_A(argc, argv)"));
        assert!(body.contains("threshold_filter_B(argc, argv)"));
    }

    #[test]
    fn table_round_trips() {
        let points: Vec<_> = (0..24).map(hour).collect();
        let (runs, _) = label_runs(&set(), &points, day_night);
        let (table, _) = emit_dispatcher(&set(), &build_dispatch_tree(&runs, 4).unwrap()).unwrap();
        let text = table.to_json();
        assert_eq!(DispatchTable::from_json(&text).unwrap(), table);
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        for k in ["species", "variants", "tree", "features_required"] {
            assert!(doc.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn unextractable_features_rejected() {
        let rows = vec![
            [("ft29".to_string(), 0.0)].into_iter().collect(),
            [("ft29".to_string(), 1.0)].into_iter().collect(),
        ];
        let tree = predict::train_on_maps(&rows, &["A".into(), "B".into()], 2, 0).unwrap();
        assert!(matches!(emit_dispatcher(&set(), &tree), Err(DispatchError::UnextractableFeature(f)) if f == "ft29"));
        let tree = predict::train_on_maps(&[hour(1), hour(2)], &["A".into(), "C".into()], 2, 0).unwrap();
        assert!(matches!(emit_dispatcher(&set(), &tree), Err(DispatchError::UnknownVariant(l)) if l == "C"));
    }

    #[test]
    fn runtime_feature_names() {
        for ok in [HOUR_OF_DAY, CPU_COUNT, DATASET_WIDTH, DATASET_HEIGHT, DATASET_BYTES, "tag:large"] {
            assert!(is_runtime_feature(ok), "{ok}");
        }
        for bad in ["ft29", "tag:", "cycles"] {
            assert!(!is_runtime_feature(bad), "{bad}");
        }
    }

    #[test]
    fn runtime_features_from_dataset_and_state() {
        let mut d = DatasetDescriptor::named("img");
        d.features.insert("width".into(), 640.0);
        d.features.insert("height".into(), 480.0);
        d.features.insert("bytes".into(), 307215.0);
        d.tags.push("large".into());
        let mut s = StateVector::for_platform("p");
        s.wallclock_context.insert(HOUR_OF_DAY.into(), 13);
        s.wallclock_context.insert(CPU_COUNT.into(), 8);
        let f = runtime_features(&d, &s);
        assert_eq!(f[HOUR_OF_DAY], 13.0);
        assert_eq!(f[CPU_COUNT], 8.0);
        assert_eq!(f[DATASET_WIDTH], 640.0);
        assert_eq!(f[DATASET_HEIGHT], 480.0);
        assert_eq!(f[DATASET_BYTES], 307215.0);
        assert_eq!(f["tag:large"], 1.0);
    }

    #[test]
    fn c_identifiers() {
        assert_eq!(c_ident("threshold-filter"), "threshold_filter");
        assert_eq!(c_ident("3d"), "_3d");
    }

    #[test]
    fn stub_compiles_and_selects_by_dataset_size() {
        if std::process::Command::new("cc").arg("--version").output().is_err() {
            return;
        }
        let dir = tempfile::tempdir().unwrap();
        let bytes = |n: f64| -> BTreeMap<String, f64> { [(DATASET_BYTES.to_string(), n)].into_iter().collect() };
        let tree = predict::train_on_maps(
            &[bytes(10.0), bytes(20.0), bytes(1000.0), bytes(2000.0)],
            &["B".into(), "B".into(), "A".into(), "A".into()],
            2,
            0,
        )
        .unwrap();
        let (_, stub) = emit_dispatcher(&set(), &tree).unwrap();
        let variants = "#include <stdio.h>\n\
            int threshold_filter_A(int argc, char **argv) { (void)argc; (void)argv; puts(\"A\"); return 0; }\n\
            int threshold_filter_B(int argc, char **argv) { (void)argc; (void)argv; puts(\"B\"); return 0; }\n";
        std::fs::write(dir.path().join("main.c"), stub).unwrap();
        std::fs::write(dir.path().join("variants.c"), variants).unwrap();
        let bin = dir.path().join("dispatch");
        let out = std::process::Command::new("cc")
            .args(["-std=c99", "-Wall", "-Werror", "-o"])
            .arg(&bin)
            .arg(dir.path().join("main.c"))
            .arg(dir.path().join("variants.c"))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        for (size, want) in [(15usize, "B"), (1500, "A")] {
            let input = dir.path().join(format!("in{size}"));
            std::fs::write(&input, vec![0u8; size]).unwrap();
            let run = std::process::Command::new(&bin).arg(&input).output().unwrap();
            assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), want);
        }
    }
}
