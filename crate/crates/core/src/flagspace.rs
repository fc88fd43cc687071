//! Compiler optimization flag spaces.
//!
//! Choices render as `-O3 -fX -fno-Y --param p=N`. A winning choice is reduced
//! to its influential flags and written in the `-fno-ALL` form, where every
//! boolean flag not mentioned is switched off.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Token appended in meta form when all unmentioned booleans are forced off.
pub const NO_ALL: &str = "-fno-ALL";
/// Default relative tolerance for flag reduction.
pub const DEFAULT_REDUCE_TOLERANCE: f64 = 0.02;

const GCC_46: &str = include_str!("../data/flagspaces/gcc-4.6.json");
const GCC_49: &str = include_str!("../data/flagspaces/gcc-4.9.json");
const LLVM_34: &str = include_str!("../data/flagspaces/llvm-3.4.json");

#[derive(Debug, thiserror::Error)]
pub enum FlagError {
    #[error("invalid flag space: {0}")]
    InvalidSpace(String),
    #[error("unknown flag space `{0}`")]
    UnknownSpace(String),
    #[error("cannot parse flag string at `{token}`: {reason}")]
    Parse { token: String, reason: String },
    #[error("flag `{0}` is not part of the space")]
    UnknownFlag(String),
    #[error("parameter `{name}` value {value} outside {lo}..={hi}")]
    ParamOutOfRange { name: String, value: i64, lo: i64, hi: i64 },
    #[error("probe unstable: repeated probes {0} and {1} disagree beyond tolerance")]
    UnstableProbe(f64, f64),
    #[error("probe failed: {0}")]
    Probe(String),
    #[error("flag space file: {0}")]
    Io(#[from] std::io::Error),
    #[error("flag space document: {0}")]
    Json(#[from] serde_json::Error),
}

/// A compiler's optimization space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagSpace {
    pub compiler: String,
    pub version: String,
    pub base_levels: Vec<String>,
    pub booleans: Vec<String>,
    #[serde(default)]
    pub params: BTreeMap<String, [i64; 2]>,
}

impl FlagSpace {
    pub fn validate(&self) -> Result<(), FlagError> {
        if self.base_levels.is_empty() {
            return Err(FlagError::InvalidSpace("no base levels".into()));
        }
        let mut seen = BTreeSet::new();
        for name in self.booleans.iter().chain(self.params.keys()) {
            if name.is_empty() || name.contains(char::is_whitespace) || name.contains('=') {
                return Err(FlagError::InvalidSpace(format!("bad flag name `{name}`")));
            }
            if !seen.insert(name.as_str()) {
                return Err(FlagError::InvalidSpace(format!("duplicate flag `{name}`")));
            }
        }
        if let Some((name, _)) = self.params.iter().find(|(_, [lo, hi])| lo > hi) {
            return Err(FlagError::InvalidSpace(format!("empty range for `{name}`")));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, FlagError> {
        let space: FlagSpace = serde_json::from_str(text)?;
        space.validate()?;
        Ok(space)
    }

    pub fn load(path: &Path) -> Result<Self, FlagError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// One of the shipped spaces: `gcc-4.6`, `gcc-4.9`, `llvm-3.4`.
    pub fn builtin(name: &str) -> Result<Self, FlagError> {
        let text = match name {
            "gcc-4.6" | "gcc-4.6.3" => GCC_46,
            "gcc-4.9" => GCC_49,
            "llvm-3.4" => LLVM_34,
            _ => return Err(FlagError::UnknownSpace(name.to_string())),
        };
        Self::from_json(text)
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["gcc-4.6", "gcc-4.9", "llvm-3.4"]
    }

    /// Compiler identifier as used in tuning keys, e.g. `gcc-4.6`.
    pub fn id(&self) -> String {
        format!("{}-{}", self.compiler, self.version)
    }

    pub fn has_boolean(&self, name: &str) -> bool {
        self.booleans.iter().any(|b| b == name)
    }

    /// Reject choices mentioning unknown flags or out-of-range parameters.
    pub fn check(&self, choice: &ChoiceVector) -> Result<(), FlagError> {
        if !self.base_levels.contains(&choice.base) {
            return Err(FlagError::UnknownFlag(choice.base.clone()));
        }
        if let Some(name) = choice.settings.keys().find(|n| !self.has_boolean(n)) {
            return Err(FlagError::UnknownFlag(name.clone()));
        }
        for (name, &value) in &choice.param_values {
            let [lo, hi] = *self
                .params
                .get(name)
                .ok_or_else(|| FlagError::UnknownFlag(name.clone()))?;
            if value < lo || value > hi {
                return Err(FlagError::ParamOutOfRange {
                    name: name.clone(),
                    value,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }
}

/// Explicit setting of a boolean flag. Flags absent from a choice are unset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlagSetting {
    On,
    Off,
    Unset,
}

/// An optimization choice: base level plus flag and parameter settings.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChoiceVector {
    pub base: String,
    /// Explicit on/off settings; never contains `Unset`.
    #[serde(default)]
    pub settings: BTreeMap<String, FlagSetting>,
    #[serde(default)]
    pub param_values: BTreeMap<String, i64>,
    #[serde(default)]
    pub no_all: bool,
}

impl ChoiceVector {
    pub fn base(level: &str) -> Self {
        ChoiceVector {
            base: level.to_string(),
            settings: BTreeMap::new(),
            param_values: BTreeMap::new(),
            no_all: false,
        }
    }

    pub fn with(mut self, flag: &str, setting: FlagSetting) -> Self {
        self.set(flag, setting);
        self
    }

    pub fn with_param(mut self, name: &str, value: i64) -> Self {
        self.param_values.insert(name.to_string(), value);
        self
    }

    pub fn with_no_all(mut self) -> Self {
        self.no_all = true;
        self.settings.retain(|_, s| *s == FlagSetting::On);
        self
    }

    pub fn set(&mut self, flag: &str, setting: FlagSetting) {
        match setting {
            FlagSetting::Unset => {
                self.settings.remove(flag);
            }
            s => {
                self.settings.insert(flag.to_string(), s);
            }
        }
    }

    pub fn setting(&self, flag: &str) -> FlagSetting {
        self.settings.get(flag).copied().unwrap_or(FlagSetting::Unset)
    }

    /// Boolean flags switched on, sorted by name.
    pub fn on_flags(&self) -> impl Iterator<Item = &str> {
        self.settings
            .iter()
            .filter(|(_, s)| **s == FlagSetting::On)
            .map(|(n, _)| n.as_str())
    }

    /// Whether the flag is effectively enabled.
    pub fn is_on(&self, flag: &str) -> bool {
        self.setting(flag) == FlagSetting::On
    }

    /// Whether the flag is effectively disabled, counting `-fno-ALL`.
    pub fn is_off(&self, flag: &str) -> bool {
        match self.setting(flag) {
            FlagSetting::Off => true,
            FlagSetting::Unset => self.no_all,
            FlagSetting::On => false,
        }
    }

    /// Meta-form rendering (see [`render`]).
    pub fn render(&self) -> String {
        render(self, RenderMode::Meta, None)
    }

    /// Number of reducible elements (on-flags plus parameters).
    pub fn element_count(&self) -> usize {
        self.on_flags().count() + self.param_values.len()
    }
}

impl fmt::Display for ChoiceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Sample a random choice. Each boolean is set (on or off, evenly) with
/// probability `density`, else left unset; each parameter is included with
/// probability `density` at a uniform value from its range.
pub fn sample(space: &FlagSpace, seed: u64, density: f64) -> ChoiceVector {
    sample_with(space, &mut ChaCha8Rng::seed_from_u64(seed), density)
}

pub fn sample_with<R: Rng + ?Sized>(space: &FlagSpace, rng: &mut R, density: f64) -> ChoiceVector {
    let density = density.clamp(0.0, 1.0);
    let base = space.base_levels[rng.random_range(0..space.base_levels.len())].clone();
    let mut choice = ChoiceVector::base(&base);
    for flag in &space.booleans {
        if rng.random_bool(density) {
            let s = if rng.random_bool(0.5) {
                FlagSetting::On
            } else {
                FlagSetting::Off
            };
            choice.set(flag, s);
        }
    }
    for (name, &[lo, hi]) in &space.params {
        if rng.random_bool(density) {
            choice.param_values.insert(name.clone(), rng.random_range(lo..=hi));
        }
    }
    choice
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    /// `-fno-ALL` kept as a literal token.
    Meta,
    /// `-fno-ALL` expanded into explicit `-fno-X` flags for a compiler invocation.
    Expanded,
}

/// Render a choice as a flag string: base, on-flags, off-flags, then parameters.
///
/// `Expanded` needs the space to enumerate the flags `-fno-ALL` stands for;
/// without one it falls back to meta form.
pub fn render(choice: &ChoiceVector, mode: RenderMode, space: Option<&FlagSpace>) -> String {
    let mut out = vec![choice.base.clone()];
    out.extend(choice.on_flags().map(|f| format!("-f{f}")));
    let expand = choice.no_all && mode == RenderMode::Expanded && space.is_some();
    if expand {
        let mut off: Vec<&str> = space
            .expect("checked above")
            .booleans
            .iter()
            .map(String::as_str)
            .filter(|f| !choice.is_on(f))
            .collect();
        off.sort_unstable();
        out.extend(off.iter().map(|f| format!("-fno-{f}")));
    } else if !choice.no_all {
        out.extend(
            choice
                .settings
                .iter()
                .filter(|(_, s)| **s == FlagSetting::Off)
                .map(|(f, _)| format!("-fno-{f}")),
        );
    }
    out.extend(
        choice
            .param_values
            .iter()
            .map(|(n, v)| format!("--param {n}={v}")),
    );
    if choice.no_all && !expand {
        out.push(NO_ALL.to_string());
    }
    out.join(" ")
}

/// Parse a flag string (meta or expanded form). Tokens may appear in any order
/// after the leading base level.
pub fn parse(text: &str) -> Result<ChoiceVector, FlagError> {
    let err = |token: &str, reason: &str| FlagError::Parse {
        token: token.to_string(),
        reason: reason.to_string(),
    };
    let mut tokens = text.split_whitespace();
    let base = tokens.next().ok_or_else(|| err("", "empty flag string"))?;
    if !base.starts_with("-O") {
        return Err(err(base, "expected a base level such as -O3"));
    }
    let mut choice = ChoiceVector::base(base);
    while let Some(tok) = tokens.next() {
        if tok == NO_ALL {
            choice.no_all = true;
        } else if tok == "--param" {
            let kv = tokens.next().ok_or_else(|| err(tok, "missing name=value"))?;
            parse_param(&mut choice, kv).map_err(|r| err(kv, r))?;
        } else if let Some(kv) = tok.strip_prefix("--param=") {
            parse_param(&mut choice, kv).map_err(|r| err(tok, r))?;
        } else if let Some(name) = tok.strip_prefix("-fno-") {
            if name.is_empty() {
                return Err(err(tok, "empty flag name"));
            }
            insert_setting(&mut choice, name, FlagSetting::Off).map_err(|r| err(tok, r))?;
        } else if let Some(name) = tok.strip_prefix("-f") {
            if name.is_empty() {
                return Err(err(tok, "empty flag name"));
            }
            insert_setting(&mut choice, name, FlagSetting::On).map_err(|r| err(tok, r))?;
        } else {
            return Err(err(tok, "unrecognized token"));
        }
    }
    if choice.no_all {
        choice.settings.retain(|_, s| *s == FlagSetting::On);
    }
    Ok(choice)
}

fn insert_setting(choice: &mut ChoiceVector, name: &str, s: FlagSetting) -> Result<(), &'static str> {
    if choice.settings.insert(name.to_string(), s).is_some() {
        return Err("flag appears more than once");
    }
    Ok(())
}

fn parse_param(choice: &mut ChoiceVector, kv: &str) -> Result<(), &'static str> {
    let (name, value) = kv.split_once('=').ok_or("expected name=value")?;
    let value: i64 = value.parse().map_err(|_| "parameter value is not an integer")?;
    if name.is_empty() {
        return Err("empty parameter name");
    }
    if choice.param_values.insert(name.to_string(), value).is_some() {
        return Err("parameter appears more than once");
    }
    Ok(())
}

/// Parse and validate against a space.
pub fn parse_in(space: &FlagSpace, text: &str) -> Result<ChoiceVector, FlagError> {
    let choice = parse(text)?;
    space.check(&choice)?;
    Ok(choice)
}

/// Measures the primary objective (lower is better) of a choice.
pub trait Probe {
    fn probe(&mut self, choice: &ChoiceVector) -> Result<f64, FlagError>;
}

impl<F> Probe for F
where
    F: FnMut(&ChoiceVector) -> Result<f64, FlagError>,
{
    fn probe(&mut self, choice: &ChoiceVector) -> Result<f64, FlagError> {
        self(choice)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Element {
    Flag(String),
    Param(String),
}

impl Element {
    fn name(&self) -> &str {
        match self {
            Element::Flag(n) | Element::Param(n) => n,
        }
    }
}

fn within(value: f64, target: f64, tolerance: f64) -> bool {
    (value - target).abs() <= tolerance * target.abs()
}

/// Reduce a choice to its influential flags in `-fno-ALL` form.
///
/// Greedy elimination: elements (on-flags and parameters) are tried for removal
/// in descending name order; a removal is kept when the probed objective stays
/// within `tolerance` (relative) of the original choice. Passes repeat until no
/// element can be removed, so every survivor is individually influential.
pub fn reduce<P: Probe + ?Sized>(
    choice: &ChoiceVector,
    probe: &mut P,
    tolerance: f64,
) -> Result<ChoiceVector, FlagError> {
    let first = probe.probe(choice)?;
    let second = probe.probe(choice)?;
    if !within(second, first, tolerance) {
        return Err(FlagError::UnstableProbe(first, second));
    }
    let target = (first + second) / 2.0;

    let mut current = choice.clone().with_no_all();
    loop {
        let mut elements: Vec<Element> = current
            .on_flags()
            .map(|f| Element::Flag(f.to_string()))
            .chain(current.param_values.keys().map(|p| Element::Param(p.clone())))
            .collect();
        elements.sort_by(|a, b| b.name().cmp(a.name()).then_with(|| b.cmp(a)));
        let mut removed_any = false;
        for element in elements {
            let mut trial = current.clone();
            match &element {
                Element::Flag(f) => trial.set(f, FlagSetting::Unset),
                Element::Param(p) => {
                    trial.param_values.remove(p);
                }
            }
            if within(probe.probe(&trial)?, target, tolerance) {
                current = trial;
                removed_any = true;
            }
        }
        if !removed_any {
            return Ok(current);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> FlagSpace {
        FlagSpace {
            compiler: "test".into(),
            version: "1".into(),
            base_levels: vec!["-O3".into()],
            booleans: vec!["a".into(), "b".into(), "c".into()],
            params: BTreeMap::new(),
        }
    }

    fn eight() -> FlagSpace {
        FlagSpace {
            booleans: (0..8).map(|i| format!("f{i}")).collect(),
            params: [("unroll".to_string(), [1, 8])].into_iter().collect(),
            ..abc()
        }
    }

    #[test]
    fn builtin_spaces_load() {
        for name in FlagSpace::builtin_names() {
            let s = FlagSpace::builtin(name).unwrap();
            assert!(s.booleans.len() >= 20, "{name}");
        }
        let gcc = FlagSpace::builtin("gcc-4.6").unwrap();
        assert!(gcc.has_boolean("if-conversion"));
        assert_eq!(gcc.id(), "gcc-4.6");
    }

    #[test]
    fn invalid_spaces() {
        let mut s = abc();
        s.booleans.push("a".into());
        assert!(s.validate().is_err());
        let mut s = abc();
        s.params.insert("p".into(), [3, 1]);
        assert!(s.validate().is_err());
        let mut s = abc();
        s.params.insert("a".into(), [0, 1]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn full_density_sets_everything() {
        let c = sample(&eight(), 1, 1.0);
        for f in &eight().booleans {
            assert_ne!(c.setting(f), FlagSetting::Unset);
        }
        assert!(c.param_values.contains_key("unroll"));
    }

    #[test]
    fn sample_renders_with_base_and_unique_flags() {
        let space = eight();
        for seed in 0..50 {
            let c = sample(&space, seed, 0.5);
            let s = c.render();
            assert!(s.starts_with("-O3"));
            let mut names = BTreeSet::new();
            for tok in s.split_whitespace().skip(1) {
                let name = tok
                    .trim_start_matches("-fno-")
                    .trim_start_matches("-f")
                    .split('=')
                    .next()
                    .unwrap()
                    .to_string();
                if tok != "--param" {
                    assert!(names.insert(name), "{s}");
                }
            }
            space.check(&c).unwrap();
        }
    }

    #[test]
    fn sample_is_deterministic() {
        assert_eq!(sample(&eight(), 42, 0.5), sample(&eight(), 42, 0.5));
        assert_ne!(sample(&eight(), 42, 0.5), sample(&eight(), 43, 0.5));
    }

    #[test]
    fn render_table_row() {
        let c = ChoiceVector::base("-O3")
            .with("if-conversion", FlagSetting::On)
            .with_no_all();
        assert_eq!(c.render(), "-O3 -fif-conversion -fno-ALL");
    }

    #[test]
    fn render_bare_base() {
        assert_eq!(ChoiceVector::base("-O3").render(), "-O3");
    }

    #[test]
    fn render_expanded() {
        let c = ChoiceVector::base("-O3").with("a", FlagSetting::On).with_no_all();
        assert_eq!(
            render(&c, RenderMode::Expanded, Some(&abc())),
            "-O3 -fa -fno-b -fno-c"
        );
    }

    #[test]
    fn render_explicit_off_and_params() {
        let c = ChoiceVector::base("-O2")
            .with("b", FlagSetting::Off)
            .with("a", FlagSetting::On)
            .with_param("max-inline-insns-auto", 88);
        assert_eq!(c.render(), "-O2 -fa -fno-b --param max-inline-insns-auto=88");
        assert_eq!(parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn parse_table_rows() {
        let c = parse("-O3 --param max-inline-insns-auto=88 -finline-functions -fno-ALL").unwrap();
        assert!(c.no_all);
        assert!(c.is_on("inline-functions"));
        assert_eq!(c.param_values["max-inline-insns-auto"], 88);
        assert_eq!(
            c.render(),
            "-O3 -finline-functions --param max-inline-insns-auto=88 -fno-ALL"
        );
        let gcc = FlagSpace::builtin("gcc-4.6").unwrap();
        parse_in(&gcc, "-O3 -fregmove -ftree-vrp -fno-ALL").unwrap();
    }

    #[test]
    fn parse_errors() {
        assert!(parse("").is_err());
        assert!(parse("-fa").is_err());
        assert!(parse("-O3 -fa -fa").is_err());
        assert!(parse("-O3 --param").is_err());
        assert!(parse("-O3 --param x=y").is_err());
        assert!(parse("-O3 bogus").is_err());
        assert!(matches!(
            parse_in(&abc(), "-O3 -fz"),
            Err(FlagError::UnknownFlag(_))
        ));
    }

    fn mock_probe(effects: &'static [(&'static str, f64)]) -> impl FnMut(&ChoiceVector) -> Result<f64, FlagError> {
        move |c: &ChoiceVector| {
            Ok(effects
                .iter()
                .filter(|(f, _)| c.is_on(f) || c.param_values.contains_key(*f))
                .fold(1.0, |t, (_, m)| t * m))
        }
    }

    fn five_on() -> ChoiceVector {
        ["if-conversion", "tree-vrp", "gcse", "dce", "web"]
            .iter()
            .fold(ChoiceVector::base("-O3"), |c, f| c.with(f, FlagSetting::On))
    }

    #[test]
    fn reduce_single_influential() {
        let mut probe = mock_probe(&[("if-conversion", 0.85)]);
        let r = reduce(&five_on(), &mut probe, DEFAULT_REDUCE_TOLERANCE).unwrap();
        assert_eq!(r.render(), "-O3 -fif-conversion -fno-ALL");
    }

    #[test]
    fn reduce_matches_exhaustive_subset_oracle() {
        // Oracle: smallest subset of the on-flags whose probed time matches the original.
        let effects: &'static [(&'static str, f64)] = &[("if-conversion", 0.85)];
        let full = five_on();
        let on: Vec<&str> = full.on_flags().collect();
        let mut probe = mock_probe(effects);
        let target = probe(&full).unwrap();
        let mut best: Option<Vec<&str>> = None;
        for mask in 0u32..(1 << on.len()) {
            let subset: Vec<&str> = (0..on.len()).filter(|i| mask & (1 << i) != 0).map(|i| on[i]).collect();
            let c = subset
                .iter()
                .fold(ChoiceVector::base("-O3"), |c, f| c.with(f, FlagSetting::On))
                .with_no_all();
            if within(probe(&c).unwrap(), target, DEFAULT_REDUCE_TOLERANCE)
                && best.as_ref().is_none_or(|b| subset.len() < b.len())
            {
                best = Some(subset);
            }
        }
        let reduced = reduce(&full, &mut probe, DEFAULT_REDUCE_TOLERANCE).unwrap();
        assert_eq!(reduced.on_flags().collect::<Vec<_>>(), best.unwrap());
    }

    #[test]
    fn reduce_insensitive_probe() {
        let mut probe = |_: &ChoiceVector| Ok(1.0);
        let r = reduce(&five_on().with_param("x", 3), &mut probe, 0.02).unwrap();
        assert_eq!(r.render(), "-O3 -fno-ALL");
    }

    #[test]
    fn reduce_two_independent_flags() {
        let mut probe = mock_probe(&[("gcse", 0.8), ("web", 1.3)]);
        let r = reduce(&five_on(), &mut probe, 0.02).unwrap();
        assert_eq!(r.on_flags().collect::<Vec<_>>(), vec!["gcse", "web"]);

        // Ascending-order elimination lands on the same set.
        let target = probe(&five_on()).unwrap();
        let mut current = five_on().with_no_all();
        let names: Vec<String> = current.on_flags().map(str::to_string).collect();
        for f in names {
            let trial = current.clone().with(&f, FlagSetting::Unset);
            if within(probe(&trial).unwrap(), target, 0.02) {
                current = trial;
            }
        }
        assert_eq!(current, r);
    }

    #[test]
    fn reduce_params() {
        let c = five_on().with_param("max-inline-insns-auto", 88).with_param("unroll", 4);
        let mut probe = mock_probe(&[("max-inline-insns-auto", 0.7)]);
        let r = reduce(&c, &mut probe, 0.02).unwrap();
        assert_eq!(r.render(), "-O3 --param max-inline-insns-auto=88 -fno-ALL");
    }

    #[test]
    fn reduce_unstable_probe() {
        let mut n = 0;
        let mut probe = |_: &ChoiceVector| {
            n += 1;
            Ok(n as f64)
        };
        assert!(matches!(
            reduce(&five_on(), &mut probe, 0.02),
            Err(FlagError::UnstableProbe(..))
        ));
    }

    #[test]
    fn reduce_idempotent() {
        let mut probe = mock_probe(&[("gcse", 0.8), ("dce", 0.9)]);
        let once = reduce(&five_on(), &mut probe, 0.02).unwrap();
        let twice = reduce(&once, &mut probe, 0.02).unwrap();
        assert_eq!(once, twice);
    }
}
