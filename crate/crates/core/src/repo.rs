//! Filesystem-backed repository of addressable entries.
//!
//! Layout on disk:
//!
//! ```text
//! <root>/.repo.json                 repository identity (uid + alias)
//! <root>/<kind>/.alias              alias -> uid index
//! <root>/<kind>/.lock               kind-level writer lock
//! <root>/<kind>/<uid>/meta.json     canonical JSON metadata
//! <root>/<kind>/<uid>/<payload...>  payload files
//! ```
//!
//! Every entry is addressed by a three segment [`Cid`] (`repo:kind:entry`), each
//! segment being either a 16 hex character uid or an alias.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable naming the default repository root.
pub const REPO_ENV: &str = "SH_REPO";

const META_FILE: &str = "meta.json";
const ALIAS_FILE: &str = ".alias";
const LOCK_FILE: &str = ".lock";
const REPO_FILE: &str = ".repo.json";
const UID_LEN: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum RepoError {
    #[error("malformed CID `{0}`: expected three non-empty `:`-separated segments")]
    MalformedCid(String),
    #[error("invalid alias `{0}`")]
    InvalidAlias(String),
    #[error("alias `{alias}` already used for kind {kind}")]
    DuplicateAlias { kind: EntryKind, alias: String },
    #[error("unknown entry kind `{0}`")]
    UnknownKind(String),
    #[error("no {kind} entry `{reference}`")]
    NotFound { kind: EntryKind, reference: String },
    #[error("CID refers to repository `{0}`, which is not this repository")]
    ForeignRepo(String),
    #[error("invalid payload path `{0}`")]
    InvalidPath(String),
    #[error("not a repository: {0}")]
    NotARepo(PathBuf),
    #[error("storage failure at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt metadata at {path}: {source}")]
    Corrupt {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = RepoError> = std::result::Result<T, E>;

fn storage(path: &Path) -> impl FnOnce(io::Error) -> RepoError + '_ {
    move |source| RepoError::Storage {
        path: path.to_path_buf(),
        source,
    }
}

/// Kinds of entries held by a repository.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Species,
    Dataset,
    Platform,
    Experiment,
    Solution,
    Cluster,
    Model,
    Features,
}

impl EntryKind {
    pub const ALL: [EntryKind; 8] = [
        EntryKind::Species,
        EntryKind::Dataset,
        EntryKind::Platform,
        EntryKind::Experiment,
        EntryKind::Solution,
        EntryKind::Cluster,
        EntryKind::Model,
        EntryKind::Features,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::Species => "species",
            EntryKind::Dataset => "dataset",
            EntryKind::Platform => "platform",
            EntryKind::Experiment => "experiment",
            EntryKind::Solution => "solution",
            EntryKind::Cluster => "cluster",
            EntryKind::Model => "model",
            EntryKind::Features => "features",
        }
    }
}

impl fmt::Display for EntryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntryKind {
    type Err = RepoError;

    fn from_str(s: &str) -> Result<Self> {
        EntryKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| RepoError::UnknownKind(s.to_string()))
    }
}

/// True for exactly 16 lowercase hexadecimal characters.
pub fn is_uid(s: &str) -> bool {
    s.len() == UID_LEN && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Alias grammar: `[a-z0-9][a-z0-9._-]*`, and never a valid uid.
pub fn is_alias(s: &str) -> bool {
    let mut bytes = s.bytes();
    match bytes.next() {
        Some(b) if b.is_ascii_lowercase() || b.is_ascii_digit() => {}
        _ => return false,
    }
    bytes.all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'.' | b'_' | b'-'))
        && !is_uid(s)
}

/// Identity of an entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntryId {
    pub uid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
}

impl EntryId {
    /// The alias when present, otherwise the uid.
    pub fn display_name(&self) -> &str {
        self.alias.as_deref().unwrap_or(&self.uid)
    }
}

/// One segment of a CID: a uid or an alias.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IdRef {
    Uid(String),
    Alias(String),
}

impl IdRef {
    pub fn as_str(&self) -> &str {
        match self {
            IdRef::Uid(s) | IdRef::Alias(s) => s,
        }
    }
}

impl FromStr for IdRef {
    type Err = RepoError;

    fn from_str(s: &str) -> Result<Self> {
        if is_uid(s) {
            Ok(IdRef::Uid(s.to_string()))
        } else if is_alias(s) {
            Ok(IdRef::Alias(s.to_string()))
        } else {
            Err(RepoError::InvalidAlias(s.to_string()))
        }
    }
}

impl fmt::Display for IdRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Collective identifier `repo:kind:entry`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Cid {
    pub repo: IdRef,
    pub kind: IdRef,
    pub entry: IdRef,
}

/// Split a CID string into its three segments. Performs no store access.
pub fn resolve_cid(text: &str) -> Result<Cid> {
    let malformed = || RepoError::MalformedCid(text.to_string());
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
        return Err(malformed());
    }
    let seg = |s: &str| s.parse::<IdRef>().map_err(|_| malformed());
    Ok(Cid {
        repo: seg(parts[0])?,
        kind: seg(parts[1])?,
        entry: seg(parts[2])?,
    })
}

impl FromStr for Cid {
    type Err = RepoError;

    fn from_str(s: &str) -> Result<Self> {
        resolve_cid(s)
    }
}

impl fmt::Display for Cid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.repo, self.kind, self.entry)
    }
}

/// A loaded entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub id: EntryId,
    pub kind: EntryKind,
    pub meta: Value,
    /// Payload files, relative to the entry directory, sorted.
    pub files: Vec<String>,
}

/// Exact key-path equality filter over entry metadata.
///
/// Paths are dot separated (`"build.compiler"`). An empty filter matches everything.
#[derive(Debug, Clone, Default)]
pub struct MetaFilter {
    constraints: Vec<(Vec<String>, Value)>,
}

impl MetaFilter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn eq(mut self, path: &str, value: impl Into<Value>) -> Self {
        self.constraints
            .push((path.split('.').map(str::to_string).collect(), value.into()));
        self
    }

    pub fn matches(&self, meta: &Value) -> bool {
        self.constraints.iter().all(|(path, expected)| {
            path.iter()
                .try_fold(meta, |node, key| node.get(key))
                .is_some_and(|v| v == expected)
        })
    }
}

/// Serialize a document in canonical form: sorted keys, 2-space indent, trailing newline.
pub fn canonical_json(value: &Value) -> String {
    // serde_json's default map is ordered by key.
    let mut s = serde_json::to_string_pretty(value).expect("Value serialization is infallible");
    s.push('\n');
    s
}

/// Write `contents` to `path` via a temporary file and atomic rename.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(storage(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(storage(dir))?;
    tmp.write_all(contents).map_err(storage(path))?;
    tmp.as_file().sync_all().map_err(storage(path))?;
    tmp.persist(path).map_err(|e| RepoError::Storage {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Exclusive advisory file lock held until dropped.
#[derive(Debug)]
pub struct FileLock(File);

impl FileLock {
    pub fn acquire(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(storage(dir))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path)
            .map_err(storage(path))?;
        file.lock().map_err(storage(path))?;
        Ok(FileLock(file))
    }
}

impl Drop for FileLock {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RepoIdentity {
    uid: String,
    alias: String,
}

/// Handle to an on-disk repository.
#[derive(Debug)]
pub struct Repo {
    root: PathBuf,
    id: EntryId,
    rng: Mutex<ChaCha20Rng>,
}

impl Repo {
    /// Create (or reopen) a repository at `root`. The repository alias defaults to `local`.
    pub fn init(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        fs::create_dir_all(root).map_err(storage(root))?;
        let ident_path = root.join(REPO_FILE);
        if !ident_path.exists() {
            let mut rng = ChaCha20Rng::from_os_rng();
            let ident = RepoIdentity {
                uid: fresh_uid(&mut rng),
                alias: "local".to_string(),
            };
            let doc = serde_json::to_value(&ident).expect("identity serializes");
            atomic_write(&ident_path, canonical_json(&doc).as_bytes())?;
        }
        for kind in EntryKind::ALL {
            let dir = root.join(kind.as_str());
            fs::create_dir_all(&dir).map_err(storage(&dir))?;
        }
        Self::open(root)
    }

    /// Open an existing repository.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let ident_path = root.join(REPO_FILE);
        if !ident_path.is_file() {
            return Err(RepoError::NotARepo(root));
        }
        let text = fs::read_to_string(&ident_path).map_err(storage(&ident_path))?;
        let ident: RepoIdentity = serde_json::from_str(&text).map_err(|source| RepoError::Corrupt {
            path: ident_path.clone(),
            source,
        })?;
        Ok(Repo {
            root,
            id: EntryId {
                uid: ident.uid,
                alias: Some(ident.alias),
            },
            rng: Mutex::new(ChaCha20Rng::from_os_rng()),
        })
    }

    /// Replace the uid source with a seeded generator (reproducible uids).
    pub fn with_uid_seed(self, seed: u64) -> Self {
        Repo {
            rng: Mutex::new(ChaCha20Rng::seed_from_u64(seed)),
            ..self
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn id(&self) -> &EntryId {
        &self.id
    }

    fn kind_dir(&self, kind: EntryKind) -> PathBuf {
        self.root.join(kind.as_str())
    }

    /// Directory holding an entry's meta and payload files.
    pub fn entry_dir(&self, kind: EntryKind, uid: &str) -> PathBuf {
        self.kind_dir(kind).join(uid)
    }

    fn lock_kind(&self, kind: EntryKind) -> Result<FileLock> {
        FileLock::acquire(&self.kind_dir(kind).join(LOCK_FILE))
    }

    fn read_aliases(&self, kind: EntryKind) -> Result<BTreeMap<String, String>> {
        let path = self.kind_dir(kind).join(ALIAS_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|source| RepoError::Corrupt { path, source }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(BTreeMap::new()),
            Err(e) => Err(storage(&path)(e)),
        }
    }

    fn write_aliases(&self, kind: EntryKind, aliases: &BTreeMap<String, String>) -> Result<()> {
        let doc = serde_json::to_value(aliases).expect("alias map serializes");
        atomic_write(&self.kind_dir(kind).join(ALIAS_FILE), canonical_json(&doc).as_bytes())
    }

    fn next_uid(&self, kind: EntryKind) -> String {
        let mut rng = self.rng.lock().expect("uid rng poisoned");
        loop {
            let uid = fresh_uid(&mut *rng);
            if !self.entry_dir(kind, &uid).exists() {
                return uid;
            }
        }
    }

    /// Persist a new entry and return its identity.
    pub fn create_entry(&self, kind: EntryKind, alias: Option<&str>, meta: &Value) -> Result<EntryId> {
        if let Some(a) = alias {
            if !is_alias(a) {
                return Err(RepoError::InvalidAlias(a.to_string()));
            }
        }
        let _guard = self.lock_kind(kind)?;
        let mut aliases = self.read_aliases(kind)?;
        if let Some(a) = alias {
            if aliases.contains_key(a) {
                return Err(RepoError::DuplicateAlias {
                    kind,
                    alias: a.to_string(),
                });
            }
        }
        let uid = self.next_uid(kind);
        self.write_meta(kind, &uid, meta)?;
        if let Some(a) = alias {
            aliases.insert(a.to_string(), uid.clone());
            self.write_aliases(kind, &aliases)?;
        }
        Ok(EntryId {
            uid,
            alias: alias.map(str::to_string),
        })
    }

    /// Create the aliased entry, or replace its meta if the alias already exists.
    pub fn put_entry(&self, kind: EntryKind, alias: &str, meta: &Value) -> Result<EntryId> {
        if !is_alias(alias) {
            return Err(RepoError::InvalidAlias(alias.to_string()));
        }
        let existing = {
            let _guard = self.lock_kind(kind)?;
            self.read_aliases(kind)?.get(alias).cloned()
        };
        match existing {
            Some(uid) => {
                self.update_meta(kind, &uid, meta)?;
                Ok(EntryId {
                    uid,
                    alias: Some(alias.to_string()),
                })
            }
            None => match self.create_entry(kind, Some(alias), meta) {
                Err(RepoError::DuplicateAlias { .. }) => self.put_entry(kind, alias, meta),
                other => other,
            },
        }
    }

    fn write_meta(&self, kind: EntryKind, uid: &str, meta: &Value) -> Result<()> {
        let path = self.entry_dir(kind, uid).join(META_FILE);
        atomic_write(&path, canonical_json(meta).as_bytes())
    }

    /// Replace an entry's meta atomically under the entry lock.
    pub fn update_meta(&self, kind: EntryKind, uid: &str, meta: &Value) -> Result<()> {
        self.modify_meta(kind, uid, |_| Ok::<_, RepoError>(meta.clone())).map(drop)
    }

    /// Read-modify-write an entry's meta while holding its lock.
    pub fn modify_meta<E, F>(&self, kind: EntryKind, uid: &str, f: F) -> std::result::Result<Value, E>
    where
        E: From<RepoError>,
        F: FnOnce(Value) -> std::result::Result<Value, E>,
    {
        let dir = self.entry_dir(kind, uid);
        if !dir.join(META_FILE).is_file() {
            return Err(RepoError::NotFound {
                kind,
                reference: uid.to_string(),
            }
            .into());
        }
        let _guard = FileLock::acquire(&dir.join(LOCK_FILE))?;
        let current = self.read_meta(kind, uid)?;
        let next = f(current)?;
        self.write_meta(kind, uid, &next)?;
        Ok(next)
    }

    fn read_meta(&self, kind: EntryKind, uid: &str) -> Result<Value> {
        let path = self.entry_dir(kind, uid).join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            if e.kind() == io::ErrorKind::NotFound {
                RepoError::NotFound {
                    kind,
                    reference: uid.to_string(),
                }
            } else {
                storage(&path)(e)
            }
        })?;
        serde_json::from_str(&text).map_err(|source| RepoError::Corrupt { path, source })
    }

    /// Map a uid-or-alias reference to a uid.
    pub fn resolve_ref(&self, kind: EntryKind, reference: &str) -> Result<String> {
        let not_found = || RepoError::NotFound {
            kind,
            reference: reference.to_string(),
        };
        match reference.parse::<IdRef>().map_err(|_| not_found())? {
            IdRef::Uid(uid) => {
                if self.entry_dir(kind, &uid).join(META_FILE).is_file() {
                    Ok(uid)
                } else {
                    Err(not_found())
                }
            }
            IdRef::Alias(alias) => self.read_aliases(kind)?.remove(&alias).ok_or_else(not_found),
        }
    }

    fn alias_of(&self, kind: EntryKind, uid: &str) -> Result<Option<String>> {
        Ok(self
            .read_aliases(kind)?
            .into_iter()
            .find(|(_, u)| u == uid)
            .map(|(a, _)| a))
    }

    /// Load by uid or alias.
    pub fn load(&self, kind: EntryKind, reference: &str) -> Result<Entry> {
        let uid = self.resolve_ref(kind, reference)?;
        let alias = self.alias_of(kind, &uid)?;
        self.load_resolved(kind, uid, alias)
    }

    fn load_resolved(&self, kind: EntryKind, uid: String, alias: Option<String>) -> Result<Entry> {
        let meta = self.read_meta(kind, &uid)?;
        let dir = self.entry_dir(kind, &uid);
        let mut files = Vec::new();
        collect_files(&dir, &dir, &mut files)?;
        files.sort();
        Ok(Entry {
            id: EntryId { uid, alias },
            kind,
            meta,
            files,
        })
    }

    /// Load the entry a CID addresses. The repo segment must name this repository.
    pub fn load_cid(&self, cid: &Cid) -> Result<Entry> {
        let repo = cid.repo.as_str();
        if repo != self.id.uid && Some(repo) != self.id.alias.as_deref() {
            return Err(RepoError::ForeignRepo(repo.to_string()));
        }
        let kind: EntryKind = cid.kind.as_str().parse()?;
        self.load(kind, cid.entry.as_str())
    }

    /// All entries of `kind` whose meta satisfies `filter`, ordered by uid.
    pub fn find_entries(&self, kind: EntryKind, filter: &MetaFilter) -> Result<Vec<Entry>> {
        let dir = self.kind_dir(kind);
        let mut uids = Vec::new();
        let read = match fs::read_dir(&dir) {
            Ok(r) => r,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(storage(&dir)(e)),
        };
        for item in read {
            let item = item.map_err(storage(&dir))?;
            let name = item.file_name().to_string_lossy().into_owned();
            if is_uid(&name) && item.path().join(META_FILE).is_file() {
                uids.push(name);
            }
        }
        uids.sort();
        let aliases: BTreeMap<String, String> = self
            .read_aliases(kind)?
            .into_iter()
            .map(|(a, u)| (u, a))
            .collect();
        let mut out = Vec::new();
        for uid in uids {
            let alias = aliases.get(&uid).cloned();
            let entry = self.load_resolved(kind, uid, alias)?;
            if filter.matches(&entry.meta) {
                out.push(entry);
            }
        }
        Ok(out)
    }

    /// Store a payload file beside an entry's meta.
    pub fn add_file(&self, kind: EntryKind, uid: &str, rel: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.payload_path(kind, uid, rel)?;
        atomic_write(&path, contents)?;
        Ok(path)
    }

    /// Absolute path of a payload file. Rejects absolute paths and parent traversal.
    pub fn payload_path(&self, kind: EntryKind, uid: &str, rel: &str) -> Result<PathBuf> {
        if !is_safe_relative(rel) || rel == META_FILE {
            return Err(RepoError::InvalidPath(rel.to_string()));
        }
        Ok(self.entry_dir(kind, uid).join(rel))
    }
}

fn fresh_uid<R: Rng + ?Sized>(rng: &mut R) -> String {
    format!("{:016x}", rng.random::<u64>())
}

/// Relative, non-empty, and free of `..`, root, or prefix components.
pub fn is_safe_relative(rel: &str) -> bool {
    let p = Path::new(rel);
    !rel.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

fn collect_files(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for item in fs::read_dir(dir).map_err(storage(dir))? {
        let item = item.map_err(storage(dir))?;
        let path = item.path();
        let name = item.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        if path.is_dir() {
            collect_files(base, &path, out)?;
        } else if path != base.join(META_FILE) {
            let rel = path.strip_prefix(base).expect("child of base");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
