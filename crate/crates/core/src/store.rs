//! Embedded, file-backed warehouse store.
//!
//! Facts, dimension members, documents and links are append-only. Every
//! insert is checked for referential integrity, grain uniqueness and
//! canonical units before it becomes visible. The on-disk layout is described
//! in `docs/storage-format.md`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::PatientGroup;
use crate::dimension::{
    Attributes, Bus, DatamartDef, DatamartHandle, DimensionDef, DimensionHandle, DimensionMember, FactDef, FactRole,
    MeasureKind, MemberSpec, SchemaError, SchemaSnapshot, SurrogateKey, TimePoint, CANONICAL_UNIT_ATTR,
    MEDICAL_ANALYSIS, TIME,
};
use crate::etl::EtlProfile;
use crate::metadata::{MetadataEntry, MetadataError, MetadataRegistry, Registered};
use crate::schema::{default_bus, SchemaFile};

pub const STORE_FORMAT: &str = "biodw-store";
pub const STORE_VERSION: u32 = 1;

const MANIFEST: &str = "store.json";
const SCHEMA: &str = "schema.json";
const STATE: &str = "state.json";
const MEMBERS: &str = "members.jsonl";
const FACTS: &str = "facts.jsonl";
const METADATA: &str = "metadata.jsonl";
const DOCUMENTS: &str = "documents.jsonl";
const LINKS: &str = "links.jsonl";
const GROUPS: &str = "groups.json";
const PROFILES: &str = "profiles.json";
const BLOBS: &str = "blobs";
pub const REPORTS_DIR: &str = "reports";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FactId(pub u64);

impl fmt::Display for FactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Lowercase hex SHA-256 of a document's bytes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocumentId(pub String);

impl DocumentId {
    pub fn of(bytes: &[u8]) -> Self {
        DocumentId(hex::encode(Sha256::digest(bytes)))
    }

    fn is_well_formed(&self) -> bool {
        self.0.len() == 64 && self.0.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
    }
}

impl fmt::Display for DocumentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasureValue {
    Numeric { value: f64, unit: String },
    Text { text: String },
    DocumentRef { document: DocumentId },
}

impl MeasureValue {
    pub fn numeric(value: f64, unit: impl Into<String>) -> Self {
        MeasureValue::Numeric { value, unit: unit.into() }
    }

    pub fn text(text: impl Into<String>) -> Self {
        MeasureValue::Text { text: text.into() }
    }

    pub fn kind(&self) -> MeasureKind {
        match self {
            MeasureValue::Numeric { .. } => MeasureKind::Numeric,
            MeasureValue::Text { .. } => MeasureKind::Text,
            MeasureValue::DocumentRef { .. } => MeasureKind::DocumentRef,
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            MeasureValue::Numeric { value, .. } => Some(*value),
            _ => None,
        }
    }

    /// Cell text used by delimited exports; numbers use the shortest exact form.
    pub fn display_value(&self) -> String {
        match self {
            MeasureValue::Numeric { value, .. } => format!("{value}"),
            MeasureValue::Text { text } => text.clone(),
            MeasureValue::DocumentRef { document } => document.0.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactRecord {
    pub fact_def: String,
    pub measure: MeasureValue,
    pub dim_keys: BTreeMap<String, SurrogateKey>,
    pub load_batch: String,
    /// Report row a complex-fact result belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<FactId>,
}

impl FactRecord {
    pub fn new(fact_def: impl Into<String>, measure: MeasureValue, load_batch: impl Into<String>) -> Self {
        Self { fact_def: fact_def.into(), measure, dim_keys: BTreeMap::new(), load_batch: load_batch.into(), report: None }
    }

    pub fn with_key(mut self, dimension: impl Into<String>, key: SurrogateKey) -> Self {
        self.dim_keys.insert(dimension.into(), key);
        self
    }

    pub fn key(&self, dimension: &str) -> Option<SurrogateKey> {
        self.dim_keys.get(dimension).copied()
    }
}

/// A fact with the id the store assigned to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredFact {
    pub id: FactId,
    #[serde(flatten)]
    pub record: FactRecord,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "fact_id", rename_all = "snake_case")]
pub enum InsertOutcome {
    Inserted(FactId),
    /// The grain was already present; nothing changed. Carries the existing fact.
    Duplicate(FactId),
}

impl InsertOutcome {
    pub fn fact_id(self) -> FactId {
        match self {
            InsertOutcome::Inserted(id) | InsertOutcome::Duplicate(id) => id,
        }
    }

    pub fn is_duplicate(self) -> bool {
        matches!(self, InsertOutcome::Duplicate(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentEntry {
    pub id: DocumentId,
    pub media_type: String,
    pub byte_length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

/// Cardio-vascular style complex fact: a report, its numeric results and the
/// documents it refers to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexFactBundle {
    pub report: FactRecord,
    #[serde(default)]
    pub results: Vec<FactRecord>,
    #[serde(default)]
    pub documents: Vec<DocumentId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleOutcome {
    pub report: InsertOutcome,
    pub results: Vec<InsertOutcome>,
    pub links_added: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkOutcome {
    Added,
    AlreadyLinked,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OpenMode {
    Create,
    Open,
}

/// Member selector used in fact filters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberRef {
    Key(SurrogateKey),
    Natural(String),
}

/// Facts whose `dimension` member rolls up to the given member at `level`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberPredicate {
    pub dimension: String,
    pub level: String,
    pub member: MemberRef,
}

impl MemberPredicate {
    pub fn natural(dimension: impl Into<String>, level: impl Into<String>, key: impl Into<String>) -> Self {
        Self { dimension: dimension.into(), level: level.into(), member: MemberRef::Natural(key.into()) }
    }

    pub fn key(dimension: impl Into<String>, level: impl Into<String>, key: SurrogateKey) -> Self {
        Self { dimension: dimension.into(), level: level.into(), member: MemberRef::Key(key) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactFilter {
    #[serde(default)]
    pub mart: Option<String>,
    #[serde(default)]
    pub fact_def: Option<String>,
    #[serde(default)]
    pub members: Vec<MemberPredicate>,
    /// Inclusive bounds on the instant timestamp.
    #[serde(default)]
    pub from: Option<NaiveDateTime>,
    #[serde(default)]
    pub to: Option<NaiveDateTime>,
}

impl FactFilter {
    pub fn mart(mut self, mart: impl Into<String>) -> Self {
        self.mart = Some(mart.into());
        self
    }

    pub fn fact_def(mut self, fact_def: impl Into<String>) -> Self {
        self.fact_def = Some(fact_def.into());
        self
    }

    pub fn member(mut self, predicate: MemberPredicate) -> Self {
        self.members.push(predicate);
        self
    }

    pub fn between(mut self, from: Option<NaiveDateTime>, to: Option<NaiveDateTime>) -> Self {
        self.from = from;
        self.to = to;
        self
    }
}

/// Violations found by [`Warehouse::audit`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub facts_scanned: usize,
    pub referential: Vec<String>,
    pub units: Vec<String>,
    pub grain: Vec<String>,
    pub complex: Vec<String>,
    pub hierarchy: Vec<String>,
}

impl AuditReport {
    pub fn violation_count(&self) -> usize {
        self.referential.len() + self.units.len() + self.grain.len() + self.complex.len() + self.hierarchy.len()
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt store file {file} (line {line}): {reason}")]
    Corrupt { file: String, line: usize, reason: String },
    #[error("store format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("cannot create a store at {0}: location is not empty")]
    LocationConflict(PathBuf),
    #[error("no store at {0}")]
    NotAStore(PathBuf),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error("unknown fact table `{0}`")]
    UnknownFact(String),
    #[error("fact table `{fact}` holds {expected:?} measures, got {found:?}")]
    MeasureKind { fact: String, expected: MeasureKind, found: MeasureKind },
    #[error("fact table `{fact}` binds {expected:?}, record carries {found:?}")]
    BindingMismatch { fact: String, expected: Vec<String>, found: Vec<String> },
    #[error("referential integrity: key {key} is not a leaf member of `{dimension}`")]
    ReferentialIntegrity { dimension: String, key: SurrogateKey },
    #[error("unit `{found}` is not the canonical unit `{expected}` of analysis `{analysis}`")]
    UnitMismatch { analysis: String, expected: String, found: String },
    #[error("analysis `{0}` has no canonical unit")]
    NoCanonicalUnit(String),
    #[error("numeric measure is not finite")]
    NonFinite,
    #[error("result of `{fact}` must reference a `{report}` fact")]
    MissingReport { fact: String, report: String },
    #[error("fact `{0}` only accepts a report reference when it is a result table")]
    UnexpectedReport(String),
    #[error("unknown fact {0}")]
    UnknownFactId(FactId),
    #[error("fact {0} is not a complex-fact report")]
    NotAReport(FactId),
    #[error("document content is empty")]
    EmptyDocument,
    #[error("unknown document {0}")]
    UnknownDocument(DocumentId),
    #[error("canonical code `{0}` is neither cataloged nor an existing analysis")]
    UnknownCanonicalCode(String),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize, Default)]
struct State {
    generation: u64,
}

#[derive(Serialize, Deserialize)]
struct LinkRow {
    report: FactId,
    document: DocumentId,
}

#[derive(Default)]
struct Pending {
    appends: Vec<(&'static str, String)>,
    blobs: Vec<(DocumentId, Vec<u8>)>,
    schema: bool,
    groups: bool,
    profiles: bool,
}

impl Pending {
    fn is_empty(&self) -> bool {
        self.appends.is_empty() && self.blobs.is_empty() && !self.schema && !self.groups && !self.profiles
    }
}

/// The warehouse: the dimension bus plus every fact table, document, link and
/// registry built on top of it.
///
/// Mutating methods take `&mut self`; callers sharing a warehouse across
/// threads wrap it in a `RwLock` so writers are serialized and readers see a
/// consistent snapshot.
pub struct Warehouse {
    bus: Bus,
    facts: Vec<StoredFact>,
    grain: HashMap<(String, Vec<SurrogateKey>), FactId>,
    documents: BTreeMap<DocumentId, DocumentEntry>,
    memory_blobs: HashMap<DocumentId, Vec<u8>>,
    links: BTreeSet<(FactId, DocumentId)>,
    metadata: MetadataRegistry,
    groups: BTreeMap<String, PatientGroup>,
    profiles: BTreeMap<String, EtlProfile>,
    generation: u64,
    root: Option<PathBuf>,
    pending: Pending,
    deferred: bool,
}

impl Warehouse {
    fn from_bus(bus: Bus, root: Option<PathBuf>) -> Self {
        Self {
            bus,
            facts: Vec::new(),
            grain: HashMap::new(),
            documents: BTreeMap::new(),
            memory_blobs: HashMap::new(),
            links: BTreeSet::new(),
            metadata: MetadataRegistry::new(),
            groups: BTreeMap::new(),
            profiles: BTreeMap::new(),
            generation: 0,
            root,
            pending: Pending::default(),
            deferred: false,
        }
    }

    /// A store with the built-in schema that lives only in memory.
    pub fn in_memory() -> Self {
        Self::from_bus(default_bus(), None)
    }

    pub fn open(location: impl AsRef<Path>, mode: OpenMode) -> Result<Self, StoreError> {
        match mode {
            OpenMode::Create => Self::create(location, None),
            OpenMode::Open => Self::open_existing(location.as_ref()),
        }
    }

    /// Creates a store with the built-in schema, extended by `schema` when given.
    pub fn create(location: impl AsRef<Path>, schema: Option<&SchemaFile>) -> Result<Self, StoreError> {
        let root = location.as_ref();
        if root.exists() {
            if !root.is_dir() || fs::read_dir(root)?.next().is_some() {
                return Err(StoreError::LocationConflict(root.to_path_buf()));
            }
        } else {
            fs::create_dir_all(root)?;
        }
        let mut bus = default_bus();
        if let Some(schema) = schema {
            schema.apply(&mut bus)?;
        }
        fs::create_dir_all(root.join(BLOBS))?;
        fs::create_dir_all(root.join(REPORTS_DIR))?;
        for file in [MEMBERS, FACTS, METADATA, DOCUMENTS, LINKS] {
            File::create(root.join(file))?;
        }
        let manifest = Manifest { format: STORE_FORMAT.into(), version: STORE_VERSION };
        write_json(&root.join(MANIFEST), &manifest)?;
        let mut wh = Self::from_bus(bus, Some(root.to_path_buf()));
        wh.pending.schema = true;
        wh.pending.groups = true;
        wh.pending.profiles = true;
        wh.flush()?;
        Ok(wh)
    }

    fn open_existing(root: &Path) -> Result<Self, StoreError> {
        let manifest_path = root.join(MANIFEST);
        if !manifest_path.is_file() {
            return Err(StoreError::NotAStore(root.to_path_buf()));
        }
        let manifest: Manifest = read_json(&manifest_path, MANIFEST)?;
        if manifest.format != STORE_FORMAT {
            return Err(StoreError::Corrupt { file: MANIFEST.into(), line: 1, reason: format!("unknown format `{}`", manifest.format) });
        }
        if manifest.version != STORE_VERSION {
            return Err(StoreError::VersionMismatch { found: manifest.version, expected: STORE_VERSION });
        }
        let snapshot: SchemaSnapshot = read_json(&root.join(SCHEMA), SCHEMA)?;
        let bus = Bus::from_snapshot(snapshot).map_err(|e| corrupt(SCHEMA, 0, e))?;
        let mut wh = Self::from_bus(bus, Some(root.to_path_buf()));

        for_each_line::<DimensionMember>(&root.join(MEMBERS), MEMBERS, |line, m| {
            wh.bus.restore_member(m).map_err(|e| corrupt(MEMBERS, line, e))
        })?;
        for_each_line::<MetadataEntry>(&root.join(METADATA), METADATA, |line, e| {
            wh.metadata.register(e).map(|_| ()).map_err(|e| corrupt(METADATA, line, e))
        })?;
        for_each_line::<DocumentEntry>(&root.join(DOCUMENTS), DOCUMENTS, |line, d| {
            if !d.id.is_well_formed() || !root.join(BLOBS).join(&d.id.0).is_file() {
                return Err(corrupt(DOCUMENTS, line, format!("missing blob for {}", d.id)));
            }
            wh.documents.insert(d.id.clone(), d);
            Ok(())
        })?;
        for_each_line::<StoredFact>(&root.join(FACTS), FACTS, |line, f| {
            if f.id.0 != wh.facts.len() as u64 + 1 {
                return Err(corrupt(FACTS, line, format!("fact id {} out of sequence", f.id)));
            }
            wh.check_fact(&f.record).map_err(|e| corrupt(FACTS, line, e))?;
            let grain = wh.grain_key(&f.record)?;
            if wh.grain.insert(grain, f.id).is_some() {
                return Err(corrupt(FACTS, line, "duplicate grain"));
            }
            wh.facts.push(f);
            Ok(())
        })?;
        for_each_line::<LinkRow>(&root.join(LINKS), LINKS, |line, l| {
            wh.check_link(l.report, &l.document).map_err(|e| corrupt(LINKS, line, e))?;
            wh.links.insert((l.report, l.document));
            Ok(())
        })?;
        wh.groups = read_json(&root.join(GROUPS), GROUPS)?;
        wh.profiles = read_json(&root.join(PROFILES), PROFILES)?;
        let state: State = read_json(&root.join(STATE), STATE)?;
        wh.generation = state.generation;
        Ok(wh)
    }

    pub fn location(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Counter bumped by every flushed mutation; lets clients detect stale views.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn metadata(&self) -> &MetadataRegistry {
        &self.metadata
    }

    // ---- writes -----------------------------------------------------------

    /// Runs `f` with durability deferred to its end, writing all of its changes at once.
    pub fn batch<T, E>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, E>) -> Result<T, E>
    where
        E: From<StoreError>,
    {
        let outer = std::mem::replace(&mut self.deferred, true);
        let out = f(self);
        self.deferred = outer;
        if !outer {
            self.flush()?;
        }
        out
    }

    fn commit(&mut self) -> Result<(), StoreError> {
        if self.deferred {
            Ok(())
        } else {
            self.flush()
        }
    }

    fn flush(&mut self) -> Result<(), StoreError> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let pending = std::mem::take(&mut self.pending);
        self.generation += 1;
        let Some(root) = self.root.clone() else {
            for (id, bytes) in pending.blobs {
                self.memory_blobs.insert(id, bytes);
            }
            return Ok(());
        };
        for (id, bytes) in &pending.blobs {
            let path = root.join(BLOBS).join(&id.0);
            if !path.exists() {
                let tmp = root.join(BLOBS).join(format!("{}.tmp", id.0));
                fs::write(&tmp, bytes)?;
                fs::rename(&tmp, &path)?;
            }
        }
        let mut by_file: BTreeMap<&str, String> = BTreeMap::new();
        for (file, line) in &pending.appends {
            let buf = by_file.entry(file).or_default();
            buf.push_str(line);
            buf.push('\n');
        }
        // members before facts, so a crash never leaves facts pointing nowhere
        for file in [MEMBERS, METADATA, DOCUMENTS, FACTS, LINKS] {
            if let Some(buf) = by_file.get(file) {
                let mut f = OpenOptions::new().append(true).open(root.join(file))?;
                f.write_all(buf.as_bytes())?;
                f.flush()?;
            }
        }
        if pending.schema {
            write_json(&root.join(SCHEMA), &self.bus.snapshot())?;
        }
        if pending.groups {
            write_json(&root.join(GROUPS), &self.groups)?;
        }
        if pending.profiles {
            write_json(&root.join(PROFILES), &self.profiles)?;
        }
        write_json(&root.join(STATE), &State { generation: self.generation })?;
        Ok(())
    }

    fn append<T: Serialize>(&mut self, file: &'static str, row: &T) {
        let line = serde_json::to_string(row).expect("store rows serialize");
        self.pending.appends.push((file, line));
    }

    pub fn define_dimension(&mut self, def: DimensionDef) -> Result<DimensionHandle, StoreError> {
        let handle = self.bus.define_dimension(def)?;
        self.pending.schema = true;
        self.commit()?;
        Ok(handle)
    }

    pub fn register_datamart(&mut self, def: DatamartDef) -> Result<DatamartHandle, StoreError> {
        let handle = self.bus.register_datamart(def)?;
        self.pending.schema = true;
        self.commit()?;
        Ok(handle)
    }

    pub fn apply_schema(&mut self, schema: &SchemaFile) -> Result<(), StoreError> {
        // validate against a scratch copy so a failing file leaves the bus untouched
        let mut scratch = Bus::from_snapshot(self.bus.snapshot())?;
        schema.apply(&mut scratch)?;
        schema.apply(&mut self.bus)?;
        self.pending.schema = true;
        self.commit()
    }

    pub fn add_member(
        &mut self,
        dimension: &str,
        level: &str,
        natural_key: &str,
        attributes: Attributes,
        parent: Option<SurrogateKey>,
    ) -> Result<SurrogateKey, StoreError> {
        let key = self.bus.add_member(dimension, level, natural_key, attributes, parent)?;
        self.record_member(key);
        self.commit()?;
        Ok(key)
    }

    /// Finds or creates a root-to-leaf member path; returns the leaf and how many members were created.
    pub fn ensure_path(&mut self, dimension: &str, path: &[MemberSpec]) -> Result<(SurrogateKey, usize), StoreError> {
        let before = self.bus.all_members().len();
        let out = self.bus.ensure_path(dimension, path);
        let after = self.bus.all_members().len();
        for k in before..after {
            self.record_member(SurrogateKey(k as u64 + 1));
        }
        let out = out?;
        self.commit()?;
        Ok(out)
    }

    pub fn ensure_time(&mut self, point: &TimePoint) -> Result<(SurrogateKey, usize), StoreError> {
        self.ensure_path(TIME, &point.member_path())
    }

    fn record_member(&mut self, key: SurrogateKey) {
        let member = self.bus.member(key).expect("member just added").clone();
        self.append(MEMBERS, &member);
    }

    pub fn register_metadata(&mut self, entry: MetadataEntry) -> Result<Registered, StoreError> {
        if let MetadataEntry::Label(m) = &entry {
            let known = self.metadata.analysis(&m.canonical_code).is_some()
                || self.bus.find_member(MEDICAL_ANALYSIS, "analysis", &m.canonical_code)?.is_some();
            if !known {
                return Err(StoreError::UnknownCanonicalCode(m.canonical_code.clone()));
            }
        }
        let outcome = self.metadata.register(entry.clone())?;
        if outcome == Registered::Added {
            self.append(METADATA, &entry);
            self.commit()?;
        }
        Ok(outcome)
    }

    pub fn insert_fact(&mut self, record: FactRecord) -> Result<InsertOutcome, StoreError> {
        self.check_fact(&record)?;
        let grain = self.grain_key(&record)?;
        if let Some(existing) = self.grain.get(&grain) {
            return Ok(InsertOutcome::Duplicate(*existing));
        }
        let id = FactId(self.facts.len() as u64 + 1);
        self.grain.insert(grain, id);
        let fact = StoredFact { id, record };
        self.append(FACTS, &fact);
        self.facts.push(fact);
        self.commit()?;
        Ok(InsertOutcome::Inserted(id))
    }

    fn check_fact(&self, record: &FactRecord) -> Result<(), StoreError> {
        let (_, def) = self
            .bus
            .fact_def(&record.fact_def)
            .ok_or_else(|| StoreError::UnknownFact(record.fact_def.clone()))?;
        let found = record.measure.kind();
        if found != def.measure_kind {
            return Err(StoreError::MeasureKind { fact: def.name.clone(), expected: def.measure_kind, found });
        }
        let bound: BTreeSet<&String> = def.dimension_bindings.iter().collect();
        let given: BTreeSet<&String> = record.dim_keys.keys().collect();
        if bound != given {
            return Err(StoreError::BindingMismatch {
                fact: def.name.clone(),
                expected: def.dimension_bindings.clone(),
                found: record.dim_keys.keys().cloned().collect(),
            });
        }
        for (dimension, key) in &record.dim_keys {
            let leaf = self.bus.dimension(dimension)?.leaf().name.clone();
            let ok = self.bus.member(*key).is_some_and(|m| m.dimension == *dimension && m.level == leaf);
            if !ok {
                return Err(StoreError::ReferentialIntegrity { dimension: dimension.clone(), key: *key });
            }
        }
        match &record.measure {
            MeasureValue::Numeric { value, unit } => {
                if !value.is_finite() {
                    return Err(StoreError::NonFinite);
                }
                let analysis = self
                    .bus
                    .member(record.dim_keys[MEDICAL_ANALYSIS])
                    .expect("analysis key checked above");
                let canonical = analysis
                    .attribute(CANONICAL_UNIT_ATTR)
                    .ok_or_else(|| StoreError::NoCanonicalUnit(analysis.natural_key.clone()))?;
                if canonical != unit {
                    return Err(StoreError::UnitMismatch {
                        analysis: analysis.natural_key.clone(),
                        expected: canonical.into(),
                        found: unit.clone(),
                    });
                }
            }
            MeasureValue::DocumentRef { document } => {
                if !self.documents.contains_key(document) {
                    return Err(StoreError::UnknownDocument(document.clone()));
                }
            }
            MeasureValue::Text { .. } => {}
        }
        match (&def.role, record.report) {
            (FactRole::Result { report }, Some(id)) => {
                let ok = self.fact(id).is_some_and(|f| f.record.fact_def == *report);
                if !ok {
                    return Err(StoreError::MissingReport { fact: def.name.clone(), report: report.clone() });
                }
            }
            (FactRole::Result { report }, None) => {
                return Err(StoreError::MissingReport { fact: def.name.clone(), report: report.clone() })
            }
            (_, Some(_)) => return Err(StoreError::UnexpectedReport(def.name.clone())),
            (_, None) => {}
        }
        Ok(())
    }

    fn grain_key(&self, record: &FactRecord) -> Result<(String, Vec<SurrogateKey>), StoreError> {
        let (_, def) = self
            .bus
            .fact_def(&record.fact_def)
            .ok_or_else(|| StoreError::UnknownFact(record.fact_def.clone()))?;
        let keys = def
            .natural_key_dims
            .iter()
            .map(|d| record.dim_keys.get(d).copied().ok_or_else(|| StoreError::BindingMismatch {
                fact: def.name.clone(),
                expected: def.dimension_bindings.clone(),
                found: record.dim_keys.keys().cloned().collect(),
            }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((def.name.clone(), keys))
    }

    pub fn store_document(&mut self, bytes: &[u8], media_type: &str, caption: Option<&str>) -> Result<DocumentEntry, StoreError> {
        if bytes.is_empty() {
            return Err(StoreError::EmptyDocument);
        }
        let id = DocumentId::of(bytes);
        if let Some(existing) = self.documents.get(&id) {
            return Ok(existing.clone());
        }
        let entry = DocumentEntry {
            id: id.clone(),
            media_type: media_type.to_string(),
            byte_length: bytes.len() as u64,
            caption: caption.map(str::to_string),
        };
        self.pending.blobs.push((id.clone(), bytes.to_vec()));
        self.append(DOCUMENTS, &entry);
        self.documents.insert(id, entry.clone());
        self.commit()?;
        Ok(entry)
    }

    fn report_fact(&self, report: FactId) -> Result<&StoredFact, StoreError> {
        let fact = self.fact(report).ok_or(StoreError::UnknownFactId(report))?;
        match self.bus.fact_def(&fact.record.fact_def) {
            Some((_, def)) if def.role == FactRole::Report => Ok(fact),
            _ => Err(StoreError::NotAReport(report)),
        }
    }

    fn check_link(&self, report: FactId, document: &DocumentId) -> Result<(), StoreError> {
        self.report_fact(report)?;
        if !self.documents.contains_key(document) {
            return Err(StoreError::UnknownDocument(document.clone()));
        }
        Ok(())
    }

    pub fn link_document_to_report(&mut self, report: FactId, document: &DocumentId) -> Result<LinkOutcome, StoreError> {
        self.check_link(report, document)?;
        if !self.links.insert((report, document.clone())) {
            return Ok(LinkOutcome::AlreadyLinked);
        }
        self.append(LINKS, &LinkRow { report, document: document.clone() });
        self.commit()?;
        Ok(LinkOutcome::Added)
    }

    /// Inserts a report, its results and its document links as one write.
    pub fn insert_bundle(&mut self, bundle: ComplexFactBundle) -> Result<BundleOutcome, StoreError> {
        self.batch(|wh| {
            let report = wh.insert_fact(bundle.report)?;
            let report_id = report.fact_id();
            let mut results = Vec::with_capacity(bundle.results.len());
            for mut result in bundle.results {
                result.report = Some(report_id);
                results.push(wh.insert_fact(result)?);
            }
            let mut links_added = 0;
            for doc in &bundle.documents {
                if wh.link_document_to_report(report_id, doc)? == LinkOutcome::Added {
                    links_added += 1;
                }
            }
            Ok(BundleOutcome { report, results, links_added })
        })
    }

    pub(crate) fn put_group(&mut self, group: PatientGroup) -> Result<(), StoreError> {
        self.groups.insert(group.name.clone(), group);
        self.pending.groups = true;
        self.commit()
    }

    pub(crate) fn remove_group(&mut self, name: &str) -> Result<Option<PatientGroup>, StoreError> {
        let removed = self.groups.remove(name);
        if removed.is_some() {
            self.pending.groups = true;
            self.commit()?;
        }
        Ok(removed)
    }

    /// Registers or replaces an ETL mapping profile. Re-registering an identical profile changes nothing.
    pub fn register_profile(&mut self, profile: EtlProfile) -> Result<(), StoreError> {
        if self.profiles.get(&profile.name) == Some(&profile) {
            return Ok(());
        }
        self.profiles.insert(profile.name.clone(), profile);
        self.pending.profiles = true;
        self.commit()
    }

    /// Writes a load report next to the store (outside the digest).
    pub fn write_batch_report(&self, batch: &str, json: &str) -> Result<Option<PathBuf>, StoreError> {
        let Some(root) = &self.root else { return Ok(None) };
        let safe: String = batch
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect();
        let path = root.join(REPORTS_DIR).join(format!("{safe}.json"));
        fs::create_dir_all(root.join(REPORTS_DIR))?;
        fs::write(&path, json)?;
        Ok(Some(path))
    }

    // ---- reads ------------------------------------------------------------

    pub fn fact(&self, id: FactId) -> Option<&StoredFact> {
        (id.0 as usize).checked_sub(1).and_then(|i| self.facts.get(i))
    }

    pub fn facts(&self) -> &[StoredFact] {
        &self.facts
    }

    pub fn fact_count(&self) -> usize {
        self.facts.len()
    }

    pub fn document(&self, id: &DocumentId) -> Option<&DocumentEntry> {
        self.documents.get(id)
    }

    pub fn documents(&self) -> impl Iterator<Item = &DocumentEntry> {
        self.documents.values()
    }

    pub fn document_bytes(&self, id: &DocumentId) -> Result<Vec<u8>, StoreError> {
        if !self.documents.contains_key(id) {
            return Err(StoreError::UnknownDocument(id.clone()));
        }
        if let Some((_, bytes)) = self.pending.blobs.iter().find(|(p, _)| p == id) {
            return Ok(bytes.clone());
        }
        match &self.root {
            Some(root) => Ok(fs::read(root.join(BLOBS).join(&id.0))?),
            None => self.memory_blobs.get(id).cloned().ok_or_else(|| StoreError::UnknownDocument(id.clone())),
        }
    }

    /// Number of distinct blobs held by the store.
    pub fn blob_count(&self) -> Result<usize, StoreError> {
        match &self.root {
            Some(root) => Ok(fs::read_dir(root.join(BLOBS))?
                .filter_map(Result::ok)
                .filter(|e| !e.file_name().to_string_lossy().ends_with(".tmp"))
                .count()
                + self.pending.blobs.len()),
            None => Ok(self.memory_blobs.len() + self.pending.blobs.len()),
        }
    }

    pub fn links(&self) -> impl Iterator<Item = (FactId, &DocumentId)> {
        self.links.iter().map(|(r, d)| (*r, d))
    }

    pub fn documents_of_report(&self, report: FactId) -> Result<Vec<&DocumentEntry>, StoreError> {
        self.report_fact(report)?;
        Ok(self
            .links
            .range((report, DocumentId(String::new()))..)
            .take_while(|(r, _)| *r == report)
            .filter_map(|(_, d)| self.documents.get(d))
            .collect())
    }

    pub fn reports_of_document(&self, document: &DocumentId) -> Vec<FactId> {
        self.links.iter().filter(|(_, d)| d == document).map(|(r, _)| *r).collect()
    }

    pub fn groups(&self) -> impl Iterator<Item = &PatientGroup> {
        self.groups.values()
    }

    pub fn group(&self, name: &str) -> Option<&PatientGroup> {
        self.groups.get(name)
    }

    pub fn profile(&self, name: &str) -> Option<&EtlProfile> {
        self.profiles.get(name)
    }

    pub fn profiles(&self) -> impl Iterator<Item = &EtlProfile> {
        self.profiles.values()
    }

    /// Facts satisfying every predicate of `filter`, in id order.
    pub fn query_facts(&self, filter: &FactFilter) -> Result<Vec<&StoredFact>, StoreError> {
        let defs: Option<BTreeSet<&str>> = match (&filter.mart, &filter.fact_def) {
            (None, None) => None,
            (mart, fact) => {
                let mut names: BTreeSet<&str> = match mart {
                    Some(m) => self.bus.mart(m)?.fact_defs.iter().map(|f| f.name.as_str()).collect(),
                    None => self.bus.marts().flat_map(|m| m.fact_defs.iter().map(|f| f.name.as_str())).collect(),
                };
                if let Some(f) = fact {
                    if self.bus.fact_def(f).is_none() {
                        return Err(StoreError::UnknownFact(f.clone()));
                    }
                    names.retain(|n| n == f);
                }
                Some(names)
            }
        };
        let mut targets = Vec::with_capacity(filter.members.len());
        for p in &filter.members {
            self.bus.level_index(&p.dimension, &p.level)?;
            let target = match &p.member {
                MemberRef::Key(k) => Some(*k),
                MemberRef::Natural(n) => self.bus.find_member(&p.dimension, &p.level, n)?.map(|m| m.surrogate_key),
            };
            targets.push((p, target));
        }
        let mut out = Vec::new();
        'facts: for fact in &self.facts {
            if let Some(defs) = &defs {
                if !defs.contains(fact.record.fact_def.as_str()) {
                    continue;
                }
            }
            for (p, target) in &targets {
                let Some(target) = target else { continue 'facts };
                let Some(leaf) = fact.record.key(&p.dimension) else { continue 'facts };
                match self.bus.ancestor_at_level(leaf, &p.level) {
                    Ok(m) if m.surrogate_key == *target => {}
                    _ => continue 'facts,
                }
            }
            if filter.from.is_some() || filter.to.is_some() {
                let Some(point) = self.time_point(fact) else { continue };
                if filter.from.is_some_and(|f| point.timestamp < f) || filter.to.is_some_and(|t| point.timestamp > t) {
                    continue;
                }
            }
            out.push(fact);
        }
        Ok(out)
    }

    pub fn time_point(&self, fact: &StoredFact) -> Option<TimePoint> {
        fact.record
            .key(TIME)
            .and_then(|k| self.bus.member(k))
            .and_then(|m| TimePoint::from_natural_key(&m.natural_key))
    }

    /// Full scan re-verifying every stored invariant.
    pub fn audit(&self) -> AuditReport {
        let mut report = AuditReport { facts_scanned: self.facts.len(), ..Default::default() };
        let mut grains = BTreeSet::new();
        for fact in &self.facts {
            let r = &fact.record;
            let Some((_, def)) = self.bus.fact_def(&r.fact_def) else {
                report.referential.push(format!("fact {}: unknown table {}", fact.id, r.fact_def));
                continue;
            };
            for dim in &def.dimension_bindings {
                let leaf = self.bus.dimension(dim).map(|d| d.leaf().name.clone()).ok();
                let ok = r
                    .key(dim)
                    .and_then(|k| self.bus.member(k))
                    .is_some_and(|m| m.dimension == *dim && Some(&m.level) == leaf.as_ref());
                if !ok {
                    report.referential.push(format!("fact {}: unresolved {dim} key", fact.id));
                }
            }
            if let MeasureValue::Numeric { unit, .. } = &r.measure {
                let canonical = r
                    .key(MEDICAL_ANALYSIS)
                    .and_then(|k| self.bus.member(k))
                    .and_then(|m| m.attribute(CANONICAL_UNIT_ATTR));
                if canonical != Some(unit.as_str()) {
                    report.units.push(format!("fact {}: unit {unit} is not canonical", fact.id));
                }
            }
            let grain: Vec<_> = def.natural_key_dims.iter().map(|d| r.key(d)).collect();
            if !grains.insert((r.fact_def.clone(), grain)) {
                report.grain.push(format!("fact {}: duplicate grain", fact.id));
            }
            if let FactRole::Result { report: table } = &def.role {
                let ok = r.report.and_then(|id| self.fact(id)).is_some_and(|f| f.record.fact_def == *table);
                if !ok {
                    report.complex.push(format!("fact {}: dangling report reference", fact.id));
                }
            }
        }
        for (r, d) in &self.links {
            if self.check_link(*r, d).is_err() {
                report.complex.push(format!("link {r} -> {d} has a missing endpoint"));
            }
        }
        for member in self.bus.all_members() {
            let Ok(def) = self.bus.dimension(&member.dimension) else { continue };
            if let Err(e) = self.bus.ancestor_at_level(member.surrogate_key, &def.levels[def.root_index()].name) {
                report.hierarchy.push(format!("member {}: {e}", member.surrogate_key));
            }
        }
        report
    }

    pub fn schema_digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(&self.bus.snapshot()).expect("schema serializes")))
    }

    /// SHA-256 over the canonical serialization of all warehouse content.
    /// Load reports and the generation counter are excluded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |tag: &str, bytes: Vec<u8>| {
            h.update(tag.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        };
        feed("schema", to_json(&self.bus.snapshot()));
        feed("members", to_json(self.bus.all_members()));
        feed("metadata", self.metadata.to_lines().into_bytes());
        feed("facts", to_json(&self.facts));
        feed("documents", to_json(&self.documents.values().collect::<Vec<_>>()));
        feed("links", to_json(&self.links.iter().collect::<Vec<_>>()));
        feed("groups", to_json(&self.groups));
        feed("profiles", to_json(&self.profiles));
        hex::encode(h.finalize())
    }

    /// Delimited dump of every fact of a mart: one row per fact with the
    /// natural keys of all its dimensions.
    pub fn export_mart(&self, mart: &str) -> Result<String, StoreError> {
        let def = self.bus.mart(mart)?;
        let mut dims: Vec<String> = def.shared_dimensions.clone();
        dims.extend(def.local_dimensions.iter().map(|d| d.name.clone()));
        let tables: BTreeMap<&str, &FactDef> = def.fact_defs.iter().map(|f| (f.name.as_str(), f)).collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["fact_id", "fact_def", "measure_kind", "measure", "unit", "report"];
        header.extend(dims.iter().map(String::as_str));
        w.write_record(&header).map_err(csv_io)?;
        for fact in self.facts.iter().filter(|f| tables.contains_key(f.record.fact_def.as_str())) {
            let r = &fact.record;
            let (kind, unit) = match &r.measure {
                MeasureValue::Numeric { unit, .. } => ("numeric", unit.as_str()),
                MeasureValue::Text { .. } => ("text", ""),
                MeasureValue::DocumentRef { .. } => ("document_ref", ""),
            };
            let mut row = vec![
                fact.id.to_string(),
                r.fact_def.clone(),
                kind.to_string(),
                r.measure.display_value(),
                unit.to_string(),
                r.report.map(|id| id.to_string()).unwrap_or_default(),
            ];
            for dim in &dims {
                row.push(
                    r.key(dim)
                        .and_then(|k| self.bus.member(k))
                        .map(|m| m.natural_key.clone())
                        .unwrap_or_default(),
                );
            }
            w.write_record(&row).map_err(csv_io)?;
        }
        let bytes = w.into_inner().map_err(|e| StoreError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("store content serializes")
}

fn csv_io(e: csv::Error) -> StoreError {
    StoreError::Io(io::Error::other(e))
}

fn corrupt(file: &str, line: usize, reason: impl fmt::Display) -> StoreError {
    StoreError::Corrupt { file: file.into(), line, reason: reason.to_string() }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, name: &str) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| corrupt(name, 0, e))?;
    serde_json::from_str(&text).map_err(|e| corrupt(name, e.line(), e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value).expect("store content serializes"))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn for_each_line<T: for<'de> Deserialize<'de>>(
    path: &Path,
    name: &str,
    mut f: impl FnMut(usize, T) -> Result<(), StoreError>,
) -> Result<(), StoreError> {
    let file = File::open(path).map_err(|e| corrupt(name, 0, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: T = serde_json::from_str(&line).map_err(|e| corrupt(name, i + 1, e))?;
        f(i + 1, row)?;
    }
    Ok(())
}
