//! Conformed dimensions, snowflake hierarchies and the datamart bus.
//!
//! A [`Bus`] owns every dimension of the warehouse. Datamarts plug into it by
//! naming the conformed dimensions they share; a shared dimension is never
//! copied, so every mart binding it enumerates the very same member set.
//!
//! Hierarchy levels are ordered from leaf (index 0, the grain facts bind to)
//! to root (the coarsest level).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Attribute values of a dimension member, keyed by attribute name.
pub type Attributes = BTreeMap<String, String>;

pub const PATIENT: &str = "patient";
pub const PROVIDER: &str = "provider";
pub const TIME: &str = "time";
pub const MEDICAL_ANALYSIS: &str = "medical_analysis";

/// The four dimensions every warehouse carries on its bus.
pub const BUS_DIMENSIONS: [&str; 4] = [PATIENT, PROVIDER, TIME, MEDICAL_ANALYSIS];

/// Attribute of an analysis member holding the unit its numeric facts are stored in.
pub const CANONICAL_UNIT_ATTR: &str = "canonical_unit";

/// Warehouse-internal member identifier.
///
/// Keys come from a single counter shared by all dimensions, so a key also
/// identifies the dimension its member lives in. Keys are never recycled.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SurrogateKey(pub u64);

impl fmt::Display for SurrogateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Text,
    Number,
    Date,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub kind: ValueKind,
}

impl AttributeDef {
    pub fn new(name: impl Into<String>, kind: ValueKind) -> Self {
        Self { name: name.into(), kind }
    }
}

/// One level of a dimension hierarchy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelDef {
    pub name: String,
    #[serde(default)]
    pub attributes: Vec<AttributeDef>,
}

impl LevelDef {
    pub fn new(name: impl Into<String>, attributes: Vec<AttributeDef>) -> Self {
        Self { name: name.into(), attributes }
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeDef> {
        self.attributes.iter().find(|a| a.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionDef {
    pub name: String,
    /// Leaf first, root last.
    pub levels: Vec<LevelDef>,
    pub conformed: bool,
}

impl DimensionDef {
    pub fn new(name: impl Into<String>, levels: Vec<LevelDef>, conformed: bool) -> Self {
        Self { name: name.into(), levels, conformed }
    }

    pub fn level_index(&self, level: &str) -> Option<usize> {
        self.levels.iter().position(|l| l.name == level)
    }

    pub fn leaf(&self) -> &LevelDef {
        &self.levels[0]
    }

    pub fn root_index(&self) -> usize {
        self.levels.len() - 1
    }

    fn validate(&self) -> Result<(), SchemaError> {
        if self.levels.is_empty() {
            return Err(SchemaError::NoLevels(self.name.clone()));
        }
        let mut seen = BTreeSet::new();
        for level in &self.levels {
            if !seen.insert(level.name.as_str()) {
                return Err(SchemaError::DuplicateLevel {
                    dimension: self.name.clone(),
                    level: level.name.clone(),
                });
            }
            let mut attrs = BTreeSet::new();
            for attr in &level.attributes {
                if !attrs.insert(attr.name.as_str()) {
                    return Err(SchemaError::DuplicateAttribute {
                        dimension: self.name.clone(),
                        level: level.name.clone(),
                        attribute: attr.name.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionMember {
    pub dimension: String,
    pub level: String,
    pub surrogate_key: SurrogateKey,
    pub natural_key: String,
    #[serde(default)]
    pub attributes: Attributes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<SurrogateKey>,
}

impl DimensionMember {
    pub fn attribute(&self, name: &str) -> Option<&str> {
        self.attributes.get(name).map(String::as_str)
    }
}

/// Instant of a measurement, at minute precision, with an optional session tag
/// distinguishing e.g. pre- and post-practice measurements.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimePoint {
    pub timestamp: NaiveDateTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_tag: Option<String>,
}

const INSTANT_FORMAT: &str = "%Y-%m-%dT%H:%M";

impl TimePoint {
    pub fn new(timestamp: NaiveDateTime, session_tag: Option<String>) -> Self {
        use chrono::Timelike;
        let timestamp = timestamp
            .with_second(0)
            .and_then(|t| t.with_nanosecond(0))
            .unwrap_or(timestamp);
        let session_tag = session_tag.filter(|t| !t.trim().is_empty()).map(|t| t.trim().to_string());
        Self { timestamp, session_tag }
    }

    /// Natural key of the `instant` member: `YYYY-MM-DDTHH:MM[#tag]`.
    pub fn natural_key(&self) -> String {
        let mut key = self.timestamp.format(INSTANT_FORMAT).to_string();
        if let Some(tag) = &self.session_tag {
            key.push('#');
            key.push_str(tag);
        }
        key
    }

    pub fn from_natural_key(key: &str) -> Option<Self> {
        let (stamp, tag) = match key.split_once('#') {
            Some((s, t)) => (s, Some(t.to_string())),
            None => (key, None),
        };
        let timestamp = NaiveDateTime::parse_from_str(stamp, INSTANT_FORMAT).ok()?;
        Some(Self::new(timestamp, tag))
    }

    pub fn date(&self) -> NaiveDate {
        self.timestamp.date()
    }

    /// Member path from the root (`year`) down to the `instant` leaf.
    pub fn member_path(&self) -> Vec<MemberSpec> {
        let date = self.date();
        let mut instant = Attributes::new();
        instant.insert("timestamp".into(), self.timestamp.format(INSTANT_FORMAT).to_string());
        if let Some(tag) = &self.session_tag {
            instant.insert("session_tag".into(), tag.clone());
        }
        vec![
            MemberSpec::new("year", format!("{:04}", date.year()), Attributes::new()),
            MemberSpec::new("month", format!("{:04}-{:02}", date.year(), date.month()), Attributes::new()),
            MemberSpec::new("day", date.format("%Y-%m-%d").to_string(), Attributes::new()),
            MemberSpec::new("instant", self.natural_key(), instant),
        ]
    }
}

impl fmt::Display for TimePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.natural_key())
    }
}

/// A member to create (or find) at a named level, used by [`Bus::ensure_path`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemberSpec {
    pub level: String,
    pub natural_key: String,
    pub attributes: Attributes,
}

impl MemberSpec {
    pub fn new(level: impl Into<String>, natural_key: impl Into<String>, attributes: Attributes) -> Self {
        Self { level: level.into(), natural_key: natural_key.into(), attributes }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKind {
    Numeric,
    Text,
    DocumentRef,
}

/// Part a fact table plays in a datamart.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactRole {
    #[default]
    Simple,
    /// Central element of a complex fact; documents link to its rows.
    Report,
    /// Numeric results each referencing a row of the named report table.
    Result { report: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactDef {
    pub name: String,
    pub measure_kind: MeasureKind,
    pub dimension_bindings: Vec<String>,
    /// Subset of the bindings forming the fact grain.
    pub natural_key_dims: Vec<String>,
    #[serde(default)]
    pub role: FactRole,
}

impl FactDef {
    /// A fact bound to the four bus dimensions with a grain over all of them.
    pub fn on_bus(name: impl Into<String>, measure_kind: MeasureKind) -> Self {
        let dims: Vec<String> = BUS_DIMENSIONS.iter().map(|d| d.to_string()).collect();
        Self {
            name: name.into(),
            measure_kind,
            dimension_bindings: dims.clone(),
            natural_key_dims: dims,
            role: FactRole::Simple,
        }
    }

    pub fn with_role(mut self, role: FactRole) -> Self {
        self.role = role;
        self
    }

    pub fn binds(&self, dimension: &str) -> bool {
        self.dimension_bindings.iter().any(|d| d == dimension)
    }
}

/// How patient records of a mart are laid out.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordLayout {
    /// Grouped category → examination → analysis.
    Hierarchical,
    #[default]
    Flat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatamartDef {
    pub name: String,
    pub fact_defs: Vec<FactDef>,
    #[serde(default)]
    pub local_dimensions: Vec<DimensionDef>,
    pub shared_dimensions: Vec<String>,
    #[serde(default)]
    pub record_layout: RecordLayout,
}

impl DatamartDef {
    pub fn fact_def(&self, name: &str) -> Option<&FactDef> {
        self.fact_defs.iter().find(|f| f.name == name)
    }

    pub fn binds(&self, dimension: &str) -> bool {
        self.shared_dimensions.iter().any(|d| d == dimension)
            || self.local_dimensions.iter().any(|d| d.name == dimension)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionHandle {
    pub name: String,
    pub levels: Vec<String>,
    pub conformed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatamartHandle {
    pub name: String,
    pub fact_defs: Vec<String>,
    pub shared_dimensions: Vec<String>,
}

/// Result of [`Bus::check_conformance`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub dimension: String,
    /// Datamarts binding the dimension, sorted by name.
    pub bindings: Vec<String>,
    pub member_count: usize,
    pub ok: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("dimension `{0}` is already defined")]
    DuplicateDimension(String),
    #[error("dimension `{0}` has no levels")]
    NoLevels(String),
    #[error("dimension `{dimension}` declares level `{level}` twice")]
    DuplicateLevel { dimension: String, level: String },
    #[error("level `{dimension}.{level}` declares attribute `{attribute}` twice")]
    DuplicateAttribute { dimension: String, level: String, attribute: String },
    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),
    #[error("dimension `{dimension}` has no level `{level}`")]
    UnknownLevel { dimension: String, level: String },
    #[error("unknown member {0}")]
    UnknownMember(SurrogateKey),
    #[error("member `{natural_key}` already exists at `{dimension}.{level}`")]
    DuplicateMember { dimension: String, level: String, natural_key: String },
    #[error("parent {parent} of `{natural_key}` is not a `{dimension}.{expected_level}` member")]
    InvalidParent { dimension: String, natural_key: String, parent: SurrogateKey, expected_level: String },
    #[error("`{dimension}.{level}` members need a parent at the next coarser level")]
    MissingParent { dimension: String, level: String },
    #[error("`{dimension}.{level}` has no attribute `{attribute}`")]
    UnknownAttribute { dimension: String, level: String, attribute: String },
    #[error("attribute `{attribute}` expects a {kind:?} value, got `{value}`")]
    BadAttributeValue { attribute: String, kind: ValueKind, value: String },
    #[error("natural key must not be empty")]
    EmptyNaturalKey,
    #[error("datamart `{0}` is already registered")]
    DuplicateDatamart(String),
    #[error("unknown datamart `{0}`")]
    UnknownDatamart(String),
    #[error("dimension `{0}` is not conformed and cannot be shared")]
    NotConformed(String),
    #[error("datamart `{0}` defines no fact tables")]
    NoFacts(String),
    #[error("fact table `{0}` is already defined")]
    DuplicateFact(String),
    #[error("unknown fact table `{0}`")]
    UnknownFact(String),
    #[error("fact table `{fact}` is invalid: {reason}")]
    InvalidFact { fact: String, reason: String },
    #[error("datamart `{mart}` does not bind dimension `{dimension}`")]
    NotBound { mart: String, dimension: String },
    #[error("level `{target}` is finer than `{level}` in dimension `{dimension}`")]
    FinerLevel { dimension: String, level: String, target: String },
    #[error("broken parent chain at member {0}")]
    BrokenChain(SurrogateKey),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DimensionEntry {
    def: DimensionDef,
    /// Mart owning a local dimension; `None` for bus dimensions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    owner: Option<String>,
}

#[derive(Default)]
struct MemberIndex {
    by_natural: HashMap<(usize, String), SurrogateKey>,
    by_level: Vec<Vec<SurrogateKey>>,
}

/// Serializable part of a [`Bus`]: dimension definitions and datamarts.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SchemaSnapshot {
    dimensions: Vec<DimensionEntry>,
    datamarts: Vec<DatamartDef>,
}

/// Registry of dimensions, their members and the datamarts plugged into them.
#[derive(Default)]
pub struct Bus {
    dimensions: BTreeMap<String, DimensionEntry>,
    indexes: HashMap<String, MemberIndex>,
    marts: BTreeMap<String, DatamartDef>,
    /// Position `k - 1` holds the member with key `k`.
    members: Vec<DimensionMember>,
}

impl Bus {
    /// A bus with no dimensions at all; see [`crate::schema::default_bus`] for the usual start.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn define_dimension(&mut self, def: DimensionDef) -> Result<DimensionHandle, SchemaError> {
        self.define_owned(def, None)
    }

    fn define_owned(&mut self, def: DimensionDef, owner: Option<String>) -> Result<DimensionHandle, SchemaError> {
        if self.dimensions.contains_key(&def.name) {
            return Err(SchemaError::DuplicateDimension(def.name));
        }
        def.validate()?;
        let handle = DimensionHandle {
            name: def.name.clone(),
            levels: def.levels.iter().map(|l| l.name.clone()).collect(),
            conformed: def.conformed,
        };
        self.indexes.insert(
            def.name.clone(),
            MemberIndex { by_natural: HashMap::new(), by_level: vec![Vec::new(); def.levels.len()] },
        );
        self.dimensions.insert(def.name.clone(), DimensionEntry { def, owner });
        Ok(handle)
    }

    /// Appends attributes to a level of an existing dimension. Existing members are untouched.
    pub fn extend_level(&mut self, dimension: &str, level: &str, attributes: Vec<AttributeDef>) -> Result<(), SchemaError> {
        let entry = self
            .dimensions
            .get_mut(dimension)
            .ok_or_else(|| SchemaError::UnknownDimension(dimension.into()))?;
        let mut def = entry.def.clone();
        let idx = def.level_index(level).ok_or_else(|| SchemaError::UnknownLevel {
            dimension: dimension.into(),
            level: level.into(),
        })?;
        for attr in attributes {
            if def.levels[idx].attribute(&attr.name).is_none() {
                def.levels[idx].attributes.push(attr);
            }
        }
        def.validate()?;
        entry.def = def;
        Ok(())
    }

    pub fn dimension(&self, name: &str) -> Result<&DimensionDef, SchemaError> {
        self.dimensions
            .get(name)
            .map(|e| &e.def)
            .ok_or_else(|| SchemaError::UnknownDimension(name.into()))
    }

    pub fn dimensions(&self) -> impl Iterator<Item = &DimensionDef> {
        self.dimensions.values().map(|e| &e.def)
    }

    pub fn level_index(&self, dimension: &str, level: &str) -> Result<usize, SchemaError> {
        self.dimension(dimension)?
            .level_index(level)
            .ok_or_else(|| SchemaError::UnknownLevel { dimension: dimension.into(), level: level.into() })
    }

    pub fn add_member(
        &mut self,
        dimension: &str,
        level: &str,
        natural_key: &str,
        attributes: Attributes,
        parent: Option<SurrogateKey>,
    ) -> Result<SurrogateKey, SchemaError> {
        let def = self.dimension(dimension)?;
        let level_idx = def
            .level_index(level)
            .ok_or_else(|| SchemaError::UnknownLevel { dimension: dimension.into(), level: level.into() })?;
        if natural_key.trim().is_empty() {
            return Err(SchemaError::EmptyNaturalKey);
        }
        self.validate_attributes(dimension, level, &attributes)?;
        let is_root = level_idx == def.root_index();
        match parent {
            None if !is_root => {
                return Err(SchemaError::MissingParent { dimension: dimension.into(), level: level.into() })
            }
            Some(p) => {
                let ok = !is_root
                    && self.member(p).is_some_and(|m| {
                        m.dimension == dimension && m.level == def.levels[level_idx + 1].name
                    });
                if !ok {
                    let expected_level = def
                        .levels
                        .get(level_idx + 1)
                        .map(|l| l.name.clone())
                        .unwrap_or_else(|| "(none: root level)".into());
                    return Err(SchemaError::InvalidParent {
                        dimension: dimension.into(),
                        natural_key: natural_key.into(),
                        parent: p,
                        expected_level,
                    });
                }
            }
            None => {}
        }
        let index = self.indexes.get_mut(dimension).expect("index exists for every dimension");
        let nat = (level_idx, natural_key.to_string());
        if index.by_natural.contains_key(&nat) {
            return Err(SchemaError::DuplicateMember {
                dimension: dimension.into(),
                level: level.into(),
                natural_key: natural_key.into(),
            });
        }
        let key = SurrogateKey(self.members.len() as u64 + 1);
        index.by_natural.insert(nat, key);
        index.by_level[level_idx].push(key);
        self.members.push(DimensionMember {
            dimension: dimension.into(),
            level: level.into(),
            surrogate_key: key,
            natural_key: natural_key.into(),
            attributes,
            parent,
        });
        Ok(key)
    }

    /// Checks attribute names and value kinds against a level definition.
    pub fn validate_attributes(&self, dimension: &str, level: &str, attributes: &Attributes) -> Result<(), SchemaError> {
        let def = self.dimension(dimension)?;
        let level_def = def
            .levels
            .iter()
            .find(|l| l.name == level)
            .ok_or_else(|| SchemaError::UnknownLevel { dimension: dimension.into(), level: level.into() })?;
        for (name, value) in attributes {
            let attr = level_def.attribute(name).ok_or_else(|| SchemaError::UnknownAttribute {
                dimension: dimension.into(),
                level: level.into(),
                attribute: name.clone(),
            })?;
            check_value(attr, value)?;
        }
        Ok(())
    }

    /// Adds a member through a datamart's binding of a shared or local dimension.
    pub fn add_member_via(
        &mut self,
        mart: &str,
        dimension: &str,
        level: &str,
        natural_key: &str,
        attributes: Attributes,
        parent: Option<SurrogateKey>,
    ) -> Result<SurrogateKey, SchemaError> {
        let def = self.mart(mart)?;
        if !def.binds(dimension) {
            return Err(SchemaError::NotBound { mart: mart.into(), dimension: dimension.into() });
        }
        self.add_member(dimension, level, natural_key, attributes, parent)
    }

    /// Finds or creates each member of a root-to-leaf path; returns the leaf key
    /// and the number of members created.
    pub fn ensure_path(&mut self, dimension: &str, path: &[MemberSpec]) -> Result<(SurrogateKey, usize), SchemaError> {
        let mut parent = None;
        let mut created = 0;
        for spec in path {
            let key = match self.find_member(dimension, &spec.level, &spec.natural_key)? {
                Some(m) => m.surrogate_key,
                None => {
                    created += 1;
                    self.add_member(dimension, &spec.level, &spec.natural_key, spec.attributes.clone(), parent)?
                }
            };
            parent = Some(key);
        }
        parent.map(|k| (k, created)).ok_or(SchemaError::EmptyNaturalKey)
    }

    /// Recreates a member read back from storage, keeping its key.
    pub(crate) fn restore_member(&mut self, member: DimensionMember) -> Result<(), SchemaError> {
        let expected = SurrogateKey(self.members.len() as u64 + 1);
        if member.surrogate_key != expected {
            return Err(SchemaError::BrokenChain(member.surrogate_key));
        }
        let key = self.add_member(
            &member.dimension,
            &member.level,
            &member.natural_key,
            member.attributes,
            member.parent,
        )?;
        debug_assert_eq!(key, expected);
        Ok(())
    }

    pub fn member(&self, key: SurrogateKey) -> Option<&DimensionMember> {
        (key.0 as usize).checked_sub(1).and_then(|i| self.members.get(i))
    }

    pub fn find_member(&self, dimension: &str, level: &str, natural_key: &str) -> Result<Option<&DimensionMember>, SchemaError> {
        let level_idx = self.level_index(dimension, level)?;
        let index = &self.indexes[dimension];
        Ok(index
            .by_natural
            .get(&(level_idx, natural_key.to_string()))
            .and_then(|k| self.member(*k)))
    }

    /// Members of one level, in key order.
    pub fn members_at_level(&self, dimension: &str, level: &str) -> Result<impl Iterator<Item = &DimensionMember>, SchemaError> {
        let level_idx = self.level_index(dimension, level)?;
        Ok(self.indexes[dimension].by_level[level_idx].iter().filter_map(|k| self.member(*k)))
    }

    /// All members of a dimension, in key order.
    pub fn members(&self, dimension: &str) -> Result<impl Iterator<Item = &DimensionMember>, SchemaError> {
        self.dimension(dimension)?;
        let dimension = dimension.to_string();
        Ok(self.members.iter().filter(move |m| m.dimension == dimension))
    }

    pub fn all_members(&self) -> &[DimensionMember] {
        &self.members
    }

    pub fn register_datamart(&mut self, def: DatamartDef) -> Result<DatamartHandle, SchemaError> {
        if self.marts.contains_key(&def.name) {
            return Err(SchemaError::DuplicateDatamart(def.name));
        }
        if def.fact_defs.is_empty() {
            return Err(SchemaError::NoFacts(def.name));
        }
        for shared in &def.shared_dimensions {
            let entry = self
                .dimensions
                .get(shared)
                .ok_or_else(|| SchemaError::UnknownDimension(shared.clone()))?;
            if !entry.def.conformed || entry.owner.is_some() {
                return Err(SchemaError::NotConformed(shared.clone()));
            }
        }
        for local in &def.local_dimensions {
            if self.dimensions.contains_key(&local.name) {
                return Err(SchemaError::DuplicateDimension(local.name.clone()));
            }
            local.validate()?;
        }
        let mut names = BTreeSet::new();
        for fact in &def.fact_defs {
            if !names.insert(fact.name.as_str()) || self.fact_def(&fact.name).is_some() {
                return Err(SchemaError::DuplicateFact(fact.name.clone()));
            }
            self.validate_fact(&def, fact)?;
        }
        for local in &def.local_dimensions {
            let mut local = local.clone();
            local.conformed = false;
            self.define_owned(local, Some(def.name.clone()))?;
        }
        let handle = DatamartHandle {
            name: def.name.clone(),
            fact_defs: def.fact_defs.iter().map(|f| f.name.clone()).collect(),
            shared_dimensions: def.shared_dimensions.clone(),
        };
        self.marts.insert(def.name.clone(), def);
        Ok(handle)
    }

    fn validate_fact(&self, mart: &DatamartDef, fact: &FactDef) -> Result<(), SchemaError> {
        let invalid = |reason: String| SchemaError::InvalidFact { fact: fact.name.clone(), reason };
        if fact.dimension_bindings.is_empty() {
            return Err(invalid("no dimension bindings".into()));
        }
        let mut seen = BTreeSet::new();
        for dim in &fact.dimension_bindings {
            if !seen.insert(dim) {
                return Err(invalid(format!("dimension `{dim}` bound twice")));
            }
            if !mart.binds(dim) {
                return Err(invalid(format!("dimension `{dim}` is neither shared nor local to `{}`", mart.name)));
            }
        }
        if fact.natural_key_dims.is_empty() {
            return Err(invalid("empty grain".into()));
        }
        for dim in &fact.natural_key_dims {
            if !fact.binds(dim) {
                return Err(invalid(format!("grain dimension `{dim}` is not bound")));
            }
        }
        if fact.measure_kind == MeasureKind::Numeric && !fact.binds(MEDICAL_ANALYSIS) {
            return Err(invalid("numeric facts must bind medical_analysis for their canonical unit".into()));
        }
        match &fact.role {
            FactRole::Simple => {}
            FactRole::Report => {
                if fact.measure_kind != MeasureKind::Text {
                    return Err(invalid("report tables carry text measures".into()));
                }
            }
            FactRole::Result { report } => {
                let ok = mart
                    .fact_def(report)
                    .is_some_and(|r| r.role == FactRole::Report);
                if !ok {
                    return Err(invalid(format!("`{report}` is not a report table of `{}`", mart.name)));
                }
                if fact.measure_kind != MeasureKind::Numeric {
                    return Err(invalid("result tables carry numeric measures".into()));
                }
            }
        }
        Ok(())
    }

    pub fn mart(&self, name: &str) -> Result<&DatamartDef, SchemaError> {
        self.marts.get(name).ok_or_else(|| SchemaError::UnknownDatamart(name.into()))
    }

    pub fn marts(&self) -> impl Iterator<Item = &DatamartDef> {
        self.marts.values()
    }

    /// Looks a fact table up across all marts.
    pub fn fact_def(&self, name: &str) -> Option<(&DatamartDef, &FactDef)> {
        self.marts
            .values()
            .find_map(|m| m.fact_def(name).map(|f| (m, f)))
    }

    /// Enumerates a dimension's members as seen through one datamart's binding.
    pub fn mart_members<'a>(
        &'a self,
        mart: &str,
        dimension: &str,
    ) -> Result<impl Iterator<Item = &'a DimensionMember> + 'a, SchemaError> {
        let def = self.mart(mart)?;
        if !def.binds(dimension) {
            return Err(SchemaError::NotBound { mart: mart.into(), dimension: dimension.into() });
        }
        self.members(dimension)
    }

    pub fn ancestor_at_level(&self, key: SurrogateKey, target_level: &str) -> Result<&DimensionMember, SchemaError> {
        let member = self.member(key).ok_or(SchemaError::UnknownMember(key))?;
        let def = self.dimension(&member.dimension)?;
        let from = def.level_index(&member.level).ok_or(SchemaError::BrokenChain(key))?;
        let to = def.level_index(target_level).ok_or_else(|| SchemaError::UnknownLevel {
            dimension: member.dimension.clone(),
            level: target_level.into(),
        })?;
        if to < from {
            return Err(SchemaError::FinerLevel {
                dimension: member.dimension.clone(),
                level: member.level.clone(),
                target: target_level.into(),
            });
        }
        let mut current = member;
        for step in from..to {
            let parent = current.parent.ok_or(SchemaError::BrokenChain(current.surrogate_key))?;
            let next = self.member(parent).ok_or(SchemaError::BrokenChain(current.surrogate_key))?;
            if next.dimension != member.dimension || next.level != def.levels[step + 1].name {
                return Err(SchemaError::BrokenChain(current.surrogate_key));
            }
            current = next;
        }
        Ok(current)
    }

    pub fn check_conformance(&self, dimension: &str) -> Result<ConformanceReport, SchemaError> {
        self.dimension(dimension)?;
        let bindings: Vec<String> = self
            .marts
            .values()
            .filter(|m| m.binds(dimension))
            .map(|m| m.name.clone())
            .collect();
        type Row<'a> = (SurrogateKey, &'a str, &'a str, &'a Attributes);
        let mut reference: Option<Vec<Row<'_>>> = None;
        let mut ok = true;
        for mart in &bindings {
            let rows: Vec<Row<'_>> = self
                .mart_members(mart, dimension)?
                .map(|m| (m.surrogate_key, m.level.as_str(), m.natural_key.as_str(), &m.attributes))
                .collect();
            match &reference {
                None => reference = Some(rows),
                Some(r) => ok &= *r == rows,
            }
        }
        Ok(ConformanceReport {
            dimension: dimension.into(),
            member_count: self.members(dimension)?.count(),
            bindings,
            ok,
        })
    }

    pub fn snapshot(&self) -> SchemaSnapshot {
        SchemaSnapshot {
            dimensions: self.dimensions.values().cloned().collect(),
            datamarts: self.marts.values().cloned().collect(),
        }
    }

    /// Rebuilds the schema part of a bus; members are restored separately.
    pub fn from_snapshot(snapshot: SchemaSnapshot) -> Result<Self, SchemaError> {
        let mut bus = Bus::empty();
        // local dimensions are recreated by their mart's registration
        for entry in snapshot.dimensions.into_iter().filter(|e| e.owner.is_none()) {
            bus.define_dimension(entry.def)?;
        }
        for mart in snapshot.datamarts {
            bus.register_datamart(mart)?;
        }
        Ok(bus)
    }
}

fn check_value(attr: &AttributeDef, value: &str) -> Result<(), SchemaError> {
    let ok = match attr.kind {
        ValueKind::Text => true,
        ValueKind::Number => value.trim().parse::<f64>().is_ok_and(f64::is_finite),
        ValueKind::Date => NaiveDate::parse_from_str(value.trim(), "%Y-%m-%d").is_ok(),
    };
    if ok {
        Ok(())
    } else {
        Err(SchemaError::BadAttributeValue { attribute: attr.name.clone(), kind: attr.kind, value: value.into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::default_bus;

    fn attrs(pairs: &[(&str, &str)]) -> Attributes {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn hematology(bus: &mut Bus) -> (SurrogateKey, SurrogateKey, SurrogateKey) {
        let cat = bus.add_member(MEDICAL_ANALYSIS, "category", "hematology", attrs(&[("label", "Hematology")]), None).unwrap();
        let exam = bus.add_member(MEDICAL_ANALYSIS, "examination", "hemogram", Attributes::new(), Some(cat)).unwrap();
        let analysis = bus
            .add_member(
                MEDICAL_ANALYSIS,
                "analysis",
                "RETIC",
                attrs(&[("label", "reticulocyte numbering"), (CANONICAL_UNIT_ATTR, "10^9/L")]),
                Some(exam),
            )
            .unwrap();
        (cat, exam, analysis)
    }

    #[test]
    fn define_three_level_dimension() {
        let mut bus = Bus::empty();
        let handle = bus
            .define_dimension(DimensionDef::new(
                "analysis_tree",
                vec![LevelDef::new("analysis", vec![]), LevelDef::new("examination", vec![]), LevelDef::new("category", vec![])],
                true,
            ))
            .unwrap();
        assert_eq!(handle.levels, vec!["analysis", "examination", "category"]);
    }

    #[test]
    fn empty_and_duplicate_definitions_rejected() {
        let mut bus = default_bus();
        assert_eq!(
            bus.define_dimension(DimensionDef::new("nothing", vec![], true)),
            Err(SchemaError::NoLevels("nothing".into()))
        );
        let time = bus.dimension(TIME).unwrap().clone();
        assert_eq!(bus.define_dimension(time), Err(SchemaError::DuplicateDimension("time".into())));
        let dup = DimensionDef::new("d", vec![LevelDef::new("a", vec![]), LevelDef::new("a", vec![])], false);
        assert!(matches!(bus.define_dimension(dup), Err(SchemaError::DuplicateLevel { .. })));
    }

    #[test]
    fn bus_dimensions_are_conformed() {
        let bus = default_bus();
        for name in BUS_DIMENSIONS {
            assert!(bus.dimension(name).unwrap().conformed, "{name}");
        }
    }

    #[test]
    fn add_member_with_parent() {
        let mut bus = default_bus();
        let (_, exam, analysis) = hematology(&mut bus);
        let m = bus.member(analysis).unwrap();
        assert_eq!(m.parent, Some(exam));
        assert_eq!(bus.find_member(MEDICAL_ANALYSIS, "analysis", "RETIC").unwrap().unwrap().surrogate_key, analysis);
    }

    #[test]
    fn cross_dimension_parent_rejected() {
        let mut bus = default_bus();
        let patient = bus.add_member(PATIENT, "patient", "P1", Attributes::new(), None).unwrap();
        let err = bus.add_member(MEDICAL_ANALYSIS, "examination", "hemogram", Attributes::new(), Some(patient));
        assert!(matches!(err, Err(SchemaError::InvalidParent { .. })));
    }

    #[test]
    fn wrong_level_parent_and_missing_parent_rejected() {
        let mut bus = default_bus();
        let (cat, _, _) = hematology(&mut bus);
        let err = bus.add_member(MEDICAL_ANALYSIS, "analysis", "HGB", Attributes::new(), Some(cat));
        assert!(matches!(err, Err(SchemaError::InvalidParent { .. })));
        let err = bus.add_member(MEDICAL_ANALYSIS, "analysis", "HGB", Attributes::new(), None);
        assert!(matches!(err, Err(SchemaError::MissingParent { .. })));
    }

    #[test]
    fn duplicate_natural_key_rejected_per_level() {
        let mut bus = default_bus();
        bus.add_member(PATIENT, "patient", "P1", Attributes::new(), None).unwrap();
        let err = bus.add_member(PATIENT, "patient", "P1", Attributes::new(), None);
        assert!(matches!(err, Err(SchemaError::DuplicateMember { .. })));
        // same natural key on another dimension is fine
        bus.add_member(PROVIDER, "provider", "P1", Attributes::new(), None).unwrap();
    }

    #[test]
    fn attribute_kinds_checked() {
        let mut bus = default_bus();
        let err = bus.add_member(PATIENT, "patient", "P1", attrs(&[("birth_date", "yesterday")]), None);
        assert!(matches!(err, Err(SchemaError::BadAttributeValue { .. })));
        let err = bus.add_member(PATIENT, "patient", "P1", attrs(&[("shoe_size", "44")]), None);
        assert!(matches!(err, Err(SchemaError::UnknownAttribute { .. })));
    }

    #[test]
    fn surrogate_keys_pairwise_distinct() {
        let mut bus = default_bus();
        let keys: Vec<_> = (0..60)
            .map(|i| bus.add_member(PATIENT, "patient", &format!("P{i}"), Attributes::new(), None).unwrap())
            .collect();
        for i in 0..keys.len() {
            for j in (i + 1)..keys.len() {
                assert_ne!(keys[i], keys[j]);
            }
        }
    }

    #[test]
    fn ancestor_lookup() {
        let mut bus = default_bus();
        let (cat, exam, analysis) = hematology(&mut bus);
        assert_eq!(bus.ancestor_at_level(analysis, "examination").unwrap().natural_key, "hemogram");
        assert_eq!(bus.ancestor_at_level(analysis, "analysis").unwrap().surrogate_key, analysis);
        // root equals parent-of-parent
        let by_links = bus.member(bus.member(bus.member(analysis).unwrap().parent.unwrap()).unwrap().parent.unwrap()).unwrap();
        assert_eq!(bus.ancestor_at_level(analysis, "category").unwrap(), by_links);
        assert_eq!(by_links.surrogate_key, cat);
        assert!(matches!(bus.ancestor_at_level(exam, "analysis"), Err(SchemaError::FinerLevel { .. })));
    }

    #[test]
    fn time_point_keys_round_trip() {
        let ts = NaiveDateTime::parse_from_str("2024-03-01 08:30", "%Y-%m-%d %H:%M").unwrap();
        let pre = TimePoint::new(ts, Some("pre-practice".into()));
        let post = TimePoint::new(ts, Some("post-practice".into()));
        assert_ne!(pre.natural_key(), post.natural_key());
        assert_eq!(TimePoint::from_natural_key(&pre.natural_key()), Some(pre.clone()));
        let mut bus = default_bus();
        let (a, created_a) = bus.ensure_path(TIME, &pre.member_path()).unwrap();
        let (b, created_b) = bus.ensure_path(TIME, &post.member_path()).unwrap();
        assert_ne!(a, b);
        assert_eq!((created_a, created_b), (4, 1));
        assert_eq!(bus.ancestor_at_level(a, "day").unwrap(), bus.ancestor_at_level(b, "day").unwrap());
    }

    #[test]
    fn register_datamarts() {
        let mut bus = default_bus();
        let before = bus.marts().count();
        let psych = DatamartDef {
            name: "psychology".into(),
            fact_defs: vec![FactDef::on_bus("psychology_score", MeasureKind::Numeric)],
            local_dimensions: vec![],
            shared_dimensions: BUS_DIMENSIONS.iter().map(|d| d.to_string()).collect(),
            record_layout: RecordLayout::Flat,
        };
        bus.register_datamart(psych.clone()).unwrap();
        assert_eq!(bus.marts().count(), before + 1);
        assert!(matches!(bus.register_datamart(psych), Err(SchemaError::DuplicateDatamart(_))));

        let bad = DatamartDef {
            name: "chiropody".into(),
            fact_defs: vec![FactDef::on_bus("chiro", MeasureKind::Text)],
            local_dimensions: vec![],
            shared_dimensions: vec!["foot".into()],
            record_layout: RecordLayout::Flat,
        };
        assert_eq!(bus.register_datamart(bad), Err(SchemaError::UnknownDimension("foot".into())));
    }

    #[test]
    fn local_dimensions_cannot_be_shared() {
        let mut bus = default_bus();
        let local = DimensionDef::new("probe", vec![LevelDef::new("probe", vec![])], true);
        let mut fact = FactDef::on_bus("cv_probe_reading", MeasureKind::Numeric);
        fact.dimension_bindings.push("probe".into());
        bus.register_datamart(DatamartDef {
            name: "cv_extra".into(),
            fact_defs: vec![fact],
            local_dimensions: vec![local],
            shared_dimensions: BUS_DIMENSIONS.iter().map(|d| d.to_string()).collect(),
            record_layout: RecordLayout::Flat,
        })
        .unwrap();
        assert!(!bus.dimension("probe").unwrap().conformed);
        let other = DatamartDef {
            name: "other".into(),
            fact_defs: vec![FactDef::on_bus("other_fact", MeasureKind::Text)],
            local_dimensions: vec![],
            shared_dimensions: vec!["patient".into(), "provider".into(), "time".into(), "medical_analysis".into(), "probe".into()],
            record_layout: RecordLayout::Flat,
        };
        assert_eq!(bus.register_datamart(other), Err(SchemaError::NotConformed("probe".into())));
    }

    #[test]
    fn conformance_reports() {
        let mut bus = default_bus();
        let report = bus.check_conformance(PATIENT).unwrap();
        assert!(report.ok);
        assert!(report.bindings.len() >= 2);

        bus.define_dimension(DimensionDef::new("lonely", vec![LevelDef::new("x", vec![])], true)).unwrap();
        let report = bus.check_conformance("lonely").unwrap();
        assert!(report.ok);
        assert!(report.bindings.is_empty());

        bus.add_member_via("biological", PATIENT, "patient", "P9", Attributes::new(), None).unwrap();
        let via_bio: Vec<_> = bus.mart_members("biological", PATIENT).unwrap().cloned().collect();
        let via_bm: Vec<_> = bus.mart_members("biometrical", PATIENT).unwrap().cloned().collect();
        assert_eq!(via_bio, via_bm);
        assert_eq!(via_bio.len(), 1);
        assert!(bus.check_conformance(PATIENT).unwrap().ok);
        assert!(bus.check_conformance("nope").is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let bus = default_bus();
        let json = serde_json::to_string(&bus.snapshot()).unwrap();
        let back = Bus::from_snapshot(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(serde_json::to_string(&back.snapshot()).unwrap(), json);
    }
}
