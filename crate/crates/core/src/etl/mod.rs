//! Metadata-driven, three-step load of heterogeneous lab files:
//!
//! 1. [`dedupe`] removes doubles from the raw input rows;
//! 2. [`resolve_dimensions`] finds or creates the patient, provider, time and
//!    analysis members each row refers to;
//! 3. [`transform`] converts values to canonical units and [`load`] inserts
//!    the resulting facts.
//!
//! Row-level problems quarantine the row and are listed in the [`LoadReport`];
//! they never abort the batch.

mod profile;
mod source;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use profile::{EtlProfile, ProfileColumns};
pub use source::{dedupe, detect_delimiter, parse_decimal, parse_source, parse_source_text, parse_timestamp, SourceRow, SourceTable};

use crate::dimension::{
    Attributes, FactRole, MeasureKind, MemberSpec, SurrogateKey, TimePoint, BUS_DIMENSIONS, CANONICAL_UNIT_ATTR,
    MEDICAL_ANALYSIS, PATIENT, PROVIDER, TIME,
};
use crate::store::{FactRecord, InsertOutcome, MeasureValue, StoreError, Warehouse};

#[derive(Debug, Error)]
pub enum EtlError {
    #[error("cannot read {file}: {reason}")]
    Unreadable { file: String, reason: String },
    #[error("{0} has no header line")]
    NoHeader(String),
    #[error("{file}: header lacks required column `{column}`")]
    MissingColumn { file: String, column: String },
    #[error("{file}: column `{column}` appears twice in the header")]
    DuplicateColumn { file: String, column: String },
    #[error("{file}: data row {row} has {found} cells, header has {expected}")]
    RaggedRow { file: String, row: usize, expected: usize, found: usize },
    #[error("invalid profile: {0}")]
    BadProfile(String),
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("profile target `{0}` must be a numeric fact table bound to exactly the four bus dimensions")]
    UnsupportedTarget(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl EtlError {
    /// File-level problems yield a report with zero inserts rather than an error.
    fn is_file_level(&self) -> bool {
        matches!(
            self,
            EtlError::Unreadable { .. }
                | EtlError::NoHeader(_)
                | EtlError::MissingColumn { .. }
                | EtlError::DuplicateColumn { .. }
                | EtlError::RaggedRow { .. }
        )
    }
}

/// Why a row was quarantined.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowIssue {
    EmptyPatientKey,
    EmptyProviderKey,
    BadTimestamp { text: String },
    UnmappedLabel { label: String },
    UnknownCode { code: String },
    BadAttribute { reason: String },
    NoCanonicalUnit { code: String },
    NonNumeric { text: String },
    NoConversion { from: String, to: String },
}

impl fmt::Display for RowIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowIssue::EmptyPatientKey => write!(f, "empty patient key"),
            RowIssue::EmptyProviderKey => write!(f, "empty provider key"),
            RowIssue::BadTimestamp { text } => write!(f, "unparseable timestamp `{text}`"),
            RowIssue::UnmappedLabel { label } => write!(f, "unmapped analysis label `{label}`"),
            RowIssue::UnknownCode { code } => write!(f, "canonical code `{code}` is not cataloged"),
            RowIssue::BadAttribute { reason } => write!(f, "bad attribute: {reason}"),
            RowIssue::NoCanonicalUnit { code } => write!(f, "analysis `{code}` has no canonical unit"),
            RowIssue::NonNumeric { text } => write!(f, "non-numeric value `{text}`"),
            RowIssue::NoConversion { from, to } => write!(f, "no conversion from `{from}` to `{to}`"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub row: usize,
    pub issue: RowIssue,
    pub reason: String,
}

impl RowError {
    fn new(row: usize, issue: RowIssue) -> Self {
        Self { row, reason: issue.to_string(), issue }
    }
}

/// A row after step 2: every dimension key is known.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedRow {
    pub row_number: usize,
    pub patient: SurrogateKey,
    pub provider: SurrogateKey,
    pub time: SurrogateKey,
    pub analysis: SurrogateKey,
    pub analysis_code: String,
    pub time_point: TimePoint,
    pub value_text: String,
    pub unit_text: String,
}

/// A row after step 3's transformation, ready to load.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalRow {
    pub row_number: usize,
    pub patient: SurrogateKey,
    pub provider: SurrogateKey,
    pub time: SurrogateKey,
    pub analysis: SurrogateKey,
    pub value: f64,
    pub unit: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Resolution {
    pub rows: Vec<ResolvedRow>,
    pub errors: Vec<RowError>,
    pub members_created: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadTally {
    pub facts_inserted: usize,
    pub duplicates_skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub batch_id: String,
    pub source_file: String,
    pub profile: String,
    pub rows_read: usize,
    pub doubles_removed: usize,
    pub members_created: BTreeMap<String, usize>,
    pub rows_transformed: usize,
    pub facts_inserted: usize,
    pub duplicates_skipped: usize,
    pub errors: Vec<RowError>,
    /// File-level failure or store write failure; when set the batch is incomplete.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl LoadReport {
    fn empty(batch: &str, file: &str, profile: &str) -> Self {
        Self {
            batch_id: batch.into(),
            source_file: file.into(),
            profile: profile.into(),
            members_created: zero_tally(),
            ..Default::default()
        }
    }

    pub fn members_created_total(&self) -> usize {
        self.members_created.values().sum()
    }

    /// `rows_read = doubles_removed + rows_transformed + errors`.
    pub fn is_balanced(&self) -> bool {
        self.rows_read == self.doubles_removed + self.rows_transformed + self.errors.len()
            && (self.failure.is_some() || self.facts_inserted + self.duplicates_skipped == self.rows_transformed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

fn zero_tally() -> BTreeMap<String, usize> {
    BUS_DIMENSIONS.iter().map(|d| (d.to_string(), 0)).collect()
}

fn check_target(wh: &Warehouse, profile: &EtlProfile) -> Result<(), EtlError> {
    let unsupported = || EtlError::UnsupportedTarget(profile.fact_def.clone());
    let (_, def) = wh.bus().fact_def(&profile.fact_def).ok_or_else(unsupported)?;
    let mut bound = def.dimension_bindings.clone();
    bound.sort();
    let mut bus: Vec<String> = BUS_DIMENSIONS.iter().map(|d| d.to_string()).collect();
    bus.sort();
    if def.measure_kind != MeasureKind::Numeric || def.role != FactRole::Simple || bound != bus {
        return Err(unsupported());
    }
    Ok(())
}

fn cell_attributes(row: &SourceRow, mapping: &BTreeMap<String, String>) -> Attributes {
    mapping
        .iter()
        .filter_map(|(attr, col)| {
            let value = match col.strip_prefix('=') {
                Some(constant) => constant.trim().to_string(),
                None => row.cell(col).to_string(),
            };
            (!value.is_empty()).then(|| (attr.clone(), value))
        })
        .collect()
}

/// Root-to-leaf member specs for an analysis code: just the leaf when it
/// already exists, otherwise the full path from the analysis catalog.
pub fn analysis_path(wh: &Warehouse, code: &str) -> Option<Vec<MemberSpec>> {
    let leaf = &wh.bus().dimension(MEDICAL_ANALYSIS).ok()?.leaf().name;
    if let Ok(Some(_)) = wh.bus().find_member(MEDICAL_ANALYSIS, leaf, code) {
        return Some(vec![MemberSpec::new(leaf, code, Attributes::new())]);
    }
    let def = wh.metadata().analysis(code)?;
    let labelled = |l: &str| [("label".to_string(), l.to_string())].into_iter().collect::<Attributes>();
    let mut attrs = labelled(&def.label);
    attrs.insert(CANONICAL_UNIT_ATTR.into(), def.canonical_unit.clone());
    Some(vec![
        MemberSpec::new("category", def.category.clone(), labelled(&def.category)),
        MemberSpec::new("examination", def.examination.clone(), labelled(&def.examination)),
        MemberSpec::new(leaf, code, attrs),
    ])
}

struct RowPlan {
    patient: (String, Attributes),
    provider: (String, Attributes),
    time: TimePoint,
    analysis: Vec<MemberSpec>,
    code: String,
}

fn plan_row(wh: &Warehouse, profile: &EtlProfile, row: &SourceRow) -> Result<RowPlan, RowIssue> {
    let cols = &profile.columns;
    let bus = wh.bus();
    let patient_key = row.cell(&cols.patient);
    if patient_key.is_empty() {
        return Err(RowIssue::EmptyPatientKey);
    }
    let provider_key = row.cell(&cols.provider);
    if provider_key.is_empty() {
        return Err(RowIssue::EmptyProviderKey);
    }
    let stamp = row.cell(&cols.timestamp);
    let timestamp = parse_timestamp(stamp).ok_or_else(|| RowIssue::BadTimestamp { text: stamp.into() })?;
    let session = cols.session.as_ref().map(|c| row.cell(c).to_string());
    let time = TimePoint::new(timestamp, session);

    let label = row.cell(&cols.analysis);
    let code = wh
        .metadata()
        .label(label)
        .map(|m| m.canonical_code.clone())
        .ok_or_else(|| RowIssue::UnmappedLabel { label: label.into() })?;
    let analysis = analysis_path(wh, &code).ok_or_else(|| RowIssue::UnknownCode { code: code.clone() })?;

    let patient_attrs = cell_attributes(row, &profile.patient_attributes);
    let provider_attrs = cell_attributes(row, &profile.provider_attributes);
    let bad = |e: crate::dimension::SchemaError| RowIssue::BadAttribute { reason: e.to_string() };
    let patient_level = &bus.dimension(PATIENT).map_err(bad)?.leaf().name;
    let provider_level = &bus.dimension(PROVIDER).map_err(bad)?.leaf().name;
    bus.validate_attributes(PATIENT, patient_level, &patient_attrs).map_err(bad)?;
    bus.validate_attributes(PROVIDER, provider_level, &provider_attrs).map_err(bad)?;
    Ok(RowPlan {
        patient: (patient_key.into(), patient_attrs),
        provider: (provider_key.into(), provider_attrs),
        time,
        analysis,
        code,
    })
}

/// Step 2: finds or creates the members each row refers to.
///
/// Members are only created for rows that are fully resolvable; a quarantined
/// row leaves the dimensions untouched.
pub fn resolve_dimensions(wh: &mut Warehouse, profile: &EtlProfile, rows: Vec<SourceRow>) -> Result<Resolution, EtlError> {
    let mut out = Resolution { members_created: zero_tally(), ..Default::default() };
    let patient_level = wh.bus().dimension(PATIENT).map_err(StoreError::from)?.leaf().name.clone();
    let provider_level = wh.bus().dimension(PROVIDER).map_err(StoreError::from)?.leaf().name.clone();
    wh.batch(|wh| {
        for row in rows {
            let plan = match plan_row(wh, profile, &row) {
                Ok(p) => p,
                Err(issue) => {
                    out.errors.push(RowError::new(row.row_number, issue));
                    continue;
                }
            };
            let (patient, n) =
                wh.ensure_path(PATIENT, &[MemberSpec::new(&patient_level, plan.patient.0, plan.patient.1)])?;
            *out.members_created.get_mut(PATIENT).expect("tally has bus dims") += n;
            let (provider, n) =
                wh.ensure_path(PROVIDER, &[MemberSpec::new(&provider_level, plan.provider.0, plan.provider.1)])?;
            *out.members_created.get_mut(PROVIDER).expect("tally has bus dims") += n;
            let (time, n) = wh.ensure_time(&plan.time)?;
            *out.members_created.get_mut(TIME).expect("tally has bus dims") += n;
            let (analysis, n) = wh.ensure_path(MEDICAL_ANALYSIS, &plan.analysis)?;
            *out.members_created.get_mut(MEDICAL_ANALYSIS).expect("tally has bus dims") += n;
            let cols = &profile.columns;
            out.rows.push(ResolvedRow {
                row_number: row.row_number,
                patient,
                provider,
                time,
                analysis,
                analysis_code: plan.code,
                time_point: plan.time,
                value_text: row.cell(&cols.value).to_string(),
                unit_text: row.cell(&cols.unit).to_string(),
            });
        }
        Ok::<_, EtlError>(())
    })?;
    Ok(out)
}

/// Step 3a: parses values and converts them to the analysis' canonical unit
/// through a direct registered conversion. Side-effect free.
pub fn transform(wh: &Warehouse, rows: Vec<ResolvedRow>) -> (Vec<CanonicalRow>, Vec<RowError>) {
    let mut ok = Vec::with_capacity(rows.len());
    let mut errors = Vec::new();
    for row in rows {
        match transform_row(wh, &row) {
            Ok((value, unit)) => ok.push(CanonicalRow {
                row_number: row.row_number,
                patient: row.patient,
                provider: row.provider,
                time: row.time,
                analysis: row.analysis,
                value,
                unit,
            }),
            Err(issue) => errors.push(RowError::new(row.row_number, issue)),
        }
    }
    (ok, errors)
}

fn transform_row(wh: &Warehouse, row: &ResolvedRow) -> Result<(f64, String), RowIssue> {
    let canonical = wh
        .bus()
        .member(row.analysis)
        .and_then(|m| m.attribute(CANONICAL_UNIT_ATTR))
        .ok_or_else(|| RowIssue::NoCanonicalUnit { code: row.analysis_code.clone() })?;
    let value = parse_decimal(&row.value_text).ok_or_else(|| RowIssue::NonNumeric { text: row.value_text.clone() })?;
    let converted = wh
        .metadata()
        .convert(value, &row.unit_text, canonical)
        .ok_or_else(|| RowIssue::NoConversion { from: row.unit_text.clone(), to: canonical.into() })?;
    if !converted.is_finite() {
        return Err(RowIssue::NonNumeric { text: row.value_text.clone() });
    }
    Ok((converted, canonical.to_string()))
}

/// Step 3b: inserts canonical rows; grain duplicates are counted, not errors.
/// A store failure stops the batch and is reported in `aborted`.
pub fn load(wh: &mut Warehouse, fact_def: &str, rows: &[CanonicalRow], batch: &str) -> LoadTally {
    let mut tally = LoadTally::default();
    let result = wh.batch(|wh| {
        for row in rows {
            let record = FactRecord::new(fact_def, MeasureValue::numeric(row.value, row.unit.clone()), batch)
                .with_key(PATIENT, row.patient)
                .with_key(PROVIDER, row.provider)
                .with_key(TIME, row.time)
                .with_key(MEDICAL_ANALYSIS, row.analysis);
            match wh.insert_fact(record)? {
                InsertOutcome::Inserted(_) => tally.facts_inserted += 1,
                InsertOutcome::Duplicate(_) => tally.duplicates_skipped += 1,
            }
        }
        Ok::<_, StoreError>(())
    });
    if let Err(e) = result {
        tally.aborted = Some(e.to_string());
    }
    tally
}

/// Runs all steps over one file with a registered profile.
pub fn run_pipeline(wh: &mut Warehouse, file: &Path, profile: &str, batch: &str) -> Result<LoadReport, EtlError> {
    let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let text = match std::fs::read_to_string(file) {
        Ok(t) => Ok(t),
        Err(e) => Err(EtlError::Unreadable { file: file.display().to_string(), reason: e.to_string() }),
    };
    run_inner(wh, &name, text, profile, batch)
}

/// [`run_pipeline`] over in-memory file content.
pub fn run_pipeline_text(wh: &mut Warehouse, file_name: &str, text: &str, profile: &str, batch: &str) -> Result<LoadReport, EtlError> {
    run_inner(wh, file_name, Ok(text.to_string()), profile, batch)
}

fn run_inner(
    wh: &mut Warehouse,
    file_name: &str,
    text: Result<String, EtlError>,
    profile_name: &str,
    batch: &str,
) -> Result<LoadReport, EtlError> {
    let profile = wh.profile(profile_name).cloned().ok_or_else(|| EtlError::UnknownProfile(profile_name.into()))?;
    check_target(wh, &profile)?;
    let mut report = LoadReport::empty(batch, file_name, profile_name);
    let table = match text.and_then(|t| parse_source_text(file_name, &t, &profile)) {
        Ok(t) => t,
        Err(e) if e.is_file_level() => {
            report.failure = Some(e.to_string());
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    report.rows_read = table.rows.len();
    let (rows, removed) = dedupe(table.rows);
    report.doubles_removed = removed;

    wh.batch(|wh| {
        let resolution = resolve_dimensions(wh, &profile, rows)?;
        report.members_created = resolution.members_created;
        report.errors = resolution.errors;
        let (canonical, errors) = transform(wh, resolution.rows);
        report.errors.extend(errors);
        report.errors.sort_by_key(|e| e.row);
        report.rows_transformed = canonical.len();
        let tally = load(wh, &profile.fact_def, &canonical, batch);
        report.facts_inserted = tally.facts_inserted;
        report.duplicates_skipped = tally.duplicates_skipped;
        report.failure = tally.aborted;
        Ok::<_, EtlError>(())
    })?;
    wh.write_batch_report(batch, &report.to_json())?;
    Ok(report)
}
