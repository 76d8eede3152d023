//! Operations shared by the CLI and the HTTP API. Both surfaces call these and
//! serialize the returned values unchanged, so their outputs agree.

use std::fmt;
use std::path::Path;

use biodw_core::analytics::{
    compare_groups, create_group, delete_group, export_attribute_value_view, measure_series, modify_group,
    patient_record, resolve_patient, rollup_aggregate, search_patients, select_members, Aggregate, AnalyticsError,
    AttributeValueView, CriteriaExpr, GroupComparison, Page, PatientGroup, PatientPage, PatientRecord, RollupQuery,
    RollupRow, SeriesPoint,
};
use biodw_core::bundle::BundleError;
use biodw_core::dimension::{ConformanceReport, DatamartDef, DimensionDef, SchemaError, BUS_DIMENSIONS, PATIENT};
use biodw_core::etl::{parse_timestamp, run_pipeline, run_pipeline_text, EtlError, EtlProfile, LoadReport};
use biodw_core::fixture::FixtureError;
use biodw_core::metadata::{MetadataEntry, MetadataError, Registered};
use biodw_core::schema::SchemaFileError;
use biodw_core::store::{DocumentEntry, DocumentId, FactId, StoreError};
use biodw_core::Warehouse;
use chrono::{NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

/// Failure of an operation, classified the way the API reports it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpError {
    NotFound(String),
    BadRequest(String),
    Conflict(String),
    Internal(String),
}

impl OpError {
    pub fn message(&self) -> &str {
        match self {
            OpError::NotFound(m) | OpError::BadRequest(m) | OpError::Conflict(m) | OpError::Internal(m) => m,
        }
    }
}

impl fmt::Display for OpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.message())
    }
}

impl std::error::Error for OpError {}

fn schema_error(e: SchemaError) -> OpError {
    let m = e.to_string();
    match e {
        SchemaError::UnknownDimension(_)
        | SchemaError::UnknownLevel { .. }
        | SchemaError::UnknownMember(_)
        | SchemaError::UnknownDatamart(_)
        | SchemaError::UnknownFact(_) => OpError::NotFound(m),
        SchemaError::DuplicateDimension(_)
        | SchemaError::DuplicateMember { .. }
        | SchemaError::DuplicateDatamart(_)
        | SchemaError::DuplicateFact(_) => OpError::Conflict(m),
        _ => OpError::BadRequest(m),
    }
}

fn metadata_error(e: MetadataError) -> OpError {
    let m = e.to_string();
    match e {
        MetadataError::DuplicateLabel { .. }
        | MetadataError::DuplicateConversion { .. }
        | MetadataError::DuplicateInterval(_)
        | MetadataError::DuplicateAnalysis(_)
        | MetadataError::ExaminationConflict { .. } => OpError::Conflict(m),
        _ => OpError::BadRequest(m),
    }
}

impl From<SchemaError> for OpError {
    fn from(e: SchemaError) -> Self {
        schema_error(e)
    }
}

impl From<MetadataError> for OpError {
    fn from(e: MetadataError) -> Self {
        metadata_error(e)
    }
}

impl From<StoreError> for OpError {
    fn from(e: StoreError) -> Self {
        let m = e.to_string();
        match e {
            StoreError::Schema(e) => schema_error(e),
            StoreError::Metadata(e) => metadata_error(e),
            StoreError::Io(_) | StoreError::Corrupt { .. } | StoreError::VersionMismatch { .. } => OpError::Internal(m),
            StoreError::NotAStore(_)
            | StoreError::UnknownFact(_)
            | StoreError::UnknownFactId(_)
            | StoreError::NotAReport(_)
            | StoreError::UnknownDocument(_) => OpError::NotFound(m),
            StoreError::LocationConflict(_) => OpError::Conflict(m),
            _ => OpError::BadRequest(m),
        }
    }
}

impl From<AnalyticsError> for OpError {
    fn from(e: AnalyticsError) -> Self {
        let m = e.to_string();
        match e {
            AnalyticsError::Schema(e) => schema_error(e),
            AnalyticsError::Store(e) => e.into(),
            AnalyticsError::UnknownPatient(_) | AnalyticsError::UnknownAnalysis(_) | AnalyticsError::UnknownGroup(_) => {
                OpError::NotFound(m)
            }
            AnalyticsError::DuplicateGroup(_) => OpError::Conflict(m),
            _ => OpError::BadRequest(m),
        }
    }
}

impl From<EtlError> for OpError {
    fn from(e: EtlError) -> Self {
        let m = e.to_string();
        match e {
            EtlError::Store(e) => e.into(),
            EtlError::UnknownProfile(_) => OpError::NotFound(m),
            _ => OpError::BadRequest(m),
        }
    }
}

impl From<BundleError> for OpError {
    fn from(e: BundleError) -> Self {
        match e {
            BundleError::Store(e) => e.into(),
            BundleError::UnknownAnalysis(_) => OpError::NotFound(e.to_string()),
            e => OpError::BadRequest(e.to_string()),
        }
    }
}

impl From<SchemaFileError> for OpError {
    fn from(e: SchemaFileError) -> Self {
        match e {
            SchemaFileError::Schema(e) => schema_error(e),
            e => OpError::BadRequest(e.to_string()),
        }
    }
}

impl From<FixtureError> for OpError {
    fn from(e: FixtureError) -> Self {
        OpError::Internal(e.to_string())
    }
}

impl From<std::io::Error> for OpError {
    fn from(e: std::io::Error) -> Self {
        OpError::Internal(e.to_string())
    }
}

pub type OpResult<T> = Result<T, OpError>;

/// One page of a listing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Listing<T> {
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    pub items: Vec<T>,
}

impl<T: Clone> Listing<T> {
    pub fn of(items: &[T], page: Page) -> Self {
        let start = (page.page - 1).saturating_mul(page.size);
        Listing {
            total: items.len(),
            page: page.page,
            page_size: page.size,
            items: items.iter().skip(start).take(page.size).cloned().collect(),
        }
    }
}

fn timestamp(text: Option<&str>, what: &str) -> OpResult<Option<NaiveDateTime>> {
    text.filter(|t| !t.trim().is_empty())
        .map(|t| parse_timestamp(t).ok_or_else(|| OpError::BadRequest(format!("{what}: unparseable timestamp `{t}`"))))
        .transpose()
}

fn date(text: Option<&str>, what: &str) -> OpResult<Option<NaiveDate>> {
    text.filter(|t| !t.trim().is_empty())
        .map(|t| {
            NaiveDate::parse_from_str(t.trim(), "%Y-%m-%d")
                .map_err(|_| OpError::BadRequest(format!("{what}: expected YYYY-MM-DD, got `{t}`")))
        })
        .transpose()
}

pub fn parse_criteria(text: &str) -> OpResult<CriteriaExpr> {
    text.parse::<CriteriaExpr>().map_err(OpError::from)
}

// ---- queries ---------------------------------------------------------------

pub fn search(wh: &Warehouse, q: &str, page: Page) -> OpResult<PatientPage> {
    Ok(search_patients(wh, q, page)?)
}

pub fn record(wh: &Warehouse, patient: &str, mart: &str) -> OpResult<PatientRecord> {
    let key = resolve_patient(wh, patient)?;
    Ok(patient_record(wh, key, mart)?)
}

pub fn series(wh: &Warehouse, patient: &str, analysis: &str, from: Option<&str>, to: Option<&str>) -> OpResult<Vec<SeriesPoint>> {
    let key = resolve_patient(wh, patient)?;
    let (from, to) = (timestamp(from, "from")?, timestamp(to, "to")?);
    Ok(measure_series(wh, key, analysis, from, to)?)
}

pub fn groups(wh: &Warehouse, page: Page) -> Listing<PatientGroup> {
    let all: Vec<PatientGroup> = wh.groups().cloned().collect();
    Listing::of(&all, page)
}

pub fn group(wh: &Warehouse, name: &str) -> OpResult<PatientGroup> {
    wh.group(name)
        .cloned()
        .ok_or_else(|| AnalyticsError::UnknownGroup(name.into()).into())
}

/// Patients a criteria expression would select, without saving a group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preview {
    pub criteria: CriteriaExpr,
    pub count: usize,
    pub patients: Vec<String>,
}

pub fn preview(wh: &Warehouse, criteria: &str) -> OpResult<Preview> {
    let criteria = parse_criteria(criteria)?;
    let members = select_members(wh, &criteria)?;
    let patients = members
        .iter()
        .filter_map(|k| wh.bus().member(*k))
        .filter(|m| m.dimension == PATIENT)
        .map(|m| m.natural_key.clone())
        .collect::<Vec<_>>();
    Ok(Preview { criteria, count: patients.len(), patients })
}

pub fn compare(wh: &Warehouse, groups: &[String], analysis: &str) -> OpResult<GroupComparison> {
    Ok(compare_groups(wh, groups, analysis)?)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollupParams {
    pub mart: String,
    pub fact: String,
    pub dim: String,
    pub level: String,
    pub agg: String,
}

pub fn rollup(wh: &Warehouse, p: &RollupParams) -> OpResult<Vec<RollupRow>> {
    let agg: Aggregate = p
        .agg
        .parse()
        .map_err(|_| OpError::BadRequest(format!("unknown aggregate `{}` (count, sum, mean, min, max)", p.agg)))?;
    Ok(rollup_aggregate(wh, &RollupQuery::new(&p.mart, &p.fact, &p.dim, &p.level, agg))?)
}

pub fn export_av(wh: &Warehouse, mart: &str, group: Option<&str>, as_of: Option<&str>) -> OpResult<AttributeValueView> {
    let as_of = date(as_of, "as_of")?;
    Ok(export_attribute_value_view(wh, mart, group.filter(|g| !g.is_empty()), as_of)?)
}

pub fn export_mart(wh: &Warehouse, mart: &str) -> OpResult<String> {
    Ok(wh.export_mart(mart)?)
}

fn document_id(id: &str) -> OpResult<DocumentId> {
    let well_formed = id.len() == 64 && id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
    if !well_formed {
        return Err(OpError::NotFound(format!("unknown document {id}")));
    }
    Ok(DocumentId(id.to_string()))
}

pub fn document(wh: &Warehouse, id: &str) -> OpResult<(DocumentEntry, Vec<u8>)> {
    let id = document_id(id)?;
    let entry = wh.document(&id).cloned().ok_or_else(|| StoreError::UnknownDocument(id.clone()))?;
    let bytes = wh.document_bytes(&id)?;
    Ok((entry, bytes))
}

pub fn report_documents(wh: &Warehouse, report: &str, page: Page) -> OpResult<Listing<DocumentEntry>> {
    let id = report
        .trim_start_matches('#')
        .parse::<u64>()
        .map_err(|_| OpError::NotFound(format!("unknown fact {report}")))?;
    let docs: Vec<DocumentEntry> = wh.documents_of_report(FactId(id))?.into_iter().cloned().collect();
    Ok(Listing::of(&docs, page))
}

/// Bus dimensions, datamarts and the conformance of every bus dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaView {
    pub dimensions: Vec<DimensionDef>,
    pub datamarts: Vec<DatamartDef>,
    pub conformance: Vec<ConformanceReport>,
}

pub fn schema(wh: &Warehouse) -> OpResult<SchemaView> {
    let bus = wh.bus();
    let conformance = BUS_DIMENSIONS
        .iter()
        .map(|d| bus.check_conformance(d))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SchemaView {
        dimensions: bus.dimensions().cloned().collect(),
        datamarts: bus.marts().cloned().collect(),
        conformance,
    })
}

pub fn metadata(wh: &Warehouse, page: Page) -> Listing<MetadataEntry> {
    Listing::of(wh.metadata().entries(), page)
}

pub fn profiles(wh: &Warehouse) -> Vec<EtlProfile> {
    wh.profiles().cloned().collect()
}

pub fn audit(wh: &Warehouse) -> biodw_core::store::AuditReport {
    wh.audit()
}

// ---- mutations -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupBody {
    pub name: String,
    pub criteria: String,
}

pub fn create(wh: &mut Warehouse, name: &str, criteria: &str) -> OpResult<PatientGroup> {
    Ok(create_group(wh, name, parse_criteria(criteria)?)?)
}

pub fn modify(wh: &mut Warehouse, name: &str, criteria: Option<&str>) -> OpResult<PatientGroup> {
    let criteria = criteria.map(parse_criteria).transpose()?;
    Ok(modify_group(wh, name, criteria)?)
}

pub fn delete(wh: &mut Warehouse, name: &str) -> OpResult<PatientGroup> {
    Ok(delete_group(wh, name)?)
}

/// Outcome of registering one metadata entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub entry: MetadataEntry,
    pub outcome: Registered,
}

/// Registers entries in order inside one batch; stops at the first rejection.
pub fn register_metadata(wh: &mut Warehouse, entries: Vec<MetadataEntry>) -> OpResult<Vec<Registration>> {
    wh.batch(|wh| {
        entries
            .into_iter()
            .map(|entry| {
                let outcome = wh.register_metadata(entry.clone())?;
                Ok(Registration { entry, outcome })
            })
            .collect::<OpResult<Vec<_>>>()
    })
}

pub fn register_profile(wh: &mut Warehouse, text: &str) -> OpResult<EtlProfile> {
    let profile = EtlProfile::parse(text)?;
    wh.register_profile(profile.clone())?;
    Ok(profile)
}

/// Batch id used when the caller names none: file stem plus UTC time.
pub fn default_batch(file: &str) -> String {
    let stem = Path::new(file).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{stem}-{}", Utc::now().format("%Y%m%dT%H%M%S%3fZ"))
}

pub fn etl_file(wh: &mut Warehouse, profile: &str, file: &Path, batch: Option<&str>) -> OpResult<LoadReport> {
    let batch = batch.map(str::to_string).unwrap_or_else(|| default_batch(&file.to_string_lossy()));
    Ok(run_pipeline(wh, file, profile, &batch)?)
}

pub fn etl_text(wh: &mut Warehouse, profile: &str, file: &str, text: &str, batch: Option<&str>) -> OpResult<LoadReport> {
    let batch = batch.map(str::to_string).unwrap_or_else(|| default_batch(file));
    Ok(run_pipeline_text(wh, file, text, profile, &batch)?)
}
