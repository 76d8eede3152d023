//! JSON bundle files: complex facts (a report, its numeric results and its
//! documents) written with natural keys, see `docs/storage-format.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dimension::{Attributes, MemberSpec, SurrogateKey, TimePoint, CANONICAL_UNIT_ATTR, MEDICAL_ANALYSIS, PATIENT, PROVIDER, TIME};
use crate::etl::{analysis_path, parse_timestamp};
use crate::schema::{CV_REPORT, CV_RESULT};
use crate::store::{BundleOutcome, ComplexFactBundle, FactRecord, MeasureValue, StoreError, Warehouse};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSpec {
    pub patient: String,
    pub provider: String,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    /// Analysis code the report describes, e.g. an echocardiography.
    pub analysis: String,
    pub conclusion: String,
    #[serde(default)]
    pub results: Vec<ResultSpec>,
    #[serde(default)]
    pub documents: Vec<DocumentSpec>,
    #[serde(default = "default_report")]
    pub report_fact: String,
    #[serde(default = "default_result")]
    pub result_fact: String,
}

fn default_report() -> String {
    CV_REPORT.into()
}

fn default_result() -> String {
    CV_RESULT.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultSpec {
    pub analysis: String,
    pub value: f64,
    pub unit: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentSpec {
    /// Path relative to the bundle file.
    pub file: String,
    pub media_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bundle file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read document {file}: {reason}")]
    Document { file: String, reason: String },
    #[error("unparseable timestamp `{0}`")]
    BadTimestamp(String),
    #[error("analysis `{0}` is neither present nor cataloged")]
    UnknownAnalysis(String),
    #[error("no conversion from `{from}` to `{to}` for `{analysis}`")]
    NoConversion { analysis: String, from: String, to: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub fn parse_bundles(text: &str) -> Result<Vec<BundleSpec>, BundleError> {
    Ok(serde_json::from_str(text)?)
}

fn ensure_analysis(wh: &mut Warehouse, code: &str) -> Result<SurrogateKey, BundleError> {
    let path = analysis_path(wh, code).ok_or_else(|| BundleError::UnknownAnalysis(code.into()))?;
    Ok(wh.ensure_path(MEDICAL_ANALYSIS, &path)?.0)
}

/// Loads one bundle, reading its documents through `read`.
pub fn load_bundle(
    wh: &mut Warehouse,
    spec: &BundleSpec,
    batch: &str,
    read: &mut dyn FnMut(&str) -> std::io::Result<Vec<u8>>,
) -> Result<BundleOutcome, BundleError> {
    let timestamp = parse_timestamp(&spec.timestamp).ok_or_else(|| BundleError::BadTimestamp(spec.timestamp.clone()))?;
    let point = TimePoint::new(timestamp, spec.session.clone());
    let mut docs = Vec::with_capacity(spec.documents.len());
    for d in &spec.documents {
        let bytes = read(&d.file).map_err(|e| BundleError::Document { file: d.file.clone(), reason: e.to_string() })?;
        docs.push((bytes, d));
    }
    wh.batch(|wh| {
        let patient_leaf = wh.bus().dimension(PATIENT).map_err(StoreError::from)?.leaf().name.clone();
        let provider_leaf = wh.bus().dimension(PROVIDER).map_err(StoreError::from)?.leaf().name.clone();
        let patient = wh.ensure_path(PATIENT, &[MemberSpec::new(patient_leaf, &spec.patient, Attributes::new())])?.0;
        let provider = wh.ensure_path(PROVIDER, &[MemberSpec::new(provider_leaf, &spec.provider, Attributes::new())])?.0;
        let time = wh.ensure_time(&point)?.0;
        let keyed = |record: FactRecord, analysis: SurrogateKey| {
            record
                .with_key(PATIENT, patient)
                .with_key(PROVIDER, provider)
                .with_key(TIME, time)
                .with_key(MEDICAL_ANALYSIS, analysis)
        };
        let report_analysis = ensure_analysis(wh, &spec.analysis)?;
        let report = keyed(FactRecord::new(&spec.report_fact, MeasureValue::text(&spec.conclusion), batch), report_analysis);
        let mut results = Vec::with_capacity(spec.results.len());
        for r in &spec.results {
            let key = ensure_analysis(wh, &r.analysis)?;
            let canonical = wh
                .bus()
                .member(key)
                .and_then(|m| m.attribute(CANONICAL_UNIT_ATTR))
                .unwrap_or(&r.unit)
                .to_string();
            let value = wh.metadata().convert(r.value, &r.unit, &canonical).ok_or_else(|| BundleError::NoConversion {
                analysis: r.analysis.clone(),
                from: r.unit.clone(),
                to: canonical.clone(),
            })?;
            results.push(keyed(FactRecord::new(&spec.result_fact, MeasureValue::numeric(value, canonical), batch), key));
        }
        let mut documents = Vec::with_capacity(docs.len());
        for (bytes, d) in &docs {
            documents.push(wh.store_document(bytes, &d.media_type, d.caption.as_deref())?.id);
        }
        Ok(wh.insert_bundle(ComplexFactBundle { report, results, documents })?)
    })
}

/// Loads every bundle of a JSON bundle file; documents resolve relative to it.
pub fn load_bundle_file(wh: &mut Warehouse, path: &Path, batch: &str) -> Result<Vec<BundleOutcome>, BundleError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BundleError::Document { file: path.display().to_string(), reason: e.to_string() })?;
    let specs = parse_bundles(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut read = |file: &str| std::fs::read(base.join(file));
    wh.batch(|wh| specs.iter().map(|s| load_bundle(wh, s, batch, &mut read)).collect())
}
