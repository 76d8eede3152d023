use std::collections::BTreeMap;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::{analysis_member, flag_fact, patient_member, AnalyticsError, NormFlag};
use crate::dimension::{DimensionMember, RecordLayout, SurrogateKey, TimePoint, MEDICAL_ANALYSIS, PATIENT};
use crate::store::{FactFilter, FactId, MeasureValue, MemberPredicate, StoredFact, Warehouse};

pub const DEFAULT_PAGE_SIZE: usize = 50;

/// One-based page request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub page: usize,
    pub size: usize,
}

impl Default for Page {
    fn default() -> Self {
        Self { page: 1, size: DEFAULT_PAGE_SIZE }
    }
}

impl Page {
    pub fn new(page: Option<usize>, size: Option<usize>) -> Self {
        Self { page: page.unwrap_or(1).max(1), size: size.unwrap_or(DEFAULT_PAGE_SIZE).max(1) }
    }

    fn slice<T: Clone>(&self, items: &[T]) -> Vec<T> {
        let start = (self.page - 1).saturating_mul(self.size);
        items.iter().skip(start).take(self.size).cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientPage {
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    pub patients: Vec<DimensionMember>,
}

fn display_name(m: &DimensionMember) -> &str {
    m.attribute("display_name").unwrap_or("")
}

/// Patients whose natural key or display name contains `query`, case-insensitively.
/// Exact matches come first, the rest in natural-key order.
pub fn search_patients(wh: &Warehouse, query: &str, page: Page) -> Result<PatientPage, AnalyticsError> {
    let q = query.trim().to_lowercase();
    let mut hits: Vec<(bool, &DimensionMember)> = wh
        .bus()
        .members(PATIENT)?
        .filter_map(|m| {
            let key = m.natural_key.to_lowercase();
            let name = display_name(m).to_lowercase();
            let exact = !q.is_empty() && (key == q || name == q);
            (key.contains(&q) || name.contains(&q)).then_some((exact, m))
        })
        .collect();
    hits.sort_by(|(ea, a), (eb, b)| eb.cmp(ea).then_with(|| a.natural_key.cmp(&b.natural_key)).then(a.surrogate_key.cmp(&b.surrogate_key)));
    let all: Vec<DimensionMember> = hits.into_iter().map(|(_, m)| m.clone()).collect();
    Ok(PatientPage { total: all.len(), page: page.page, page_size: page.size, patients: page.slice(&all) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub fact_id: FactId,
    pub fact_def: String,
    pub analysis: String,
    pub time: TimePoint,
    pub value: MeasureValue,
    pub flag: NormFlag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<FactId>,
}

/// Node of the medical-analysis hierarchy; entries sit on leaf (analysis) nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordNode {
    pub level: String,
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<RecordNode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entries: Vec<RecordEntry>,
}

impl RecordNode {
    fn collect<'a>(&'a self, out: &mut Vec<&'a RecordEntry>) {
        out.extend(self.entries.iter());
        for c in &self.children {
            c.collect(out);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient: String,
    pub mart: String,
    pub layout: RecordLayout,
    pub nodes: Vec<RecordNode>,
}

impl PatientRecord {
    /// Every entry of the tree, in tree order.
    pub fn flatten(&self) -> Vec<&RecordEntry> {
        let mut out = Vec::new();
        for n in &self.nodes {
            n.collect(&mut out);
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn node_for(m: &DimensionMember) -> RecordNode {
    RecordNode {
        level: m.level.clone(),
        key: m.natural_key.clone(),
        label: m.attribute("label").map(str::to_string),
        children: Vec::new(),
        entries: Vec::new(),
    }
}

fn insert_path(nodes: &mut Vec<RecordNode>, path: &[&DimensionMember], entry: RecordEntry) {
    let (head, rest) = path.split_first().expect("non-empty path");
    let idx = match nodes.binary_search_by(|n| n.key.as_str().cmp(&head.natural_key)) {
        Ok(i) => i,
        Err(i) => {
            nodes.insert(i, node_for(head));
            i
        }
    };
    if rest.is_empty() {
        nodes[idx].entries.push(entry);
    } else {
        insert_path(&mut nodes[idx].children, rest, entry);
    }
}

/// The patient's facts in `mart`, grouped along the medical-analysis hierarchy
/// (or flat, per the mart's layout). Every entry carries its norm flag.
pub fn patient_record(wh: &Warehouse, patient: SurrogateKey, mart: &str) -> Result<PatientRecord, AnalyticsError> {
    let person = patient_member(wh, patient)?;
    let def = wh.bus().mart(mart)?;
    let patient_leaf = wh.bus().dimension(PATIENT)?.leaf().name.clone();
    let filter = FactFilter::default().mart(mart).member(MemberPredicate::key(PATIENT, patient_leaf, patient));
    let mut facts: Vec<(TimePoint, &StoredFact)> = wh
        .query_facts(&filter)?
        .into_iter()
        .map(|f| (wh.time_point(f).expect("facts on the bus carry a time key"), f))
        .collect();
    facts.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.id.cmp(&b.1.id)));

    let mut nodes = Vec::new();
    for (time, fact) in facts {
        let Some(leaf) = fact.record.key(MEDICAL_ANALYSIS).and_then(|k| wh.bus().member(k)) else { continue };
        let mut path = vec![leaf];
        if def.record_layout == RecordLayout::Hierarchical {
            while let Some(parent) = path.last().and_then(|m| m.parent).and_then(|k| wh.bus().member(k)) {
                path.push(parent);
            }
            path.reverse();
        }
        let entry = RecordEntry {
            fact_id: fact.id,
            fact_def: fact.record.fact_def.clone(),
            analysis: leaf.natural_key.clone(),
            time,
            value: fact.record.measure.clone(),
            flag: flag_fact(wh, fact, &leaf.natural_key, Some(person)),
            report: fact.record.report,
        };
        insert_path(&mut nodes, &path, entry);
    }
    Ok(PatientRecord { patient: person.natural_key.clone(), mart: mart.into(), layout: def.record_layout, nodes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub fact_id: FactId,
    pub time: TimePoint,
    pub value: f64,
    pub unit: String,
    pub flag: NormFlag,
}

/// Numeric values of one analysis for one patient, ordered by
/// (timestamp, session tag, fact id); both window ends inclusive.
pub fn measure_series(
    wh: &Warehouse,
    patient: SurrogateKey,
    analysis: &str,
    from: Option<NaiveDateTime>,
    to: Option<NaiveDateTime>,
) -> Result<Vec<SeriesPoint>, AnalyticsError> {
    let person = patient_member(wh, patient)?;
    let analysis_key = analysis_member(wh, analysis)?.surrogate_key;
    let mut by_time: BTreeMap<(TimePoint, FactId), SeriesPoint> = BTreeMap::new();
    for fact in wh.facts() {
        if fact.record.key(PATIENT) != Some(patient) || fact.record.key(MEDICAL_ANALYSIS) != Some(analysis_key) {
            continue;
        }
        let MeasureValue::Numeric { value, unit } = &fact.record.measure else { continue };
        let Some(time) = wh.time_point(fact) else { continue };
        if from.is_some_and(|f| time.timestamp < f) || to.is_some_and(|t| time.timestamp > t) {
            continue;
        }
        let point = SeriesPoint {
            fact_id: fact.id,
            time: time.clone(),
            value: *value,
            unit: unit.clone(),
            flag: flag_fact(wh, fact, analysis, Some(person)),
        };
        by_time.insert((time, fact.id), point);
    }
    Ok(by_time.into_values().collect())
}
