use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{latest_values, AnalyticsError};
use crate::dimension::{MeasureKind, SurrogateKey, MEDICAL_ANALYSIS, PATIENT};
use crate::store::{FactFilter, Warehouse};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Count,
    Sum,
    Mean,
    Min,
    Max,
}

impl FromStr for Aggregate {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "count" => Ok(Aggregate::Count),
            "sum" => Ok(Aggregate::Sum),
            "mean" => Ok(Aggregate::Mean),
            "min" => Ok(Aggregate::Min),
            "max" => Ok(Aggregate::Max),
            other => Err(format!("unknown aggregate `{other}` (expected count, sum, mean, min or max)")),
        }
    }
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Aggregate::Count => "count",
            Aggregate::Sum => "sum",
            Aggregate::Mean => "mean",
            Aggregate::Min => "min",
            Aggregate::Max => "max",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RollupQuery {
    pub mart: String,
    pub fact_def: String,
    pub dimension: String,
    pub level: String,
    pub aggregate: Aggregate,
    /// Extra restriction; its mart and fact table are overridden.
    pub filter: FactFilter,
}

impl RollupQuery {
    pub fn new(
        mart: impl Into<String>,
        fact_def: impl Into<String>,
        dimension: impl Into<String>,
        level: impl Into<String>,
        aggregate: Aggregate,
    ) -> Self {
        Self {
            mart: mart.into(),
            fact_def: fact_def.into(),
            dimension: dimension.into(),
            level: level.into(),
            aggregate,
            filter: FactFilter::default(),
        }
    }

    pub fn filter(mut self, filter: FactFilter) -> Self {
        self.filter = filter;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollupRow {
    pub key: SurrogateKey,
    pub member: String,
    pub count: usize,
    pub value: f64,
}

/// Groups matching facts by the ancestor of their leaf member at `level` and
/// aggregates each group. Rows are in member natural-key order.
pub fn rollup_aggregate(wh: &Warehouse, q: &RollupQuery) -> Result<Vec<RollupRow>, AnalyticsError> {
    let bus = wh.bus();
    bus.level_index(&q.dimension, &q.level)?;
    let mart = bus.mart(&q.mart)?;
    let def = mart
        .fact_def(&q.fact_def)
        .ok_or_else(|| crate::store::StoreError::UnknownFact(q.fact_def.clone()))?;
    if !def.binds(&q.dimension) {
        return Err(AnalyticsError::UnboundDimension { fact_def: def.name.clone(), dimension: q.dimension.clone() });
    }
    if q.aggregate != Aggregate::Count && def.measure_kind != MeasureKind::Numeric {
        return Err(AnalyticsError::NonNumeric { fact_def: def.name.clone() });
    }
    let filter = q.filter.clone().mart(&q.mart).fact_def(&q.fact_def);
    struct Acc {
        count: usize,
        sum: f64,
        min: f64,
        max: f64,
    }
    let mut groups: BTreeMap<SurrogateKey, Acc> = BTreeMap::new();
    for fact in wh.query_facts(&filter)? {
        let Some(leaf) = fact.record.key(&q.dimension) else { continue };
        let ancestor = bus.ancestor_at_level(leaf, &q.level)?.surrogate_key;
        let v = fact.record.measure.as_number().unwrap_or(0.0);
        let acc = groups.entry(ancestor).or_insert(Acc { count: 0, sum: 0.0, min: f64::INFINITY, max: f64::NEG_INFINITY });
        acc.count += 1;
        acc.sum += v;
        acc.min = acc.min.min(v);
        acc.max = acc.max.max(v);
    }
    let mut rows: Vec<RollupRow> = groups
        .into_iter()
        .map(|(key, acc)| RollupRow {
            key,
            member: bus.member(key).map(|m| m.natural_key.clone()).unwrap_or_default(),
            count: acc.count,
            value: match q.aggregate {
                Aggregate::Count => acc.count as f64,
                Aggregate::Sum => acc.sum,
                Aggregate::Mean => acc.sum / acc.count as f64,
                Aggregate::Min => acc.min,
                Aggregate::Max => acc.max,
            },
        })
        .collect();
    rows.sort_by(|a, b| a.member.cmp(&b.member).then(a.key.cmp(&b.key)));
    Ok(rows)
}

/// Patient × analysis table of latest canonical values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeValueView {
    pub mart: String,
    /// Analysis codes, ascending.
    pub columns: Vec<String>,
    pub rows: Vec<AttributeValueRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeValueRow {
    pub patient: String,
    pub cells: Vec<Option<f64>>,
}

impl AttributeValueView {
    /// Delimited text with a `patient` column followed by one column per code.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["patient".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![row.patient.clone()];
            rec.extend(row.cells.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
    }
}

/// One row per patient (all patients with a fact in the mart, or every member
/// of `group`), one column per analysis code appearing in the mart's numeric facts.
pub fn export_attribute_value_view(
    wh: &Warehouse,
    mart: &str,
    group: Option<&str>,
    as_of: Option<NaiveDate>,
) -> Result<AttributeValueView, AnalyticsError> {
    let bus = wh.bus();
    let def = bus.mart(mart)?;
    let tables: BTreeSet<&str> = def.fact_defs.iter().map(|f| f.name.as_str()).collect();
    let mut analyses: BTreeMap<String, SurrogateKey> = BTreeMap::new();
    let mut with_facts: BTreeSet<SurrogateKey> = BTreeSet::new();
    for fact in wh.facts().iter().filter(|f| tables.contains(f.record.fact_def.as_str())) {
        if let Some(p) = fact.record.key(PATIENT) {
            with_facts.insert(p);
        }
        if fact.record.measure.as_number().is_some() {
            if let Some(m) = fact.record.key(MEDICAL_ANALYSIS).and_then(|k| bus.member(k)) {
                analyses.insert(m.natural_key.clone(), m.surrogate_key);
            }
        }
    }
    let patients: BTreeSet<SurrogateKey> = match group {
        Some(g) => wh.group(g).ok_or_else(|| AnalyticsError::UnknownGroup(g.into()))?.members.clone(),
        None => with_facts,
    };
    // cells follow the patient's series for the code, whichever table holds it
    let per_code: Vec<_> = analyses.values().map(|key| latest_values(wh, *key, as_of)).collect();
    let mut rows: Vec<AttributeValueRow> = patients
        .iter()
        .filter_map(|p| bus.member(*p))
        .map(|m| AttributeValueRow {
            patient: m.natural_key.clone(),
            cells: per_code.iter().map(|l| l.get(&m.surrogate_key).map(|(_, v)| *v)).collect(),
        })
        .collect();
    rows.sort_by(|a, b| a.patient.cmp(&b.patient));
    Ok(AttributeValueView { mart: mart.into(), columns: analyses.into_keys().collect(), rows })
}
