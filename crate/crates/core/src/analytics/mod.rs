//! Patient-oriented views, patient groups and population statistics,
//! hierarchy roll-up and attribute-value export.

mod groups;
mod olap;
mod patient;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use groups::{
    compare_groups, create_group, delete_group, modify_group, select_members, Comparator, CriteriaExpr, GroupComparison,
    GroupStats, PatientGroup, Predicate, Subject,
};
pub use olap::{
    export_attribute_value_view, rollup_aggregate, Aggregate, AttributeValueRow, AttributeValueView, RollupQuery, RollupRow,
};
pub use patient::{
    measure_series, patient_record, search_patients, Page, PatientPage, PatientRecord, RecordEntry, RecordNode, SeriesPoint,
    DEFAULT_PAGE_SIZE,
};

use crate::dimension::{DimensionMember, SchemaError, SurrogateKey, TimePoint, MEDICAL_ANALYSIS, PATIENT};
use crate::metadata::ReferenceInterval;
use crate::store::{FactId, StoreError, StoredFact, Warehouse};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("unknown patient {0}")]
    UnknownPatient(String),
    #[error("unknown analysis `{0}`")]
    UnknownAnalysis(String),
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("group `{0}` already exists")]
    DuplicateGroup(String),
    #[error("invalid group name `{0}`")]
    BadGroupName(String),
    #[error("predicate `{predicate}`: {reason}")]
    BadCriteria { predicate: String, reason: String },
    #[error("dimension `{dimension}` is not bound by `{fact_def}`")]
    UnboundDimension { fact_def: String, dimension: String },
    #[error("`{fact_def}` is not numeric; only count applies")]
    NonNumeric { fact_def: String },
    #[error("no comparison without at least one group")]
    NoGroups,
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Position of a value relative to its reference interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NormFlag {
    Low,
    Normal,
    High,
    Unknown,
}

/// Inclusive comparison against one interval; a missing bound is open.
pub fn flag_against(value: f64, interval: Option<&ReferenceInterval>) -> NormFlag {
    let Some(interval) = interval else { return NormFlag::Unknown };
    if !value.is_finite() {
        return NormFlag::Unknown;
    }
    if interval.low.is_some_and(|low| value < low) {
        NormFlag::Low
    } else if interval.high.is_some_and(|high| value > high) {
        NormFlag::High
    } else {
        NormFlag::Normal
    }
}

/// Flags a canonical-unit value using the most specific interval for the patient.
pub fn flag_out_of_norm(wh: &Warehouse, value: f64, code: &str, patient: Option<&DimensionMember>) -> NormFlag {
    flag_against(value, wh.metadata().applicable_interval(code, patient))
}

fn flag_fact(wh: &Warehouse, fact: &StoredFact, code: &str, patient: Option<&DimensionMember>) -> NormFlag {
    match fact.record.measure.as_number() {
        Some(v) => flag_out_of_norm(wh, v, code, patient),
        None => NormFlag::Unknown,
    }
}

pub(crate) fn patient_member(wh: &Warehouse, key: SurrogateKey) -> Result<&DimensionMember, AnalyticsError> {
    wh.bus()
        .member(key)
        .filter(|m| m.dimension == PATIENT)
        .ok_or_else(|| AnalyticsError::UnknownPatient(key.to_string()))
}

/// Resolves a patient by surrogate key (`#12` or `12`) or natural key.
pub fn resolve_patient(wh: &Warehouse, reference: &str) -> Result<SurrogateKey, AnalyticsError> {
    let leaf = &wh.bus().dimension(PATIENT)?.leaf().name;
    if let Some(m) = wh.bus().find_member(PATIENT, leaf, reference)? {
        return Ok(m.surrogate_key);
    }
    reference
        .trim_start_matches('#')
        .parse::<u64>()
        .ok()
        .map(SurrogateKey)
        .filter(|k| patient_member(wh, *k).is_ok())
        .ok_or_else(|| AnalyticsError::UnknownPatient(reference.into()))
}

pub(crate) fn analysis_member<'a>(wh: &'a Warehouse, code: &str) -> Result<&'a DimensionMember, AnalyticsError> {
    let leaf = &wh.bus().dimension(MEDICAL_ANALYSIS)?.leaf().name;
    wh.bus()
        .find_member(MEDICAL_ANALYSIS, leaf, code)?
        .ok_or_else(|| AnalyticsError::UnknownAnalysis(code.into()))
}

/// Ordering key of a fact along time: timestamp, then session tag, then id.
pub(crate) type TimeOrder = (TimePoint, FactId);

/// Latest numeric value per patient for one analysis, optionally only facts
/// at or before `as_of`.
pub(crate) fn latest_values(
    wh: &Warehouse,
    analysis: SurrogateKey,
    as_of: Option<chrono::NaiveDate>,
) -> BTreeMap<SurrogateKey, (TimeOrder, f64)> {
    let mut latest: BTreeMap<SurrogateKey, (TimeOrder, f64)> = BTreeMap::new();
    for fact in wh.facts() {
        if fact.record.key(MEDICAL_ANALYSIS) != Some(analysis) {
            continue;
        }
        let (Some(patient), Some(value), Some(point)) =
            (fact.record.key(PATIENT), fact.record.measure.as_number(), wh.time_point(fact))
        else {
            continue;
        };
        if as_of.is_some_and(|d| point.date() > d) {
            continue;
        }
        let order = (point, fact.id);
        match latest.get(&patient) {
            Some((seen, _)) if *seen >= order => {}
            _ => {
                latest.insert(patient, (order, value));
            }
        }
    }
    latest
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metadata::Qualifier;
    use proptest::prelude::*;

    fn interval(low: Option<f64>, high: Option<f64>) -> ReferenceInterval {
        ReferenceInterval { canonical_code: "X".into(), low, high, qualifier: None }
    }

    #[test]
    fn inclusive_bounds() {
        let i = interval(Some(1.0), Some(2.0));
        assert_eq!(flag_against(1.0, Some(&i)), NormFlag::Normal);
        assert_eq!(flag_against(2.0, Some(&i)), NormFlag::Normal);
        assert_eq!(flag_against(0.999, Some(&i)), NormFlag::Low);
        assert_eq!(flag_against(2.001, Some(&i)), NormFlag::High);
        assert_eq!(flag_against(5.0, None), NormFlag::Unknown);
        assert_eq!(flag_against(-5.0, Some(&interval(None, Some(2.0)))), NormFlag::Normal);
    }

    #[test]
    fn qualified_interval_wins() {
        let mut wh = Warehouse::in_memory();
        for (q, low) in [(None, 10.0), (Some("F"), 12.0)] {
            wh.register_metadata(crate::metadata::MetadataEntry::Interval(ReferenceInterval {
                canonical_code: "HGB".into(),
                low: Some(low),
                high: Some(18.0),
                qualifier: q.map(|v| Qualifier { attribute: "sex".into(), value: v.into() }),
            }))
            .unwrap();
        }
        let (k, _) = wh
            .ensure_path(
                PATIENT,
                &[crate::dimension::MemberSpec::new("patient", "P1", [("sex".to_string(), "F".to_string())].into())],
            )
            .unwrap();
        let p = wh.bus().member(k).unwrap().clone();
        assert_eq!(flag_out_of_norm(&wh, 11.0, "HGB", Some(&p)), NormFlag::Low);
        assert_eq!(flag_out_of_norm(&wh, 11.0, "HGB", None), NormFlag::Normal);
        assert_eq!(flag_out_of_norm(&wh, 11.0, "NONE", None), NormFlag::Unknown);
    }

    proptest! {
        #[test]
        fn monotone_in_value(low in -100.0f64..100.0, width in 0.0f64..50.0, v in -200.0f64..200.0) {
            let high = low + width;
            let i = interval(Some(low), Some(high));
            let expected = if v < low { NormFlag::Low } else if v > high { NormFlag::High } else { NormFlag::Normal };
            prop_assert_eq!(flag_against(v, Some(&i)), expected);
        }
    }
}
