//! Metadata registry: label correspondences, unit conversions, reference
//! intervals and the analysis catalog the ETL creates analysis members from.
//!
//! Registry files hold one JSON object per line, tagged by `kind`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dimension::DimensionMember;

/// Maps a lab-specific term or abbreviation to a canonical analysis code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub source_label: String,
    pub canonical_code: String,
}

/// Affine conversion `to = from * factor + offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitConversion {
    pub from_unit: String,
    pub to_unit: String,
    pub factor: f64,
    #[serde(default)]
    pub offset: f64,
}

impl UnitConversion {
    pub fn apply(&self, value: f64) -> f64 {
        value * self.factor + self.offset
    }
}

/// Patient-class predicate restricting a reference interval, e.g. `sex = F`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qualifier {
    pub attribute: String,
    pub value: String,
}

impl Qualifier {
    pub fn matches(&self, patient: &DimensionMember) -> bool {
        patient.attribute(&self.attribute) == Some(self.value.as_str())
    }
}

/// Range within which a result is considered normal, bounds inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceInterval {
    pub canonical_code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qualifier: Option<Qualifier>,
}

/// Catalog entry describing how to create an analysis member and its ancestors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisDef {
    pub code: String,
    pub label: String,
    pub canonical_unit: String,
    pub examination: String,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetadataEntry {
    Label(LabelMapping),
    Unit(UnitConversion),
    Interval(ReferenceInterval),
    Analysis(AnalysisDef),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetadataError {
    #[error("conversion factor must be finite and non-zero, got {0}")]
    BadFactor(f64),
    #[error("conversion offset must be finite, got {0}")]
    BadOffset(f64),
    #[error("interval for `{code}` has low {low} above high {high}")]
    InvertedInterval { code: String, low: f64, high: f64 },
    #[error("interval for `{0}` has no bound")]
    UnboundedInterval(String),
    #[error("interval bound for `{0}` is not finite")]
    NonFiniteBound(String),
    #[error("label `{label}` is already mapped to `{existing}`")]
    DuplicateLabel { label: String, existing: String },
    #[error("a conversion from `{from}` to `{to}` is already registered")]
    DuplicateConversion { from: String, to: String },
    #[error("an equally specific interval for `{0}` is already registered")]
    DuplicateInterval(String),
    #[error("qualified intervals for `{code}` must all use attribute `{expected}`")]
    MixedQualifiers { code: String, expected: String },
    #[error("analysis `{0}` is already cataloged differently")]
    DuplicateAnalysis(String),
    #[error("examination `{examination}` already belongs to category `{existing}`")]
    ExaminationConflict { examination: String, existing: String },
    #[error("unknown canonical code `{0}`")]
    UnknownCode(String),
    #[error("{field} must not be empty")]
    Empty { field: &'static str },
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
}

/// Outcome of a successful registration.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Registered {
    Added,
    /// An identical entry was already present.
    Unchanged,
}

#[derive(Clone, Debug, Default)]
pub struct MetadataRegistry {
    entries: Vec<MetadataEntry>,
    labels: BTreeMap<String, usize>,
    units: BTreeMap<(String, String), usize>,
    analyses: BTreeMap<String, usize>,
    intervals: BTreeMap<String, Vec<usize>>,
}

fn non_empty(value: &str, field: &'static str) -> Result<(), MetadataError> {
    if value.trim().is_empty() {
        Err(MetadataError::Empty { field })
    } else {
        Ok(())
    }
}

impl MetadataRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Checks an entry against its own invariants and the registry content.
    pub fn validate(&self, entry: &MetadataEntry) -> Result<Registered, MetadataError> {
        match entry {
            MetadataEntry::Label(m) => {
                non_empty(&m.source_label, "source_label")?;
                non_empty(&m.canonical_code, "canonical_code")?;
                match self.label(&m.source_label) {
                    Some(existing) if existing.canonical_code == m.canonical_code && existing.source_label == m.source_label => {
                        Ok(Registered::Unchanged)
                    }
                    Some(existing) => Err(MetadataError::DuplicateLabel {
                        label: m.source_label.clone(),
                        existing: existing.canonical_code.clone(),
                    }),
                    None => Ok(Registered::Added),
                }
            }
            MetadataEntry::Unit(c) => {
                non_empty(&c.from_unit, "from_unit")?;
                non_empty(&c.to_unit, "to_unit")?;
                if !c.factor.is_finite() || c.factor == 0.0 {
                    return Err(MetadataError::BadFactor(c.factor));
                }
                if !c.offset.is_finite() {
                    return Err(MetadataError::BadOffset(c.offset));
                }
                match self.conversion(&c.from_unit, &c.to_unit) {
                    Some(existing) if existing == c => Ok(Registered::Unchanged),
                    Some(_) => Err(MetadataError::DuplicateConversion { from: c.from_unit.clone(), to: c.to_unit.clone() }),
                    None => Ok(Registered::Added),
                }
            }
            MetadataEntry::Interval(i) => {
                non_empty(&i.canonical_code, "canonical_code")?;
                let code = i.canonical_code.clone();
                if i.low.is_none() && i.high.is_none() {
                    return Err(MetadataError::UnboundedInterval(code));
                }
                if i.low.into_iter().chain(i.high).any(|b| !b.is_finite()) {
                    return Err(MetadataError::NonFiniteBound(code));
                }
                if let (Some(low), Some(high)) = (i.low, i.high) {
                    if low > high {
                        return Err(MetadataError::InvertedInterval { code, low, high });
                    }
                }
                let existing: Vec<&ReferenceInterval> = self.intervals_for(&code).collect();
                if let Some(same) = existing.iter().find(|e| e.qualifier == i.qualifier) {
                    return if *same == i { Ok(Registered::Unchanged) } else { Err(MetadataError::DuplicateInterval(code)) };
                }
                if let Some(q) = &i.qualifier {
                    if let Some(other) = existing.iter().filter_map(|e| e.qualifier.as_ref()).find(|o| o.attribute != q.attribute) {
                        return Err(MetadataError::MixedQualifiers { code, expected: other.attribute.clone() });
                    }
                }
                Ok(Registered::Added)
            }
            MetadataEntry::Analysis(a) => {
                non_empty(&a.code, "code")?;
                non_empty(&a.canonical_unit, "canonical_unit")?;
                non_empty(&a.examination, "examination")?;
                non_empty(&a.category, "category")?;
                if let Some(existing) = self.analysis(&a.code) {
                    return if existing == a { Ok(Registered::Unchanged) } else { Err(MetadataError::DuplicateAnalysis(a.code.clone())) };
                }
                if let Some(other) = self.analyses().find(|o| o.examination == a.examination && o.category != a.category) {
                    return Err(MetadataError::ExaminationConflict {
                        examination: a.examination.clone(),
                        existing: other.category.clone(),
                    });
                }
                Ok(Registered::Added)
            }
        }
    }

    pub fn register(&mut self, entry: MetadataEntry) -> Result<Registered, MetadataError> {
        let outcome = self.validate(&entry)?;
        if outcome == Registered::Unchanged {
            return Ok(outcome);
        }
        let idx = self.entries.len();
        match &entry {
            MetadataEntry::Label(m) => {
                self.labels.insert(m.source_label.trim().to_lowercase(), idx);
            }
            MetadataEntry::Unit(c) => {
                self.units.insert((c.from_unit.clone(), c.to_unit.clone()), idx);
            }
            MetadataEntry::Interval(i) => {
                self.intervals.entry(i.canonical_code.clone()).or_default().push(idx);
            }
            MetadataEntry::Analysis(a) => {
                self.analyses.insert(a.code.clone(), idx);
            }
        }
        self.entries.push(entry);
        Ok(Registered::Added)
    }

    /// Every entry, in registration order.
    pub fn entries(&self) -> &[MetadataEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Case-insensitive, whitespace-trimmed label lookup.
    pub fn label(&self, source_label: &str) -> Option<&LabelMapping> {
        self.labels.get(&source_label.trim().to_lowercase()).map(|&i| match &self.entries[i] {
            MetadataEntry::Label(m) => m,
            _ => unreachable!("label index points at a label"),
        })
    }

    pub fn conversion(&self, from: &str, to: &str) -> Option<&UnitConversion> {
        self.units.get(&(from.to_string(), to.to_string())).map(|&i| match &self.entries[i] {
            MetadataEntry::Unit(c) => c,
            _ => unreachable!("unit index points at a conversion"),
        })
    }

    pub fn analysis(&self, code: &str) -> Option<&AnalysisDef> {
        self.analyses.get(code).map(|&i| match &self.entries[i] {
            MetadataEntry::Analysis(a) => a,
            _ => unreachable!("analysis index points at an analysis"),
        })
    }

    pub fn analyses(&self) -> impl Iterator<Item = &AnalysisDef> {
        self.analyses.values().map(|&i| match &self.entries[i] {
            MetadataEntry::Analysis(a) => a,
            _ => unreachable!("analysis index points at an analysis"),
        })
    }

    pub fn intervals_for<'a>(&'a self, code: &str) -> impl Iterator<Item = &'a ReferenceInterval> + 'a {
        self.intervals.get(code).into_iter().flatten().map(|&i| match &self.entries[i] {
            MetadataEntry::Interval(r) => r,
            _ => unreachable!("interval index points at an interval"),
        })
    }

    pub fn intervals(&self) -> impl Iterator<Item = &ReferenceInterval> {
        self.entries.iter().filter_map(|e| match e {
            MetadataEntry::Interval(r) => Some(r),
            _ => None,
        })
    }

    /// Most specific interval for a patient: a matching qualified interval wins
    /// over the unqualified one.
    pub fn applicable_interval(&self, code: &str, patient: Option<&DimensionMember>) -> Option<&ReferenceInterval> {
        let mut fallback = None;
        for interval in self.intervals_for(code) {
            match &interval.qualifier {
                Some(q) => {
                    if patient.is_some_and(|p| q.matches(p)) {
                        return Some(interval);
                    }
                }
                None => fallback = Some(interval),
            }
        }
        fallback
    }

    /// Converts `value` from `from` to `to` through a direct registered edge.
    /// Equal units pass through unchanged.
    pub fn convert(&self, value: f64, from: &str, to: &str) -> Option<f64> {
        if from == to {
            return Some(value);
        }
        self.conversion(from, to).map(|c| c.apply(value))
    }

    /// Parses a registry file: one JSON entry per line, blank lines and `#` comments skipped.
    pub fn parse_lines(text: &str) -> Result<Vec<MetadataEntry>, MetadataError> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| MetadataError::Line { line: i + 1, reason: e.to_string() })
            })
            .collect()
    }

    pub fn to_lines(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("metadata entries serialize") + "\n")
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interval(code: &str, low: Option<f64>, high: Option<f64>) -> MetadataEntry {
        MetadataEntry::Interval(ReferenceInterval { canonical_code: code.into(), low, high, qualifier: None })
    }

    fn unit(from: &str, to: &str, factor: f64, offset: f64) -> MetadataEntry {
        MetadataEntry::Unit(UnitConversion { from_unit: from.into(), to_unit: to.into(), factor, offset })
    }

    #[test]
    fn identity_conversion_accepted() {
        let mut reg = MetadataRegistry::new();
        assert_eq!(reg.register(unit("g/L", "g/L", 1.0, 0.0)), Ok(Registered::Added));
        assert_eq!(reg.convert(3.25, "g/L", "g/L"), Some(3.25));
    }

    #[test]
    fn invariant_violations_rejected() {
        let mut reg = MetadataRegistry::new();
        assert!(matches!(reg.register(interval("HGB", Some(17.0), Some(12.0))), Err(MetadataError::InvertedInterval { .. })));
        assert!(matches!(reg.register(interval("HGB", None, None)), Err(MetadataError::UnboundedInterval(_))));
        assert_eq!(reg.register(unit("a", "b", 0.0, 0.0)), Err(MetadataError::BadFactor(0.0)));
        let hb = |code: &str| MetadataEntry::Label(LabelMapping { source_label: "Hb".into(), canonical_code: code.into() });
        reg.register(hb("HGB")).unwrap();
        let upper = MetadataEntry::Label(LabelMapping { source_label: " HB ".into(), canonical_code: "HCT".into() });
        assert!(matches!(reg.register(upper), Err(MetadataError::DuplicateLabel { .. })));
        assert_eq!(reg.register(hb("HGB")), Ok(Registered::Unchanged));
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn dump_counts_registrations() {
        let mut reg = MetadataRegistry::new();
        for k in 0..25 {
            reg.register(unit(&format!("u{k}"), "base", 1.0 + k as f64, 0.0)).unwrap();
        }
        assert_eq!(reg.entries().len(), 25);
        let lines = reg.to_lines();
        assert_eq!(MetadataRegistry::parse_lines(&lines).unwrap().len(), 25);
    }

    #[test]
    fn qualified_interval_preferred() {
        let mut reg = MetadataRegistry::new();
        reg.register(interval("HGB", Some(12.0), Some(17.0))).unwrap();
        reg.register(MetadataEntry::Interval(ReferenceInterval {
            canonical_code: "HGB".into(),
            low: Some(12.0),
            high: Some(16.0),
            qualifier: Some(Qualifier { attribute: "sex".into(), value: "F".into() }),
        }))
        .unwrap();
        let mut woman = DimensionMember {
            dimension: "patient".into(),
            level: "patient".into(),
            surrogate_key: crate::dimension::SurrogateKey(1),
            natural_key: "P1".into(),
            attributes: Default::default(),
            parent: None,
        };
        assert_eq!(reg.applicable_interval("HGB", Some(&woman)).unwrap().high, Some(17.0));
        woman.attributes.insert("sex".into(), "F".into());
        assert_eq!(reg.applicable_interval("HGB", Some(&woman)).unwrap().high, Some(16.0));
        assert!(reg.applicable_interval("GLU", Some(&woman)).is_none());

        let mixed = MetadataEntry::Interval(ReferenceInterval {
            canonical_code: "HGB".into(),
            low: Some(1.0),
            high: None,
            qualifier: Some(Qualifier { attribute: "discipline".into(), value: "soccer".into() }),
        });
        assert!(matches!(reg.register(mixed), Err(MetadataError::MixedQualifiers { .. })));
        assert!(matches!(reg.register(interval("HGB", Some(1.0), Some(2.0))), Err(MetadataError::DuplicateInterval(_))));
    }

    #[test]
    fn examinations_form_a_tree() {
        let mut reg = MetadataRegistry::new();
        let a = |code: &str, cat: &str| {
            MetadataEntry::Analysis(AnalysisDef {
                code: code.into(),
                label: code.into(),
                canonical_unit: "g/L".into(),
                examination: "hemogram".into(),
                category: cat.into(),
            })
        };
        reg.register(a("HGB", "hematology")).unwrap();
        reg.register(a("HCT", "hematology")).unwrap();
        assert!(matches!(reg.register(a("WBC", "biochemistry")), Err(MetadataError::ExaminationConflict { .. })));
    }

    #[test]
    fn parse_lines_reports_line_numbers() {
        let text = "# header\n{\"kind\":\"label\",\"source_label\":\"Hb\",\"canonical_code\":\"HGB\"}\n\n{\"kind\":\"unit\"}\n";
        match MetadataRegistry::parse_lines(text) {
            Err(MetadataError::Line { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }
}
