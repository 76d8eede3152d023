use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};

use super::{analysis_member, latest_values, AnalyticsError, TimeOrder};
use crate::dimension::{DimensionMember, SurrogateKey, PATIENT};
use crate::etl::parse_decimal;
use crate::store::Warehouse;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "contains")]
    Contains,
}

impl Comparator {
    fn symbol(self) -> &'static str {
        match self {
            Comparator::Eq => "=",
            Comparator::Ne => "!=",
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
            Comparator::Contains => "contains",
        }
    }

    fn ordering_holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            Comparator::Eq => ord == Equal,
            Comparator::Ne => ord != Equal,
            Comparator::Lt => ord == Less,
            Comparator::Le => ord != Greater,
            Comparator::Gt => ord == Greater,
            Comparator::Ge => ord != Less,
            Comparator::Contains => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Subject {
    /// A patient attribute.
    Attribute(String),
    /// The patient's latest numeric value of an analysis code.
    Latest(String),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Attribute(a) => f.write_str(a),
            Subject::Latest(code) => write!(f, "latest({code})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Predicate {
    pub subject: Subject,
    pub op: Comparator,
    pub literal: String,
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.literal.is_empty() || self.literal.contains([';', ' ']) || self.literal.starts_with('"') {
            write!(f, "{} {} \"{}\"", self.subject, self.op.symbol(), self.literal)
        } else {
            write!(f, "{} {} {}", self.subject, self.op.symbol(), self.literal)
        }
    }
}

impl FromStr for Predicate {
    type Err = AnalyticsError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let bad = |reason: &str| AnalyticsError::BadCriteria { predicate: text.trim().into(), reason: reason.into() };
        let t = text.trim();
        // longest symbols first so `<=` is not read as `<`
        const OPS: [(&str, Comparator); 9] = [
            ("!=", Comparator::Ne),
            ("≠", Comparator::Ne),
            ("<=", Comparator::Le),
            ("≤", Comparator::Le),
            (">=", Comparator::Ge),
            ("≥", Comparator::Ge),
            ("=", Comparator::Eq),
            ("<", Comparator::Lt),
            (">", Comparator::Gt),
        ];
        let mut found: Option<(usize, &str, Comparator)> = None;
        for (sym, op) in OPS {
            if let Some(pos) = t.find(sym) {
                if found.is_none_or(|(p, s, _)| pos < p || (pos == p && sym.len() > s.len())) {
                    found = Some((pos, sym, op));
                }
            }
        }
        if let Some(pos) = t.to_lowercase().find(" contains ") {
            if found.is_none_or(|(p, _, _)| pos < p) {
                found = Some((pos, " contains ", Comparator::Contains));
            }
        }
        let (pos, sym, op) = found.ok_or_else(|| bad("no comparator"))?;
        let lhs = t[..pos].trim();
        let mut literal = t[pos + sym.len()..].trim();
        if literal.len() >= 2 && literal.starts_with('"') && literal.ends_with('"') {
            literal = &literal[1..literal.len() - 1];
        }
        if lhs.is_empty() {
            return Err(bad("missing subject"));
        }
        let subject = match lhs.strip_prefix("latest(").and_then(|r| r.strip_suffix(')')) {
            Some(code) if !code.trim().is_empty() => Subject::Latest(code.trim().into()),
            Some(_) => return Err(bad("latest() needs an analysis code")),
            None if lhs.contains(|c: char| c.is_whitespace() || c == '(' || c == ')') => {
                return Err(bad("subject must be an attribute name or latest(CODE)"))
            }
            None => Subject::Attribute(lhs.into()),
        };
        if let Subject::Latest(_) = subject {
            if op == Comparator::Contains {
                return Err(bad("contains does not apply to numeric values"));
            }
            if parse_decimal(literal).is_none() {
                return Err(bad("latest() compares against a number"));
            }
        }
        Ok(Predicate { subject, op, literal: literal.into() })
    }
}

impl Predicate {
    fn holds_for_text(&self, value: &str) -> bool {
        if self.op == Comparator::Contains {
            return value.to_lowercase().contains(&self.literal.to_lowercase());
        }
        let ord = match (parse_decimal(value), parse_decimal(&self.literal)) {
            (Some(a), Some(b)) => a.partial_cmp(&b),
            _ => Some(value.cmp(&self.literal)),
        };
        ord.is_some_and(|o| self.op.ordering_holds(o))
    }

    fn holds_for_number(&self, value: f64) -> bool {
        let literal = parse_decimal(&self.literal).expect("validated at parse time");
        value.partial_cmp(&literal).is_some_and(|o| self.op.ordering_holds(o))
    }
}

/// Conjunction of predicates, written as `pred; pred; ...`.
/// An empty conjunction selects every patient.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CriteriaExpr {
    pub predicates: Vec<Predicate>,
}

impl fmt::Display for CriteriaExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.predicates.iter().map(|p| p.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

impl FromStr for CriteriaExpr {
    type Err = AnalyticsError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let predicates = text
            .split(';')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()?;
        Ok(Self { predicates })
    }
}

impl TryFrom<String> for CriteriaExpr {
    type Error = AnalyticsError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<CriteriaExpr> for String {
    fn from(c: CriteriaExpr) -> Self {
        c.to_string()
    }
}

impl CriteriaExpr {
    pub fn and(mut self, predicate: Predicate) -> Self {
        self.predicates.push(predicate);
        self
    }

    /// Checks that referenced attributes and analysis codes exist.
    pub fn validate(&self, wh: &Warehouse) -> Result<(), AnalyticsError> {
        let patient = wh.bus().dimension(PATIENT)?;
        for p in &self.predicates {
            let bad = |reason: String| AnalyticsError::BadCriteria { predicate: p.to_string(), reason };
            match &p.subject {
                Subject::Attribute(a) => {
                    if !patient.levels.iter().any(|l| l.attribute(a).is_some()) {
                        return Err(bad(format!("unknown patient attribute `{a}`")));
                    }
                }
                Subject::Latest(code) => {
                    if analysis_member(wh, code).is_err() && wh.metadata().analysis(code).is_none() {
                        return Err(bad(format!("unknown analysis code `{code}`")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Evaluates criteria against the current store; no persistence.
pub fn select_members(wh: &Warehouse, criteria: &CriteriaExpr) -> Result<BTreeSet<SurrogateKey>, AnalyticsError> {
    criteria.validate(wh)?;
    let mut latest: BTreeMap<&str, BTreeMap<SurrogateKey, (TimeOrder, f64)>> = BTreeMap::new();
    for p in &criteria.predicates {
        if let Subject::Latest(code) = &p.subject {
            if !latest.contains_key(code.as_str()) {
                let values = match analysis_member(wh, code) {
                    Ok(m) => latest_values(wh, m.surrogate_key, None),
                    Err(_) => BTreeMap::new(),
                };
                latest.insert(code, values);
            }
        }
    }
    let holds = |p: &Predicate, m: &DimensionMember| match &p.subject {
        Subject::Attribute(a) => m.attribute(a).is_some_and(|v| p.holds_for_text(v)),
        Subject::Latest(code) => latest[code.as_str()].get(&m.surrogate_key).is_some_and(|(_, v)| p.holds_for_number(*v)),
    };
    Ok(wh
        .bus()
        .members(PATIENT)?
        .filter(|m| criteria.predicates.iter().all(|p| holds(p, m)))
        .map(|m| m.surrogate_key)
        .collect())
}

/// Named patient set materialized from its criteria.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientGroup {
    pub name: String,
    pub criteria: CriteriaExpr,
    pub members: BTreeSet<SurrogateKey>,
    pub materialized_at: DateTime<Utc>,
}

fn check_name(name: &str) -> Result<(), AnalyticsError> {
    if name.trim().is_empty() || name.trim() != name || name.contains('/') {
        return Err(AnalyticsError::BadGroupName(name.into()));
    }
    Ok(())
}

fn materialize(wh: &Warehouse, name: &str, criteria: CriteriaExpr) -> Result<PatientGroup, AnalyticsError> {
    let members = select_members(wh, &criteria)?;
    Ok(PatientGroup { name: name.into(), criteria, members, materialized_at: Utc::now().trunc_subsecs(0) })
}

pub fn create_group(wh: &mut Warehouse, name: &str, criteria: CriteriaExpr) -> Result<PatientGroup, AnalyticsError> {
    check_name(name)?;
    if wh.group(name).is_some() {
        return Err(AnalyticsError::DuplicateGroup(name.into()));
    }
    let group = materialize(wh, name, criteria)?;
    wh.put_group(group.clone())?;
    Ok(group)
}

/// Replaces the criteria (when given) and re-materializes the members.
pub fn modify_group(wh: &mut Warehouse, name: &str, criteria: Option<CriteriaExpr>) -> Result<PatientGroup, AnalyticsError> {
    let existing = wh.group(name).ok_or_else(|| AnalyticsError::UnknownGroup(name.into()))?;
    let criteria = criteria.unwrap_or_else(|| existing.criteria.clone());
    let group = materialize(wh, name, criteria)?;
    wh.put_group(group.clone())?;
    Ok(group)
}

/// Removes the group; patients and facts are untouched.
pub fn delete_group(wh: &mut Warehouse, name: &str) -> Result<PatientGroup, AnalyticsError> {
    wh.remove_group(name)?.ok_or_else(|| AnalyticsError::UnknownGroup(name.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: String,
    pub n: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; absent below two values.
    pub std_dev: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub analysis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    pub rows: Vec<GroupStats>,
}

fn stats(group: &str, values: impl Iterator<Item = f64>) -> GroupStats {
    // Welford's online update
    let (mut n, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        n += 1;
        let delta = v - mean;
        mean += delta / n as f64;
        m2 += delta * (v - mean);
        min = min.min(v);
        max = max.max(v);
    }
    GroupStats {
        group: group.into(),
        n,
        mean: (n > 0).then_some(mean),
        std_dev: (n > 1).then(|| (m2 / (n - 1) as f64).sqrt()),
        min: (n > 0).then_some(min),
        max: (n > 0).then_some(max),
    }
}

/// Descriptive statistics of each group's latest value per patient.
pub fn compare_groups(wh: &Warehouse, groups: &[String], analysis: &str) -> Result<GroupComparison, AnalyticsError> {
    if groups.is_empty() {
        return Err(AnalyticsError::NoGroups);
    }
    let member = analysis_member(wh, analysis)?;
    let sets = groups
        .iter()
        .map(|g| wh.group(g).ok_or_else(|| AnalyticsError::UnknownGroup(g.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let latest = latest_values(wh, member.surrogate_key, None);
    let rows = sets
        .iter()
        .map(|g| stats(&g.name, g.members.iter().filter_map(|p| latest.get(p).map(|(_, v)| *v))))
        .collect();
    Ok(GroupComparison {
        analysis: analysis.into(),
        unit: member.attribute(crate::dimension::CANONICAL_UNIT_ATTR).map(str::to_string),
        rows,
    })
}
