//! Human-readable tables for `--format table`.

use std::fmt::Write;

use biodw_core::analytics::{
    AttributeValueView, GroupComparison, PatientGroup, PatientPage, PatientRecord, RecordNode, RollupRow, SeriesPoint,
};
use biodw_core::etl::{EtlProfile, LoadReport};
use biodw_core::metadata::MetadataEntry;
use biodw_core::store::{AuditReport, BundleOutcome, DocumentEntry, InsertOutcome};

use crate::ops::{Listing, Preview, Registration, SchemaView};

/// Left-aligned columns separated by two spaces.
pub fn grid(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut text = String::new();
        for (i, (cell, w)) in cells.zip(&widths).enumerate() {
            if i > 0 {
                text.push_str("  ");
            }
            let _ = write!(text, "{cell:<w$}");
        }
        out.push_str(text.trim_end());
        out.push('\n');
    };
    line(&mut headers.iter().copied());
    for row in rows {
        line(&mut row.iter().map(String::as_str));
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_else(|| "-".into())
}

fn num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}").trim_end_matches('0').to_string()
    }
}

fn footer(total: usize, page: usize, page_size: usize, shown: usize) -> String {
    format!("{shown} of {total} (page {page}, {page_size} per page)\n")
}

pub fn patients(p: &PatientPage) -> String {
    let rows: Vec<Vec<String>> = p
        .patients
        .iter()
        .map(|m| {
            let attr = |a: &str| m.attribute(a).unwrap_or("").to_string();
            vec![m.surrogate_key.to_string(), m.natural_key.clone(), attr("display_name"), attr("sex"), attr("birth_date")]
        })
        .collect();
    grid(&["key", "patient", "name", "sex", "birth_date"], &rows) + &footer(p.total, p.page, p.page_size, rows.len())
}

fn record_rows(node: &RecordNode, path: &str, rows: &mut Vec<Vec<String>>) {
    let here = if path.is_empty() { node.key.clone() } else { format!("{path}/{}", node.key) };
    for e in &node.entries {
        let unit = match &e.value {
            biodw_core::store::MeasureValue::Numeric { unit, .. } => unit.clone(),
            _ => String::new(),
        };
        rows.push(vec![
            here.clone(),
            e.time.natural_key(),
            e.value.display_value(),
            unit,
            format!("{:?}", e.flag).to_uppercase(),
            e.fact_id.to_string(),
        ]);
    }
    for c in &node.children {
        record_rows(c, &here, rows);
    }
}

pub fn record(r: &PatientRecord) -> String {
    if r.is_empty() {
        return format!("{} has no facts in {}\n", r.patient, r.mart);
    }
    let mut rows = Vec::new();
    for n in &r.nodes {
        record_rows(n, "", &mut rows);
    }
    format!("{} / {}\n", r.patient, r.mart) + &grid(&["analysis", "time", "value", "unit", "flag", "fact"], &rows)
}

pub fn series(points: &[SeriesPoint]) -> String {
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                p.time.natural_key(),
                num(p.value),
                p.unit.clone(),
                format!("{:?}", p.flag).to_uppercase(),
                p.fact_id.to_string(),
            ]
        })
        .collect();
    grid(&["time", "value", "unit", "flag", "fact"], &rows)
}

pub fn group(g: &PatientGroup) -> String {
    format!("{}: {} members\ncriteria: {}\n", g.name, g.members.len(), g.criteria)
}

pub fn groups(l: &Listing<PatientGroup>) -> String {
    let rows: Vec<Vec<String>> = l
        .items
        .iter()
        .map(|g| vec![g.name.clone(), g.members.len().to_string(), g.criteria.to_string(), g.materialized_at.to_rfc3339()])
        .collect();
    grid(&["group", "members", "criteria", "materialized_at"], &rows) + &footer(l.total, l.page, l.page_size, rows.len())
}

pub fn preview(p: &Preview) -> String {
    format!("{} patients match `{}`\n{}\n", p.count, p.criteria, p.patients.join(" "))
}

pub fn comparison(c: &GroupComparison) -> String {
    let rows: Vec<Vec<String>> = c
        .rows
        .iter()
        .map(|s| vec![s.group.clone(), s.n.to_string(), opt(s.mean), opt(s.std_dev), opt(s.min), opt(s.max)])
        .collect();
    let unit = c.unit.as_deref().map(|u| format!(" ({u})")).unwrap_or_default();
    format!("{}{unit}\n", c.analysis) + &grid(&["group", "n", "mean", "std_dev", "min", "max"], &rows)
}

pub fn rollup(rows: &[RollupRow]) -> String {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.member.clone(), r.count.to_string(), num(r.value)])
        .collect();
    grid(&["member", "count", "value"], &rows)
}

pub fn attribute_value(v: &AttributeValueView) -> String {
    v.to_csv()
}

pub fn documents(l: &Listing<DocumentEntry>) -> String {
    let rows: Vec<Vec<String>> = l
        .items
        .iter()
        .map(|d| vec![d.id.to_string(), d.media_type.clone(), d.byte_length.to_string(), d.caption.clone().unwrap_or_default()])
        .collect();
    grid(&["document", "media_type", "bytes", "caption"], &rows)
}

pub fn schema(s: &SchemaView) -> String {
    let mut out = String::from("dimensions\n");
    for d in &s.dimensions {
        let levels: Vec<&str> = d.levels.iter().map(|l| l.name.as_str()).collect();
        let _ = writeln!(out, "  {}{}: {}", d.name, if d.conformed { " (conformed)" } else { "" }, levels.join(" < "));
    }
    out.push_str("datamarts\n");
    for m in &s.datamarts {
        let facts: Vec<&str> = m.fact_defs.iter().map(|f| f.name.as_str()).collect();
        let _ = writeln!(out, "  {} [{:?}]: facts {}; bus {}", m.name, m.record_layout, facts.join(", "), m.shared_dimensions.join(", "));
    }
    let rows: Vec<Vec<String>> = s
        .conformance
        .iter()
        .map(|c| vec![c.dimension.clone(), if c.ok { "ok" } else { "VIOLATED" }.into(), c.member_count.to_string(), c.bindings.join(", ")])
        .collect();
    out + "conformance\n" + &grid(&["dimension", "status", "members", "bindings"], &rows)
}

pub fn metadata(l: &Listing<MetadataEntry>) -> String {
    let mut out = String::new();
    for e in &l.items {
        out.push_str(&serde_json::to_string(e).expect("metadata serializes"));
        out.push('\n');
    }
    out + &footer(l.total, l.page, l.page_size, l.items.len())
}

pub fn registrations(rs: &[Registration]) -> String {
    let rows: Vec<Vec<String>> = rs
        .iter()
        .map(|r| {
            vec![
                format!("{:?}", r.outcome).to_lowercase(),
                serde_json::to_string(&r.entry).expect("metadata serializes"),
            ]
        })
        .collect();
    grid(&["outcome", "entry"], &rows)
}

pub fn profiles(ps: &[EtlProfile]) -> String {
    let rows: Vec<Vec<String>> = ps
        .iter()
        .map(|p| vec![p.name.clone(), p.fact_def.clone(), p.required_columns().collect::<Vec<_>>().join(", ")])
        .collect();
    grid(&["profile", "fact", "columns"], &rows)
}

pub fn load_report(r: &LoadReport) -> String {
    let mut out = String::new();
    let members: Vec<String> = r.members_created.iter().map(|(d, n)| format!("{d}={n}")).collect();
    let _ = writeln!(out, "batch             {}", r.batch_id);
    let _ = writeln!(out, "source            {} (profile {})", r.source_file, r.profile);
    let _ = writeln!(out, "rows read         {}", r.rows_read);
    let _ = writeln!(out, "doubles removed   {}", r.doubles_removed);
    let _ = writeln!(out, "members created   {}", members.join(" "));
    let _ = writeln!(out, "rows transformed  {}", r.rows_transformed);
    let _ = writeln!(out, "facts inserted    {}", r.facts_inserted);
    let _ = writeln!(out, "duplicates        {}", r.duplicates_skipped);
    let _ = writeln!(out, "row errors        {}", r.errors.len());
    if let Some(f) = &r.failure {
        let _ = writeln!(out, "FAILURE           {f}");
    }
    if !r.errors.is_empty() {
        let rows: Vec<Vec<String>> = r.errors.iter().map(|e| vec![e.row.to_string(), e.reason.clone()]).collect();
        out.push_str(&grid(&["row", "reason"], &rows));
    }
    out
}

pub fn bundles(outcomes: &[BundleOutcome]) -> String {
    let rows: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            let state = |i: &InsertOutcome| if i.is_duplicate() { "duplicate" } else { "inserted" };
            vec![
                o.report.fact_id().to_string(),
                state(&o.report).into(),
                o.results.iter().filter(|r| !r.is_duplicate()).count().to_string(),
                o.links_added.to_string(),
            ]
        })
        .collect();
    grid(&["report", "state", "results_inserted", "links_added"], &rows)
}

pub fn audit(a: &AuditReport) -> String {
    let mut out = format!("{} facts scanned, {} violations\n", a.facts_scanned, a.violation_count());
    for (kind, list) in [
        ("referential", &a.referential),
        ("unit", &a.units),
        ("grain", &a.grain),
        ("complex", &a.complex),
        ("hierarchy", &a.hierarchy),
    ] {
        for v in list {
            let _ = writeln!(out, "  {kind}: {v}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_aligns_columns() {
        let out = grid(&["a", "long"], &[vec!["xyz".into(), "1".into()], vec!["p".into(), "22".into()]]);
        assert_eq!(out, "a    long\nxyz  1\np    22\n");
    }

    #[test]
    fn numbers_are_compact() {
        assert_eq!(num(3.0), "3");
        assert_eq!(num(2.5), "2.5");
        assert_eq!(num(1.0 / 3.0), "0.3333");
    }
}
