//! Extraction: delimited source files, step 1 de-duplication and the value
//! parsers used by later steps.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};

use super::profile::EtlProfile;
use super::EtlError;

/// One data line of a source file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRow {
    pub source_file: String,
    /// 1-based data line number (the header is not counted).
    pub row_number: usize,
    /// Header name → trimmed cell text.
    pub cells: BTreeMap<String, String>,
}

impl SourceRow {
    pub fn cell(&self, column: &str) -> &str {
        self.cells.get(column).map(String::as_str).unwrap_or("")
    }
}

/// A parsed file: header in file order plus its rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceTable {
    pub source_file: String,
    pub delimiter: u8,
    pub header: Vec<String>,
    pub rows: Vec<SourceRow>,
}

impl SourceTable {
    /// Re-serializes the table in normalized form: trimmed cells, `\n` line
    /// endings, quoting only where needed.
    pub fn to_delimited(&self) -> String {
        let mut w = csv::WriterBuilder::new()
            .delimiter(self.delimiter)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(self.header.iter().map(|h| row.cell(h))).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input stays utf-8")
    }
}

/// `;` when the header holds more semicolons than commas, `,` otherwise.
pub fn detect_delimiter(header_line: &str) -> u8 {
    let semis = header_line.matches(';').count();
    let commas = header_line.matches(',').count();
    if semis > commas {
        b';'
    } else {
        b','
    }
}

pub fn parse_source(path: &Path, profile: &EtlProfile) -> Result<SourceTable, EtlError> {
    let text = std::fs::read_to_string(path).map_err(|e| EtlError::Unreadable {
        file: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    parse_source_text(&name, &text, profile)
}

pub fn parse_source_text(source_file: &str, text: &str, profile: &EtlProfile) -> Result<SourceTable, EtlError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let header_line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if header_line.trim().is_empty() {
        return Err(EtlError::NoHeader(source_file.into()));
    }
    let delimiter = detect_delimiter(header_line);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header: Vec<String> = match records.next() {
        Some(r) => r.map_err(|e| bad_csv(source_file, e))?.iter().map(|h| h.trim().to_string()).collect(),
        None => return Err(EtlError::NoHeader(source_file.into())),
    };
    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(EtlError::DuplicateColumn { file: source_file.into(), column: h.clone() });
        }
    }
    for column in profile.required_columns() {
        if !seen.contains(column) {
            return Err(EtlError::MissingColumn { file: source_file.into(), column: column.to_string() });
        }
    }
    let mut rows = Vec::new();
    for record in records {
        let record = record.map_err(|e| bad_csv(source_file, e))?;
        let row_number = rows.len() + 1;
        if record.len() != header.len() {
            return Err(EtlError::RaggedRow {
                file: source_file.into(),
                row: row_number,
                expected: header.len(),
                found: record.len(),
            });
        }
        let cells = header.iter().cloned().zip(record.iter().map(|c| c.trim().to_string())).collect();
        rows.push(SourceRow { source_file: source_file.into(), row_number, cells });
    }
    Ok(SourceTable { source_file: source_file.into(), delimiter, header, rows })
}

fn bad_csv(file: &str, e: csv::Error) -> EtlError {
    EtlError::Unreadable { file: file.into(), reason: e.to_string() }
}

/// Keeps the first occurrence of every distinct cell map, preserving order.
pub fn dedupe(rows: Vec<SourceRow>) -> (Vec<SourceRow>, usize) {
    let input = rows.len();
    let mut seen: HashSet<BTreeMap<String, String>> = HashSet::with_capacity(input);
    let kept: Vec<SourceRow> = rows.into_iter().filter(|r| seen.insert(r.cells.clone())).collect();
    let removed = input - kept.len();
    (kept, removed)
}

/// Parses a decimal number written with either `.` or `,` as decimal
/// separator. Thousands separators, exponents and non-finite values are rejected.
pub fn parse_decimal(text: &str) -> Option<f64> {
    let t = text.trim();
    let (negative, body) = match t.as_bytes().first()? {
        b'-' => (true, &t[1..]),
        b'+' => (false, &t[1..]),
        _ => (false, t),
    };
    let mut separators = 0;
    let mut digits = 0;
    for c in body.chars() {
        match c {
            '0'..='9' => digits += 1,
            '.' | ',' => separators += 1,
            _ => return None,
        }
    }
    if digits == 0 || separators > 1 {
        return None;
    }
    let value: f64 = body.replace(',', ".").parse().ok()?;
    let value = if negative { -value } else { value };
    value.is_finite().then_some(value)
}

/// Accepts ISO 8601 (`YYYY-MM-DD`, optionally `THH:MM[:SS]` or ` HH:MM[:SS]`)
/// and `DD/MM/YYYY[ HH:MM]`. Date-only values map to midnight.
pub fn parse_timestamp(text: &str) -> Option<NaiveDateTime> {
    let t = text.trim();
    const DATETIME: [&str; 6] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%d/%m/%Y %H:%M",
        "%d/%m/%Y %H:%M:%S",
    ];
    for f in DATETIME {
        if let Ok(dt) = NaiveDateTime::parse_from_str(t, f) {
            return Some(dt);
        }
    }
    for f in ["%Y-%m-%d", "%d/%m/%Y"] {
        if let Ok(d) = NaiveDate::parse_from_str(t, f) {
            return Some(d.and_time(NaiveTime::MIN));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile() -> EtlProfile {
        EtlProfile::parse(
            r#"
name = "lab"
fact_def = "biological_result"
[columns]
patient = "patient"
analysis = "test"
value = "value"
unit = "unit"
timestamp = "date"
provider = "lab"
"#,
        )
        .unwrap()
    }

    const FILE: &str = "patient,test,value,unit,date,lab\nP1,Hb,14.1,g/dL,2024-01-01,A\nP2,Hb,13.0,g/dL,2024-01-01,A\nP3, Hb ,12.2,g/dL,2024-01-01,A\n";

    #[test]
    fn counts_data_lines() {
        let t = parse_source_text("a.csv", FILE, &profile()).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[2].cell("test"), "Hb");
        assert_eq!(t.rows[2].row_number, 3);
    }

    #[test]
    fn missing_value_column_named() {
        let text = "patient,test,unit,date,lab\nP1,Hb,g/dL,2024-01-01,A\n";
        match parse_source_text("a.csv", text, &profile()) {
            Err(EtlError::MissingColumn { column, .. }) => assert_eq!(column, "value"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_row_rejected() {
        let text = "patient,test,value,unit,date,lab\nP1,Hb,14.1,g/dL,2024-01-01\n";
        assert!(matches!(parse_source_text("a.csv", text, &profile()), Err(EtlError::RaggedRow { row: 1, .. })));
    }

    #[test]
    fn semicolon_files_detected() {
        let text = "patient;test;value;unit;date;lab\nP1;Hb;14,1;g/dL;01/02/2024 07:45;B\n";
        let t = parse_source_text("b.csv", text, &profile()).unwrap();
        assert_eq!(t.delimiter, b';');
        assert_eq!(parse_decimal(t.rows[0].cell("value")), Some(14.1));
        assert_eq!(
            parse_timestamp(t.rows[0].cell("date")),
            NaiveDate::from_ymd_opt(2024, 2, 1).unwrap().and_hms_opt(7, 45, 0)
        );
    }

    #[test]
    fn decimals() {
        assert_eq!(parse_decimal("3.5"), Some(3.5));
        assert_eq!(parse_decimal("3,5"), Some(3.5));
        assert_eq!(parse_decimal("-0,25"), Some(-0.25));
        assert_eq!(parse_decimal(".5"), Some(0.5));
        assert_eq!(parse_decimal("1,234.5"), None);
        assert_eq!(parse_decimal("1 234"), None);
        assert_eq!(parse_decimal("1e3"), None);
        assert_eq!(parse_decimal("abc"), None);
        assert_eq!(parse_decimal(""), None);
        assert_eq!(parse_decimal(","), None);
    }

    #[test]
    fn timestamps() {
        let d = NaiveDate::from_ymd_opt(2024, 5, 17).unwrap();
        assert_eq!(parse_timestamp("2024-05-17"), Some(d.and_hms_opt(0, 0, 0).unwrap()));
        assert_eq!(parse_timestamp("2024-05-17T06:05"), Some(d.and_hms_opt(6, 5, 0).unwrap()));
        assert_eq!(parse_timestamp("17/05/2024 18:30"), Some(d.and_hms_opt(18, 30, 0).unwrap()));
        assert_eq!(parse_timestamp("17/05/2024"), Some(d.and_hms_opt(0, 0, 0).unwrap()));
        assert_eq!(parse_timestamp("2024-13-01"), None);
        assert_eq!(parse_timestamp("yesterday"), None);
    }

    #[test]
    fn dedupe_edge_cases() {
        assert_eq!(dedupe(vec![]), (vec![], 0));
        let t = parse_source_text("a.csv", FILE, &profile()).unwrap();
        let (kept, removed) = dedupe(t.rows.clone());
        assert_eq!((kept, removed), (t.rows, 0));
    }

    fn quadratic_dedupe(rows: &[SourceRow]) -> Vec<SourceRow> {
        let mut out: Vec<SourceRow> = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            if !rows[..i].iter().any(|p| p.cells == r.cells) {
                out.push(r.clone());
            }
        }
        out
    }

    #[test]
    fn k_copies_of_one_row() {
        let base = parse_source_text("a.csv", FILE, &profile()).unwrap().rows;
        let mut rows = base.clone();
        for k in 0..4 {
            let mut copy = base[1].clone();
            copy.row_number = 10 + k;
            rows.push(copy);
        }
        let n = rows.len();
        let (kept, removed) = dedupe(rows);
        // 1 original + 4 copies = k = 5 occurrences → n - k + 1 kept
        assert_eq!(kept.len(), n - 5 + 1);
        assert_eq!(removed, 4);
    }

    fn cell() -> impl Strategy<Value = String> {
        prop_oneof![
            "[A-Za-z0-9]{0,6}",
            Just("a,b".to_string()),
            Just("x;y".to_string()),
            Just("quoted \"text\"".to_string()),
        ]
    }

    proptest! {
        #[test]
        fn dedupe_matches_pairwise_oracle(picks in prop::collection::vec(0usize..6, 0..40)) {
            let pool: Vec<BTreeMap<String, String>> = (0..6)
                .map(|i| [("a".to_string(), format!("v{}", i % 4)), ("b".to_string(), format!("w{}", i % 3))].into_iter().collect())
                .collect();
            let rows: Vec<SourceRow> = picks.iter().enumerate()
                .map(|(n, &p)| SourceRow { source_file: "f".into(), row_number: n + 1, cells: pool[p].clone() })
                .collect();
            let expected = quadratic_dedupe(&rows);
            let (kept, removed) = dedupe(rows.clone());
            prop_assert_eq!(removed, rows.len() - kept.len());
            prop_assert_eq!(kept, expected);
        }

        #[test]
        fn normalized_files_round_trip(
            semicolon in any::<bool>(),
            body in prop::collection::vec(prop::collection::vec(cell(), 6), 0..12),
        ) {
            let header = ["patient", "test", "value", "unit", "date", "lab"];
            let delimiter = if semicolon { b';' } else { b',' };
            let mut w = csv::WriterBuilder::new().delimiter(delimiter).terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
            w.write_record(header).unwrap();
            for row in &body {
                w.write_record(row).unwrap();
            }
            let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
            let table = parse_source_text("gen.csv", &text, &profile()).unwrap();
            prop_assert_eq!(table.rows.len(), body.len());
            prop_assert_eq!(table.to_delimited(), text);
        }

        #[test]
        fn decimal_parsing_matches_formatting(v in -1.0e9f64..1.0e9) {
            let dot = format!("{v}");
            prop_assert_eq!(parse_decimal(&dot), Some(v));
            prop_assert_eq!(parse_decimal(&dot.replace('.', ",")), Some(v));
        }
    }
}
