use std::collections::{BTreeMap, BTreeSet};

use biodw_core::dimension::{SurrogateKey, CANONICAL_UNIT_ATTR, MEDICAL_ANALYSIS, PATIENT, PROVIDER, TIME};
use biodw_core::etl::{dedupe, parse_decimal, parse_source_text, parse_timestamp, run_pipeline, EtlProfile};
use biodw_core::fixture::{Fixture, DEFAULT_SEED};
use biodw_core::schema::BIOLOGICAL_RESULT;
use biodw_core::store::{FactRecord, MeasureValue, OpenMode, StoreError};
use biodw_core::{TimePoint, Warehouse};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn fixture() -> Fixture {
    Fixture::generate(DEFAULT_SEED)
}

fn empty_store(f: &Fixture) -> Warehouse {
    let mut wh = Warehouse::in_memory();
    wh.apply_schema(&f.schema_file()).unwrap();
    f.register(&mut wh).unwrap();
    wh
}

/// Source label → (code, unit → factor), read straight from the metadata lines.
struct Oracle {
    labels: BTreeMap<String, String>,
    canonical: BTreeMap<String, String>,
    factors: BTreeMap<(String, String), f64>,
}

impl Oracle {
    fn from_lines(text: &str) -> Self {
        let mut o = Oracle { labels: BTreeMap::new(), canonical: BTreeMap::new(), factors: BTreeMap::new() };
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let s = |k: &str| v[k].as_str().unwrap().to_string();
            match v["kind"].as_str().unwrap() {
                "label" => {
                    o.labels.insert(s("source_label").to_lowercase(), s("canonical_code"));
                }
                "analysis" => {
                    o.canonical.insert(s("code"), s("canonical_unit"));
                }
                "unit" => {
                    o.factors.insert((s("from_unit"), s("to_unit")), v["factor"].as_f64().unwrap());
                }
                _ => {}
            }
        }
        o
    }

    /// Expected canonical value of a row, if the row is loadable.
    fn expect(&self, label: &str, value: &str, unit: &str) -> Option<(String, f64)> {
        let code = self.labels.get(&label.to_lowercase())?;
        let canonical = &self.canonical[code];
        let factor = if unit == canonical { 1.0 } else { *self.factors.get(&(unit.to_string(), canonical.clone()))? };
        let v: f64 = value.replace(',', ".").parse().ok()?;
        Some((code.clone(), v * factor))
    }
}

type SeriesKey = (String, String, String, String);

/// (patient, code, provider, time natural key) → value, from the raw delimited text.
fn expected_facts(oracle: &Oracle, text: &str, sep: char, cols: [usize; 6]) -> BTreeMap<SeriesKey, f64> {
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(sep).collect();
        let [p, a, v, u, t, prov] = cols.map(|i| cells[i]);
        let Some(stamp) = parse_timestamp(t) else { continue };
        if let Some((code, value)) = oracle.expect(a, v, u) {
            let key = TimePoint::new(stamp, None).natural_key();
            out.entry((p.to_string(), code, prov.to_string(), key)).or_insert(value);
        }
    }
    out
}

fn stored_facts(wh: &Warehouse) -> BTreeMap<SeriesKey, (f64, String)> {
    let nk = |k: Option<SurrogateKey>| wh.bus().member(k.unwrap()).unwrap().natural_key.clone();
    wh.facts()
        .iter()
        .filter_map(|f| match &f.record.measure {
            MeasureValue::Numeric { value, unit } => Some((
                (
                    nk(f.record.key(PATIENT)),
                    nk(f.record.key(MEDICAL_ANALYSIS)),
                    nk(f.record.key(PROVIDER)),
                    nk(f.record.key(TIME)),
                ),
                (*value, unit.clone()),
            )),
            _ => None,
        })
        .collect()
}

#[test]
fn two_labs_merge_into_one_canonical_series() {
    let f = fixture();
    let mut wh = empty_store(&f);
    let reports = f.load_sources(&mut wh, &["lab_a.csv", "lab_b.csv"]).unwrap();
    assert!(reports.iter().all(|r| r.is_balanced()));

    let oracle = Oracle::from_lines(&f.metadata);
    let mut expected = expected_facts(&oracle, &f.source("lab_a.csv").unwrap().text, ',', [0, 1, 2, 3, 4, 5]);
    expected.extend(expected_facts(&oracle, &f.source("lab_b.csv").unwrap().text, ';', [0, 1, 2, 3, 4, 5]));
    let stored = stored_facts(&wh);
    assert_eq!(stored.len(), expected.len());
    for (key, want) in &expected {
        let (got, unit) = &stored[key];
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{key:?}: {got} vs {want}");
        assert_eq!(unit, &oracle.canonical[&key.1]);
    }

    // one series per (patient, analysis), fed by both laboratories
    let mut providers: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
    for (p, code, prov, _) in stored.keys() {
        providers.entry((p.clone(), code.clone())).or_default().insert(prov.clone());
    }
    assert_eq!(providers.len(), 50 * 16);
    assert!(providers.values().all(|s| s.len() == 2));
    for f in wh.facts() {
        let analysis = wh.bus().member(f.record.key(MEDICAL_ANALYSIS).unwrap()).unwrap();
        let MeasureValue::Numeric { unit, .. } = &f.record.measure else { panic!() };
        assert_eq!(Some(unit.as_str()), analysis.attribute(CANONICAL_UNIT_ATTR));
    }
    assert_eq!(wh.audit().violation_count(), 0);
}

#[test]
fn members_created_matches_distinct_new_keys() {
    let f = fixture();
    let mut wh = empty_store(&f);
    let src = f.source("lab_a.csv").unwrap();
    let report = f.load_sources(&mut wh, &["lab_a.csv"]).unwrap().remove(0);

    let oracle = Oracle::from_lines(&f.metadata);
    let mut patients = BTreeSet::new();
    let mut providers = BTreeSet::new();
    let mut instants = BTreeSet::new();
    let mut codes = BTreeSet::new();
    for line in src.text.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        let (Some(stamp), Some(code)) = (parse_timestamp(c[4]), oracle.labels.get(&c[1].to_lowercase())) else { continue };
        if c[0].is_empty() || c[5].is_empty() {
            continue;
        }
        patients.insert(c[0]);
        providers.insert(c[5]);
        instants.insert(stamp);
        codes.insert(code.clone());
    }
    let days: BTreeSet<_> = instants.iter().map(|t| t.date()).collect();
    let months: BTreeSet<_> = instants.iter().map(|t| t.format("%Y-%m").to_string()).collect();
    let years: BTreeSet<_> = instants.iter().map(|t| t.format("%Y").to_string()).collect();
    let catalog: Vec<serde_json::Value> = f
        .metadata
        .lines()
        .filter(|l| l.contains("\"kind\":\"analysis\""))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let exams: BTreeSet<&str> =
        catalog.iter().filter(|a| codes.contains(a["code"].as_str().unwrap())).map(|a| a["examination"].as_str().unwrap()).collect();
    let cats: BTreeSet<&str> =
        catalog.iter().filter(|a| codes.contains(a["code"].as_str().unwrap())).map(|a| a["category"].as_str().unwrap()).collect();

    assert_eq!(report.members_created[PATIENT], patients.len());
    assert_eq!(report.members_created[PROVIDER], providers.len());
    assert_eq!(report.members_created[TIME], instants.len() + days.len() + months.len() + years.len());
    assert_eq!(report.members_created[MEDICAL_ANALYSIS], codes.len() + exams.len() + cats.len());
}

#[test]
fn rerun_on_disk_changes_nothing() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("store");
    f.write_to(&dir.path().join("corpus")).unwrap();
    {
        let mut wh = Warehouse::create(&root, Some(&f.schema_file())).unwrap();
        f.register(&mut wh).unwrap();
        for s in &f.sources {
            let r = run_pipeline(&mut wh, &dir.path().join("corpus/sources").join(&s.name), &s.profile, "first").unwrap();
            assert!(r.facts_inserted > 0);
        }
    }
    let mut wh = Warehouse::open(&root, OpenMode::Open).unwrap();
    let digest = wh.digest();
    let generation = wh.generation();
    f.register(&mut wh).unwrap();
    for s in &f.sources {
        let r = run_pipeline(&mut wh, &dir.path().join("corpus/sources").join(&s.name), &s.profile, "second").unwrap();
        assert_eq!(r.facts_inserted, 0, "{}", s.name);
        assert_eq!(r.members_created_total(), 0, "{}", s.name);
        assert_eq!(r.duplicates_skipped, r.rows_transformed);
    }
    assert_eq!(wh.digest(), digest);
    assert_eq!(wh.generation(), generation);
    assert!(root.join("reports/second.json").exists());
    drop(wh);
    assert_eq!(Warehouse::open(&root, OpenMode::Open).unwrap().digest(), digest);
}

fn pairwise_dedupe(rows: &[BTreeMap<String, String>]) -> Vec<usize> {
    (0..rows.len()).filter(|&i| (0..i).all(|j| rows[j] != rows[i])).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn dedupe_of_parsed_files_matches_pairwise(
        rows in proptest::collection::vec(proptest::collection::vec(0u8..3, 3), 0..40),
        copies in proptest::collection::vec((any::<prop::sample::Index>(), any::<prop::sample::Index>()), 0..10),
        semicolon in any::<bool>(),
    ) {
        let mut rows: Vec<Vec<String>> = rows.into_iter().map(|r| r.into_iter().map(|c| format!("v{c}")).collect()).collect();
        for (from, to) in copies {
            if rows.is_empty() { break; }
            let row = rows[from.index(rows.len())].clone();
            let at = to.index(rows.len() + 1);
            rows.insert(at, row);
        }
        let sep = if semicolon { ";" } else { "," };
        let mut text = ["patient", "analysis", "value", "unit", "when", "lab"].join(sep) + "\n";
        for r in &rows {
            text += &[r[0].as_str(), &r[1], &r[2], "u", "2024-01-01", "L"].join(sep);
            text += "\n";
        }
        let profile = EtlProfile::parse(r#"
name = "p"
fact_def = "biological_result"
[columns]
patient = "patient"
analysis = "analysis"
value = "value"
unit = "unit"
timestamp = "when"
provider = "lab"
"#).unwrap();
        let table = parse_source_text("f", &text, &profile).unwrap();
        let cells: Vec<_> = table.rows.iter().map(|r| r.cells.clone()).collect();
        let keep = pairwise_dedupe(&cells);
        let (kept, removed) = dedupe(table.rows.clone());
        prop_assert_eq!(removed, cells.len() - keep.len());
        let got: Vec<usize> = kept.iter().map(|r| r.row_number - 1).collect();
        prop_assert_eq!(got, keep);
    }
}

#[test]
fn corrupted_keys_are_rejected() {
    let f = fixture();
    let (mut wh, _) = f.warehouse().unwrap();
    let digest = wh.digest();
    let mut rng = StdRng::seed_from_u64(5);
    let template = wh.facts().iter().find(|x| x.record.fact_def == BIOLOGICAL_RESULT).unwrap().record.clone();
    let max_key = wh.bus().all_members().len() as u64;
    let non_leaf: Vec<SurrogateKey> =
        wh.bus().all_members().iter().filter(|m| m.level == "examination").map(|m| m.surrogate_key).collect();
    let dims = [PATIENT, PROVIDER, TIME, MEDICAL_ANALYSIS];
    for i in 0..100 {
        let dim = dims[rng.gen_range(0..4)];
        let mut record = FactRecord::new(BIOLOGICAL_RESULT, MeasureValue::numeric(1.0 + i as f64, "g/dL"), "corrupt");
        for d in dims {
            record = record.with_key(d, template.key(d).unwrap());
        }
        let original = template.key(dim).unwrap();
        let corrupted = match i % 4 {
            0 => SurrogateKey(max_key + 1 + rng.gen_range(0..1000)),
            // a key of another dimension
            1 => template.key(dims.iter().find(|d| **d != dim).unwrap()).unwrap(),
            // a non-leaf analysis or time member
            2 => non_leaf[rng.gen_range(0..non_leaf.len())],
            _ => SurrogateKey(0),
        };
        assert_ne!(corrupted, original);
        record.dim_keys.insert(dim.to_string(), corrupted);
        let err = wh.insert_fact(record).unwrap_err();
        assert!(matches!(err, StoreError::ReferentialIntegrity { .. } | StoreError::BindingMismatch { .. }), "{err}");
    }
    assert_eq!(wh.digest(), digest);
    assert_eq!(wh.audit().violation_count(), 0);
}

#[test]
fn bad_numbers_never_load() {
    assert_eq!(parse_decimal("1e3"), None);
    let f = fixture();
    let (wh, reports) = f.warehouse().unwrap();
    let lab_b = reports.iter().find(|r| r.source_file == "lab_b.csv").unwrap();
    let reasons: Vec<&str> = lab_b.errors.iter().map(|e| e.reason.as_str()).collect();
    assert!(reasons.iter().any(|r| r.contains("VitD")));
    assert!(reasons.iter().any(|r| r.contains("hémolysé")));
    assert!(reasons.iter().any(|r| r.contains("31/02/2023")));
    let lab_a = reports.iter().find(|r| r.source_file == "lab_a.csv").unwrap();
    assert!(lab_a.errors.iter().any(|e| e.reason.starts_with("no conversion")));
    assert!(wh.facts().iter().all(|f| f.record.measure.as_number().is_none_or(f64::is_finite)));
}
