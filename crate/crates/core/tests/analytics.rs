use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use biodw_core::analytics::{
    compare_groups, create_group, delete_group, export_attribute_value_view, flag_against, measure_series, modify_group,
    patient_record, rollup_aggregate, search_patients, select_members, Aggregate, CriteriaExpr, NormFlag, Page,
    RollupQuery,
};
use biodw_core::dimension::{SurrogateKey, MEDICAL_ANALYSIS, PATIENT};
use biodw_core::fixture::{Fixture, DEFAULT_SEED};
use biodw_core::metadata::ReferenceInterval;
use biodw_core::schema::{BIOLOGICAL, BIOLOGICAL_RESULT, BIOMETRICAL, CARDIO_VASCULAR};
use biodw_core::store::{FactFilter, MemberPredicate};
use biodw_core::{TimePoint, Warehouse};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn loaded() -> Warehouse {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| Fixture::generate(DEFAULT_SEED)).warehouse().unwrap().0
}

fn patient(wh: &Warehouse, key: &str) -> SurrogateKey {
    wh.bus().find_member(PATIENT, "patient", key).unwrap().unwrap().surrogate_key
}

#[test]
fn search_equals_linear_scan() {
    let wh = loaded();
    for q in ["", "ath-00", "ATH-013", "klein", "a", "zzz", "ATH-04"] {
        let got = search_patients(&wh, q, Page::new(Some(1), Some(1000))).unwrap();
        let ql = q.to_lowercase();
        let scan: BTreeSet<String> = wh
            .bus()
            .members(PATIENT)
            .unwrap()
            .filter(|m| {
                m.natural_key.to_lowercase().contains(&ql) || m.attribute("display_name").unwrap_or("").to_lowercase().contains(&ql)
            })
            .map(|m| m.natural_key.clone())
            .collect();
        let keys: Vec<String> = got.patients.iter().map(|m| m.natural_key.clone()).collect();
        assert_eq!(keys.iter().cloned().collect::<BTreeSet<_>>(), scan, "{q}");
        assert_eq!(got.total, scan.len());
        if scan.contains(&q.to_uppercase()) {
            assert_eq!(keys[0], q.to_uppercase());
        }
    }
    let paged = search_patients(&wh, "", Page::new(Some(2), Some(20))).unwrap();
    assert_eq!(paged.patients.len(), 20);
    assert_eq!(paged.patients[0].natural_key, "ATH-021");
    assert_eq!(search_patients(&wh, "", Page::default()).unwrap().patients.len(), 50);
}

#[test]
fn record_flattens_to_query_facts() {
    let wh = loaded();
    for key in ["ATH-001", "ATH-006", "ATH-050"] {
        let p = patient(&wh, key);
        for mart in [BIOLOGICAL, BIOMETRICAL, CARDIO_VASCULAR] {
            let record = patient_record(&wh, p, mart).unwrap();
            let mut flat: Vec<_> = record.flatten().iter().map(|e| e.fact_id).collect();
            flat.sort();
            let filter = FactFilter::default().mart(mart).member(MemberPredicate::key(PATIENT, "patient", p));
            let expected: Vec<_> = wh.query_facts(&filter).unwrap().iter().map(|f| f.id).collect();
            assert_eq!(flat, expected, "{key} {mart}");
        }
        let bio = patient_record(&wh, p, BIOLOGICAL).unwrap();
        // category → examination → analysis
        let hematology = bio.nodes.iter().find(|n| n.key == "blood_cells").unwrap().children.iter().find(|n| n.key == "hematology").unwrap();
        let hgb = hematology.children.iter().find(|n| n.key == "HGB").unwrap();
        assert_eq!(hgb.level, "analysis");
        assert_eq!(hgb.label.as_deref(), Some("hemogram hemoglobin"));
        assert_eq!(hgb.entries.len(), 5);
        let metric = patient_record(&wh, p, BIOMETRICAL).unwrap();
        assert!(metric.nodes.iter().all(|n| n.level == "analysis" && n.children.is_empty()));
    }
}

#[test]
fn record_flags_match_interval_oracle() {
    let wh = loaded();
    let p = patient(&wh, "ATH-003");
    let person = wh.bus().member(p).unwrap().clone();
    let record = patient_record(&wh, p, BIOLOGICAL).unwrap();
    for e in record.flatten() {
        let v = e.value.as_number().unwrap();
        let intervals: Vec<&ReferenceInterval> = wh.metadata().intervals_for(&e.analysis).collect();
        let qualified = intervals.iter().find(|i| i.qualifier.as_ref().is_some_and(|q| person.attribute(&q.attribute) == Some(&q.value)));
        let chosen = qualified.or(intervals.iter().find(|i| i.qualifier.is_none()));
        let want = match chosen {
            None => NormFlag::Unknown,
            Some(i) if i.low.is_some_and(|l| v < l) => NormFlag::Low,
            Some(i) if i.high.is_some_and(|h| v > h) => NormFlag::High,
            Some(_) => NormFlag::Normal,
        };
        assert_eq!(e.flag, want, "{} {v}", e.analysis);
    }
    let cardio = patient_record(&wh, patient(&wh, "ATH-001"), CARDIO_VASCULAR).unwrap();
    assert!(cardio.flatten().iter().filter(|e| e.value.as_number().is_none()).all(|e| e.flag == NormFlag::Unknown));
}

#[test]
fn random_flags_match_comparator() {
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..1000 {
        let low = rng.gen_range(-50.0..50.0);
        let high = low + rng.gen_range(0.0..30.0);
        let i = ReferenceInterval { canonical_code: "X".into(), low: Some(low), high: Some(high), qualifier: None };
        let v = match rng.gen_range(0..4) {
            0 => low,
            1 => high,
            _ => rng.gen_range(-100.0..100.0),
        };
        let want = if v < low { NormFlag::Low } else if v > high { NormFlag::High } else { NormFlag::Normal };
        assert_eq!(flag_against(v, Some(&i)), want);
    }
}

#[test]
fn series_equals_sorted_filtered_dump() {
    let wh = loaded();
    let p = patient(&wh, "ATH-010");
    for code in ["HGB", "WEIGHT", "HR", "CK"] {
        let series = measure_series(&wh, p, code, None, None).unwrap();
        let analysis = wh.bus().find_member(MEDICAL_ANALYSIS, "analysis", code).unwrap().unwrap().surrogate_key;
        let mut dump: Vec<(TimePoint, u64, f64)> = wh
            .facts()
            .iter()
            .filter(|f| f.record.key(PATIENT) == Some(p) && f.record.key(MEDICAL_ANALYSIS) == Some(analysis))
            .map(|f| (wh.time_point(f).unwrap(), f.id.0, f.record.measure.as_number().unwrap()))
            .collect();
        dump.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        let got: Vec<(TimePoint, u64, f64)> = series.iter().map(|s| (s.time.clone(), s.fact_id.0, s.value)).collect();
        assert_eq!(got, dump, "{code}");
    }
    // weighed before and after practice: two points on the same day
    let weight = measure_series(&wh, p, "WEIGHT", None, None).unwrap();
    assert_eq!(weight.len(), 8);
    assert_eq!(weight[0].time.date(), weight[1].time.date());
    assert_eq!(weight[0].time.session_tag.as_deref(), Some("post"));
    assert_eq!(weight[1].time.session_tag.as_deref(), Some("pre"));
    let day = weight[0].time.timestamp;
    assert_eq!(measure_series(&wh, p, "WEIGHT", Some(day), Some(day)).unwrap().len(), 2);
    assert!(measure_series(&wh, p, "WEIGHT", Some(day), Some(day - chrono::Duration::days(1))).unwrap().is_empty());
    assert!(measure_series(&wh, p, "NOPE", None, None).is_err());
}

#[test]
fn groups_match_full_scan() {
    let mut wh = loaded();
    let facts = wh.fact_count();
    let soccer = create_group(&mut wh, "soccer players", "discipline = soccer".parse().unwrap()).unwrap();
    let scan: BTreeSet<SurrogateKey> = wh
        .bus()
        .members(PATIENT)
        .unwrap()
        .filter(|m| m.attribute("discipline") == Some("soccer"))
        .map(|m| m.surrogate_key)
        .collect();
    assert_eq!(soccer.members, scan);
    assert_eq!(scan.len(), 20);

    let parts = ["discipline = soccer", "position != back", "latest(HGB) >= 14", "sex contains m"];
    let whole: CriteriaExpr = parts.join("; ").parse().unwrap();
    let mut intersection: Option<BTreeSet<SurrogateKey>> = None;
    for p in parts {
        let s = select_members(&wh, &p.parse().unwrap()).unwrap();
        intersection = Some(match intersection {
            None => s,
            Some(acc) => acc.intersection(&s).copied().collect(),
        });
    }
    assert_eq!(select_members(&wh, &whole).unwrap(), intersection.unwrap());
    assert!(select_members(&wh, &"sex = F; sex = M".parse().unwrap()).unwrap().is_empty());
    assert_eq!(select_members(&wh, &"sex >= A".parse().unwrap()).unwrap().len(), 50);

    let forwards = modify_group(&mut wh, "soccer players", Some("discipline = soccer; position = forward".parse().unwrap())).unwrap();
    assert!(forwards.members.is_subset(&scan) && forwards.members.len() == 5);
    assert!(create_group(&mut wh, "soccer players", CriteriaExpr::default()).is_err());
    assert!(create_group(&mut wh, "x", "weight_class = heavy".parse().unwrap()).is_err());
    delete_group(&mut wh, "soccer players").unwrap();
    assert!(delete_group(&mut wh, "soccer players").is_err());
    assert_eq!(wh.fact_count(), facts);
    assert_eq!(wh.bus().members(PATIENT).unwrap().count(), 50);
}

/// Parses the mart export and recomputes statistics in two passes.
fn two_pass_from_dump(wh: &Warehouse, mart: &str, members: &BTreeSet<String>, code: &str) -> Option<(usize, f64, Option<f64>, f64, f64)> {
    let dump = wh.export_mart(mart).unwrap();
    let mut reader = csv::Reader::from_reader(dump.as_bytes());
    let header = reader.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (ci, pi, ti, vi, ki) = (col("medical_analysis"), col("patient"), col("time"), col("measure"), col("fact_id"));
    let mut latest: BTreeMap<String, ((String, u64), f64)> = BTreeMap::new();
    for row in reader.records() {
        let row = row.unwrap();
        if row[ci] != *code || !members.contains(&row[pi]) {
            continue;
        }
        let Ok(v) = row[vi].parse::<f64>() else { continue };
        let order = (row[ti].to_string(), row[ki].parse::<u64>().unwrap());
        let slot = latest.entry(row[pi].to_string()).or_insert((order.clone(), v));
        if order > slot.0 {
            *slot = (order, v);
        }
    }
    let values: Vec<f64> = latest.values().map(|(_, v)| *v).collect();
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((values.len(), mean, sd, min, max))
}

#[test]
fn comparison_matches_two_pass_oracle() {
    let mut wh = loaded();
    create_group(&mut wh, "backs", "position = back".parse().unwrap()).unwrap();
    create_group(&mut wh, "forwards", "position = forward".parse().unwrap()).unwrap();
    create_group(&mut wh, "women", "sex = F".parse().unwrap()).unwrap();
    create_group(&mut wh, "lonely", "display_name contains zzz".parse().unwrap()).unwrap();
    let groups: Vec<String> = ["backs", "forwards", "women", "lonely"].map(String::from).to_vec();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    for (mart, code) in [(BIOLOGICAL, "HGB"), (BIOLOGICAL, "CK"), (BIOMETRICAL, "WEIGHT"), (CARDIO_VASCULAR, "LVEF")] {
        let cmp = compare_groups(&wh, &groups, code).unwrap();
        for row in &cmp.rows {
            let members: BTreeSet<String> =
                wh.group(&row.group).unwrap().members.iter().map(|k| wh.bus().member(*k).unwrap().natural_key.clone()).collect();
            match two_pass_from_dump(&wh, mart, &members, code) {
                None => assert_eq!((row.n, row.mean, row.std_dev), (0, None, None)),
                Some((n, mean, sd, min, max)) => {
                    assert_eq!(row.n, n);
                    assert!(close(row.mean.unwrap(), mean), "{code} {}", row.group);
                    match (row.std_dev, sd) {
                        (Some(a), Some(b)) => assert!(close(a, b)),
                        (a, b) => assert_eq!(a, b),
                    }
                    assert_eq!((row.min, row.max), (Some(min), Some(max)));
                }
            }
        }
        assert_eq!(compare_groups(&wh, &groups, code).unwrap(), cmp);
    }
    let twice = compare_groups(&wh, &["backs".into(), "backs".into()], "HGB").unwrap();
    assert_eq!(twice.rows[0], twice.rows[1]);
    assert!(compare_groups(&wh, &["nobody".into()], "HGB").is_err());
}

#[test]
fn rollup_recomposes_from_children() {
    let wh = loaded();
    let at = |level: &str, agg| rollup_aggregate(&wh, &RollupQuery::new(BIOLOGICAL, BIOLOGICAL_RESULT, MEDICAL_ANALYSIS, level, agg)).unwrap();
    for agg in [Aggregate::Count, Aggregate::Sum] {
        let parents = at("examination", agg);
        let children = at("analysis", agg);
        let mut recomposed: BTreeMap<SurrogateKey, f64> = BTreeMap::new();
        for c in &children {
            let parent = wh.bus().member(c.key).unwrap().parent.unwrap();
            *recomposed.entry(parent).or_default() += c.value;
        }
        assert_eq!(parents.len(), recomposed.len());
        for p in &parents {
            let r = recomposed[&p.key];
            assert!((p.value - r).abs() <= 1e-9 * r.abs().max(1.0), "{} {agg}", p.member);
        }
    }
    let means = at("examination", Aggregate::Mean);
    let sums = at("examination", Aggregate::Sum);
    for (m, s) in means.iter().zip(&sums) {
        assert!((m.value - s.value / s.count as f64).abs() <= 1e-9 * m.value.abs());
    }
    // the time dimension has a single year: grouped equals ungrouped
    let years = rollup_aggregate(&wh, &RollupQuery::new(BIOLOGICAL, BIOLOGICAL_RESULT, "time", "year", Aggregate::Max)).unwrap();
    assert_eq!(years.len(), 1);
    let all_max = wh
        .facts()
        .iter()
        .filter(|f| f.record.fact_def == BIOLOGICAL_RESULT)
        .map(|f| f.record.measure.as_number().unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(years[0].value, all_max);
    let categories = at("category", Aggregate::Count);
    let total: f64 = categories.iter().map(|r| r.value).sum();
    assert_eq!(total as usize, wh.facts().iter().filter(|f| f.record.fact_def == BIOLOGICAL_RESULT).count());
    assert!(rollup_aggregate(&wh, &RollupQuery::new(CARDIO_VASCULAR, "cv_report", MEDICAL_ANALYSIS, "analysis", Aggregate::Sum)).is_err());
    assert!(rollup_aggregate(&wh, &RollupQuery::new(BIOLOGICAL, BIOLOGICAL_RESULT, MEDICAL_ANALYSIS, "decade", Aggregate::Sum)).is_err());
}

#[test]
fn attribute_value_cells_are_series_tails() {
    let mut wh = loaded();
    for (mart, as_of) in [(BIOLOGICAL, None), (BIOMETRICAL, None), (BIOLOGICAL, chrono::NaiveDate::from_ymd_opt(2023, 6, 1))] {
        let view = export_attribute_value_view(&wh, mart, None, as_of).unwrap();
        let with_facts: BTreeSet<SurrogateKey> = wh
            .query_facts(&FactFilter::default().mart(mart))
            .unwrap()
            .iter()
            .map(|f| f.record.key(PATIENT).unwrap())
            .collect();
        assert_eq!(view.rows.len(), with_facts.len());
        let mut sorted = view.columns.clone();
        sorted.sort();
        assert_eq!(view.columns, sorted);
        for row in &view.rows {
            let p = patient(&wh, &row.patient);
            for (code, cell) in view.columns.iter().zip(&row.cells) {
                let to = as_of.map(|d| d.and_hms_opt(23, 59, 59).unwrap());
                let tail = measure_series(&wh, p, code, None, to).unwrap().last().map(|s| s.value);
                assert_eq!(*cell, tail, "{} {code}", row.patient);
            }
        }
    }
    create_group(&mut wh, "cyclists", "discipline = cycling".parse().unwrap()).unwrap();
    let cyclists = export_attribute_value_view(&wh, CARDIO_VASCULAR, Some("cyclists"), None).unwrap();
    assert_eq!(cyclists.rows.len(), 10);
    assert!(cyclists.rows.iter().all(|r| r.cells.iter().all(Option::is_none)));
    let csv = export_attribute_value_view(&wh, BIOMETRICAL, None, None).unwrap().to_csv();
    assert!(csv.starts_with("patient,BODYFAT,GRIP,HEIGHT,HR,VO2MAX,WEIGHT\n"));
    assert!(export_attribute_value_view(&wh, BIOLOGICAL, Some("nobody"), None).is_err());
}
