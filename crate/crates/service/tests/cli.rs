use std::path::Path;

use biodw_core::analytics::{compare_groups, GroupComparison, PatientPage};
use biodw_core::etl::{run_pipeline, LoadReport};
use biodw_core::fixture::{Fixture, DEFAULT_SEED};
use biodw_core::{OpenMode, Warehouse};
use biodw_service::cli;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn biodw(store: &Path, args: &[&str]) -> Run {
    let mut argv = vec!["biodw".to_string(), "--store".into(), store.display().to_string()];
    argv.extend(args.iter().map(|a| a.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run(argv, &mut out, &mut err);
    Run { code, stdout: String::from_utf8(out).unwrap(), stderr: String::from_utf8(err).unwrap() }
}

fn ok(store: &Path, args: &[&str]) -> String {
    let r = biodw(store, args);
    assert_eq!(r.code, 0, "{args:?}: {}", r.stderr);
    r.stdout
}

/// Writes the fixture corpus under `dir/fx` and an initialized store with
/// metadata and profiles under `dir/store`.
fn prepared(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let (fx, store) = (dir.join("fx"), dir.join("store"));
    ok(&store, &["fixture", "generate", fx.to_str().unwrap()]);
    ok(&store, &["init", "--schema", fx.join("schema.toml").to_str().unwrap()]);
    ok(&store, &["metadata", "load", fx.join("metadata.jsonl").to_str().unwrap()]);
    for p in ["biometry", "lab_a", "lab_b"] {
        ok(&store, &["profile", "add", fx.join("profiles").join(format!("{p}.toml")).to_str().unwrap()]);
    }
    (fx, store)
}

fn machine<T: serde::de::DeserializeOwned>(store: &Path, args: &[&str]) -> T {
    let mut all = vec!["--format", "machine"];
    all.extend_from_slice(args);
    serde_json::from_str(&ok(store, &all)).unwrap()
}

#[test]
fn etl_run_prints_the_pipeline_report() {
    let dir = tempfile::tempdir().unwrap();
    let (fx, store) = prepared(dir.path());
    let fixture = Fixture::generate(DEFAULT_SEED);
    let mut oracle = Warehouse::in_memory();
    oracle.apply_schema(&fixture.schema_file()).unwrap();
    fixture.register(&mut oracle).unwrap();
    for (profile, file) in [("biometry", "biometry.csv"), ("lab_a", "lab_a.csv"), ("lab_b", "lab_b.csv")] {
        let path = fx.join("sources").join(file);
        let cli: LoadReport = machine(&store, &["etl", "run", "--profile", profile, "--batch", profile, path.to_str().unwrap()]);
        let lib = run_pipeline(&mut oracle, &path, profile, profile).unwrap();
        assert_eq!(cli, lib);
    }
    let table = ok(&store, &["etl", "run", "--profile", "lab_a", fx.join("sources/lab_a.csv").to_str().unwrap()]);
    assert!(table.contains("facts inserted    0"), "{table}");
    let on_disk = Warehouse::open(&store, OpenMode::Open).unwrap();
    assert_eq!(on_disk.digest(), oracle.digest());
}

#[test]
fn groups_and_comparison_agree_with_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (fx, store) = prepared(dir.path());
    for (profile, file) in [("biometry", "biometry.csv"), ("lab_a", "lab_a.csv")] {
        ok(&store, &["etl", "run", "--profile", profile, fx.join("sources").join(file).to_str().unwrap()]);
    }
    ok(&store, &["group", "create", "women", "--criteria", "sex = F"]);
    ok(&store, &["group", "create", "rugby", "--criteria", "discipline = rugby"]);

    let bad = biodw(&store, &["group", "create", "odd", "--criteria", "sex = F; latest(HGB) >> 12"]);
    assert_ne!(bad.code, 0);
    assert!(bad.stderr.contains("latest(HGB) >> 12"), "{}", bad.stderr);
    assert!(bad.stdout.is_empty());

    let cli: GroupComparison = machine(&store, &["compare", "--groups", "women,rugby", "--analysis", "FERR"]);
    let wh = Warehouse::open(&store, OpenMode::Open).unwrap();
    assert_eq!(cli, compare_groups(&wh, &["women".into(), "rugby".into()], "FERR").unwrap());
    let table = ok(&store, &["compare", "--groups", "women,rugby", "--analysis", "FERR"]);
    assert!(table.lines().any(|l| l.starts_with("women") && l.contains(&cli.rows[0].n.to_string())), "{table}");

    let missing = biodw(&store, &["compare", "--groups", "women,ghosts", "--analysis", "FERR"]);
    assert_eq!(missing.code, 1);
    assert!(missing.stderr.contains("ghosts"));
}

#[test]
fn usage_errors_exit_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s");
    let r = biodw(&store, &["frobnicate"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("Usage"), "{}", r.stderr);
    let r = biodw(&store, &["patient", "search", "--format", "yaml"]);
    assert_eq!(r.code, 2);
    let r = biodw(&store, &["patient", "search", "x"]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("cannot open store"), "{}", r.stderr);
    assert_eq!(biodw(&store, &["--help"]).code, 0);
}

#[test]
fn init_refuses_a_used_location() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("s");
    ok(&store, &["init"]);
    let again = biodw(&store, &["init"]);
    assert_eq!(again.code, 1);
    assert!(again.stderr.contains("not empty"), "{}", again.stderr);
    let page: PatientPage = machine(&store, &["patient", "search"]);
    assert_eq!(page.total, 0);
    assert_eq!(ok(&store, &["audit"]).lines().next().unwrap(), "0 facts scanned, 0 violations");
}

#[test]
fn bundles_and_documents_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (fx, store) = prepared(dir.path());
    ok(&store, &["bundle", "load", fx.join("cardio/bundles.json").to_str().unwrap()]);
    let wh = Warehouse::open(&store, OpenMode::Open).unwrap();
    let (report, doc) = wh.links().next().map(|(r, d)| (r, d.clone())).unwrap();
    let out = dir.path().join("doc.bin");
    ok(&store, &["document", "get", &doc.0, "--out", out.to_str().unwrap()]);
    assert_eq!(std::fs::read(&out).unwrap(), wh.document_bytes(&doc).unwrap());
    let listing = ok(&store, &["report", "documents", &report.to_string()]);
    assert!(listing.contains(&doc.0));
    // reloading stores nothing new
    let before = wh.digest();
    ok(&store, &["bundle", "load", fx.join("cardio/bundles.json").to_str().unwrap()]);
    assert_eq!(Warehouse::open(&store, OpenMode::Open).unwrap().digest(), before);
}
