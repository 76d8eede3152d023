//! Deterministic synthetic corpus: about fifty athletes followed by two
//! laboratories with different conventions, a sports-medicine center and a
//! cardiology unit. Used by tests, benchmarks and `biodw fixture`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::bundle::{load_bundle, BundleError, BundleSpec, DocumentSpec, ResultSpec};
use crate::etl::{run_pipeline_text, EtlError, EtlProfile, LoadReport};
use crate::metadata::{AnalysisDef, LabelMapping, MetadataEntry, MetadataError, MetadataRegistry, Qualifier, ReferenceInterval, UnitConversion};
use crate::schema::{SchemaFile, SchemaFileError};
use crate::store::{StoreError, Warehouse};

pub const DEFAULT_SEED: u64 = 20_100_611;

pub const SCHEMA: &str = r#"# Sports-medicine patient attributes used for group criteria.
[[extend]]
dimension = "patient"
level = "patient"
attributes = [{ name = "discipline", kind = "text" }, { name = "position", kind = "text" }]
"#;

pub const PROFILE_LAB_A: &str = r#"name = "lab_a"
fact_def = "biological_result"

[columns]
patient = "PatientID"
analysis = "Analysis"
value = "Result"
unit = "Unit"
timestamp = "SampledAt"
provider = "Lab"

[patient_attributes]
sex = "Sex"

[provider_attributes]
kind = "=laboratory"
"#;

pub const PROFILE_LAB_B: &str = r#"name = "lab_b"
fact_def = "biological_result"

[columns]
patient = "NumDossier"
analysis = "Examen"
value = "Resultat"
unit = "Unite"
timestamp = "DatePrelevement"
provider = "Labo"

[patient_attributes]
sex = "Sexe"

[provider_attributes]
kind = "=laboratory"
"#;

pub const PROFILE_BIOMETRY: &str = r#"name = "biometry"
fact_def = "biometrical_measure"

[columns]
patient = "Athlete"
analysis = "Measure"
value = "Value"
unit = "Unit"
timestamp = "Date"
provider = "Center"
session = "Session"

[patient_attributes]
display_name = "Name"
sex = "Sex"
birth_date = "BirthDate"
discipline = "Discipline"
position = "Position"

[provider_attributes]
kind = "=sports_medicine"
"#;

/// A source label and unit with the factor converting it to the canonical unit.
#[derive(Clone, Copy)]
struct Source {
    label: &'static str,
    unit: &'static str,
    factor: f64,
}

const fn src(label: &'static str, unit: &'static str, factor: f64) -> Source {
    Source { label, unit, factor }
}

#[derive(Clone, Copy)]
enum Norm {
    Plain(Option<f64>, Option<f64>),
    BySex { f: (f64, f64), m: (f64, f64), fallback: Option<(f64, f64)> },
}

struct Analysis {
    code: &'static str,
    label: &'static str,
    examination: &'static str,
    category: &'static str,
    unit: &'static str,
    /// Typical value for men and women in the canonical unit, and relative spread.
    mean: (f64, f64),
    spread: f64,
    norm: Norm,
    sources: [Option<Source>; 2],
}

const fn plain(low: f64, high: f64) -> Norm {
    Norm::Plain(Some(low), Some(high))
}

const BIOLOGICAL: [Analysis; 16] = [
    Analysis { code: "HGB", label: "hemogram hemoglobin", examination: "hematology", category: "blood_cells", unit: "g/dL", mean: (15.2, 13.6), spread: 0.08, norm: Norm::BySex { f: (12.0, 16.0), m: (13.5, 17.5), fallback: Some((12.0, 17.5)) }, sources: [Some(src("Hemoglobin", "g/dL", 1.0)), Some(src("Hb", "g/L", 0.1))] },
    Analysis { code: "HCT", label: "hematocrit", examination: "hematology", category: "blood_cells", unit: "%", mean: (44.0, 40.5), spread: 0.07, norm: Norm::BySex { f: (36.0, 46.0), m: (40.0, 52.0), fallback: None }, sources: [Some(src("Hematocrit", "%", 1.0)), Some(src("Ht", "%", 1.0))] },
    Analysis { code: "RBC", label: "red blood cells", examination: "hematology", category: "blood_cells", unit: "10^12/L", mean: (5.0, 4.5), spread: 0.07, norm: plain(4.0, 5.9), sources: [Some(src("Red blood cells", "10^12/L", 1.0)), Some(src("GR", "T/L", 1.0))] },
    Analysis { code: "WBC", label: "white blood cells", examination: "hematology", category: "blood_cells", unit: "10^9/L", mean: (6.4, 6.6), spread: 0.22, norm: plain(4.0, 10.0), sources: [Some(src("White blood cells", "10^9/L", 1.0)), Some(src("GB", "G/L", 1.0))] },
    Analysis { code: "PLT", label: "platelets", examination: "hematology", category: "blood_cells", unit: "10^9/L", mean: (245.0, 265.0), spread: 0.2, norm: plain(150.0, 400.0), sources: [Some(src("Platelets", "10^9/L", 1.0)), Some(src("Plaq", "G/L", 1.0))] },
    Analysis { code: "RETIC", label: "reticulocyte numbering", examination: "hematology", category: "blood_cells", unit: "10^9/L", mean: (62.0, 58.0), spread: 0.3, norm: plain(20.0, 100.0), sources: [Some(src("Reticulocytes", "10^9/L", 1.0)), Some(src("Retic", "G/L", 1.0))] },
    Analysis { code: "GLU", label: "fasting glucose", examination: "biochemistry", category: "blood_chemistry", unit: "mmol/L", mean: (5.0, 4.9), spread: 0.12, norm: plain(3.9, 6.1), sources: [Some(src("Glucose", "mg/dL", 0.0555)), Some(src("Gly", "mmol/L", 1.0))] },
    Analysis { code: "CREA", label: "creatinine", examination: "biochemistry", category: "blood_chemistry", unit: "µmol/L", mean: (92.0, 72.0), spread: 0.15, norm: Norm::BySex { f: (45.0, 90.0), m: (60.0, 110.0), fallback: None }, sources: [Some(src("Creatinine", "mg/dL", 88.42)), Some(src("Creat", "µmol/L", 1.0))] },
    Analysis { code: "UREA", label: "urea", examination: "biochemistry", category: "blood_chemistry", unit: "mmol/L", mean: (5.6, 5.0), spread: 0.2, norm: plain(2.5, 7.5), sources: [Some(src("Urea", "mmol/L", 1.0)), Some(src("Uree", "mmol/L", 1.0))] },
    Analysis { code: "CK", label: "creatine kinase", examination: "biochemistry", category: "blood_chemistry", unit: "U/L", mean: (210.0, 150.0), spread: 0.45, norm: plain(30.0, 200.0), sources: [Some(src("CK", "U/L", 1.0)), Some(src("CPK", "U/L", 1.0))] },
    Analysis { code: "CHOL", label: "total cholesterol", examination: "biochemistry", category: "blood_chemistry", unit: "mmol/L", mean: (4.6, 4.8), spread: 0.15, norm: Norm::Plain(None, Some(5.2)), sources: [Some(src("Cholesterol", "mg/dL", 0.02586)), Some(src("Chol", "mmol/L", 1.0))] },
    Analysis { code: "FERR", label: "ferritin", examination: "iron_status", category: "blood_chemistry", unit: "µg/L", mean: (110.0, 55.0), spread: 0.4, norm: Norm::BySex { f: (15.0, 150.0), m: (30.0, 300.0), fallback: None }, sources: [Some(src("Ferritin", "ng/mL", 1.0)), Some(src("Ferri", "µg/L", 1.0))] },
    Analysis { code: "FE", label: "serum iron", examination: "iron_status", category: "blood_chemistry", unit: "µmol/L", mean: (19.0, 16.0), spread: 0.25, norm: plain(10.0, 30.0), sources: [Some(src("Serum iron", "µg/dL", 0.1791)), Some(src("Fer", "µmol/L", 1.0))] },
    Analysis { code: "TRF", label: "transferrin", examination: "iron_status", category: "blood_chemistry", unit: "g/L", mean: (2.6, 2.8), spread: 0.12, norm: plain(2.0, 3.6), sources: [Some(src("Transferrin", "mg/dL", 0.01)), Some(src("Transf", "g/L", 1.0))] },
    Analysis { code: "TESTO", label: "testosterone", examination: "endocrinology", category: "hormones", unit: "nmol/L", mean: (19.0, 1.4), spread: 0.3, norm: Norm::BySex { f: (0.3, 2.4), m: (8.6, 29.0), fallback: None }, sources: [Some(src("Testosterone", "ng/dL", 0.0347)), Some(src("Testo", "nmol/L", 1.0))] },
    Analysis { code: "CORT", label: "cortisol", examination: "endocrinology", category: "hormones", unit: "nmol/L", mean: (420.0, 400.0), spread: 0.3, norm: plain(140.0, 690.0), sources: [Some(src("Cortisol", "µg/dL", 27.59)), Some(src("Cortisol", "nmol/L", 1.0))] },
];

const BIOMETRICAL: [Analysis; 6] = [
    Analysis { code: "WEIGHT", label: "body weight", examination: "biometry", category: "biometry", unit: "kg", mean: (78.0, 62.0), spread: 0.1, norm: Norm::Plain(None, None), sources: [Some(src("Weight", "kg", 1.0)), None] },
    Analysis { code: "HEIGHT", label: "height", examination: "biometry", category: "biometry", unit: "cm", mean: (181.0, 168.0), spread: 0.04, norm: Norm::Plain(None, None), sources: [Some(src("Height", "m", 100.0)), None] },
    Analysis { code: "BODYFAT", label: "body fat", examination: "biometry", category: "biometry", unit: "%", mean: (12.0, 19.0), spread: 0.25, norm: Norm::BySex { f: (14.0, 24.0), m: (6.0, 17.0), fallback: None }, sources: [Some(src("Body fat", "%", 1.0)), None] },
    Analysis { code: "HR", label: "heart rate", examination: "biometry", category: "biometry", unit: "bpm", mean: (58.0, 62.0), spread: 0.15, norm: plain(40.0, 100.0), sources: [Some(src("Heart rate", "bpm", 1.0)), None] },
    Analysis { code: "VO2MAX", label: "maximal oxygen uptake", examination: "biometry", category: "biometry", unit: "mL/kg/min", mean: (55.0, 47.0), spread: 0.1, norm: Norm::Plain(Some(35.0), None), sources: [Some(src("VO2max", "mL/kg/min", 1.0)), None] },
    Analysis { code: "GRIP", label: "grip strength", examination: "biometry", category: "biometry", unit: "kg", mean: (48.0, 31.0), spread: 0.15, norm: Norm::Plain(None, None), sources: [Some(src("Grip strength", "kg", 1.0)), None] },
];

const CARDIO: [Analysis; 6] = [
    Analysis { code: "ECHO", label: "transthoracic echocardiography", examination: "echocardiography", category: "cardiology", unit: "report", mean: (0.0, 0.0), spread: 0.0, norm: Norm::Plain(None, None), sources: [None, None] },
    Analysis { code: "LVEF", label: "left ventricular ejection fraction", examination: "echocardiography", category: "cardiology", unit: "%", mean: (63.0, 64.0), spread: 0.07, norm: plain(55.0, 75.0), sources: [None, None] },
    Analysis { code: "LVEDD", label: "left ventricular end-diastolic diameter", examination: "echocardiography", category: "cardiology", unit: "mm", mean: (54.0, 48.0), spread: 0.07, norm: plain(38.0, 58.0), sources: [None, None] },
    Analysis { code: "IVS", label: "interventricular septum", examination: "echocardiography", category: "cardiology", unit: "mm", mean: (10.0, 8.5), spread: 0.1, norm: plain(6.0, 11.0), sources: [None, None] },
    Analysis { code: "ECG", label: "resting electrocardiogram", examination: "electrocardiography", category: "cardiology", unit: "report", mean: (0.0, 0.0), spread: 0.0, norm: Norm::Plain(None, None), sources: [None, None] },
    Analysis { code: "QTC", label: "corrected QT interval", examination: "electrocardiography", category: "cardiology", unit: "ms", mean: (405.0, 415.0), spread: 0.05, norm: plain(350.0, 450.0), sources: [None, None] },
];

const GIVEN_F: [&str; 10] = ["Camille", "Elodie", "Gaelle", "Ines", "Laure", "Nora", "Pauline", "Sarah", "Lea", "Manon"];
const GIVEN_M: [&str; 10] = ["Adrien", "Bruno", "Denis", "Fabrice", "Hugo", "Julien", "Karim", "Mathis", "Quentin", "Thomas"];
const FAMILY: [&str; 20] = [
    "Arnaud", "Benali", "Chevalier", "Dubois", "Estienne", "Fournier", "Garnier", "Henry", "Imbert", "Joly", "Klein",
    "Lemaire", "Marchand", "Noel", "Olivier", "Perrin", "Renaud", "Simon", "Tessier", "Vidal",
];

/// (discipline, positions, athletes)
const SQUADS: [(&str, &[&str], usize); 4] = [
    ("soccer", &["back", "forward", "midfielder", "goalkeeper"], 20),
    ("rugby", &["back", "forward"], 12),
    ("cycling", &[], 10),
    ("swimming", &[], 8),
];

#[derive(Clone, Debug)]
pub struct Athlete {
    pub key: String,
    pub name: String,
    pub sex: char,
    pub birth_date: String,
    pub discipline: &'static str,
    pub position: Option<&'static str>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceFile {
    pub name: String,
    pub profile: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixtureDocument {
    pub file: String,
    pub bytes: Vec<u8>,
}

/// Generated corpus; every part is also what `write_to` puts on disk.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub athletes: Vec<Athlete>,
    pub schema: String,
    pub metadata: String,
    pub profiles: Vec<(String, String)>,
    pub sources: Vec<SourceFile>,
    pub bundles: Vec<BundleSpec>,
    pub documents: Vec<FixtureDocument>,
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Schema(#[from] SchemaFileError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Etl(#[from] EtlError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

fn draw(rng: &mut StdRng, a: &Analysis, sex: char) -> f64 {
    let mean = if sex == 'F' { a.mean.1 } else { a.mean.0 };
    let noise: f64 = StandardNormal.sample(rng);
    (mean * (1.0 + a.spread * noise)).max(mean * 0.05)
}

fn metadata_entries() -> Vec<MetadataEntry> {
    let mut out = Vec::new();
    let all = BIOLOGICAL.iter().chain(BIOMETRICAL.iter()).chain(CARDIO.iter());
    let mut conversions: Vec<(&str, &str, f64)> = Vec::new();
    for a in all {
        out.push(MetadataEntry::Analysis(AnalysisDef {
            code: a.code.into(),
            label: a.label.into(),
            canonical_unit: a.unit.into(),
            examination: a.examination.into(),
            category: a.category.into(),
        }));
        for s in a.sources.iter().flatten() {
            let label = MetadataEntry::Label(LabelMapping { source_label: s.label.into(), canonical_code: a.code.into() });
            if !out.contains(&label) {
                out.push(label);
            }
            if s.unit != a.unit && !conversions.iter().any(|(f, t, _)| *f == s.unit && *t == a.unit) {
                conversions.push((s.unit, a.unit, s.factor));
            }
        }
        let interval = |low: Option<f64>, high: Option<f64>, q: Option<(&str, &str)>| {
            MetadataEntry::Interval(ReferenceInterval {
                canonical_code: a.code.into(),
                low,
                high,
                qualifier: q.map(|(attr, v)| Qualifier { attribute: attr.into(), value: v.into() }),
            })
        };
        match a.norm {
            Norm::Plain(None, None) => {}
            Norm::Plain(low, high) => out.push(interval(low, high, None)),
            Norm::BySex { f, m, fallback } => {
                out.push(interval(Some(f.0), Some(f.1), Some(("sex", "F"))));
                out.push(interval(Some(m.0), Some(m.1), Some(("sex", "M"))));
                if let Some((low, high)) = fallback {
                    out.push(interval(Some(low), Some(high), None));
                }
            }
        }
    }
    for (from, to, factor) in conversions {
        out.push(MetadataEntry::Unit(UnitConversion { from_unit: from.into(), to_unit: to.into(), factor, offset: 0.0 }));
    }
    out
}

fn athletes(rng: &mut StdRng) -> Vec<Athlete> {
    let mut out = Vec::new();
    for (discipline, positions, count) in SQUADS {
        for i in 0..count {
            let n = out.len() + 1;
            let sex = if rng.gen_bool(0.4) { 'F' } else { 'M' };
            let name = format!("{} {}", if sex == 'F' { GIVEN_F } else { GIVEN_M }.choose(rng).expect("non-empty"), FAMILY.choose(rng).expect("non-empty"));
            let birth_date = format!("{}-{:02}-{:02}", rng.gen_range(1985..2004), rng.gen_range(1..=12), rng.gen_range(1..=28));
            let position = (!positions.is_empty()).then(|| positions[i % positions.len()]);
            out.push(Athlete { key: format!("ATH-{n:03}"), name, sex, birth_date, discipline, position });
        }
    }
    out
}

/// Copies about 3% of the rows to random later positions.
fn plant_doubles(rng: &mut StdRng, rows: &mut Vec<String>) {
    let n = rows.len() / 33;
    for _ in 0..n {
        let i = rng.gen_range(0..rows.len());
        let j = rng.gen_range(i..=rows.len());
        let copy = rows[i].clone();
        rows.insert(j, copy);
    }
}

fn format_value(v: f64, comma: bool) -> String {
    let digits = if v.abs() >= 100.0 { 1 } else if v.abs() >= 10.0 { 2 } else { 3 };
    let s = format!("{v:.digits$}");
    if comma {
        s.replace('.', ",")
    } else {
        s
    }
}

fn lab_file(rng: &mut StdRng, people: &[Athlete], lab: usize) -> String {
    let (header, sep, provider, visits): (&str, char, &str, &[(u32, u32)]) = match lab {
        0 => ("PatientID,Analysis,Result,Unit,SampledAt,Lab,Sex", ',', "LAB-A", &[(1, 10), (5, 8), (9, 12)]),
        _ => ("NumDossier;Examen;Resultat;Unite;DatePrelevement;Labo;Sexe", ';', "LAB-B", &[(3, 6), (11, 14)]),
    };
    let mut rows = Vec::new();
    for p in people {
        for &(month, day0) in visits {
            let day = day0 + rng.gen_range(0..14);
            let (hour, minute) = (rng.gen_range(7..11), rng.gen_range(0..4) * 15);
            let stamp = match lab {
                0 => format!("2023-{month:02}-{day:02} {hour:02}:{minute:02}"),
                _ => format!("{day:02}/{month:02}/2023 {hour:02}:{minute:02}"),
            };
            for a in &BIOLOGICAL {
                let s = a.sources[lab].expect("both labs report every biological analysis");
                let value = format_value(draw(rng, a, p.sex) / s.factor, lab == 1);
                let cells = [p.key.as_str(), s.label, &value, s.unit, &stamp, provider, &p.sex.to_string()];
                rows.push(cells.join(&sep.to_string()));
            }
        }
    }
    // a few rows the pipeline must quarantine
    let q = |cells: [&str; 7]| cells.join(&sep.to_string());
    match lab {
        0 => {
            rows.push(q(["ATH-004", "Glucose", "92", "mmol", "2023-05-20 08:00", provider, "M"]));
            rows.push(q(["ATH-011", "Hemoglobin", "", "g/dL", "2023-05-20 08:00", provider, "M"]));
        }
        _ => {
            rows.push(q(["ATH-002", "VitD", "31,5", "ng/mL", "12/03/2023 08:30", provider, "M"]));
            rows.push(q(["ATH-003", "VitD", "28,0", "ng/mL", "12/03/2023 08:30", provider, "F"]));
            rows.push(q(["ATH-009", "CPK", "hémolysé", "U/L", "12/03/2023 08:30", provider, "M"]));
            rows.push(q(["ATH-021", "Hb", "141", "g/L", "31/02/2023 08:30", provider, "M"]));
        }
    }
    plant_doubles(rng, &mut rows);
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn biometry_file(rng: &mut StdRng, people: &[Athlete]) -> String {
    let mut rows = Vec::new();
    for p in people {
        // body measures drift slowly around a per-athlete baseline
        let baselines: Vec<f64> = BIOMETRICAL.iter().map(|a| draw(rng, a, p.sex)).collect();
        for (month, day) in [(2, 14), (4, 18), (6, 20), (10, 3)] {
            let date = format!("2023-{month:02}-{day:02}");
            for (a, baseline) in BIOMETRICAL.iter().zip(&baselines) {
                let s = a.sources[0].expect("biometry reports every measure");
                let sessions: &[&str] = if matches!(a.code, "WEIGHT" | "HR") { &["pre", "post"] } else { &["pre"] };
                let drift: f64 = StandardNormal.sample(rng);
                let base = baseline * (1.0 + if a.code == "HEIGHT" { 0.001 } else { 0.03 } * drift);
                for session in sessions {
                    let v = match (a.code, *session) {
                        ("WEIGHT", "post") => base * (1.0 - rng.gen_range(0.005..0.025)),
                        ("HR", "post") => base * rng.gen_range(1.3..1.7),
                        _ => base,
                    };
                    let value = format_value(v / s.factor, false);
                    let cells = [
                        p.key.as_str(),
                        &p.name,
                        &p.sex.to_string(),
                        &p.birth_date,
                        p.discipline,
                        p.position.unwrap_or(""),
                        s.label,
                        &value,
                        s.unit,
                        &date,
                        session,
                        "SMC",
                    ];
                    rows.push(cells.join(","));
                }
            }
        }
    }
    plant_doubles(rng, &mut rows);
    let mut out = String::from("Athlete,Name,Sex,BirthDate,Discipline,Position,Measure,Value,Unit,Date,Session,Center\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn document(rng: &mut StdRng, magic: &[u8], len: usize) -> Vec<u8> {
    let mut bytes = magic.to_vec();
    bytes.extend((0..len).map(|_| rng.gen::<u8>()));
    bytes
}

fn cardio(rng: &mut StdRng, people: &[Athlete]) -> (Vec<BundleSpec>, Vec<FixtureDocument>) {
    const PNG: &[u8] = b"\x89PNG\r\n\x1a\n";
    const PDF: &[u8] = b"%PDF-1.4\n";
    let mut docs = Vec::new();
    let mut bundles = Vec::new();
    let result = |rng: &mut StdRng, code: &str, sex: char| {
        let a = CARDIO.iter().find(|a| a.code == code).expect("cardio analysis");
        ResultSpec { analysis: code.into(), value: (draw(rng, a, sex) * 10.0).round() / 10.0, unit: a.unit.into() }
    };
    // first eight athletes get an echocardiography, the first one an ECG too
    for (i, p) in people.iter().take(8).enumerate() {
        let file = format!("echo-{}.png", p.key.to_lowercase());
        docs.push(FixtureDocument { file: file.clone(), bytes: document(rng, PNG, 2048 + 64 * i) });
        let mut documents = vec![DocumentSpec { file, media_type: "image/png".into(), caption: Some(format!("{} apical four-chamber view", p.key)) }];
        if i == 0 || i == 1 {
            // both share the protocol sheet
            documents.push(DocumentSpec { file: "echo-protocol.pdf".into(), media_type: "application/pdf".into(), caption: Some("screening protocol".into()) });
        }
        bundles.push(BundleSpec {
            patient: p.key.clone(),
            provider: "CARDIO".into(),
            timestamp: format!("2023-01-{:02} 14:00", 16 + i),
            session: None,
            analysis: "ECHO".into(),
            conclusion: if i == 5 { "mild septal hypertrophy, athlete's heart pattern".into() } else { "normal study".into() },
            results: ["LVEF", "LVEDD", "IVS"].iter().map(|c| result(rng, c, p.sex)).collect(),
            documents,
            report_fact: crate::schema::CV_REPORT.into(),
            result_fact: crate::schema::CV_RESULT.into(),
        });
        if i == 0 {
            let file = format!("ecg-{}.pdf", p.key.to_lowercase());
            docs.push(FixtureDocument { file: file.clone(), bytes: document(rng, PDF, 1024) });
            bundles.push(BundleSpec {
                patient: p.key.clone(),
                provider: "CARDIO".into(),
                timestamp: format!("2023-01-{:02} 15:00", 16 + i),
                session: None,
                analysis: "ECG".into(),
                conclusion: "sinus bradycardia".into(),
                results: vec![result(rng, "QTC", p.sex)],
                documents: vec![DocumentSpec { file, media_type: "application/pdf".into(), caption: None }],
                report_fact: crate::schema::CV_REPORT.into(),
                result_fact: crate::schema::CV_RESULT.into(),
            });
        }
    }
    docs.push(FixtureDocument { file: "echo-protocol.pdf".into(), bytes: document(rng, PDF, 4096) });
    (bundles, docs)
}

impl Fixture {
    pub fn generate(seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let people = athletes(&mut rng);
        let sources = vec![
            SourceFile { name: "biometry.csv".into(), profile: "biometry".into(), text: biometry_file(&mut rng, &people) },
            SourceFile { name: "lab_a.csv".into(), profile: "lab_a".into(), text: lab_file(&mut rng, &people, 0) },
            SourceFile { name: "lab_b.csv".into(), profile: "lab_b".into(), text: lab_file(&mut rng, &people, 1) },
        ];
        let mut metadata = String::from("# analysis catalog, label and unit correspondences, reference intervals\n");
        for e in metadata_entries() {
            let _ = writeln!(metadata, "{}", serde_json::to_string(&e).expect("entries serialize"));
        }
        let (bundles, documents) = cardio(&mut rng, &people);
        Fixture {
            athletes: people,
            schema: SCHEMA.into(),
            metadata,
            profiles: vec![
                ("lab_a".into(), PROFILE_LAB_A.into()),
                ("lab_b".into(), PROFILE_LAB_B.into()),
                ("biometry".into(), PROFILE_BIOMETRY.into()),
            ],
            sources,
            bundles,
            documents,
        }
    }

    pub fn source(&self, name: &str) -> Option<&SourceFile> {
        self.sources.iter().find(|s| s.name == name)
    }

    pub fn schema_file(&self) -> SchemaFile {
        SchemaFile::parse(&self.schema).expect("fixture schema is valid")
    }

    /// Layout: `schema.toml`, `metadata.jsonl`, `profiles/<name>.toml`,
    /// `sources/<file>.csv`, `cardio/bundles.json` and the documents next to it.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        for sub in ["profiles", "sources", "cardio"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        fs::write(dir.join("schema.toml"), &self.schema)?;
        fs::write(dir.join("metadata.jsonl"), &self.metadata)?;
        for (name, text) in &self.profiles {
            fs::write(dir.join("profiles").join(format!("{name}.toml")), text)?;
        }
        for s in &self.sources {
            fs::write(dir.join("sources").join(&s.name), &s.text)?;
        }
        fs::write(dir.join("cardio").join("bundles.json"), serde_json::to_string_pretty(&self.bundles).expect("bundles serialize"))?;
        for d in &self.documents {
            fs::write(dir.join("cardio").join(&d.file), &d.bytes)?;
        }
        Ok(())
    }

    /// Registers metadata and profiles (the schema must already be applied).
    pub fn register(&self, wh: &mut Warehouse) -> Result<(), FixtureError> {
        wh.batch(|wh| {
            for e in MetadataRegistry::parse_lines(&self.metadata)? {
                wh.register_metadata(e)?;
            }
            for (_, text) in &self.profiles {
                wh.register_profile(EtlProfile::parse(text)?)?;
            }
            Ok(())
        })
    }

    /// Runs the named sources through the pipeline.
    pub fn load_sources(&self, wh: &mut Warehouse, names: &[&str]) -> Result<Vec<LoadReport>, FixtureError> {
        let mut reports = Vec::new();
        for name in names {
            let s = self.source(name).ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, name.to_string()))?;
            reports.push(run_pipeline_text(wh, &s.name, &s.text, &s.profile, &format!("fixture-{}", s.name))?);
        }
        Ok(reports)
    }

    pub fn load_bundles(&self, wh: &mut Warehouse) -> Result<(), FixtureError> {
        let mut read = |file: &str| {
            self.documents
                .iter()
                .find(|d| d.file == file)
                .map(|d| d.bytes.clone())
                .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, file.to_string()))
        };
        wh.batch(|wh| {
            for b in &self.bundles {
                load_bundle(wh, b, "fixture-cardio", &mut read)?;
            }
            Ok(())
        })
    }

    /// Registers everything and loads every source and bundle.
    pub fn populate(&self, wh: &mut Warehouse) -> Result<Vec<LoadReport>, FixtureError> {
        self.register(wh)?;
        let names: Vec<&str> = self.sources.iter().map(|s| s.name.as_str()).collect();
        let reports = self.load_sources(wh, &names)?;
        self.load_bundles(wh)?;
        Ok(reports)
    }

    /// A fully loaded in-memory warehouse.
    pub fn warehouse(&self) -> Result<(Warehouse, Vec<LoadReport>), FixtureError> {
        let mut wh = Warehouse::in_memory();
        wh.apply_schema(&self.schema_file())?;
        let reports = self.populate(&mut wh)?;
        Ok((wh, reports))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = Fixture::generate(7);
        let b = Fixture::generate(7);
        assert_eq!(a.sources, b.sources);
        assert_eq!(a.documents, b.documents);
        assert_ne!(Fixture::generate(8).sources, a.sources);
    }

    #[test]
    fn corpus_has_the_advertised_shape() {
        let f = Fixture::generate(DEFAULT_SEED);
        assert_eq!(f.athletes.len(), 50);
        assert_eq!(f.documents.len(), 10);
        let (wh, reports) = f.warehouse().unwrap();
        for r in &reports {
            assert!(r.is_balanced(), "{r:?}");
            assert!(r.doubles_removed > 0);
            assert!(r.failure.is_none());
        }
        assert!(reports[2].errors.len() >= 4);
        assert!((4500..7000).contains(&wh.fact_count()), "{}", wh.fact_count());
        // the protocol sheet is shared by two reports
        assert_eq!(wh.links().count(), 11);
        assert_eq!(wh.blob_count().unwrap(), 10);
        assert_eq!(wh.audit().violation_count(), 0);
    }
}
