//! Built-in bus schema and the declarative schema file loader.
//!
//! The file format is TOML; see `docs/schema-format.md`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dimension::{
    AttributeDef, Bus, DatamartDef, DimensionDef, FactDef, FactRole, LevelDef, MeasureKind, RecordLayout, SchemaError,
    ValueKind, BUS_DIMENSIONS, CANONICAL_UNIT_ATTR, MEDICAL_ANALYSIS, PATIENT, PROVIDER, TIME,
};

pub const BIOLOGICAL: &str = "biological";
pub const BIOMETRICAL: &str = "biometrical";
pub const CARDIO_VASCULAR: &str = "cardio_vascular";

pub const BIOLOGICAL_RESULT: &str = "biological_result";
pub const BIOMETRICAL_MEASURE: &str = "biometrical_measure";
pub const CV_REPORT: &str = "cv_report";
pub const CV_RESULT: &str = "cv_result";

fn text(name: &str) -> AttributeDef {
    AttributeDef::new(name, ValueKind::Text)
}

/// The four conformed bus dimensions.
pub fn bus_dimensions() -> Vec<DimensionDef> {
    vec![
        DimensionDef::new(
            PATIENT,
            vec![LevelDef::new(
                "patient",
                vec![text("sex"), AttributeDef::new("birth_date", ValueKind::Date), text("display_name")],
            )],
            true,
        ),
        DimensionDef::new(PROVIDER, vec![LevelDef::new("provider", vec![text("name"), text("kind")])], true),
        DimensionDef::new(
            TIME,
            vec![
                LevelDef::new("instant", vec![text("timestamp"), text("session_tag")]),
                LevelDef::new("day", vec![]),
                LevelDef::new("month", vec![]),
                LevelDef::new("year", vec![]),
            ],
            true,
        ),
        DimensionDef::new(
            MEDICAL_ANALYSIS,
            vec![
                LevelDef::new("analysis", vec![text("label"), text(CANONICAL_UNIT_ATTR)]),
                LevelDef::new("examination", vec![text("label")]),
                LevelDef::new("category", vec![text("label")]),
            ],
            true,
        ),
    ]
}

fn shared() -> Vec<String> {
    BUS_DIMENSIONS.iter().map(|d| d.to_string()).collect()
}

/// Biological, biometrical and cardio-vascular datamarts.
pub fn default_datamarts() -> Vec<DatamartDef> {
    vec![
        DatamartDef {
            name: BIOLOGICAL.into(),
            fact_defs: vec![FactDef::on_bus(BIOLOGICAL_RESULT, MeasureKind::Numeric)],
            local_dimensions: vec![],
            shared_dimensions: shared(),
            record_layout: RecordLayout::Hierarchical,
        },
        DatamartDef {
            name: BIOMETRICAL.into(),
            fact_defs: vec![FactDef::on_bus(BIOMETRICAL_MEASURE, MeasureKind::Numeric)],
            local_dimensions: vec![],
            shared_dimensions: shared(),
            record_layout: RecordLayout::Flat,
        },
        DatamartDef {
            name: CARDIO_VASCULAR.into(),
            fact_defs: vec![
                FactDef::on_bus(CV_REPORT, MeasureKind::Text).with_role(FactRole::Report),
                FactDef::on_bus(CV_RESULT, MeasureKind::Numeric).with_role(FactRole::Result { report: CV_REPORT.into() }),
            ],
            local_dimensions: vec![],
            shared_dimensions: shared(),
            record_layout: RecordLayout::Flat,
        },
    ]
}

/// A bus with the built-in dimensions and datamarts.
pub fn default_bus() -> Bus {
    let mut bus = Bus::empty();
    for dim in bus_dimensions() {
        bus.define_dimension(dim).expect("built-in dimensions are valid");
    }
    for mart in default_datamarts() {
        bus.register_datamart(mart).expect("built-in datamarts are valid");
    }
    bus
}

#[derive(Debug, Error)]
pub enum SchemaFileError {
    #[error("schema file is not valid TOML: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// Extra attributes for a level of an already defined dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelExtension {
    pub dimension: String,
    pub level: String,
    pub attributes: Vec<AttributeDef>,
}

/// Contents of a schema file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaFile {
    #[serde(default)]
    pub extend: Vec<LevelExtension>,
    #[serde(default)]
    pub dimension: Vec<DimensionDef>,
    #[serde(default)]
    pub datamart: Vec<DatamartDef>,
}

impl SchemaFile {
    pub fn parse(text: &str) -> Result<Self, SchemaFileError> {
        Ok(toml::from_str(text)?)
    }

    /// Applies extensions, then dimensions, then datamarts.
    pub fn apply(&self, bus: &mut Bus) -> Result<(), SchemaError> {
        for ext in &self.extend {
            bus.extend_level(&ext.dimension, &ext.level, ext.attributes.clone())?;
        }
        for dim in &self.dimension {
            bus.define_dimension(dim.clone())?;
        }
        for mart in &self.datamart {
            bus.register_datamart(mart.clone())?;
        }
        Ok(())
    }
}
