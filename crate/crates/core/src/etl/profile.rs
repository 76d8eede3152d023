use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EtlError;

/// Source columns holding the six semantic fields, plus an optional session tag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileColumns {
    pub patient: String,
    pub analysis: String,
    pub value: String,
    pub unit: String,
    pub timestamp: String,
    pub provider: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
}

/// Mapping profile: how one family of source files maps onto a fact table.
/// Written as TOML, see `docs/etl-profile.md`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtlProfile {
    pub name: String,
    /// Target fact table.
    pub fact_def: String,
    pub columns: ProfileColumns,
    /// Patient attribute name → source column, used when a patient is created.
    #[serde(default)]
    pub patient_attributes: BTreeMap<String, String>,
    /// Provider attribute name → source column, or a constant written as `=value`.
    #[serde(default)]
    pub provider_attributes: BTreeMap<String, String>,
}

impl EtlProfile {
    pub fn parse(text: &str) -> Result<Self, EtlError> {
        let profile: EtlProfile = toml::from_str(text).map_err(|e| EtlError::BadProfile(e.to_string()))?;
        if profile.name.trim().is_empty() {
            return Err(EtlError::BadProfile("profile name must not be empty".into()));
        }
        Ok(profile)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profiles serialize")
    }

    /// Columns every source file must carry.
    pub fn required_columns(&self) -> impl Iterator<Item = &str> {
        let c = &self.columns;
        [&c.patient, &c.analysis, &c.value, &c.unit, &c.timestamp, &c.provider]
            .into_iter()
            .chain(c.session.as_ref())
            .chain(self.patient_attributes.values())
            .chain(self.provider_attributes.values().filter(|v| !v.starts_with('=')))
            .map(String::as_str)
    }
}
