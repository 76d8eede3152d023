//! Embedded biomedical data warehouse: conformed dimensions shared by
//! pluggable datamarts, a file-backed fact store, a metadata-driven ETL
//! pipeline for heterogeneous lab files, and patient-oriented analytics.

pub mod analytics;
pub mod bundle;
pub mod dimension;
pub mod etl;
pub mod fixture;
pub mod metadata;
pub mod schema;
pub mod store;

pub use dimension::{Bus, DimensionMember, SurrogateKey, TimePoint};
pub use store::{OpenMode, StoreError, Warehouse};
