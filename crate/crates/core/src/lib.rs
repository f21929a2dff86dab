//! Ontology-aware pipeline stages for coded clinical data.
//!
//! Each module implements one stage: ingestion checks ([`checkpoint`],
//! [`version_gate`]), storage ([`dual_ontology`], [`dormancy`]), training
//! ([`circuit_breaker`]), monitoring ([`sentinel`]) and compliance
//! ([`compliance`]). [`harness`] wires them into a quarterly scenario run and
//! [`oracle`] holds independent reference computations used by the tests.

pub mod bundled;
pub mod checkpoint;
pub mod circuit_breaker;
pub mod compliance;
pub mod dormancy;
pub mod dual_ontology;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod sentinel;
pub mod synthgen;
pub mod version_gate;

pub use model::{
    load_code_system, load_config, AgeBand, CodeDef, CodeSystem, CodedRecord, FidelityAnnotation, InfluenceTag, Layer,
    PipelineConfig, Sex, Stratum, TerminologyVersion, Window,
};
