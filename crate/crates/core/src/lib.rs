//! Engine for semi-automated experimentation: genetic ideation over a paper
//! corpus and codeblock library, planning, a metered generate-execute-reflect
//! experiment builder, reporting, and cross-run meta-analysis.

pub mod builder;
pub mod corpus;
pub mod ideation;
pub mod gateway;
pub mod ids;
pub mod meta;
pub mod orchestrator;
pub mod money;
pub mod planning;
pub mod prompts;
pub mod protocol;
pub mod reporting;
pub mod sandbox;
pub mod store;

pub use money::Micros;

pub(crate) mod serde_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}
