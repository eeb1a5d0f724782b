//! Interactive harmonization of tabular data onto a target data standard.
//!
//! The building blocks are small and deterministic: [`table`] loads CSV,
//! [`vocab`] loads the target schema, [`matchers`] propose column and value
//! matches, [`mapspec`] compiles them into a declarative mapping spec that
//! [`materialize`] applies. The [`agent`] drives these through a tool
//! registry with a reviewer in the loop, and [`provenance`] records every
//! step so sessions can be replayed and traced.

pub mod agent;
pub mod eval;
pub mod mapspec;
pub mod matchers;
pub mod materialize;
pub mod provenance;
pub mod table;
pub mod vocab;

pub use mapspec::{MappingEntry, MappingSpec, OnMissing};
pub use matchers::{ColumnMatch, MatchMethod, ValueMatch, ValueMatchTable};
pub use table::{Cell, Table};
pub use vocab::{Domain, TargetAttribute, TargetSchema};
