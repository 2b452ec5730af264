//! File formats, training plans, the experiment grid, reports and the probe
//! service built on `domainsim-core`.

pub mod checkpoint;
pub mod experiment;
pub mod files;
pub mod plan;
pub mod probe;
pub mod report;
pub mod server;
