//! Protocol partitioning, the method comparison, error rates, the CSF
//! baseline and synthetic datasets.

mod compare;
pub mod csf;
mod manifest;
mod partition;
mod rates;
pub mod synth;

pub use compare::{
    run_comparison, run_loaded, ComparisonOptions, EvalReport, LoadedPartition, Method,
    MethodResult, ReportRow, REPORT_HEADER,
};
pub use manifest::{DatasetManifest, ManifestRecord, Role, MANIFEST_HEADER};
pub use partition::{partition, partition_requiring, ProtocolConfig, ProtocolPartition, RoleIndex};
pub use rates::{compute_rates, Rates, TrialKind};
pub use synth::{synth_generate, RoleCounts, SynthDataset, SynthParams};
