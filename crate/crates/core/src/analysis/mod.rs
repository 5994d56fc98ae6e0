//! Verification studies and sample-quality metrics.

mod budget;
mod fd_study;
mod instability;
mod prop1;
mod two_sample;

pub use budget::{budget, BudgetSpec};
pub use fd_study::{fd_order_study, FdProbes, FdRow, FdStudy, DEFAULT_LADDER};
pub use instability::{instability_summary, read_metrics, InstabilityReport, StageSummary};
pub use prop1::{
    stratified_probes, verify_prop1, DecompositionReport, LambdaSummary, LambdaTerms, Probe,
    ProbeRecord, VerifySettings,
};
pub use two_sample::{
    energy_distance, gauss_w2, median_bandwidth, mmd_rbf, two_sample_metrics, TwoSampleMetrics,
    COVARIANCE_RIDGE,
};
