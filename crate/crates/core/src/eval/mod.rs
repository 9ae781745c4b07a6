//! Forecast evaluation: baselines, example- and distribution-level metrics,
//! and the bucketed best-of-K report.

pub mod baselines;
pub mod frechet;
pub mod fvmd;
pub mod metrics;
pub mod report;

pub use report::{evaluate, report_csv, EvalConfig, EvalExample, MetricReport, MetricRow};
