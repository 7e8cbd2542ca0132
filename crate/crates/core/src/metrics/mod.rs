//! Classification metrics, significance tests and evaluation reports.

mod confusion;
mod curves;
mod report;
mod stats;

pub use confusion::ConfusionCounts;
pub use curves::{auprc, auroc, average_ranks};
pub use report::{score_metrics, EvalReport, MethodSummary, Metrics, SeedRow, Significance, IMBALANCE_CAVEAT};
pub use stats::{anova_oneway, studentized_range_critical, tukey_hsd, AnovaResult, PairComparison};
