//! Ranking metrics over multi-label scores and clean-vs-attacked reports.

mod ranking;
mod report;

pub use ranking::{average_precision, d_prime, normal_quantile, roc_auc};
pub(crate) use report::csv_field;
pub use report::{
    compare_reports, evaluate, score_clips, Aggregate, ClassMetrics, Comparison, ComparisonRow, EvalReport,
    ReportMeta, ScoreMatrix, TopK, COMPARISON_HEADER,
};
