//! ROC analysis, bootstrap intervals and the paired and correlation tests used
//! to compare models.

mod bootstrap;
mod hypothesis;
mod report;
mod roc;

pub use bootstrap::{bootstrap_auc_interval, nearest_rank, percentile_interval, BootstrapConfig};
pub use hypothesis::{
    midranks, paired_t_one_tailed, pearson, t_cdf, wilcoxon_signed_rank_one_tailed, Method, Tail,
    TestResult, WILCOXON_EXACT_MAX,
};
pub use report::{
    compare_reports, fold_mean_auc, read_json, write_json, Comparison, MetricsReport, PairedTest, Summary, TargetDelta,
    TargetMetrics, TargetScores, TestOutcome,
};
pub use roc::{roc_auc, roc_curve, trapezoid_area};
