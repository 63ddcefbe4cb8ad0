//! The experiment pipeline: template training with variational DropPath,
//! posterior sampling of strategies, training-free evaluation, the
//! standalone-training oracle and layer-preference reports.

mod evaluate;
mod oracle;
mod report;
mod train;

pub use evaluate::{
    accuracy, enumerate_all_strategies, evaluate_strategy, evaluate_strategy_recalibrated, predict_classes,
    rank_correlation, recalibrate_bn, sample_strategies, select_best, StrategyEvaluation, MAX_ENUMERATED,
};
pub use oracle::{compare_with_oracle, run_indexed, OracleComparison, OracleRow};
pub use report::{
    layer_preference_report, write_evaluations_csv, LayerPreference, PreferenceReport, EVALUATION_HEADER,
    PREFERENCE_HEADER,
};
pub use train::{train_standalone, train_template, EpochRecord, History, Phase, StandaloneRun, TrainSchedule};
