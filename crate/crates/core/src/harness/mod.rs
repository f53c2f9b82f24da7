//! Experiment driver: configuration, pipeline wiring, result tables and reports.

mod config;
mod report;
mod run;
mod table;

pub use crate::svr::rmse;
pub use config::{
    AggregatorConfig, BaselineConfig, DataConfig, ExperimentConfig, ExperimentSection, Scale, SvrSection,
};
pub use report::{
    emit_report, plot_csvs, summary_csv, PLOT_FILES, PLOT_HEADER, REFERENCE_BASELINE_RMSE, REFERENCE_BEST_CELL_RMSE,
    REFERENCE_FINAL_RMSE, RESULTS_FILE, SUMMARY_FILE, SUMMARY_HEADER,
};
pub use run::{
    audit_split_isolation, evaluate, run_experiment, ExperimentData, Progress, CONFIG_FILE, TRAINING_GROUPS_FILE,
};
pub use table::{
    CellKey, CellSummary, Metric, Pipeline, ResultRow, ResultTable, MODEL_FACE, MODEL_VOTE, RESULTS_HEADER,
};
