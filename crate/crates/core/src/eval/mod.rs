//! Metrics, corpus splitting and the experiment grid: cross-domain matrices,
//! learning curves, website scaling, channel ablations and defense sweeps.

mod corpus;
mod experiments;
mod metrics;
mod results;

pub use corpus::{class_count, env_ids, filter_split, site_labels, split_traces, stratified_subset, window_split, TraceSplit};
pub use experiments::{
    ablation_run, cross_domain_run, defense_curve_run, learning_curve_run, run_cell, website_scaling_run, CellResult,
    CrossDomainMatrix, CurveMode, CurvePoint, DefensePoint, ExperimentConfig, LearningCurve, ScalingPoint,
};
pub use metrics::{compute_metrics, evaluate, EvalReport};
pub use results::{
    append_results, config_hash, curve_columns, parse_results, read_results, render_matrix, render_results,
    render_table, ResultRecord,
};
