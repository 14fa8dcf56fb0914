//! Experiment runners and metric tables: toy loss pathology, the switching
//! benchmark, label-noise disentanglement and precision-versus-filtering.

mod label_noise;
mod metrics;
mod pipeline;
mod precision;
mod switching;
mod toy_loss;

pub use label_noise::{run_label_noise_experiment, GroupStats, LabelNoiseConfig, LabelNoiseResult};
pub use metrics::{
    config_hash, mean, median, spearman, std_dev, AccuracyMatrix, CellValue, MetricsTable,
    TableMetadata,
};
pub use pipeline::{
    build_benchmark_data, calibrate_stage, client_eval_sets, personalize_stage, train_stage,
    BenchmarkConfig, BenchmarkData, ClientEvalSets,
};
pub use precision::{
    evaluate_precision_curve, run_precision_filter_experiment, PrecisionFilterConfig,
    PrecisionFilterResult,
};
pub use switching::{
    evaluate_switching, run_switching_benchmark, SplitAccuracies, SwitchingResult,
};
pub use toy_loss::{run_toy_loss_experiment, ToyLossConfig, ToyLossResult, TOY_LOSSES};
