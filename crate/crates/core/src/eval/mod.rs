//! Frozen-feature evaluation: kNN, probe heads and low-shot logistic regression.

pub mod features;
pub mod knn;
pub mod logreg;
pub mod low_shot;
pub mod probe;
pub mod report;

pub use features::{eval_view, extract_features, FeatureTable, ReprChoice};
pub use knn::{
    accuracy, knn_eval, knn_predict, KnnWeighting, DEFAULT_KNN_K, DEFAULT_KNN_TEMPERATURE,
};
pub use logreg::{fit_logreg, LogReg};
pub use low_shot::{
    default_lambda_grid, lambda_grid, low_shot_eval, normalize_pair, sample_split, LowShotResult,
    LowShotSpec,
};
pub use probe::{linear_probe, probe_sweep, ProbeCell, ProbeConfig, ProbeHead, ProbeSweep};
pub use report::{
    evaluate_bundle, EvalConfig, EvalReport, KnnCell, LowShotCell, Protocol, DEFAULT_CROP_FRACTION,
};
