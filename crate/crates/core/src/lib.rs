//! Calibration analysis and correction for classifier prediction logs.
//!
//! * [`record`]: prediction records, sets and the line-delimited log format.
//! * [`metrics`]: accuracy, confidence, ECE (equal-mass or equal-width bins),
//!   confidence on correct/wrong predictions, reliability diagrams, entropy.
//! * [`posthoc`]: temperature scaling, label-smoothing targets, ensembles.
//! * [`caltask`]: calibration-task datasets and prompt rendering.
//! * [`calibrator`]: MLP correctness predictors and multi-task training.
//! * [`dynamics`]: metric trajectories and fit-state classification.
//! * [`synth`]: seeded synthetic fixtures and a toy classifier.

pub mod calibrator;
pub mod caltask;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod posthoc;
pub mod record;
pub mod report;
pub mod rng;
pub mod synth;

pub use calibrator::{
    apply_calibrator, init_mlp, train_calibrator, train_main_only, train_multitask, MlpCalibrator,
    MultiTaskModel, TrainConfig, TrainMode,
};
pub use caltask::{
    build_calibration_dataset, export_calibration_dataset, load_calibration_dataset, render_prompt,
    CalibrationDataset, CalibrationExample,
};
pub use dataset::{LabeledDataset, LabeledPoint};
pub use dynamics::{classify_states, compute_trajectory, FitState, StateReport, StateThresholds, TrajectoryPoint};
pub use error::{Error, Result};
pub use metrics::{compute_metrics, ece, entropy, reliability_diagram, Binning, MetricsReport, ReliabilityBin};
pub use nn::Activation;
pub use posthoc::{apply_temperature, ensemble_average, fit_temperature, smooth_targets, TemperatureFit};
pub use record::{
    load_prediction_set, record_confidence, record_correct, save_prediction_set, LabelSpace, PredictionRecord,
    PredictionSet, Split,
};
pub use rng::Rng;
