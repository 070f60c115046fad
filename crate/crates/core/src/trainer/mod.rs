//! Training and evaluation harness: deep-equilibrium training with deep
//! supervision and unrolled gradients, the BPTT and stacked-layer
//! baselines, AdamW, and detection AP.

mod config;
mod metrics;
mod optim;
mod run;
mod step;

use thiserror::Error;

pub use config::{format_estimator, parse_estimator, supervision_positions, ConfigError, Mode, TrainConfig, KEYS};
pub use metrics::{
    average_precision, class_ap, coco_thresholds, interpolated_area, ApSummary, Detection, GroundTruth,
    MetricsRecord, CSV_HEADER, SCORE_THRESHOLD,
};
pub use optim::{accumulate, decays, grad_norm, scale_grads, AdamW, ParamGrads};
pub use run::{
    bench_grad, clip, detections, eval_spec, evaluate, ground_truth, infer, learning_rate, renderer, train_spec,
    write_csv, BenchRow, EvalResult, TrainSummary, Trainer,
};
pub use step::{batch_step, scene_step, scene_step_deq, scene_step_ffn, scene_step_rnn, BatchOutput, Sample, SceneOutput};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss is not finite at supervision position {position}")]
    NonFinite { position: usize },
    #[error("gradient norm is not finite")]
    NonFiniteGradient,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Decoder(#[from] crate::decoder::ConfigError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Grad(#[from] crate::grad::GradError),
    #[error(transparent)]
    Solve(#[from] crate::fixed_point::SolveError),
    #[error(transparent)]
    Data(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Checkpoint(#[from] crate::decoder::CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
