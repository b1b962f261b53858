//! Optimization, evaluation metrics, model accounting and map rendering.

mod metrics;
mod optim;
mod render;
mod trainer;

pub use metrics::{compute_metrics, pct, MetricsReport};
pub use optim::{poly_lr, Adam, TrainConfig};
pub use render::{labels_from_ppm, parse_ppm, render_ppm};
pub use trainer::{
    argmax_map, make_samples, predict_scene, samples_accuracy, train, train_on_dataset, EpochLog, Sample, TrainOutcome,
};

use crate::error::Result;
use crate::model::Model;

/// Parameter count and forward multiply-accumulates for an `h×w` input.
///
/// FLOPs are reported as MACs (one fused multiply-add counts once).
pub fn count_params_flops(model: &Model, h: usize, w: usize) -> Result<(usize, u64)> {
    Ok((model.params.numel(), model.forward_macs(h, w)?))
}
