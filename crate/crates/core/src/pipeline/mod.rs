//! End-to-end glue: toy backbone, classifier, sliding-window inference,
//! synthetic clips, multi-stage training, mIoU and cost estimates.

mod cost;
mod data;
mod metrics;
mod model;
mod pgm;
#[cfg(test)]
mod tests;
mod train;

pub use cost::{
    dense_cost, estimate_cost, icsa_cost, partition_sweep, AttentionCost, CostConfig, CostReport,
};
pub use data::{
    generate_synthetic, label_at, Clip, Dataset, SegMap, ShapeKind, ShapeTrack, SyntheticConfig,
};
pub use metrics::{miou, miou_many, Confusion, MiouReport};
pub use model::{
    clip_features, infer_features, sliding_window_infer, sliding_window_infer_variant,
    window_indices, Classifier, ModelConfig, Segmenter, ToyBackbone, Variant,
};
pub use pgm::{encode_pgm, write_pgm};
pub use train::{
    build_bank, fused_frames, init_params, rebuild_bank, run_ablation, train_multistage,
    train_refinement, write_metrics_log, AblationResult, FrameSet, MetricRecord, TrainConfig,
    TrainOutcome, Trainer, MEMORY_CLASSIFIER_PREFIX,
};
