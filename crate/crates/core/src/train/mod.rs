//! Ground-truth pre-training, external-texture fine-tuning, checkpoints and
//! metrics.

mod adam;
pub mod checkpoint;
mod config;
mod trainer;

pub use adam::Adam;
pub use checkpoint::{checkpoint_id, Checkpoint, CheckpointMeta};
pub use config::{AdamConfig, ExtractorConfig, LearningRates, Mixing, Stage, TextureColor, TrainConfig};
pub use trainer::{
    build_extractor, checkpoint_path, finetune_step, is_ground_truth_iteration, l_tensor, local_disc_step,
    pair_accuracy, pretrain_step, random_crop, read_metrics, run, run_with_data, sample_batch, texture_family,
    texture_input, texture_window, Datasets, IterationKind, Models, RunOptions, StepMetrics, TrainState,
    METRICS_FILE,
};
