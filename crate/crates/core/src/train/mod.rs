mod adam;
mod augment;
mod dataset;
mod policy;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{augment_tile, flip_horizontal, flip_vertical, rotate_quarter, shift_brightness, AugmentConfig};
pub use dataset::{find_slide, load_tile_dataset, TileDataset};
pub use policy::{
    count_correct, fine_tune, pretrain_streams, pretrain_streams_observed, run_policy, train_baseline, train_head,
    CheckpointWriter, EpochRecord, PolicyObserver, StageId, StageReport, TrainConfig, TrainingData,
    FINETUNE_LR_DIVISOR,
};
