//! Training orchestration, evaluation, checkpoints and overlays.

pub mod checkpoint;
pub mod eval;
pub mod render;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Stage};
pub use eval::{eval_map_r, eval_miou, MapResult, MiouReport};
pub use train::{train_detector, train_instance, train_semantic, TrainConfig, TrainReport};
