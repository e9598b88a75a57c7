//! Synthetic corpus: generation, augmentation, on-disk format and splits.

pub mod augment;
pub mod dataset;
pub mod netpbm;
pub mod split;
pub mod synth;

pub use augment::{augment, random_box_subset, AugmentConfig};
pub use dataset::{read_dataset, write_dataset};
pub use split::{make_split, SplitConfig};
pub use synth::{generate_corpus, generate_sample, DatasetConfig, Instance, SynthSample};
