//! Desk-scale text-conditioned flow-matching generator.

pub mod backprop;
pub mod checkpoint;
pub mod data;
pub mod model;
pub mod sample;
pub mod train;

pub use data::{make_dataset, oracle_classify, Classification, Color, Prompt, Shape, ToyImage};
pub use model::{ModelConfig, ToyModel};
pub use sample::{euler_sample, RunRecord, Scores};
pub use train::{train, TrainConfig, TrainReport};
