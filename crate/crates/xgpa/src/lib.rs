//! Datasets, training, evaluation, checkpoints and export around
//! [`xgpa_core`].

pub mod bench;
pub mod checkpoint;
pub mod csvio;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod run;
pub mod synth;
pub mod train;

pub use xgpa_core as core;

pub use checkpoint::Checkpoint;
pub use data::{Case, Normalizer, Split, SplitKind, TrafficDataset, Window, WindowSpec};
pub use error::{Result, XgpaError};
pub use eval::HorizonMAE;
pub use synth::{SyntheticSpec, Topology};
pub use train::{TrainHyper, TrainReport};
