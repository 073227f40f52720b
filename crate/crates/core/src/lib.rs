//! Numerical core of the X-GPA spatial-temporal forecaster.
//!
//! Everything in this crate is allocation-only arithmetic: a small
//! reverse-mode tensor tape, a radix-2 FFT with autocorrelation helpers,
//! the patch / autocorrelation / graph attention layers, the feature-map
//! grid model with attention-score explanations, and an Adam optimizer.
//! File formats, datasets, training loops and the CLI live in the `xgpa`
//! companion crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod error;
pub mod explain;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod spatial;
pub mod spectral;
pub mod tape;
pub mod temporal;
pub mod tensor;

pub use error::{Error, Result};
pub use explain::{CellExplanation, Explanation, Importance, InputCoefficient, TemporalScore};
pub use graph::TrafficGraph;
pub use model::{level_taps, FeatureMapGrid, ForwardOutput, XgpaConfig, XgpaModel};
pub use nn::{Activation, AttentionVariant};
pub use optim::Adam;
pub use params::{Binder, ParamId, ParamStore};
pub use spatial::{GraphAttentionLayer, SpatialScores};
pub use tape::{Tape, Var};
pub use temporal::{
    AutocorrAttentionLayer, DelayScores, PatchAttentionLayer, PatchScores, PyramidOutput,
};
pub use tensor::Tensor;
