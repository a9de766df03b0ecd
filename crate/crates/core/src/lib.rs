//! MOoSe: multi-head contextual probing for dense out-of-distribution
//! detection, at desk scale. A spatial-pyramid segmentation model exposes
//! per-branch context features to lightweight probe heads; disagreement
//! between the heads turns into per-pixel anomaly scores.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod evaluate;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod scoring;
pub mod train;

pub use error::{MooseError, Result};
pub use model::{
    build_base_only, build_model, build_model_single_dilation, LogitStack, ParamGroup,
    ProbeConfig, PyramidConfig, PyramidModel,
};
