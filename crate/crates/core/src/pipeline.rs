//! End-to-end orchestration helpers shared by the CLI and the acceptance
//! suite: worker-pool setup, the data + base + probes pipeline for one seed,
//! and report naming.

use std::sync::Once;

use crate::config::RunConfig;
use crate::data::{generate_scenes, LabeledScene, Split};
use crate::error::Result;
use crate::model::{build_model, PyramidModel};
use crate::train::{train_probes, train_segmentation, TrainLog};

/// Cap rayon's global pool from `MOOSE_NUM_WORKERS` (once per process; later
/// calls are no-ops).
pub fn init_workers() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        if let Ok(v) = std::env::var("MOOSE_NUM_WORKERS") {
            if let Ok(n) = v.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

/// In-memory splits for one run.
pub struct SplitData {
    pub train: Vec<LabeledScene>,
    pub val: Vec<LabeledScene>,
    pub test: Vec<LabeledScene>,
}

pub fn generate_splits(cfg: &RunConfig) -> Result<SplitData> {
    Ok(SplitData {
        train: generate_scenes(&cfg.data, Split::Train, cfg.data.train_scenes)?,
        val: generate_scenes(&cfg.data, Split::Val, cfg.data.val_scenes)?,
        test: generate_scenes(&cfg.data, Split::Test, cfg.data.test_scenes)?,
    })
}

/// A fully trained multi-head model for one seed: base segmentation training
/// followed by probe training under the stop-gradient contract.
pub struct TrainedModel {
    pub model: PyramidModel,
    pub base_log: TrainLog,
    pub probe_log: TrainLog,
}

pub fn train_moose(cfg: &RunConfig, data: &SplitData, seed: u64) -> Result<TrainedModel> {
    let mut model = build_model(&cfg.model, &cfg.probe, seed)?;
    let base_cfg = crate::train::TrainConfig {
        seed: cfg.train_base.seed ^ seed,
        ..cfg.train_base.clone()
    };
    let probe_cfg = crate::train::TrainConfig {
        seed: cfg.train_probe.seed ^ seed,
        ..cfg.train_probe.clone()
    };
    let base_log = train_segmentation(&mut model, &data.train, &data.val, &base_cfg)?;
    let probe_log = train_probes(&mut model, &data.train, &data.val, &probe_cfg)?;
    Ok(TrainedModel {
        model,
        base_log,
        probe_log,
    })
}

/// Short id used in reports and file names.
pub fn model_id(prefix: &str, seed: u64) -> String {
    format!("{prefix}-seed{seed}")
}
