//! Comparison baselines: deep ensembles (independent models on bootstrap
//! subsets) and multi-head ensembles (shared frozen trunk, independently
//! trained prediction heads). Both produce a [`LogitStack`] of member
//! slices so the scoring functions apply unchanged.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array3, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::checkpoint;
use crate::data::LabeledScene;
use crate::error::{MooseError, Result};
use crate::evaluate::StackForward;
use crate::model::{
    build_base_only, LogitStack, ParamGroup, ProbeConfig, PyramidConfig, PyramidModel, SegHead,
};
use crate::nn::ops::{unsqueeze_batch, upsample_bilinear};
use crate::scoring::{score, HeadSet, ScoringFn};
use crate::train::{
    cache_trunk_features, train_head_on_features, train_segmentation, TrainConfig, TrainLog,
};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EnsembleConfig {
    pub num_members: usize,
    /// Fraction of the training set each member sees (drawn without
    /// replacement, per member).
    pub bootstrap_fraction: f64,
    /// true = multi-head ensemble (shared encoder), false = deep ensemble.
    pub shared_encoder: bool,
    pub member_seeds: Vec<u64>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            num_members: 5,
            bootstrap_fraction: 0.67,
            shared_encoder: false,
            member_seeds: vec![1001, 1002, 1003, 1004, 1005],
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_members < 2 {
            return Err(MooseError::config("ensembles need >= 2 members"));
        }
        if !(0.0 < self.bootstrap_fraction && self.bootstrap_fraction <= 1.0) {
            return Err(MooseError::config("bootstrap_fraction must be in (0, 1]"));
        }
        if self.member_seeds.len() != self.num_members {
            return Err(MooseError::config(format!(
                "need {} member seeds, got {}",
                self.num_members,
                self.member_seeds.len()
            )));
        }
        Ok(())
    }
}

/// Seeded bootstrap subset: `floor(fraction * n)` indices drawn without
/// replacement.
pub fn bootstrap_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let take = ((n as f64) * fraction).floor() as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xb007_57a9);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx.truncate(take.max(1));
    idx
}

pub enum EnsembleModel {
    Deep(Vec<PyramidModel>),
    MultiHead {
        trunk: Box<PyramidModel>,
        heads: Vec<SegHead>,
    },
}

impl EnsembleModel {
    pub fn num_members(&self) -> usize {
        match self {
            EnsembleModel::Deep(members) => members.len(),
            EnsembleModel::MultiHead { heads, .. } => heads.len(),
        }
    }

    pub fn is_shared_encoder(&self) -> bool {
        matches!(self, EnsembleModel::MultiHead { .. })
    }

    /// Trainable parameters the ensemble actually uses: global-head path per
    /// member for deep ensembles, shared trunk plus member heads for
    /// multi-head ensembles.
    pub fn param_count(&self) -> usize {
        match self {
            EnsembleModel::Deep(members) => members
                .iter()
                .map(|m| m.param_count(ParamGroup::NonProbe))
                .sum(),
            EnsembleModel::MultiHead { trunk, heads } => {
                let trunk_only =
                    trunk.param_count(ParamGroup::NonProbe) - trunk.global_head.param_count();
                trunk_only + heads.iter().map(SegHead::param_count).sum::<usize>()
            }
        }
    }

    /// Member logits for one image, upsampled: `[members, N, H, W]`, no
    /// global slice.
    pub fn forward_members(&self, image: &Array3<f32>) -> Result<LogitStack> {
        let x = unsqueeze_batch(image);
        let mut slices = Vec::with_capacity(self.num_members());
        match self {
            EnsembleModel::Deep(members) => {
                for m in members {
                    let tf = m.trunk_infer(&x)?;
                    let z = m.global_head.infer(&m.global_head_input(&tf));
                    let factor = x.shape()[2] / z.shape()[2];
                    slices.push(upsample_bilinear(&z, factor).index_axis(Axis(0), 0).to_owned());
                }
            }
            EnsembleModel::MultiHead { trunk, heads } => {
                let tf = trunk.trunk_infer(&x)?;
                let input = trunk.global_head_input(&tf);
                for h in heads {
                    let z = h.infer(&input);
                    let factor = x.shape()[2] / z.shape()[2];
                    slices.push(upsample_bilinear(&z, factor).index_axis(Axis(0), 0).to_owned());
                }
            }
        }
        let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
        Ok(LogitStack::new(
            ndarray::stack(Axis(0), &views).expect("member stack"),
            false,
        ))
    }

    /// Single member's logits as a one-slice stack with a global head (each
    /// member is a plain segmentation model).
    pub fn member_stack(&self, index: usize, image: &Array3<f32>) -> Result<LogitStack> {
        let x = unsqueeze_batch(image);
        let z = match self {
            EnsembleModel::Deep(members) => {
                let m = &members[index];
                let tf = m.trunk_infer(&x)?;
                m.global_head.infer(&m.global_head_input(&tf))
            }
            EnsembleModel::MultiHead { trunk, heads } => {
                let tf = trunk.trunk_infer(&x)?;
                heads[index].infer(&trunk.global_head_input(&tf))
            }
        };
        let factor = x.shape()[2] / z.shape()[2];
        let up = upsample_bilinear(&z, factor);
        Ok(LogitStack::new(
            up.index_axis(Axis(0), 0).to_owned().insert_axis(Axis(0)),
            true,
        ))
    }
}

impl StackForward for EnsembleModel {
    fn stack(&self, image: &Array3<f32>) -> Result<LogitStack> {
        self.forward_members(image)
    }
}

/// Train a deep ensemble: independently initialized members, each on its own
/// bootstrap subset.
pub fn train_deep_ensemble(
    cfg: &EnsembleConfig,
    pcfg: &PyramidConfig,
    hcfg: &ProbeConfig,
    train: &[LabeledScene],
    val: &[LabeledScene],
    tcfg: &TrainConfig,
) -> Result<(EnsembleModel, Vec<TrainLog>)> {
    cfg.validate()?;
    let mut members = Vec::with_capacity(cfg.num_members);
    let mut logs = Vec::with_capacity(cfg.num_members);
    for (i, &seed) in cfg.member_seeds.iter().enumerate() {
        let subset_idx = bootstrap_subset(train.len(), cfg.bootstrap_fraction, seed);
        let subset: Vec<LabeledScene> = subset_idx.iter().map(|&j| train[j].clone()).collect();
        let mut member = build_base_only(pcfg, hcfg, seed)?;
        let member_tcfg = TrainConfig {
            seed: tcfg.seed ^ seed,
            ..tcfg.clone()
        };
        let log = train_segmentation(&mut member, &subset, val, &member_tcfg)?;
        members.push(member);
        logs.push(log);
        let _ = i;
    }
    Ok((EnsembleModel::Deep(members), logs))
}

/// Train a multi-head ensemble: the trunk (encoder + pyramid + pooling) is
/// taken frozen from `base_model`; each head clones the global-head
/// architecture, starts from its own init, and trains on its own bootstrap
/// subset of cached trunk features.
pub fn train_multihead_ensemble(
    cfg: &EnsembleConfig,
    base_model: &PyramidModel,
    train: &[LabeledScene],
    tcfg: &TrainConfig,
) -> Result<(EnsembleModel, Vec<TrainLog>)> {
    cfg.validate()?;
    let trunk = base_model.clone();
    let trunk_digest = trunk.digest(ParamGroup::NonProbe);
    let cache = cache_trunk_features(&trunk, train)?;
    let factor = train[0].height() / cache.feat_h;

    let mut heads = Vec::with_capacity(cfg.num_members);
    let mut logs = Vec::with_capacity(cfg.num_members);
    for &seed in &cfg.member_seeds {
        let subset = bootstrap_subset(train.len(), cfg.bootstrap_fraction, seed);
        let mut head = SegHead::new(
            trunk.pcfg.global_head_input(),
            trunk.pcfg.encoder_channels,
            trunk.hcfg.depth,
            trunk.pcfg.num_classes,
            seed,
            "ens_head",
        );
        let member_tcfg = TrainConfig {
            seed: tcfg.seed ^ seed,
            ..tcfg.clone()
        };
        let log = train_head_on_features(
            &mut head,
            "ens_head",
            &cache,
            train,
            &subset,
            factor,
            &member_tcfg,
        )?;
        heads.push(head);
        logs.push(log);
    }
    debug_assert_eq!(trunk_digest, trunk.digest(ParamGroup::NonProbe));
    Ok((
        EnsembleModel::MultiHead {
            trunk: Box::new(trunk),
            heads,
        },
        logs,
    ))
}

/// Member with the median AUPR on the validation anomaly proxy; first index
/// wins on ties at the median value.
pub fn select_median_member(
    ensemble: &EnsembleModel,
    val_with_anomalies: &[LabeledScene],
    scoring_fn: ScoringFn,
) -> Result<usize> {
    let m = ensemble.num_members();
    if m == 0 {
        return Err(MooseError::usage("empty ensemble"));
    }
    let mut auprs = Vec::with_capacity(m);
    for i in 0..m {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for scene in val_with_anomalies {
            let stack = ensemble.member_stack(i, &scene.image)?;
            let map = score(&stack, scoring_fn, &HeadSet::AllHeads)?;
            scores.extend(map.values.iter());
            labels.extend(scene.anomaly.iter().map(|&a| a == 1));
        }
        auprs.push(crate::metrics::aupr(&scores, &labels)?);
    }
    Ok(median_index(&auprs))
}

/// Index of the (lower) median value; smallest index among exact ties.
pub fn median_index(values: &[f64]) -> usize {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let median_value = values[order[(values.len() - 1) / 2]];
    values
        .iter()
        .position(|&v| v == median_value)
        .expect("median present")
}

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

/// What to measure: the plain single model (global head only), the full
/// multi-head model, or an ensemble.
pub enum CostTarget<'a> {
    Single(&'a PyramidModel),
    Moose(&'a PyramidModel),
    Ensemble(&'a EnsembleModel),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CostReport {
    pub label: String,
    pub parameter_count: usize,
    pub median_forward_ms: f64,
    pub runs: usize,
}

/// Exact parameter count plus median forward wall-time over `runs` timed
/// passes after warmup, on a fixed random input.
pub fn cost_report(target: &CostTarget, input_hw: (usize, usize), runs: usize) -> Result<CostReport> {
    let runs = runs.max(30);
    let mut rng = ChaCha12Rng::seed_from_u64(0xc057);
    let image = Array3::from_shape_simple_fn((3, input_hw.0, input_hw.1), || rng.random::<f32>());

    let (label, parameter_count): (String, usize) = match target {
        CostTarget::Single(m) => ("single".into(), m.param_count(ParamGroup::NonProbe)),
        CostTarget::Moose(m) => ("moose".into(), m.param_count(ParamGroup::All)),
        CostTarget::Ensemble(e) => (
            if e.is_shared_encoder() {
                "mh_ensemble".into()
            } else {
                "deep_ensemble".into()
            },
            e.param_count(),
        ),
    };

    let run_once = |img: &Array3<f32>| -> Result<()> {
        match target {
            CostTarget::Single(m) => {
                m.forward_global(img)?;
            }
            CostTarget::Moose(m) => {
                m.forward_all(img)?;
            }
            CostTarget::Ensemble(e) => {
                e.forward_members(img)?;
            }
        }
        Ok(())
    };

    for _ in 0..5 {
        run_once(&image)?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        run_once(&image)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_forward_ms = times[times.len() / 2];
    Ok(CostReport {
        label,
        parameter_count,
        median_forward_ms,
        runs,
    })
}

// ---------------------------------------------------------------------------
// Ensemble checkpoints: a container of member checkpoints plus a config block
// ---------------------------------------------------------------------------

const ENS_MAGIC: &str = "moose-ens-v1";

pub fn save_ensemble(ens: &EnsembleModel, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{ENS_MAGIC}")?;
    match ens {
        EnsembleModel::Deep(members) => {
            writeln!(f, "kind=deep members={}", members.len())?;
            for m in members {
                let mut blob = Vec::new();
                checkpoint::save_model_to(&mut blob, m)?;
                writeln!(f, "member {}", blob.len())?;
                f.write_all(&blob)?;
            }
        }
        EnsembleModel::MultiHead { trunk, heads } => {
            writeln!(f, "kind=multihead members={}", heads.len())?;
            let mut blob = Vec::new();
            checkpoint::save_model_to(&mut blob, trunk)?;
            writeln!(f, "trunk {}", blob.len())?;
            f.write_all(&blob)?;
            for (i, h) in heads.iter().enumerate() {
                let mut err = None;
                let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
                h.visit_tensors(&format!("head.{i}"), &mut |name, t| {
                    tensors.push((name, t.shape().to_vec(), t.iter().copied().collect()));
                });
                writeln!(f, "head {i}")?;
                for (name, shape, data) in tensors {
                    if let Err(e) =
                        checkpoint::write_tensor(&mut f, &name, &shape, data.into_iter())
                    {
                        err = Some(e);
                        break;
                    }
                }
                if let Some(e) = err {
                    return Err(e);
                }
                writeln!(f, "end")?;
            }
        }
    }
    Ok(())
}

pub fn load_ensemble(path: &Path) -> Result<EnsembleModel> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    f.read_line(&mut line)?;
    if line.trim() != ENS_MAGIC {
        return Err(MooseError::format(format!("expected {ENS_MAGIC}")));
    }
    line.clear();
    f.read_line(&mut line)?;
    let header = line.trim();
    let (kind, members) = parse_ens_header(header)?;
    match kind.as_str() {
        "deep" => {
            let mut out = Vec::with_capacity(members);
            for _ in 0..members {
                let blob = read_sized_block(&mut f, "member")?;
                let mut r = std::io::BufReader::new(blob.as_slice());
                out.push(checkpoint::load_model_from(&mut r)?);
            }
            Ok(EnsembleModel::Deep(out))
        }
        "multihead" => {
            let blob = read_sized_block(&mut f, "trunk")?;
            let mut r = std::io::BufReader::new(blob.as_slice());
            let trunk = checkpoint::load_model_from(&mut r)?;
            let mut heads = Vec::with_capacity(members);
            for i in 0..members {
                line.clear();
                f.read_line(&mut line)?;
                if line.trim() != format!("head {i}") {
                    return Err(MooseError::format(format!("expected head {i}")));
                }
                let mut head = SegHead::new(
                    trunk.pcfg.global_head_input(),
                    trunk.pcfg.encoder_channels,
                    trunk.hcfg.depth,
                    trunk.pcfg.num_classes,
                    0,
                    "ens_head",
                );
                for e in checkpoint::read_tensors(&mut f)? {
                    let suffix = e
                        .name
                        .strip_prefix(&format!("head.{i}."))
                        .ok_or_else(|| MooseError::format(format!("bad head tensor {}", e.name)))?;
                    if !head.set_tensor(suffix, &e.data) {
                        return Err(MooseError::format(format!("cannot assign {}", e.name)));
                    }
                }
                heads.push(head);
            }
            Ok(EnsembleModel::MultiHead {
                trunk: Box::new(trunk),
                heads,
            })
        }
        other => Err(MooseError::format(format!("unknown ensemble kind '{other}'"))),
    }
}

fn parse_ens_header(header: &str) -> Result<(String, usize)> {
    let mut kind = None;
    let mut members = None;
    for part in header.split_whitespace() {
        if let Some(v) = part.strip_prefix("kind=") {
            kind = Some(v.to_string());
        } else if let Some(v) = part.strip_prefix("members=") {
            members = v.parse::<usize>().ok();
        }
    }
    match (kind, members) {
        (Some(k), Some(m)) => Ok((k, m)),
        _ => Err(MooseError::format("bad ensemble header")),
    }
}

fn read_sized_block(f: &mut impl BufRead, tag: &str) -> Result<Vec<u8>> {
    let mut line = String::new();
    f.read_line(&mut line)?;
    let n: usize = line
        .trim()
        .strip_prefix(tag)
        .map(str::trim)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| MooseError::format(format!("expected sized {tag} block")))?;
    let mut buf = vec![0u8; n];
    std::io::Read::read_exact(f, &mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scenes, SceneConfig, Split};
    use crate::model::build_model;

    fn tiny_cfgs() -> (PyramidConfig, ProbeConfig, SceneConfig) {
        (
            PyramidConfig {
                num_classes: 8,
                encoder_channels: 16,
                branch_dilations: vec![1, 2],
                branch_channels: 8,
                include_global_pool_branch: true,
                output_stride: 8,
            },
            ProbeConfig {
                depth: 1,
                projection_channels: 8,
            },
            SceneConfig {
                image_size: 64,
                ..SceneConfig::default()
            },
        )
    }

    fn quick_tcfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            learning_rate: 0.05,
            batch_size: 4,
            seed: 1,
            early_stop_on_miou_plateau: false,
            ..TrainConfig::default()
        }
    }

    fn tiny_ens_cfg(shared: bool) -> EnsembleConfig {
        EnsembleConfig {
            num_members: 2,
            bootstrap_fraction: 0.67,
            shared_encoder: shared,
            member_seeds: vec![31, 47],
        }
    }

    #[test]
    fn bootstrap_sizes_and_distinct_subsets() {
        let a = bootstrap_subset(100, 0.67, 1);
        assert_eq!(a.len(), 67);
        let b = bootstrap_subset(100, 0.67, 2);
        assert_ne!(a, b);
        // no replacement
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), a.len());
    }

    #[test]
    fn median_selection_rules() {
        assert_eq!(median_index(&[0.1, 0.2, 0.3, 0.4, 0.5]), 2);
        assert_eq!(median_index(&[0.5, 0.2, 0.3, 0.1, 0.4]), 2); // value .3 at index 2
        assert_eq!(median_index(&[0.7]), 0);
        assert_eq!(median_index(&[0.3, 0.3, 0.3]), 0); // tie -> smallest index
        assert_eq!(median_index(&[0.4, 0.1, 0.4, 0.4]), 0); // lower median .4, first at 0
    }

    #[test]
    fn deep_ensemble_members_differ_and_mean_is_permutation_invariant() {
        let (pcfg, hcfg, scfg) = tiny_cfgs();
        let train = generate_scenes(&scfg, Split::Train, 8).unwrap();
        let val = generate_scenes(&scfg, Split::Val, 2).unwrap();
        let (ens, logs) = train_deep_ensemble(
            &tiny_ens_cfg(false),
            &pcfg,
            &hcfg,
            &train,
            &val,
            &quick_tcfg(),
        )
        .unwrap();
        assert_eq!(logs.len(), 2);

        let img = &train[0].image;
        let stack = ens.forward_members(img).unwrap();
        assert!(!stack.has_global);
        assert_eq!(stack.num_heads(), 2);
        let a = stack.data.index_axis(Axis(0), 0);
        let b = stack.data.index_axis(Axis(0), 1);
        let max_diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 0.0, "members must differ");

        // permuting members leaves the mean-based scores unchanged
        let swapped = LogitStack::new(
            ndarray::stack(Axis(0), &[b.view(), a.view()]).unwrap(),
            false,
        );
        for f in ScoringFn::all() {
            let s1 = score(&stack, f, &HeadSet::AllHeads).unwrap();
            let s2 = score(&swapped, f, &HeadSet::AllHeads).unwrap();
            let d = s1
                .values
                .iter()
                .zip(s2.values.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(d < 1e-12, "{f:?} changed under member permutation");
        }
    }

    #[test]
    fn multihead_ensemble_keeps_trunk_frozen_and_heads_differ() {
        let (pcfg, hcfg, scfg) = tiny_cfgs();
        let train = generate_scenes(&scfg, Split::Train, 8).unwrap();
        let base = build_model(&pcfg, &hcfg, 5).unwrap();
        let base_digest = base.digest(ParamGroup::NonProbe);
        let cfg = tiny_ens_cfg(true);
        let (ens, _) = train_multihead_ensemble(&cfg, &base, &train, &quick_tcfg()).unwrap();
        match &ens {
            EnsembleModel::MultiHead { trunk, heads } => {
                assert_eq!(trunk.digest(ParamGroup::NonProbe), base_digest);
                assert_eq!(heads.len(), 2);
            }
            _ => panic!("expected multi-head ensemble"),
        }
        let img = &train[0].image;
        let stack = ens.forward_members(img).unwrap();
        let a = stack.data.index_axis(Axis(0), 0);
        let b = stack.data.index_axis(Axis(0), 1);
        assert!(a.iter().zip(b.iter()).any(|(x, y)| x != y));
        // per-head subsets differ
        let s1 = bootstrap_subset(train.len(), cfg.bootstrap_fraction, cfg.member_seeds[0]);
        let s2 = bootstrap_subset(train.len(), cfg.bootstrap_fraction, cfg.member_seeds[1]);
        assert_ne!(s1, s2);
    }

    #[test]
    fn cost_report_counts_and_ratios() {
        let (pcfg, hcfg, _) = tiny_cfgs();
        let single = build_base_only(&pcfg, &hcfg, 1).unwrap();
        let members: Vec<PyramidModel> = (0..5)
            .map(|i| build_base_only(&pcfg, &hcfg, i).unwrap())
            .collect();
        let deep = EnsembleModel::Deep(members);
        let single_params = single.param_count(ParamGroup::NonProbe);
        assert_eq!(deep.param_count(), 5 * single_params);

        let moose = build_model(&pcfg, &hcfg, 1).unwrap();
        let r_single = cost_report(&CostTarget::Single(&single), (64, 64), 30).unwrap();
        let r_deep = cost_report(&CostTarget::Ensemble(&deep), (64, 64), 30).unwrap();
        assert!(r_deep.median_forward_ms > r_single.median_forward_ms);
        assert_eq!(
            moose.param_count(ParamGroup::All) - single_params,
            moose.probes.iter().map(SegHead::param_count).sum::<usize>()
        );
    }

    #[test]
    fn probe_heads_are_lighter_than_full_decoder_heads() {
        // default desk-scale configs: MOoSe adds K probe heads, the
        // multi-head ensemble adds num_members global-head clones
        let pcfg = PyramidConfig::default();
        let hcfg = ProbeConfig::default();
        let moose = build_model(&pcfg, &hcfg, 1).unwrap();
        let base = build_model(&pcfg, &hcfg, 2).unwrap();
        let heads = (0..5)
            .map(|i| {
                SegHead::new(
                    pcfg.global_head_input(),
                    pcfg.encoder_channels,
                    hcfg.depth,
                    pcfg.num_classes,
                    i,
                    "ens_head",
                )
            })
            .collect();
        let mh = EnsembleModel::MultiHead {
            trunk: Box::new(base),
            heads,
        };
        assert!(
            moose.param_count(ParamGroup::All) < mh.param_count(),
            "probe heads must be lighter: moose {} vs mh-ens {}",
            moose.param_count(ParamGroup::All),
            mh.param_count()
        );
    }

    #[test]
    fn ensemble_checkpoints_roundtrip() {
        let (pcfg, hcfg, scfg) = tiny_cfgs();
        let train = generate_scenes(&scfg, Split::Train, 6).unwrap();
        let val = generate_scenes(&scfg, Split::Val, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let (deep, _) = train_deep_ensemble(
            &tiny_ens_cfg(false),
            &pcfg,
            &hcfg,
            &train,
            &val,
            &quick_tcfg(),
        )
        .unwrap();
        let p = dir.path().join("deep.ens");
        save_ensemble(&deep, &p).unwrap();
        let loaded = load_ensemble(&p).unwrap();
        let img = &train[0].image;
        assert_eq!(
            deep.forward_members(img).unwrap().data,
            loaded.forward_members(img).unwrap().data
        );

        let base = build_model(&pcfg, &hcfg, 5).unwrap();
        let (mh, _) =
            train_multihead_ensemble(&tiny_ens_cfg(true), &base, &train, &quick_tcfg()).unwrap();
        let p2 = dir.path().join("mh.ens");
        save_ensemble(&mh, &p2).unwrap();
        let loaded2 = load_ensemble(&p2).unwrap();
        assert_eq!(
            mh.forward_members(img).unwrap().data,
            loaded2.forward_members(img).unwrap().data
        );
    }

    #[test]
    fn median_member_on_identical_values_picks_first() {
        let (pcfg, hcfg, scfg) = tiny_cfgs();
        let test = generate_scenes(&scfg, Split::Test, 2).unwrap();
        // two untrained members with the same seed produce identical AUPRs
        let m = build_base_only(&pcfg, &hcfg, 9).unwrap();
        let ens = EnsembleModel::Deep(vec![m.clone(), m]);
        let idx = select_median_member(&ens, &test, ScoringFn::Entropy).unwrap();
        assert_eq!(idx, 0);
    }
}
