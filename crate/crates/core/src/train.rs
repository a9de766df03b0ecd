//! Probe and base-model training. Probes train on frozen trunk features
//! under the stop-gradient contract: no gradient reaches the encoder,
//! pyramid branches, pooling branch, or global head, and the trunk's
//! normalization statistics never update (the trunk only ever runs in eval
//! mode here). Loss math accumulates in f64.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{LabeledScene, IGNORE_INDEX};
use crate::error::{MooseError, Result};
use crate::metrics::MiouAccumulator;
use crate::model::{LogitStack, ParamGroup, PyramidModel, SegHead, TrunkFeatures};
use crate::nn::ops::{
    broadcast_spatial, concat_channels, unsqueeze_batch, upsample_bilinear,
    upsample_bilinear_backward,
};
use crate::nn::{Feat, Sgd};

/// Momentum for the probe/base SGD optimizer.
pub const SGD_MOMENTUM: f32 = 0.9;
/// Plateau rule: stop when the best val mIoU has not improved by at least
/// this much for [`PLATEAU_PATIENCE`] epochs.
pub const PLATEAU_MIN_DELTA: f64 = 0.002;
pub const PLATEAU_PATIENCE: usize = 10;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Label value excluded from the loss; must lie outside `[0, N)`.
    pub ignore_index: u8,
    pub seed: u64,
    pub early_stop_on_miou_plateau: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            learning_rate: 0.01,
            batch_size: 8,
            ignore_index: IGNORE_INDEX,
            seed: 1,
            early_stop_on_miou_plateau: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.epochs < 1 {
            return Err(MooseError::config("epochs must be >= 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(MooseError::config("learning_rate must be positive"));
        }
        if self.batch_size < 1 {
            return Err(MooseError::config("batch_size must be >= 1"));
        }
        if (self.ignore_index as usize) < num_classes {
            return Err(MooseError::config(format!(
                "ignore_index {} collides with class range [0, {num_classes})",
                self.ignore_index
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub miou_per_head: Vec<f64>,
}

/// Line-oriented training log: `epoch=<i> loss=<f> miou_head_<k>=<f>`.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub early_stopped: bool,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!("epoch={} loss={:.6}", r.epoch, r.loss));
            for (k, m) in r.miou_per_head.iter().enumerate() {
                s.push_str(&format!(" miou_head_{k}={m:.4}"));
            }
            s.push('\n');
        }
        if self.early_stopped {
            s.push_str("early_stop=plateau\n");
        }
        s
    }

    fn plateaued(&self, head_means: &[f64]) -> bool {
        if head_means.len() <= PLATEAU_PATIENCE {
            return false;
        }
        let cut = head_means.len() - PLATEAU_PATIENCE;
        let best_before = head_means[..cut].iter().cloned().fold(f64::MIN, f64::max);
        let best_after = head_means[cut..].iter().cloned().fold(f64::MIN, f64::max);
        best_after - best_before < PLATEAU_MIN_DELTA
    }
}

// ---------------------------------------------------------------------------
// Loss kernels (f64)
// ---------------------------------------------------------------------------

/// Per-pixel softmax cross-entropy (natural log) for the selected head
/// slices, each averaged over non-ignored pixels, summed over heads.
/// Returns `(loss, all_ignored)`.
pub fn ce_loss_f64(
    logits: &Array4<f64>,
    labels: &Array2<u8>,
    ignore_index: u8,
    heads: &[usize],
) -> (f64, bool) {
    let (_, n, h, w) = dims(logits);
    let valid = labels.iter().filter(|&&l| l != ignore_index).count();
    if valid == 0 {
        return (0.0, true);
    }
    let mut total = 0.0f64;
    for &hi in heads {
        let mut head_loss = 0.0f64;
        for iy in 0..h {
            for ix in 0..w {
                let y = labels[[iy, ix]];
                if y == ignore_index {
                    continue;
                }
                let mut maxv = f64::NEG_INFINITY;
                for c in 0..n {
                    maxv = maxv.max(logits[[hi, c, iy, ix]]);
                }
                let mut lse = 0.0f64;
                for c in 0..n {
                    lse += (logits[[hi, c, iy, ix]] - maxv).exp();
                }
                let lse = lse.ln() + maxv;
                head_loss += lse - logits[[hi, y as usize, iy, ix]];
            }
        }
        total += head_loss / valid as f64;
    }
    (total, false)
}

/// Analytic gradient of [`ce_loss_f64`] with respect to the logits.
/// Slices outside `heads` get zero gradient.
pub fn ce_loss_grad_f64(
    logits: &Array4<f64>,
    labels: &Array2<u8>,
    ignore_index: u8,
    heads: &[usize],
) -> Array4<f64> {
    let (m, n, h, w) = dims(logits);
    let valid = labels.iter().filter(|&&l| l != ignore_index).count();
    let mut grad = Array4::<f64>::zeros((m, n, h, w));
    if valid == 0 {
        return grad;
    }
    let inv = 1.0 / valid as f64;
    for &hi in heads {
        for iy in 0..h {
            for ix in 0..w {
                let y = labels[[iy, ix]];
                if y == ignore_index {
                    continue;
                }
                let mut maxv = f64::NEG_INFINITY;
                for c in 0..n {
                    maxv = maxv.max(logits[[hi, c, iy, ix]]);
                }
                let mut denom = 0.0f64;
                for c in 0..n {
                    denom += (logits[[hi, c, iy, ix]] - maxv).exp();
                }
                for c in 0..n {
                    let p = (logits[[hi, c, iy, ix]] - maxv).exp() / denom;
                    let target = f64::from(c == y as usize);
                    grad[[hi, c, iy, ix]] = (p - target) * inv;
                }
            }
        }
    }
    grad
}

fn dims(x: &Array4<f64>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

/// Multi-head cross-entropy over the contextual heads (stack slices 1..K);
/// the global slice contributes zero, it is never retrained.
pub fn multi_head_ce_loss_f64(logits: &Array4<f64>, labels: &Array2<u8>, ignore_index: u8) -> f64 {
    let heads: Vec<usize> = (1..logits.shape()[0]).collect();
    ce_loss_f64(logits, labels, ignore_index, &heads).0
}

pub fn multi_head_ce_loss_grad_f64(
    logits: &Array4<f64>,
    labels: &Array2<u8>,
    ignore_index: u8,
) -> Array4<f64> {
    let heads: Vec<usize> = (1..logits.shape()[0]).collect();
    ce_loss_grad_f64(logits, labels, ignore_index, &heads)
}

/// Loss value plus the all-pixels-ignored warning flag.
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub value: f64,
    pub all_ignored: bool,
}

/// Spec-facing wrapper over the f64 kernel for an f32 [`LogitStack`].
pub fn multi_head_ce_loss(
    stack: &LogitStack,
    labels: &Array2<u8>,
    ignore_index: u8,
) -> Result<LossValue> {
    if stack.height() != labels.dim().0 || stack.width() != labels.dim().1 {
        return Err(MooseError::shape("stack/labels spatial dims differ"));
    }
    let logits = stack.data.mapv(f64::from);
    let heads: Vec<usize> = (1..stack.num_heads()).collect();
    let (value, all_ignored) = ce_loss_f64(&logits, labels, ignore_index, &heads);
    Ok(LossValue { value, all_ignored })
}

/// KL(uniform || p) per pixel, mean over masked pixels, summed over the
/// selected heads. Gradient w.r.t. logits is `p - 1/N` at masked pixels.
pub fn uniform_kl_f64(
    logits: &Array4<f64>,
    mask: &Array2<u8>,
    heads: &[usize],
) -> (f64, Array4<f64>) {
    let (m, n, h, w) = dims(logits);
    let mut grad = Array4::<f64>::zeros((m, n, h, w));
    let count = mask.iter().filter(|&&v| v == 1).count();
    if count == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / count as f64;
    let uniform = 1.0 / n as f64;
    let ln_n = (n as f64).ln();
    let mut total = 0.0f64;
    for &hi in heads {
        let mut head_kl = 0.0f64;
        for iy in 0..h {
            for ix in 0..w {
                if mask[[iy, ix]] != 1 {
                    continue;
                }
                let mut maxv = f64::NEG_INFINITY;
                for c in 0..n {
                    maxv = maxv.max(logits[[hi, c, iy, ix]]);
                }
                let mut denom = 0.0f64;
                for c in 0..n {
                    denom += (logits[[hi, c, iy, ix]] - maxv).exp();
                }
                let lse = denom.ln() + maxv;
                let mut mean_logp = 0.0f64;
                for c in 0..n {
                    let logp = logits[[hi, c, iy, ix]] - lse;
                    mean_logp += logp * uniform;
                    let p = logp.exp();
                    grad[[hi, c, iy, ix]] = (p - uniform) * inv;
                }
                head_kl += -ln_n - mean_logp;
            }
        }
        total += head_kl * inv;
    }
    (total, grad)
}

// ---------------------------------------------------------------------------
// Fused f32 batch kernels (f64 accumulation), parallel over samples
// ---------------------------------------------------------------------------

/// Per-sample softmax CE loss and gradient on `[N, H, W]` logits; the
/// gradient comes back pre-multiplied by `grad_scale`.
fn ce3_loss_grad(
    z: &ndarray::ArrayView3<f32>,
    labels: &Array2<u8>,
    ignore: u8,
    grad_scale: f64,
) -> (f64, ndarray::Array3<f32>) {
    let (n, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let mut grad = ndarray::Array3::<f32>::zeros((n, h, w));
    let valid = labels.iter().filter(|&&l| l != ignore).count();
    if valid == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / valid as f64;
    let mut loss = 0.0f64;
    let mut probs = vec![0.0f64; n];
    for iy in 0..h {
        for ix in 0..w {
            let y = labels[[iy, ix]];
            if y == ignore {
                continue;
            }
            let mut maxv = f32::NEG_INFINITY;
            for c in 0..n {
                maxv = maxv.max(z[[c, iy, ix]]);
            }
            let mut denom = 0.0f64;
            for c in 0..n {
                let e = ((z[[c, iy, ix]] - maxv) as f64).exp();
                probs[c] = e;
                denom += e;
            }
            loss += denom.ln() + maxv as f64 - z[[y as usize, iy, ix]] as f64;
            for c in 0..n {
                let p = probs[c] / denom;
                let target = f64::from(c == y as usize);
                grad[[c, iy, ix]] = ((p - target) * inv * grad_scale) as f32;
            }
        }
    }
    (loss * inv, grad)
}

/// Batch CE on upsampled logits `[B, N, H, W]`: mean per-sample loss and the
/// gradient scaled by `1 / batch`. Parallel over samples.
fn batch_ce_loss_grad(
    z_up: &Feat,
    labels: &[&Array2<u8>],
    ignore: u8,
) -> (f64, Feat) {
    use ndarray::parallel::prelude::*;
    let batch = labels.len();
    let scale = 1.0 / batch as f64;
    let mut gz = Array4::<f32>::zeros(z_up.raw_dim());
    let losses: Vec<f64> = gz
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(z_up.axis_iter(Axis(0)).into_par_iter())
        .zip(labels.par_iter())
        .map(|((mut g_s, z_s), lab)| {
            let (loss, g) = ce3_loss_grad(&z_s, lab, ignore, scale);
            g_s.assign(&g);
            loss
        })
        .collect();
    (losses.iter().sum::<f64>() * scale, gz)
}

// ---------------------------------------------------------------------------
// Batching helpers
// ---------------------------------------------------------------------------

fn stack_images(scenes: &[&LabeledScene]) -> Feat {
    let views: Vec<_> = scenes.iter().map(|s| s.image.view()).collect();
    ndarray::stack(Axis(0), &views).expect("image batch")
}

fn shuffled_indices(n: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// argmax over the class axis of `[N, H, W]` logits.
pub fn argmax_classes(logits: &ndarray::ArrayView3<f32>) -> Array2<u8> {
    let (n, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let mut out = Array2::<u8>::zeros((h, w));
    for iy in 0..h {
        for ix in 0..w {
            let mut best = (0usize, f32::NEG_INFINITY);
            for c in 0..n {
                let v = logits[[c, iy, ix]];
                if v > best.1 {
                    best = (c, v);
                }
            }
            out[[iy, ix]] = best.0 as u8;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Base-model training (encoder + branches + pool + global head)
// ---------------------------------------------------------------------------

/// Train the full base model (global head loss, every non-probe parameter
/// updated). Probes are left untouched at their initialization.
pub fn train_segmentation(
    model: &mut PyramidModel,
    train: &[LabeledScene],
    val: &[LabeledScene],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate(model.pcfg.num_classes)?;
    if train.is_empty() || val.is_empty() {
        return Err(MooseError::usage("train/val data must be nonempty"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.learning_rate as f32, SGD_MOMENTUM);
    let mut log = TrainLog::default();
    let mut miou_history = Vec::new();

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(train.len(), &mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let scenes: Vec<&LabeledScene> = chunk.iter().map(|&i| &train[i]).collect();
            let x = stack_images(&scenes);
            model.zero_grads(ParamGroup::NonProbe);
            let (z, cache) = model.base_fwd_train(&x);
            let factor = x.shape()[2] / z.shape()[2];
            let z_up = upsample_bilinear(&z, factor);

            let labels: Vec<&Array2<u8>> = scenes.iter().map(|s| &s.labels).collect();
            let (batch_loss, gz_up) = batch_ce_loss_grad(&z_up, &labels, cfg.ignore_index);
            if !batch_loss.is_finite() {
                return Err(MooseError::Diverged(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            let gz = upsample_bilinear_backward(&gz_up, z.shape()[2], z.shape()[3], factor);
            model.base_bwd(&cache, &gz);
            model.visit_params_mut(ParamGroup::NonProbe, &mut |name, p| {
                opt.step(&name, p);
            });
            epoch_loss += batch_loss;
            batches += 1;
        }
        epoch_loss /= batches as f64;

        let miou = eval_global_miou(model, val, cfg.ignore_index)?;
        miou_history.push(miou);
        log.records.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            miou_per_head: vec![miou],
        });
        if cfg.early_stop_on_miou_plateau && log.plateaued(&miou_history) {
            log.early_stopped = true;
            break;
        }
    }
    Ok(log)
}

fn eval_global_miou(model: &PyramidModel, val: &[LabeledScene], ignore: u8) -> Result<f64> {
    let mut acc = MiouAccumulator::new(model.pcfg.num_classes, ignore);
    for chunk in val.chunks(8) {
        let scenes: Vec<&LabeledScene> = chunk.iter().collect();
        let x = stack_images(&scenes);
        let heads = model.forward_heads_lowres(&x)?;
        let factor = x.shape()[2] / heads[0].shape()[2];
        let up = upsample_bilinear(&heads[0], factor);
        for (b, scene) in scenes.iter().enumerate() {
            let pred = argmax_classes(&up.index_axis(Axis(0), b));
            acc.update(&pred, &scene.labels);
        }
    }
    acc.value(None)
}

// ---------------------------------------------------------------------------
// Probe training on frozen trunk features
// ---------------------------------------------------------------------------

/// Frozen per-scene trunk activations: branch features and pooled vector.
pub struct FeatureCache {
    pub branch: Vec<Vec<Array4<f32>>>, // [scene][branch] as a batch of one
    pub pooled: Vec<Option<ndarray::Array2<f32>>>,
    pub feat_h: usize,
    pub feat_w: usize,
}

/// Run the frozen trunk once per scene (eval mode; normalization running
/// statistics are read, never written).
pub fn cache_trunk_features(model: &PyramidModel, scenes: &[LabeledScene]) -> Result<FeatureCache> {
    let mut branch: Vec<Vec<Array4<f32>>> = Vec::with_capacity(scenes.len());
    let mut pooled = Vec::with_capacity(scenes.len());
    let mut feat_hw = (0, 0);
    for chunk in scenes.chunks(8) {
        let refs: Vec<&LabeledScene> = chunk.iter().collect();
        let x = stack_images(&refs);
        let tf = model.trunk_infer(&x)?;
        feat_hw = (tf.feat_h, tf.feat_w);
        for b in 0..refs.len() {
            let per_branch: Vec<Array4<f32>> = tf
                .branch
                .iter()
                .map(|f| f.index_axis(Axis(0), b).to_owned().insert_axis(Axis(0)))
                .collect();
            branch.push(per_branch);
            pooled.push(
                tf.pooled
                    .as_ref()
                    .map(|p| p.index_axis(Axis(0), b).to_owned().insert_axis(Axis(0))),
            );
        }
    }
    Ok(FeatureCache {
        branch,
        pooled,
        feat_h: feat_hw.0,
        feat_w: feat_hw.1,
    })
}

impl FeatureCache {
    /// Assemble the input batch for probe `k` over the given scene indices.
    pub fn probe_batch(&self, k: usize, indices: &[usize]) -> Feat {
        let parts: Vec<Feat> = indices
            .iter()
            .map(|&i| match &self.pooled[i] {
                Some(p) => {
                    let bcast = broadcast_spatial(p, self.feat_h, self.feat_w);
                    concat_channels(&[&self.branch[i][k], &bcast])
                }
                None => self.branch[i][k].clone(),
            })
            .collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        crate::nn::ops::into_standard(ndarray::concatenate(Axis(0), &views).expect("probe batch"))
    }

    /// Assemble the concatenated global-head input over scene indices.
    pub fn global_batch(&self, indices: &[usize]) -> Feat {
        let parts: Vec<Feat> = indices
            .iter()
            .map(|&i| {
                let mut refs: Vec<&Feat> = self.branch[i].iter().collect();
                let bcast;
                if let Some(p) = &self.pooled[i] {
                    bcast = broadcast_spatial(p, self.feat_h, self.feat_w);
                    refs.push(&bcast);
                    concat_channels(&refs)
                } else {
                    concat_channels(&refs)
                }
            })
            .collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        crate::nn::ops::into_standard(ndarray::concatenate(Axis(0), &views).expect("global batch"))
    }
}

/// Train the probe heads on frozen context features. Only probe parameters
/// change; everything else is bit-identical before and after, including
/// normalization running statistics.
pub fn train_probes(
    model: &mut PyramidModel,
    train: &[LabeledScene],
    val: &[LabeledScene],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate(model.pcfg.num_classes)?;
    if train.is_empty() || val.is_empty() {
        return Err(MooseError::usage("train/val data must be nonempty"));
    }
    if !model.has_probes() {
        return Err(MooseError::usage("model has no probe heads"));
    }
    let upsample_to = train[0].height();
    let cache = cache_trunk_features(model, train)?;
    let val_cache = cache_trunk_features(model, val)?;
    let factor = upsample_to / cache.feat_h;

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.learning_rate as f32, SGD_MOMENTUM);
    let mut log = TrainLog::default();
    let mut mean_history = Vec::new();
    let num_probes = model.probes.len();

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(train.len(), &mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            model.zero_grads(ParamGroup::Probes);
            let mut batch_loss = 0.0f64;
            for k in 0..num_probes {
                let x = cache.probe_batch(k, chunk);
                let (z, head_cache) = model.probes[k].fwd_train(&x);
                let z_up = upsample_bilinear(&z, factor);
                let labels: Vec<&Array2<u8>> =
                    chunk.iter().map(|&i| &train[i].labels).collect();
                let (loss, gz_up) = batch_ce_loss_grad(&z_up, &labels, cfg.ignore_index);
                batch_loss += loss;
                let gz = upsample_bilinear_backward(&gz_up, z.shape()[2], z.shape()[3], factor);
                model.probes[k].bwd(&head_cache, &gz);
            }
            if !batch_loss.is_finite() {
                return Err(MooseError::Diverged(format!(
                    "non-finite probe loss at epoch {epoch}"
                )));
            }
            model.visit_params_mut(ParamGroup::Probes, &mut |name, p| {
                opt.step(&name, p);
            });
            epoch_loss += batch_loss;
            batches += 1;
        }
        epoch_loss /= batches as f64;

        let mious = eval_probe_mious(model, &val_cache, val, cfg.ignore_index, factor)?;
        let mean = mious.iter().sum::<f64>() / mious.len() as f64;
        mean_history.push(mean);
        log.records.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            miou_per_head: mious,
        });
        if cfg.early_stop_on_miou_plateau && log.plateaued(&mean_history) {
            log.early_stopped = true;
            break;
        }
    }
    Ok(log)
}

/// Per-probe validation mIoU from cached trunk features.
pub fn eval_probe_mious(
    model: &PyramidModel,
    cache: &FeatureCache,
    scenes: &[LabeledScene],
    ignore: u8,
    factor: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(model.probes.len());
    let indices: Vec<usize> = (0..scenes.len()).collect();
    for (k, probe) in model.probes.iter().enumerate() {
        let mut acc = MiouAccumulator::new(model.pcfg.num_classes, ignore);
        for chunk in indices.chunks(8) {
            let x = cache.probe_batch(k, chunk);
            let z = probe.infer(&x);
            let up = upsample_bilinear(&z, factor);
            for (b, &i) in chunk.iter().enumerate() {
                let pred = argmax_classes(&up.index_axis(Axis(0), b));
                acc.update(&pred, &scenes[i].labels);
            }
        }
        out.push(acc.value(None)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Outlier exposure
// ---------------------------------------------------------------------------

/// One optional outlier-exposure step on the probes: cross-entropy on the
/// inlier batch plus `weight` times the mean KL(uniform || p) over outlier
/// pixels, per probe head. Applies one SGD step and returns the loss.
/// An empty outlier mask reduces to plain cross-entropy.
pub fn outlier_exposure_step(
    model: &mut PyramidModel,
    opt: &mut Sgd,
    inlier_batch: &[&LabeledScene],
    outlier_batch: &[&LabeledScene],
    weight: f64,
    ignore_index: u8,
) -> Result<f64> {
    if inlier_batch.is_empty() {
        return Err(MooseError::usage("empty inlier batch"));
    }
    if !model.has_probes() {
        return Err(MooseError::usage("model has no probe heads"));
    }
    let upsample_to = inlier_batch[0].height();
    model.zero_grads(ParamGroup::Probes);
    let mut total = 0.0f64;

    // inlier CE term
    {
        let scenes: Vec<&LabeledScene> = inlier_batch.to_vec();
        let x = stack_images(&scenes);
        let tf = model.trunk_infer(&x)?;
        let factor = upsample_to / tf.feat_h;
        for k in 0..model.probes.len() {
            let input = model.probe_input(&tf, k);
            let (z, head_cache) = model.probes[k].fwd_train(&input);
            let z_up = upsample_bilinear(&z, factor);
            let labels: Vec<&Array2<u8>> = scenes.iter().map(|s| &s.labels).collect();
            let (loss, gz_up) = batch_ce_loss_grad(&z_up, &labels, ignore_index);
            total += loss;
            let gz = upsample_bilinear_backward(&gz_up, z.shape()[2], z.shape()[3], factor);
            model.probes[k].bwd(&head_cache, &gz);
        }
    }

    // exposure term on outlier pixels
    if weight != 0.0 && !outlier_batch.is_empty() {
        let scenes: Vec<&LabeledScene> = outlier_batch.to_vec();
        let x = stack_images(&scenes);
        let tf = model.trunk_infer(&x)?;
        let factor = upsample_to / tf.feat_h;
        for k in 0..model.probes.len() {
            let input = model.probe_input(&tf, k);
            let (z, head_cache) = model.probes[k].fwd_train(&input);
            let z_up = upsample_bilinear(&z, factor);
            let batch = scenes.len();
            let mut gz_up = Array4::<f32>::zeros(z_up.raw_dim());
            for (b, scene) in scenes.iter().enumerate() {
                let one = z_up
                    .index_axis(Axis(0), b)
                    .to_owned()
                    .insert_axis(Axis(0))
                    .mapv(f64::from);
                let (kl, g) = uniform_kl_f64(&one, &scene.anomaly, &[0]);
                total += weight * kl / batch as f64;
                let scale = weight / batch as f64;
                gz_up
                    .index_axis_mut(Axis(0), b)
                    .assign(&g.index_axis(Axis(0), 0).mapv(|v| (v * scale) as f32));
            }
            let gz = upsample_bilinear_backward(&gz_up, z.shape()[2], z.shape()[3], factor);
            model.probes[k].bwd(&head_cache, &gz);
        }
    }

    if !total.is_finite() {
        return Err(MooseError::Diverged("non-finite exposure loss".into()));
    }
    model.visit_params_mut(ParamGroup::Probes, &mut |name, p| {
        opt.step(&name, p);
    });
    Ok(total)
}

/// Post-hoc outlier-exposure fine-tuning of trained probes: every batch is
/// one [`outlier_exposure_step`] pairing inlier scenes with exposure scenes.
pub fn train_probes_with_exposure(
    model: &mut PyramidModel,
    train: &[LabeledScene],
    exposure: &[LabeledScene],
    cfg: &TrainConfig,
    weight: f64,
) -> Result<TrainLog> {
    cfg.validate(model.pcfg.num_classes)?;
    if train.is_empty() || exposure.is_empty() {
        return Err(MooseError::usage("need nonempty inlier and exposure data"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x0e0e);
    let mut opt = Sgd::new(cfg.learning_rate as f32, SGD_MOMENTUM);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(train.len(), &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let inliers: Vec<&LabeledScene> = chunk.iter().map(|&i| &train[i]).collect();
            let outliers: Vec<&LabeledScene> = chunk
                .iter()
                .map(|&i| &exposure[i % exposure.len()])
                .collect();
            epoch_loss += outlier_exposure_step(
                model,
                &mut opt,
                &inliers,
                &outliers,
                weight,
                cfg.ignore_index,
            )?;
            batches += 1;
        }
        log.records.push(EpochRecord {
            epoch,
            loss: epoch_loss / batches as f64,
            miou_per_head: vec![],
        });
    }
    Ok(log)
}

/// Multi-head ensemble heads train with the same machinery; exposed here so
/// the ensemble module can reuse it on cached global-head inputs.
pub fn train_head_on_features(
    head: &mut SegHead,
    head_name: &str,
    inputs: &FeatureCache,
    scenes: &[LabeledScene],
    subset: &[usize],
    factor: usize,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.learning_rate as f32, SGD_MOMENTUM);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = subset.to_vec();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = inputs.global_batch(chunk);
            head.visit_params_mut(head_name, &mut |_, p| p.zero_grad());
            let (z, head_cache) = head.fwd_train(&x);
            let z_up = upsample_bilinear(&z, factor);
            let labels: Vec<&Array2<u8>> = chunk.iter().map(|&i| &scenes[i].labels).collect();
            let (batch_loss, gz_up) = batch_ce_loss_grad(&z_up, &labels, cfg.ignore_index);
            if !batch_loss.is_finite() {
                return Err(MooseError::Diverged(format!(
                    "non-finite head loss at epoch {epoch}"
                )));
            }
            let gz = upsample_bilinear_backward(&gz_up, z.shape()[2], z.shape()[3], factor);
            head.bwd(&head_cache, &gz);
            head.visit_params_mut(head_name, &mut |name, p| opt.step(&name, p));
            epoch_loss += batch_loss;
            batches += 1;
        }
        log.records.push(EpochRecord {
            epoch,
            loss: epoch_loss / batches as f64,
            miou_per_head: vec![],
        });
    }
    Ok(log)
}

/// Convenience wrapper used by tests and bindings: one-image stack forward.
pub fn forward_scene(model: &PyramidModel, scene: &LabeledScene) -> Result<LogitStack> {
    model.forward_all(&scene.image)
}

/// The trunk features type re-exported for ensemble training.
pub fn trunk_features_for(model: &PyramidModel, scene: &LabeledScene) -> Result<TrunkFeatures> {
    model.trunk_infer(&unsqueeze_batch(&scene.image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scenes, SceneConfig, Split};
    use crate::model::{build_model, ProbeConfig, PyramidConfig};
    use ndarray::Array3;
    use rand::Rng;

    fn tiny_world() -> (PyramidConfig, ProbeConfig, SceneConfig) {
        (
            PyramidConfig {
                num_classes: 8,
                encoder_channels: 16,
                branch_dilations: vec![1, 2, 4],
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
                train_scenes: 12,
                val_scenes: 4,
                test_scenes: 4,
                ..SceneConfig::default()
            },
        )
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            learning_rate: 0.05,
            batch_size: 4,
            ignore_index: IGNORE_INDEX,
            seed: 3,
            early_stop_on_miou_plateau: false,
        }
    }

    #[test]
    fn one_hot_probe_outputs_drive_loss_to_zero() {
        // logits strongly favoring the correct class -> CE ~ 0
        let labels = Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 3) as u8);
        let mut logits = Array4::<f64>::zeros((3, 3, 4, 4)); // global + 2 heads
        for hi in 1..3 {
            for iy in 0..4 {
                for ix in 0..4 {
                    logits[[hi, labels[[iy, ix]] as usize, iy, ix]] = 50.0;
                }
            }
        }
        let loss = multi_head_ce_loss_f64(&logits, &labels, IGNORE_INDEX);
        assert!(loss < 1e-9, "loss={loss}");
    }

    #[test]
    fn uniform_predictions_lose_k_ln_n() {
        // K=3 contextual heads, uniform logits over N=5 -> loss = 3 ln 5
        let labels = Array2::from_elem((6, 6), 2u8);
        let logits = Array4::<f64>::zeros((4, 5, 6, 6));
        let loss = multi_head_ce_loss_f64(&logits, &labels, IGNORE_INDEX);
        assert!((loss - 3.0 * (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_do_not_change_mean_of_constant_map() {
        let logits = Array4::<f64>::zeros((3, 4, 4, 4));
        let mut labels = Array2::from_elem((4, 4), 1u8);
        let base = multi_head_ce_loss_f64(&logits, &labels, IGNORE_INDEX);
        // ignore half the pixels; per-pixel CE is constant so the mean holds
        for ix in 0..4 {
            labels[[0, ix]] = IGNORE_INDEX;
            labels[[1, ix]] = IGNORE_INDEX;
        }
        let masked = multi_head_ce_loss_f64(&logits, &labels, IGNORE_INDEX);
        assert!((base - masked).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_zero_with_warning() {
        let labels = Array2::from_elem((2, 2), IGNORE_INDEX);
        let stack = LogitStack::new(Array4::zeros((3, 4, 2, 2)), true);
        let lv = multi_head_ce_loss(&stack, &labels, IGNORE_INDEX).unwrap();
        assert_eq!(lv.value, 0.0);
        assert!(lv.all_ignored);
    }

    #[test]
    fn loss_is_permutation_invariant_over_pixels() {
        let mut rng = crate::nn::init::rng_for(5, "perm");
        let logits = Array4::from_shape_simple_fn((3, 4, 3, 4), || rng.random::<f64>() * 4.0 - 2.0);
        let labels = Array2::from_shape_fn((3, 4), |_| rng.random_range(0..4) as u8);
        let base = multi_head_ce_loss_f64(&logits, &labels, IGNORE_INDEX);

        // permute the 12 pixel positions consistently
        let positions: Vec<(usize, usize)> =
            (0..3).flat_map(|y| (0..4).map(move |x| (y, x))).collect();
        let mut perm = positions.clone();
        for i in (1..perm.len()).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let mut logits_p = logits.clone();
        let mut labels_p = labels.clone();
        for (src, dst) in positions.iter().zip(perm.iter()) {
            labels_p[*dst] = labels[*src];
            for hi in 0..3 {
                for c in 0..4 {
                    logits_p[[hi, c, dst.0, dst.1]] = logits[[hi, c, src.0, src.1]];
                }
            }
        }
        let permuted = multi_head_ce_loss_f64(&logits_p, &labels_p, IGNORE_INDEX);
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = crate::nn::init::rng_for(11, "gradcheck");
        for n in [2usize, 5] {
            let logits =
                Array4::from_shape_simple_fn((3, n, 4, 4), || rng.random::<f64>() * 4.0 - 2.0);
            let labels = Array2::from_shape_fn((4, 4), |_| rng.random_range(0..n) as u8);
            let grad = multi_head_ce_loss_grad_f64(&logits, &labels, IGNORE_INDEX);
            let h = 1e-5;
            for _ in 0..40 {
                let hi = rng.random_range(0..3);
                let c = rng.random_range(0..n);
                let iy = rng.random_range(0..4);
                let ix = rng.random_range(0..4);
                let mut lp = logits.clone();
                lp[[hi, c, iy, ix]] += h;
                let mut lm = logits.clone();
                lm[[hi, c, iy, ix]] -= h;
                let fd = (multi_head_ce_loss_f64(&lp, &labels, IGNORE_INDEX)
                    - multi_head_ce_loss_f64(&lm, &labels, IGNORE_INDEX))
                    / (2.0 * h);
                let an = grad[[hi, c, iy, ix]];
                let rel = (fd - an).abs() / (1e-8 + fd.abs().max(an.abs()));
                if hi == 0 {
                    assert_eq!(an, 0.0, "global slice must not receive gradient");
                    assert!(fd.abs() < 1e-9);
                } else {
                    assert!(rel < 1e-4, "rel err {rel} at ({hi},{c},{iy},{ix})");
                }
            }
        }
    }

    #[test]
    fn exposure_term_zero_for_uniform_and_weight_zero() {
        let labels = Array2::from_elem((4, 4), 1u8);
        let mask = Array2::from_elem((4, 4), 1u8);
        let logits = Array4::<f64>::zeros((2, 4, 4, 4)); // uniform distributions
        let (kl, grad) = uniform_kl_f64(&logits, &mask, &[0, 1]);
        assert!(kl.abs() < 1e-12);
        assert!(grad.iter().all(|&g| g.abs() < 1e-12));
        let empty_mask = Array2::zeros((4, 4));
        let (kl2, _) = uniform_kl_f64(&logits, &empty_mask, &[0, 1]);
        assert_eq!(kl2, 0.0);
        let _ = labels;
    }

    #[test]
    fn exposure_term_matches_per_pixel_oracle() {
        // near-one-hot outlier predictions over N=4: KL should match a
        // hand-rolled per-pixel sum
        let mut rng = crate::nn::init::rng_for(2, "kl");
        let n = 4;
        let logits = Array4::from_shape_simple_fn((1, n, 3, 3), || rng.random::<f64>() * 6.0 - 3.0);
        let mut mask = Array2::zeros((3, 3));
        mask[[0, 0]] = 1;
        mask[[1, 2]] = 1;
        mask[[2, 1]] = 1;
        let (kl, _) = uniform_kl_f64(&logits, &mask, &[0]);
        // oracle: brute-force softmax then sum (1/N) ln((1/N)/p_i)
        let mut oracle = 0.0f64;
        let mut count = 0;
        for iy in 0..3 {
            for ix in 0..3 {
                if mask[[iy, ix]] != 1 {
                    continue;
                }
                count += 1;
                let vals: Vec<f64> = (0..n).map(|c| logits[[0, c, iy, ix]]).collect();
                let z: f64 = vals.iter().map(|v| v.exp()).sum();
                for &v in &vals {
                    let p = v.exp() / z;
                    oracle += (1.0 / n as f64) * ((1.0 / n as f64) / p).ln();
                }
            }
        }
        oracle /= count as f64;
        assert!((kl - oracle).abs() < 1e-10, "kl={kl} oracle={oracle}");
    }

    #[test]
    fn probe_training_preserves_trunk_bitwise_and_helps_miou() {
        let (pcfg, hcfg, scfg) = tiny_world();
        let mut model = build_model(&pcfg, &hcfg, 17).unwrap();
        let train = generate_scenes(&scfg, Split::Train, scfg.train_scenes).unwrap();
        let val = generate_scenes(&scfg, Split::Val, scfg.val_scenes).unwrap();

        // brief base training so the trunk features carry signal
        train_segmentation(&mut model, &train, &val, &quick_cfg(3)).unwrap();

        let trunk_digest_before = model.digest(ParamGroup::NonProbe);
        let probe_digest_before = model.digest(ParamGroup::Probes);
        let fixed = &train[0].image;
        let global_before = model.forward_global(fixed).unwrap();

        let factor = scfg.image_size / 8; // output stride 8
        let val_cache = cache_trunk_features(&model, &val).unwrap();
        let untrained =
            eval_probe_mious(&model, &val_cache, &val, IGNORE_INDEX, factor).unwrap();

        let log = train_probes(&mut model, &train, &val, &quick_cfg(4)).unwrap();
        assert!(!log.records.is_empty());

        assert_eq!(trunk_digest_before, model.digest(ParamGroup::NonProbe));
        assert_ne!(probe_digest_before, model.digest(ParamGroup::Probes));
        let global_after = model.forward_global(fixed).unwrap();
        assert_eq!(global_before, global_after);

        let trained = eval_probe_mious(&model, &val_cache, &val, IGNORE_INDEX, factor).unwrap();
        let mean_untrained: f64 = untrained.iter().sum::<f64>() / untrained.len() as f64;
        let mean_trained: f64 = trained.iter().sum::<f64>() / trained.len() as f64;
        assert!(
            mean_trained > mean_untrained,
            "probe mIoU should improve: {mean_untrained} -> {mean_trained}"
        );

        let text = log.to_text();
        assert!(text.contains("epoch=0 loss="));
        assert!(text.contains("miou_head_0="));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (pcfg, hcfg, scfg) = tiny_world();
        let train = generate_scenes(&scfg, Split::Train, 8).unwrap();
        let val = generate_scenes(&scfg, Split::Val, 2).unwrap();
        let run = || {
            let mut m = build_model(&pcfg, &hcfg, 5).unwrap();
            train_segmentation(&mut m, &train, &val, &quick_cfg(2)).unwrap();
            train_probes(&mut m, &train, &val, &quick_cfg(2)).unwrap();
            m.digest(ParamGroup::All)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported() {
        let (pcfg, hcfg, scfg) = tiny_world();
        let mut model = build_model(&pcfg, &hcfg, 1).unwrap();
        // poison a probe weight so the forward pass produces NaN
        model.probes[0].pred.w.value.fill(f32::NAN);
        let train = generate_scenes(&scfg, Split::Train, 4).unwrap();
        let val = generate_scenes(&scfg, Split::Val, 2).unwrap();
        let err = train_probes(&mut model, &train, &val, &quick_cfg(1)).unwrap_err();
        assert!(matches!(err, MooseError::Diverged(_)));
    }

    #[test]
    fn outlier_exposure_weight_zero_equals_plain_ce() {
        let (pcfg, hcfg, scfg) = tiny_world();
        let mut m1 = build_model(&pcfg, &hcfg, 9).unwrap();
        let mut m2 = m1.clone();
        let train = generate_scenes(&scfg, Split::Train, 4).unwrap();
        let oe = generate_scenes(&scfg, Split::Oe, 2).unwrap();
        let inliers: Vec<&LabeledScene> = train.iter().take(2).collect();
        let outliers: Vec<&LabeledScene> = oe.iter().collect();

        let mut opt1 = Sgd::new(0.01, SGD_MOMENTUM);
        let mut opt2 = Sgd::new(0.01, SGD_MOMENTUM);
        let l1 =
            outlier_exposure_step(&mut m1, &mut opt1, &inliers, &outliers, 0.0, IGNORE_INDEX)
                .unwrap();
        let l2 = outlier_exposure_step(&mut m2, &mut opt2, &inliers, &[], 0.5, IGNORE_INDEX)
            .unwrap();
        assert!((l1 - l2).abs() < 1e-12, "weight 0 vs empty outliers: {l1} vs {l2}");
        assert_eq!(
            m1.digest(ParamGroup::Probes),
            m2.digest(ParamGroup::Probes)
        );
    }

    #[test]
    fn argmax_is_deterministic_on_ties() {
        let mut logits = Array3::<f32>::zeros((3, 2, 2));
        logits[[1, 0, 0]] = 0.0; // tie between classes; lowest index wins
        let pred = argmax_classes(&logits.view());
        assert_eq!(pred[[0, 0]], 0);
    }
}
