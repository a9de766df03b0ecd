//! The toy spatial-pyramid segmentation model: a small strided-conv encoder,
//! K dilated-convolution branches plus an optional global-pooling branch, a
//! global segmentation head over the concatenated branch features, and one
//! lightweight probe head per branch reading that branch's features (plus the
//! pooled features when present).

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MooseError, Result};
use crate::nn::ops::{
    broadcast_spatial, broadcast_spatial_backward, concat_channels, global_avg_pool,
    global_avg_pool_backward, relu_backward_inplace, relu_inplace, split_channels,
    unsqueeze_batch, upsample_bilinear,
};
use crate::nn::{BatchNorm2d, BnCache, Conv2d, Feat, Param};

/// Architecture of the pyramid trunk.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PyramidConfig {
    pub num_classes: usize,
    pub encoder_channels: usize,
    pub branch_dilations: Vec<usize>,
    pub branch_channels: usize,
    pub include_global_pool_branch: bool,
    pub output_stride: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            num_classes: 8,
            encoder_channels: 64,
            branch_dilations: vec![1, 2, 4, 6],
            branch_channels: 32,
            include_global_pool_branch: true,
            output_stride: 8,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        self.validate_with(false)
    }

    fn validate_with(&self, allow_equal_dilations: bool) -> Result<()> {
        if self.num_classes < 2 {
            return Err(MooseError::config("num_classes must be >= 2"));
        }
        if self.branch_dilations.len() < 2 {
            return Err(MooseError::config("need at least 2 pyramid branches"));
        }
        for &d in &self.branch_dilations {
            if d < 1 {
                return Err(MooseError::config(format!("invalid dilation {d}")));
            }
        }
        if !allow_equal_dilations {
            for w in self.branch_dilations.windows(2) {
                if w[1] <= w[0] {
                    return Err(MooseError::config(format!(
                        "dilations must be strictly increasing, got {:?}",
                        self.branch_dilations
                    )));
                }
            }
        }
        if self.branch_channels == 0 {
            return Err(MooseError::config("branch_channels must be positive"));
        }
        if self.encoder_channels < 8 || self.encoder_channels % 4 != 0 {
            return Err(MooseError::config(
                "encoder_channels must be >= 8 and divisible by 4",
            ));
        }
        if !matches!(self.output_stride, 4 | 8 | 16) {
            return Err(MooseError::config("output_stride must be 4, 8 or 16"));
        }
        Ok(())
    }

    pub fn num_branches(&self) -> usize {
        self.branch_dilations.len()
    }

    /// Width of the concatenated features the global head consumes.
    pub fn global_head_input(&self) -> usize {
        let pool = usize::from(self.include_global_pool_branch);
        self.branch_channels * (self.num_branches() + pool)
    }

    /// Width of a probe's input: its branch features plus, when present, the
    /// shared global-pooling features.
    pub fn probe_input(&self) -> usize {
        let pool = usize::from(self.include_global_pool_branch);
        self.branch_channels * (1 + pool)
    }

    fn encoder_strides(&self) -> [usize; 4] {
        match self.output_stride {
            4 => [2, 2, 1, 1],
            8 => [2, 2, 2, 1],
            16 => [2, 2, 2, 2],
            _ => unreachable!("validated"),
        }
    }

    fn encoder_widths(&self) -> [usize; 4] {
        let e = self.encoder_channels;
        [e / 4, e / 2, e, e]
    }
}

/// Architecture of the probe heads.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeConfig {
    /// Number of prediction blocks between projection and classifier.
    pub depth: usize,
    pub projection_channels: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            depth: 1,
            projection_channels: 32,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(MooseError::config("probe depth must be >= 1"));
        }
        if self.projection_channels == 0 {
            return Err(MooseError::config("projection_channels must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// conv + batch norm + ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

pub struct BlockCache {
    x: Feat,
    bn: BnCache,
    y: Feat,
}

impl ConvBlock {
    fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        seed: u64,
        name: &str,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(cin, cout, kernel, stride, dilation, false, seed, name),
            bn: BatchNorm2d::new(cout),
        }
    }

    pub fn infer(&self, x: &Feat) -> Feat {
        let mut y = self.bn.forward_eval(&self.conv.forward(x));
        relu_inplace(&mut y);
        y
    }

    pub fn fwd_train(&mut self, x: &Feat, update_running: bool) -> (Feat, BlockCache) {
        let z = self.conv.forward(x);
        let (mut y, bn) = self.bn.forward_train(&z, update_running);
        relu_inplace(&mut y);
        let cache = BlockCache {
            x: x.clone(),
            bn,
            y: y.clone(),
        };
        (y, cache)
    }

    pub fn bwd(&mut self, cache: &BlockCache, gy: &Feat) -> Feat {
        let mut g = gy.clone();
        relu_backward_inplace(&mut g, &cache.y);
        let g = self.bn.backward(&cache.bn, &g);
        self.conv.backward(&cache.x, &g)
    }

    fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<f32>)) {
        self.conv.visit_tensors(&format!("{prefix}.conv"), f);
        self.bn.visit_tensors(&format!("{prefix}.bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv.visit_params_mut(&format!("{prefix}.conv"), f);
        self.bn.visit_params_mut(&format!("{prefix}.bn"), f);
    }

    fn set_tensor(&mut self, suffix: &str, data: &[f32]) -> bool {
        if let Some(rest) = suffix.strip_prefix("conv.") {
            match rest {
                "w" => self.conv.w.value.as_slice_mut().unwrap().copy_from_slice(data),
                "b" => match &mut self.conv.b {
                    Some(b) => b.value.as_slice_mut().unwrap().copy_from_slice(data),
                    None => return false,
                },
                _ => return false,
            }
            true
        } else if let Some(rest) = suffix.strip_prefix("bn.") {
            self.bn.set_tensor(rest, data)
        } else {
            false
        }
    }
}

/// Segmentation head: 1x1 projection block, `depth` 3x3 prediction blocks,
/// and a 1x1 classifier. Both the global head and the probes use this shape.
#[derive(Debug, Clone)]
pub struct SegHead {
    pub proj: ConvBlock,
    pub blocks: Vec<ConvBlock>,
    pub pred: Conv2d,
}

pub struct HeadCache {
    proj: BlockCache,
    blocks: Vec<BlockCache>,
    pred_in: Feat,
}

impl SegHead {
    pub fn new(
        cin: usize,
        width: usize,
        depth: usize,
        num_classes: usize,
        seed: u64,
        name: &str,
    ) -> Self {
        let proj = ConvBlock::new(cin, width, 1, 1, 1, seed, &format!("{name}.proj"));
        let blocks = (0..depth)
            .map(|j| ConvBlock::new(width, width, 3, 1, 1, seed, &format!("{name}.block.{j}")))
            .collect();
        let pred = Conv2d::new(width, num_classes, 1, 1, 1, true, seed, &format!("{name}.pred"));
        SegHead { proj, blocks, pred }
    }

    pub fn infer(&self, x: &Feat) -> Feat {
        let mut h = self.proj.infer(x);
        for b in &self.blocks {
            h = b.infer(&h);
        }
        self.pred.forward(&h)
    }

    pub fn fwd_train(&mut self, x: &Feat) -> (Feat, HeadCache) {
        let (mut h, proj) = self.proj.fwd_train(x, true);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (next, c) = b.fwd_train(&h, true);
            blocks.push(c);
            h = next;
        }
        let pred_in = h.clone();
        let y = self.pred.forward(&h);
        (y, HeadCache { proj, blocks, pred_in })
    }

    pub fn bwd(&mut self, cache: &HeadCache, gy: &Feat) -> Feat {
        let mut g = self.pred.backward(&cache.pred_in, gy);
        for (b, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            g = b.bwd(c, &g);
        }
        self.proj.bwd(&cache.proj, &g)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut count = |_: String, p: &mut Param| n += p.len();
        let mut me = self.clone();
        me.visit_params_mut("h", &mut count);
        n
    }

    pub fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, &ArrayD<f32>)) {
        self.proj.visit_tensors(&format!("{prefix}.proj"), f);
        for (j, b) in self.blocks.iter().enumerate() {
            b.visit_tensors(&format!("{prefix}.block.{j}"), f);
        }
        self.pred.visit_tensors(&format!("{prefix}.pred"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.proj.visit_params_mut(&format!("{prefix}.proj"), f);
        for (j, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&format!("{prefix}.block.{j}"), f);
        }
        self.pred.visit_params_mut(&format!("{prefix}.pred"), f);
    }

    pub fn set_tensor(&mut self, suffix: &str, data: &[f32]) -> bool {
        if let Some(rest) = suffix.strip_prefix("proj.") {
            return self.proj.set_tensor(rest, data);
        }
        if let Some(rest) = suffix.strip_prefix("block.") {
            if let Some((idx, tail)) = rest.split_once('.') {
                if let Ok(j) = idx.parse::<usize>() {
                    if j < self.blocks.len() {
                        return self.blocks[j].set_tensor(tail, data);
                    }
                }
            }
            return false;
        }
        if let Some(rest) = suffix.strip_prefix("pred.") {
            match rest {
                "w" => self.pred.w.value.as_slice_mut().unwrap().copy_from_slice(data),
                "b" => match &mut self.pred.b {
                    Some(b) => b.value.as_slice_mut().unwrap().copy_from_slice(data),
                    None => return false,
                },
                _ => return false,
            }
            return true;
        }
        false
    }
}

// ---------------------------------------------------------------------------
// Logit stack
// ---------------------------------------------------------------------------

/// Per-pixel logits from a set of heads, `[heads, classes, H, W]`, upsampled
/// to input resolution. For a pyramid model the head order is
/// `[global, c_1, ..., c_K]`; ensemble stacks carry no global slice.
#[derive(Debug, Clone)]
pub struct LogitStack {
    pub data: Array4<f32>,
    pub has_global: bool,
}

impl LogitStack {
    pub fn new(data: Array4<f32>, has_global: bool) -> Self {
        LogitStack { data, has_global }
    }

    pub fn num_heads(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The global-head slice `z_g`.
    pub fn global(&self) -> Array3<f32> {
        assert!(self.has_global, "stack has no global slice");
        self.data.index_axis(Axis(0), 0).to_owned()
    }
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

/// Frozen trunk activations for one batch: per-branch features and, when the
/// pooling branch is enabled, the pooled feature vector.
#[derive(Debug, Clone)]
pub struct TrunkFeatures {
    pub branch: Vec<Feat>,
    pub pooled: Option<Array2<f32>>,
    pub feat_h: usize,
    pub feat_w: usize,
}

#[derive(Debug, Clone)]
pub struct PyramidModel {
    pub pcfg: PyramidConfig,
    pub hcfg: ProbeConfig,
    pub encoder: Vec<ConvBlock>,
    pub branches: Vec<ConvBlock>,
    pub pool: Option<ConvBlock>,
    pub global_head: SegHead,
    /// One probe per pyramid branch; empty for ensemble members that only
    /// ever use the global head.
    pub probes: Vec<SegHead>,
    pub seed: u64,
}

/// Which parameters an optimizer or digest walks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    All,
    /// Probe heads only (the stop-gradient training group).
    Probes,
    /// Encoder, pyramid branches, pooling branch, and global head.
    NonProbe,
}

fn group_accepts(group: ParamGroup, name: &str) -> bool {
    let is_probe = name.starts_with("probe.");
    match group {
        ParamGroup::All => true,
        ParamGroup::Probes => is_probe,
        ParamGroup::NonProbe => !is_probe,
    }
}

/// Build a model with deterministic, seed-derived initialization.
pub fn build_model(pcfg: &PyramidConfig, hcfg: &ProbeConfig, seed: u64) -> Result<PyramidModel> {
    pcfg.validate()?;
    hcfg.validate()?;
    Ok(build_unchecked(pcfg, hcfg, seed, true))
}

/// Build a model without probe heads (ensemble members use only the global
/// head; probes would be dead weight in the cost accounting).
pub fn build_base_only(pcfg: &PyramidConfig, hcfg: &ProbeConfig, seed: u64) -> Result<PyramidModel> {
    pcfg.validate()?;
    hcfg.validate()?;
    Ok(build_unchecked(pcfg, hcfg, seed, false))
}

/// Build a single-dilation ablation variant: every branch shares `rate`.
/// This bypasses the strictly-increasing dilation check, which exists to
/// catch configuration typos in the standard model.
pub fn build_model_single_dilation(
    pcfg: &PyramidConfig,
    hcfg: &ProbeConfig,
    rate: usize,
    seed: u64,
) -> Result<PyramidModel> {
    if rate < 1 {
        return Err(MooseError::config(format!("invalid dilation {rate}")));
    }
    let mut cfg = pcfg.clone();
    cfg.branch_dilations = vec![rate; pcfg.num_branches()];
    cfg.validate_with(true)?;
    hcfg.validate()?;
    Ok(build_unchecked(&cfg, hcfg, seed, true))
}

fn build_unchecked(
    pcfg: &PyramidConfig,
    hcfg: &ProbeConfig,
    seed: u64,
    with_probes: bool,
) -> PyramidModel {
    let widths = pcfg.encoder_widths();
    let strides = pcfg.encoder_strides();
    let mut encoder = Vec::with_capacity(4);
    let mut cin = 3;
    for i in 0..4 {
        encoder.push(ConvBlock::new(
            cin,
            widths[i],
            3,
            strides[i],
            1,
            seed,
            &format!("encoder.{i}"),
        ));
        cin = widths[i];
    }

    let branches: Vec<ConvBlock> = pcfg
        .branch_dilations
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            ConvBlock::new(
                pcfg.encoder_channels,
                pcfg.branch_channels,
                3,
                1,
                d,
                seed,
                &format!("branch.{k}"),
            )
        })
        .collect();

    let pool = pcfg.include_global_pool_branch.then(|| {
        ConvBlock::new(
            pcfg.encoder_channels,
            pcfg.branch_channels,
            1,
            1,
            1,
            seed,
            "pool",
        )
    });

    let global_head = SegHead::new(
        pcfg.global_head_input(),
        pcfg.encoder_channels,
        hcfg.depth,
        pcfg.num_classes,
        seed,
        "global_head",
    );

    let probes = if with_probes {
        (0..pcfg.num_branches())
            .map(|k| {
                SegHead::new(
                    pcfg.probe_input(),
                    hcfg.projection_channels,
                    hcfg.depth,
                    pcfg.num_classes,
                    seed,
                    &format!("probe.{k}"),
                )
            })
            .collect()
    } else {
        Vec::new()
    };

    PyramidModel {
        pcfg: pcfg.clone(),
        hcfg: hcfg.clone(),
        encoder,
        branches,
        pool,
        global_head,
        probes,
        seed,
    }
}

impl PyramidModel {
    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn has_probes(&self) -> bool {
        !self.probes.is_empty()
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let os = self.pcfg.output_stride;
        if h % os != 0 || w % os != 0 {
            return Err(MooseError::shape(format!(
                "input {h}x{w} not divisible by output_stride {os}"
            )));
        }
        Ok(())
    }

    /// Eval-mode trunk: encoder, branches, pooled features. Pure.
    pub fn trunk_infer(&self, x: &Feat) -> Result<TrunkFeatures> {
        self.check_input(x.shape()[2], x.shape()[3])?;
        let mut h = x.clone();
        for block in &self.encoder {
            h = block.infer(&h);
        }
        let branch: Vec<Feat> = self.branches.iter().map(|b| b.infer(&h)).collect();
        let pooled = self.pool.as_ref().map(|p| {
            let v = global_avg_pool(&h);
            let v4 = v.insert_axis(Axis(2)).insert_axis(Axis(3));
            let y = p.infer(&v4);
            y.index_axis(Axis(3), 0).index_axis(Axis(2), 0).to_owned()
        });
        let (fh, fw) = (branch[0].shape()[2], branch[0].shape()[3]);
        Ok(TrunkFeatures {
            branch,
            pooled,
            feat_h: fh,
            feat_w: fw,
        })
    }

    /// Input the global head reads: all branch features concatenated, plus
    /// the broadcast pooled features.
    pub fn global_head_input(&self, tf: &TrunkFeatures) -> Feat {
        let mut parts: Vec<&Feat> = tf.branch.iter().collect();
        let pooled;
        if let Some(p) = &tf.pooled {
            pooled = broadcast_spatial(p, tf.feat_h, tf.feat_w);
            parts.push(&pooled);
            return concat_channels(&parts);
        }
        concat_channels(&parts)
    }

    /// Input probe `k` reads: its branch features plus the broadcast pooled
    /// features. Probes never see other branches.
    pub fn probe_input(&self, tf: &TrunkFeatures, k: usize) -> Feat {
        match &tf.pooled {
            Some(p) => {
                let pooled = broadcast_spatial(p, tf.feat_h, tf.feat_w);
                concat_channels(&[&tf.branch[k], &pooled])
            }
            None => tf.branch[k].clone(),
        }
    }

    /// Eval-mode forward of every head for a batch. Returns low-resolution
    /// logits per head, `[B, N, fh, fw]`, ordered `[global, c_1, .., c_K]`.
    pub fn forward_heads_lowres(&self, x: &Feat) -> Result<Vec<Feat>> {
        let tf = self.trunk_infer(x)?;
        let mut heads = Vec::with_capacity(1 + self.probes.len());
        heads.push(self.global_head.infer(&self.global_head_input(&tf)));
        for (k, probe) in self.probes.iter().enumerate() {
            heads.push(probe.infer(&self.probe_input(&tf, k)));
        }
        Ok(heads)
    }

    /// Full forward pass for a single image: all heads, bilinearly upsampled
    /// to input resolution. Pure function of `(self, image)`.
    pub fn forward_all(&self, image: &Array3<f32>) -> Result<LogitStack> {
        let x = unsqueeze_batch(image);
        let stacks = self.forward_all_batch(&x)?;
        Ok(stacks.into_iter().next().unwrap())
    }

    /// Batched variant of [`forward_all`]; one stack per input image.
    pub fn forward_all_batch(&self, x: &Feat) -> Result<Vec<LogitStack>> {
        let heads = self.forward_heads_lowres(x)?;
        let factor = x.shape()[2] / heads[0].shape()[2];
        let up: Vec<Feat> = heads.iter().map(|h| upsample_bilinear(h, factor)).collect();
        let batch = x.shape()[0];
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let per_head: Vec<Array3<f32>> = up
                .iter()
                .map(|h| h.index_axis(Axis(0), b).to_owned())
                .collect();
            let views: Vec<_> = per_head.iter().map(|h| h.view()).collect();
            let data = ndarray::stack(Axis(0), &views).expect("head stack");
            out.push(LogitStack::new(data, true));
        }
        Ok(out)
    }

    /// Global-head logits only, `[N, H, W]`. Identical to slice 0 of
    /// [`forward_all`].
    pub fn forward_global(&self, image: &Array3<f32>) -> Result<Array3<f32>> {
        let x = unsqueeze_batch(image);
        let tf = self.trunk_infer(&x)?;
        let z = self.global_head.infer(&self.global_head_input(&tf));
        let factor = x.shape()[2] / z.shape()[2];
        let up = upsample_bilinear(&z, factor);
        Ok(up.index_axis(Axis(0), 0).to_owned())
    }

    // -- training-mode forward/backward used by the trainers ---------------

    /// Train-mode forward of trunk + global head. Returns the low-res global
    /// logits and the caches needed for the backward pass.
    pub(crate) fn base_fwd_train(&mut self, x: &Feat) -> (Feat, BaseCache) {
        let mut h = x.clone();
        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        for block in &mut self.encoder {
            let (next, c) = block.fwd_train(&h, true);
            enc_caches.push(c);
            h = next;
        }
        let theta = h;
        let mut branch_feats = Vec::with_capacity(self.branches.len());
        let mut branch_caches = Vec::with_capacity(self.branches.len());
        for b in &mut self.branches {
            let (f, c) = b.fwd_train(&theta, true);
            branch_feats.push(f);
            branch_caches.push(c);
        }
        let (fh, fw) = (theta.shape()[2], theta.shape()[3]);
        let mut pool_cache = None;
        let mut pooled_broadcast = None;
        if let Some(p) = &mut self.pool {
            let v = global_avg_pool(&theta);
            let v4 = v.insert_axis(Axis(2)).insert_axis(Axis(3));
            let (y, c) = p.fwd_train(&v4, true);
            let flat = y.index_axis(Axis(3), 0).index_axis(Axis(2), 0).to_owned();
            pooled_broadcast = Some(broadcast_spatial(&flat, fh, fw));
            pool_cache = Some(c);
        }
        let mut parts: Vec<&Feat> = branch_feats.iter().collect();
        if let Some(pb) = &pooled_broadcast {
            parts.push(pb);
        }
        let gh_in = concat_channels(&parts);
        let (z, gh_cache) = self.global_head.fwd_train(&gh_in);
        (
            z,
            BaseCache {
                enc_caches,
                branch_caches,
                pool_cache,
                gh_cache,
                feat_h: fh,
                feat_w: fw,
            },
        )
    }

    /// Backward for [`base_fwd_train`] from the gradient of the low-res
    /// global logits. Accumulates into all non-probe parameter grads.
    pub(crate) fn base_bwd(&mut self, cache: &BaseCache, gz: &Feat) {
        let g_in = self.global_head.bwd(&cache.gh_cache, gz);
        let k = self.branches.len();
        let bc = self.pcfg.branch_channels;
        let mut widths = vec![bc; k];
        if self.pool.is_some() {
            widths.push(bc);
        }
        let mut parts = split_channels(&g_in, &widths);
        let g_pool_bcast = if self.pool.is_some() { parts.pop() } else { None };

        let mut g_theta: Option<Feat> = None;
        for (b, (block, bcache)) in self
            .branches
            .iter_mut()
            .zip(cache.branch_caches.iter())
            .enumerate()
        {
            let g = block.bwd(bcache, &parts[b]);
            match &mut g_theta {
                Some(acc) => *acc += &g,
                None => g_theta = Some(g),
            }
        }
        if let (Some(p), Some(pc), Some(gb)) = (&mut self.pool, &cache.pool_cache, g_pool_bcast) {
            let g_flat = broadcast_spatial_backward(&gb);
            let g4 = g_flat.insert_axis(Axis(2)).insert_axis(Axis(3));
            let g_pooled_in = p.bwd(pc, &g4);
            let g_pooled = g_pooled_in
                .index_axis(Axis(3), 0)
                .index_axis(Axis(2), 0)
                .to_owned();
            let g = global_avg_pool_backward(&g_pooled, cache.feat_h, cache.feat_w);
            match &mut g_theta {
                Some(acc) => *acc += &g,
                None => g_theta = Some(g),
            }
        }
        let mut g = g_theta.expect("at least one branch");
        for (block, c) in self
            .encoder
            .iter_mut()
            .rev()
            .zip(cache.enc_caches.iter().rev())
        {
            g = block.bwd(c, &g);
        }
    }

    // -- parameter bookkeeping ---------------------------------------------

    /// Walk every tensor (parameters and normalization buffers) in a fixed,
    /// name-sorted-stable order.
    pub fn for_each_tensor(&self, f: &mut dyn FnMut(String, &ArrayD<f32>)) {
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit_tensors(&format!("encoder.{i}"), f);
        }
        for (k, b) in self.branches.iter().enumerate() {
            b.visit_tensors(&format!("branch.{k}"), f);
        }
        if let Some(p) = &self.pool {
            p.visit_tensors("pool", f);
        }
        self.global_head.visit_tensors("global_head", f);
        for (k, p) in self.probes.iter().enumerate() {
            p.visit_tensors(&format!("probe.{k}"), f);
        }
    }

    pub fn visit_params_mut(
        &mut self,
        group: ParamGroup,
        f: &mut dyn FnMut(String, &mut Param),
    ) {
        let mut g = |name: String, p: &mut Param| {
            if group_accepts(group, &name) {
                f(name, p);
            }
        };
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_params_mut(&format!("encoder.{i}"), &mut g);
        }
        for (k, b) in self.branches.iter_mut().enumerate() {
            b.visit_params_mut(&format!("branch.{k}"), &mut g);
        }
        if let Some(p) = &mut self.pool {
            p.visit_params_mut("pool", &mut g);
        }
        self.global_head.visit_params_mut("global_head", &mut g);
        for (k, p) in self.probes.iter_mut().enumerate() {
            p.visit_params_mut(&format!("probe.{k}"), &mut g);
        }
    }

    pub fn zero_grads(&mut self, group: ParamGroup) {
        self.visit_params_mut(group, &mut |_, p| p.zero_grad());
    }

    /// Trainable parameter count (running statistics excluded).
    pub fn param_count(&self, group: ParamGroup) -> usize {
        let mut n = 0;
        let mut me = self.clone();
        me.visit_params_mut(group, &mut |_, p| n += p.len());
        n
    }

    /// SHA-256 over the raw little-endian bytes of every tensor in the
    /// group, parameters and normalization buffers alike. Bit-level identity
    /// check for the stop-gradient contract.
    pub fn digest(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        self.for_each_tensor(&mut |name, t| {
            if group_accepts(group, &name) {
                hasher.update(name.as_bytes());
                for v in t.iter() {
                    hasher.update(v.to_le_bytes());
                }
            }
        });
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Assign one named tensor; used by the checkpoint loader.
    pub fn set_tensor(&mut self, name: &str, data: &[f32]) -> bool {
        if let Some(rest) = name.strip_prefix("encoder.") {
            if let Some((idx, tail)) = rest.split_once('.') {
                if let Ok(i) = idx.parse::<usize>() {
                    if i < self.encoder.len() {
                        return self.encoder[i].set_tensor(tail, data);
                    }
                }
            }
        } else if let Some(rest) = name.strip_prefix("branch.") {
            if let Some((idx, tail)) = rest.split_once('.') {
                if let Ok(k) = idx.parse::<usize>() {
                    if k < self.branches.len() {
                        return self.branches[k].set_tensor(tail, data);
                    }
                }
            }
        } else if let Some(rest) = name.strip_prefix("pool.") {
            if let Some(p) = &mut self.pool {
                return p.set_tensor(rest, data);
            }
        } else if let Some(rest) = name.strip_prefix("global_head.") {
            return self.global_head.set_tensor(rest, data);
        } else if let Some(rest) = name.strip_prefix("probe.") {
            if let Some((idx, tail)) = rest.split_once('.') {
                if let Ok(k) = idx.parse::<usize>() {
                    if k < self.probes.len() {
                        return self.probes[k].set_tensor(tail, data);
                    }
                }
            }
        }
        false
    }
}

pub struct BaseCache {
    enc_caches: Vec<BlockCache>,
    branch_caches: Vec<BlockCache>,
    pool_cache: Option<BlockCache>,
    gh_cache: HeadCache,
    feat_h: usize,
    feat_w: usize,
}
