//! Per-pixel anomaly scoring over a [`LogitStack`]: maximum softmax
//! probability, entropy, and max-logit, each computed on the head-averaged
//! prediction, plus the diversity maps (across-head variance and mutual
//! information). Higher score always means more anomalous.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array4};
#[cfg(test)]
use ndarray::Axis;

use crate::error::{MooseError, Result};
use crate::model::LogitStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScoringFn {
    /// Negated max of the mean softmax distribution.
    Msp,
    /// Shannon entropy (natural log) of the mean distribution.
    Entropy,
    /// Negated max of the mean logits.
    MaxLogit,
}

impl ScoringFn {
    pub fn tag(&self) -> &'static str {
        match self {
            ScoringFn::Msp => "msp",
            ScoringFn::Entropy => "h",
            ScoringFn::MaxLogit => "ml",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "msp" => Ok(ScoringFn::Msp),
            "h" | "entropy" => Ok(ScoringFn::Entropy),
            "ml" | "maxlogit" | "max-logit" => Ok(ScoringFn::MaxLogit),
            other => Err(MooseError::usage(format!("unknown scoring fn '{other}'"))),
        }
    }

    pub fn all() -> [ScoringFn; 3] {
        [ScoringFn::Msp, ScoringFn::Entropy, ScoringFn::MaxLogit]
    }
}

/// Which heads participate in a score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadSet {
    /// The global head alone: the single-model baseline.
    GlobalOnly,
    /// Every head in the stack, uniformly weighted.
    AllHeads,
    /// An explicit subset of stack slices.
    Custom(Vec<usize>),
}

impl HeadSet {
    pub fn tag(&self) -> String {
        match self {
            HeadSet::GlobalOnly => "global_only".into(),
            HeadSet::AllHeads => "all_heads".into(),
            HeadSet::Custom(idx) => format!(
                "custom:{}",
                idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
            ),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" | "global_only" => Ok(HeadSet::GlobalOnly),
            "all" | "all_heads" => Ok(HeadSet::AllHeads),
            other => Err(MooseError::usage(format!("unknown head set '{other}'"))),
        }
    }

    /// Resolve to concrete slice indices, validating against the stack.
    pub fn resolve(&self, stack: &LogitStack) -> Result<Vec<usize>> {
        let heads = match self {
            HeadSet::GlobalOnly => {
                if !stack.has_global {
                    return Err(MooseError::usage(
                        "stack has no global slice; GlobalOnly is undefined",
                    ));
                }
                vec![0]
            }
            HeadSet::AllHeads => (0..stack.num_heads()).collect(),
            HeadSet::Custom(idx) => {
                for &i in idx {
                    if i >= stack.num_heads() {
                        return Err(MooseError::usage(format!(
                            "head index {i} out of range (stack has {})",
                            stack.num_heads()
                        )));
                    }
                }
                idx.clone()
            }
        };
        if heads.is_empty() {
            return Err(MooseError::usage("empty head set"));
        }
        Ok(heads)
    }
}

/// A per-pixel anomaly score map. Values are f64 in memory; the on-disk
/// format quantizes to f32.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub values: Array2<f64>,
    pub scoring_fn: ScoringFn,
    pub head_set: String,
}

/// Across-head variance and mutual information, per pixel.
#[derive(Debug, Clone)]
pub struct DiversityMaps {
    pub variance: Array2<f64>,
    pub mutual_information: Array2<f64>,
}

/// Numerically stabilized per-head softmax (max subtraction). Every
/// `(head, pixel)` distribution sums to 1 within 1e-6.
pub fn softmax_per_head(stack: &LogitStack) -> Result<Array4<f32>> {
    if !stack.is_finite() {
        return Err(MooseError::usage("non-finite logits"));
    }
    let (m, n, h, w) = (
        stack.num_heads(),
        stack.num_classes(),
        stack.height(),
        stack.width(),
    );
    let mut out = Array4::<f32>::zeros((m, n, h, w));
    for hi in 0..m {
        for iy in 0..h {
            for ix in 0..w {
                let mut maxv = f32::NEG_INFINITY;
                for c in 0..n {
                    maxv = maxv.max(stack.data[[hi, c, iy, ix]]);
                }
                let mut denom = 0.0f64;
                for c in 0..n {
                    denom += ((stack.data[[hi, c, iy, ix]] - maxv) as f64).exp();
                }
                for c in 0..n {
                    out[[hi, c, iy, ix]] =
                        (((stack.data[[hi, c, iy, ix]] - maxv) as f64).exp() / denom) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Mean distribution over the selected heads, per pixel, in f64:
/// `[N, H, W]`.
fn mean_distribution(probs: &Array4<f32>, heads: &[usize]) -> ndarray::Array3<f64> {
    let (_, n, h, w) = (
        probs.shape()[0],
        probs.shape()[1],
        probs.shape()[2],
        probs.shape()[3],
    );
    let mut mean = ndarray::Array3::<f64>::zeros((n, h, w));
    let inv = 1.0 / heads.len() as f64;
    for &hi in heads {
        for c in 0..n {
            for iy in 0..h {
                for ix in 0..w {
                    mean[[c, iy, ix]] += probs[[hi, c, iy, ix]] as f64 * inv;
                }
            }
        }
    }
    mean
}

/// Maximum softmax probability score: negated max over classes of the mean
/// head distribution.
pub fn score_msp(stack: &LogitStack, heads: &HeadSet) -> Result<ScoreMap> {
    let idx = heads.resolve(stack)?;
    let probs = softmax_per_head(stack)?;
    let mean = mean_distribution(&probs, &idx);
    let (n, h, w) = (mean.shape()[0], mean.shape()[1], mean.shape()[2]);
    let mut values = Array2::<f64>::zeros((h, w));
    for iy in 0..h {
        for ix in 0..w {
            let mut m = f64::NEG_INFINITY;
            for c in 0..n {
                m = m.max(mean[[c, iy, ix]]);
            }
            values[[iy, ix]] = -m;
        }
    }
    Ok(ScoreMap {
        values,
        scoring_fn: ScoringFn::Msp,
        head_set: heads.tag(),
    })
}

fn entropy(dist: &[f64]) -> f64 {
    dist.iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// Entropy score: Shannon entropy (natural log) of the mean distribution.
pub fn score_entropy(stack: &LogitStack, heads: &HeadSet) -> Result<ScoreMap> {
    let idx = heads.resolve(stack)?;
    let probs = softmax_per_head(stack)?;
    let mean = mean_distribution(&probs, &idx);
    let (n, h, w) = (mean.shape()[0], mean.shape()[1], mean.shape()[2]);
    let mut values = Array2::<f64>::zeros((h, w));
    let mut dist = vec![0.0f64; n];
    for iy in 0..h {
        for ix in 0..w {
            for c in 0..n {
                dist[c] = mean[[c, iy, ix]];
            }
            values[[iy, ix]] = entropy(&dist);
        }
    }
    Ok(ScoreMap {
        values,
        scoring_fn: ScoringFn::Entropy,
        head_set: heads.tag(),
    })
}

/// Max-logit score: negated max over classes of the mean logits.
pub fn score_maxlogit(stack: &LogitStack, heads: &HeadSet) -> Result<ScoreMap> {
    let idx = heads.resolve(stack)?;
    if !stack.is_finite() {
        return Err(MooseError::usage("non-finite logits"));
    }
    let (n, h, w) = (stack.num_classes(), stack.height(), stack.width());
    let inv = 1.0 / idx.len() as f64;
    let mut values = Array2::<f64>::zeros((h, w));
    for iy in 0..h {
        for ix in 0..w {
            let mut best = f64::NEG_INFINITY;
            for c in 0..n {
                let mut acc = 0.0f64;
                for &hi in &idx {
                    acc += stack.data[[hi, c, iy, ix]] as f64;
                }
                best = best.max(acc * inv);
            }
            values[[iy, ix]] = -best;
        }
    }
    Ok(ScoreMap {
        values,
        scoring_fn: ScoringFn::MaxLogit,
        head_set: heads.tag(),
    })
}

pub fn score(stack: &LogitStack, scoring_fn: ScoringFn, heads: &HeadSet) -> Result<ScoreMap> {
    match scoring_fn {
        ScoringFn::Msp => score_msp(stack, heads),
        ScoringFn::Entropy => score_entropy(stack, heads),
        ScoringFn::MaxLogit => score_maxlogit(stack, heads),
    }
}

/// Mutual information between head choice and prediction: entropy of the
/// mean distribution minus the mean per-head entropy. Non-negative by
/// Jensen; clipped at zero only to absorb round-off below 1e-9.
pub fn mutual_information(stack: &LogitStack, heads: &HeadSet) -> Result<Array2<f64>> {
    let idx = heads.resolve(stack)?;
    let probs = softmax_per_head(stack)?;
    let (n, h, w) = (stack.num_classes(), stack.height(), stack.width());
    let inv = 1.0 / idx.len() as f64;
    let mut out = Array2::<f64>::zeros((h, w));
    let mut mean = vec![0.0f64; n];
    for iy in 0..h {
        for ix in 0..w {
            mean.iter_mut().for_each(|m| *m = 0.0);
            let mut mean_head_entropy = 0.0f64;
            for &hi in &idx {
                let mut head_entropy = 0.0f64;
                for c in 0..n {
                    let p = probs[[hi, c, iy, ix]] as f64;
                    mean[c] += p * inv;
                    if p > 0.0 {
                        head_entropy -= p * p.ln();
                    }
                }
                mean_head_entropy += head_entropy * inv;
            }
            let mi = entropy(&mean) - mean_head_entropy;
            out[[iy, ix]] = mi.max(0.0);
        }
    }
    Ok(out)
}

/// Across-head population variance of each class probability, averaged over
/// classes and reported x100 (the magnitude convention used for diversity
/// tables).
pub fn prediction_variance(stack: &LogitStack, heads: &HeadSet) -> Result<Array2<f64>> {
    let idx = heads.resolve(stack)?;
    let probs = softmax_per_head(stack)?;
    let (n, h, w) = (stack.num_classes(), stack.height(), stack.width());
    let m = idx.len() as f64;
    let mut out = Array2::<f64>::zeros((h, w));
    for iy in 0..h {
        for ix in 0..w {
            let mut acc = 0.0f64;
            for c in 0..n {
                let mut mean = 0.0f64;
                for &hi in &idx {
                    mean += probs[[hi, c, iy, ix]] as f64;
                }
                mean /= m;
                let mut var = 0.0f64;
                for &hi in &idx {
                    let d = probs[[hi, c, iy, ix]] as f64 - mean;
                    var += d * d;
                }
                acc += var / m;
            }
            out[[iy, ix]] = 100.0 * acc / n as f64;
        }
    }
    Ok(out)
}

/// Both diversity maps in one pass.
pub fn diversity_maps(stack: &LogitStack, heads: &HeadSet) -> Result<DiversityMaps> {
    Ok(DiversityMaps {
        variance: prediction_variance(stack, heads)?,
        mutual_information: mutual_information(stack, heads)?,
    })
}

// ---------------------------------------------------------------------------
// Score map file format
// ---------------------------------------------------------------------------

const SCORE_MAGIC: &str = "moose-score-v1";

impl ScoreMap {
    /// Write as `moose-score-v1 H=<h> W=<w> fn=<tag>\n` followed by
    /// row-major little-endian f32 values.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let (h, w) = self.values.dim();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{SCORE_MAGIC} H={h} W={w} fn={}", self.scoring_fn.tag())?;
        for v in self.values.iter() {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<ScoreMap> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut header = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            f.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            header.push(byte[0]);
            if header.len() > 256 {
                return Err(MooseError::format("score header too long"));
            }
        }
        let header = String::from_utf8(header).map_err(|_| MooseError::format("bad header"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(SCORE_MAGIC) {
            return Err(MooseError::format("missing moose-score-v1 magic"));
        }
        let mut h = None;
        let mut w = None;
        let mut tag = None;
        for p in parts {
            if let Some(v) = p.strip_prefix("H=") {
                h = v.parse::<usize>().ok();
            } else if let Some(v) = p.strip_prefix("W=") {
                w = v.parse::<usize>().ok();
            } else if let Some(v) = p.strip_prefix("fn=") {
                tag = Some(v.to_string());
            }
        }
        let (h, w) = match (h, w) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(MooseError::format("score header missing H/W")),
        };
        let tag = tag.ok_or_else(|| MooseError::format("score header missing fn"))?;
        let mut buf = vec![0u8; h * w * 4];
        f.read_exact(&mut buf)?;
        let mut values = Array2::<f64>::zeros((h, w));
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            values[[i / w, i % w]] =
                f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
        Ok(ScoreMap {
            values,
            scoring_fn: ScoringFn::parse(&tag)?,
            head_set: "unknown".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn stack_from(data: Array4<f32>) -> LogitStack {
        LogitStack::new(data, true)
    }

    /// 1x1-pixel stack from per-head logit vectors.
    fn pixel_stack(heads: &[Vec<f32>]) -> LogitStack {
        let m = heads.len();
        let n = heads[0].len();
        let mut data = Array4::<f32>::zeros((m, n, 1, 1));
        for (h, row) in heads.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                data[[h, c, 0, 0]] = v;
            }
        }
        stack_from(data)
    }

    fn random_stack(m: usize, n: usize, h: usize, w: usize, seed: u64) -> LogitStack {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        stack_from(Array4::from_shape_simple_fn((m, n, h, w), || {
            rng.random::<f32>() * 6.0 - 3.0
        }))
    }

    /// Logits whose softmax is (numerically) the given distribution.
    fn logits_for(dist: &[f64]) -> Vec<f32> {
        dist.iter().map(|&p| (p.max(1e-30)).ln() as f32).collect()
    }

    #[test]
    fn softmax_square_cases() {
        let s = pixel_stack(&[vec![0.0, 0.0]]);
        let p = softmax_per_head(&s).unwrap();
        assert!((p[[0, 0, 0, 0]] - 0.5).abs() < 1e-6);
        assert!((p[[0, 1, 0, 0]] - 0.5).abs() < 1e-6);

        let s = pixel_stack(&[vec![(2.0f64).ln() as f32, 0.0]]);
        let p = softmax_per_head(&s).unwrap();
        assert!((p[[0, 0, 0, 0]] - 2.0 / 3.0).abs() < 1e-6);
        assert!((p[[0, 1, 0, 0]] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_is_shift_invariant_and_sums_to_one() {
        let s = random_stack(3, 5, 4, 4, 1);
        let mut shifted = s.clone();
        shifted.data.mapv_inplace(|v| v + 7.3);
        let p = softmax_per_head(&s).unwrap();
        let q = softmax_per_head(&shifted).unwrap();
        let max_diff = p
            .iter()
            .zip(q.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-5);
        for hi in 0..3 {
            for iy in 0..4 {
                for ix in 0..4 {
                    let sum: f32 = (0..5).map(|c| p[[hi, c, iy, ix]]).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn msp_closed_forms() {
        let s = pixel_stack(&[logits_for(&[1.0, 0.0])]);
        let v = score_msp(&s, &HeadSet::AllHeads).unwrap().values[[0, 0]];
        assert!((v + 1.0).abs() < 1e-6);

        let s = pixel_stack(&[logits_for(&[1.0, 0.0]), logits_for(&[0.0, 1.0])]);
        let v = score_msp(&s, &HeadSet::AllHeads).unwrap().values[[0, 0]];
        assert!((v + 0.5).abs() < 1e-6);

        let s = pixel_stack(&[
            logits_for(&[0.25; 4]),
            logits_for(&[0.25; 4]),
            logits_for(&[0.25; 4]),
        ]);
        let v = score_msp(&s, &HeadSet::AllHeads).unwrap().values[[0, 0]];
        assert!((v + 0.25).abs() < 1e-6);
    }

    #[test]
    fn entropy_closed_forms() {
        let one_hot = logits_for(&[1.0, 0.0]);
        let s = pixel_stack(&[one_hot.clone(), one_hot.clone()]);
        let v = score_entropy(&s, &HeadSet::AllHeads).unwrap().values[[0, 0]];
        assert!(v.abs() < 1e-5);

        let s = pixel_stack(&[logits_for(&[1.0, 0.0]), logits_for(&[0.0, 1.0])]);
        let v = score_entropy(&s, &HeadSet::AllHeads).unwrap().values[[0, 0]];
        assert!((v - (2.0f64).ln()).abs() < 1e-6);

        let s = pixel_stack(&[logits_for(&[0.2; 5])]);
        let v = score_entropy(&s, &HeadSet::AllHeads).unwrap().values[[0, 0]];
        assert!((v - (5.0f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn maxlogit_closed_forms() {
        let s = pixel_stack(&[vec![3.2, 0.1]]);
        let v = score_maxlogit(&s, &HeadSet::AllHeads).unwrap().values[[0, 0]];
        assert!((v + 3.2).abs() < 1e-6);

        let s = pixel_stack(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let v = score_maxlogit(&s, &HeadSet::AllHeads).unwrap().values[[0, 0]];
        assert!((v + 1.0).abs() < 1e-6);

        // all heads identical -> equals the single-head score
        let s3 = pixel_stack(&[vec![1.5, -0.5], vec![1.5, -0.5], vec![1.5, -0.5]]);
        let s1 = pixel_stack(&[vec![1.5, -0.5]]);
        let a = score_maxlogit(&s3, &HeadSet::AllHeads).unwrap().values[[0, 0]];
        let b = score_maxlogit(&s1, &HeadSet::AllHeads).unwrap().values[[0, 0]];
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn mutual_information_cases() {
        let s = pixel_stack(&[vec![1.0, 2.0, -1.0], vec![1.0, 2.0, -1.0]]);
        let mi = mutual_information(&s, &HeadSet::AllHeads).unwrap()[[0, 0]];
        assert!(mi.abs() < 1e-9, "identical heads: mi={mi}");

        let s = pixel_stack(&[logits_for(&[1.0, 0.0]), logits_for(&[0.0, 1.0])]);
        let mi = mutual_information(&s, &HeadSet::AllHeads).unwrap()[[0, 0]];
        assert!((mi - (2.0f64).ln()).abs() < 1e-4, "disagreeing one-hots: {mi}");

        let s = pixel_stack(&[logits_for(&[0.5, 0.5]), logits_for(&[0.5, 0.5])]);
        let mi = mutual_information(&s, &HeadSet::AllHeads).unwrap()[[0, 0]];
        assert!(mi.abs() < 1e-9, "uniform heads: mi={mi}");
    }

    #[test]
    fn mi_nonnegative_and_zero_iff_identical() {
        for seed in 0..20 {
            let s = random_stack(4, 6, 3, 3, seed);
            let mi = mutual_information(&s, &HeadSet::AllHeads).unwrap();
            assert!(mi.iter().all(|&v| v >= 0.0));
        }
        // duplicated heads -> all zeros
        let base = random_stack(1, 5, 4, 4, 33);
        let dup = ndarray::concatenate(
            Axis(0),
            &[base.data.view(), base.data.view(), base.data.view()],
        )
        .unwrap();
        let s = stack_from(dup);
        let mi = mutual_information(&s, &HeadSet::AllHeads).unwrap();
        assert!(mi.iter().all(|&v| v < 1e-9));
    }

    #[test]
    fn variance_closed_forms_and_oracle() {
        let s = pixel_stack(&[vec![0.3, -0.2], vec![0.3, -0.2]]);
        let v = prediction_variance(&s, &HeadSet::AllHeads).unwrap()[[0, 0]];
        assert!(v.abs() < 1e-12);

        let s = pixel_stack(&[logits_for(&[1.0, 0.0]), logits_for(&[0.0, 1.0])]);
        let v = prediction_variance(&s, &HeadSet::AllHeads).unwrap()[[0, 0]];
        assert!((v - 25.0).abs() < 1e-3, "expected 25.0 got {v}");

        // random 3-head stack vs a direct two-pass oracle
        let s = random_stack(3, 4, 5, 5, 77);
        let v = prediction_variance(&s, &HeadSet::AllHeads).unwrap();
        let p = softmax_per_head(&s).unwrap();
        for iy in 0..5 {
            for ix in 0..5 {
                let mut acc = 0.0f64;
                for c in 0..4 {
                    let vals: Vec<f64> = (0..3).map(|h| p[[h, c, iy, ix]] as f64).collect();
                    let mean = vals.iter().sum::<f64>() / 3.0;
                    let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
                    acc += var;
                }
                let oracle = 100.0 * acc / 4.0;
                assert!((v[[iy, ix]] - oracle).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn global_only_reduces_to_single_model_baseline() {
        let s = random_stack(5, 7, 4, 4, 5);
        // Independent computation on slice 0 only.
        let g = stack_from(
            s.data
                .slice(ndarray::s![0..1, .., .., ..])
                .to_owned(),
        );
        for f in ScoringFn::all() {
            let a = score(&s, f, &HeadSet::GlobalOnly).unwrap();
            let b = score(&g, f, &HeadSet::AllHeads).unwrap();
            let max_diff = a
                .values
                .iter()
                .zip(b.values.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-12, "{f:?}: {max_diff}");
        }
    }

    #[test]
    fn entropy_decomposition_identity() {
        // H[mean] = MI + mean per-head entropy, so
        // S_H(all) = S_H(global) + MI + (mean head entropy - global entropy).
        for seed in 0..10 {
            let s = random_stack(4, 5, 3, 3, seed + 100);
            let all = score_entropy(&s, &HeadSet::AllHeads).unwrap().values;
            let global = score_entropy(&s, &HeadSet::GlobalOnly).unwrap().values;
            let mi = mutual_information(&s, &HeadSet::AllHeads).unwrap();
            let probs = softmax_per_head(&s).unwrap();
            for iy in 0..3 {
                for ix in 0..3 {
                    let mut mean_head_h = 0.0f64;
                    for hi in 0..4 {
                        let dist: Vec<f64> =
                            (0..5).map(|c| probs[[hi, c, iy, ix]] as f64).collect();
                        mean_head_h += entropy(&dist) / 4.0;
                    }
                    let global_h = global[[iy, ix]];
                    let lhs = all[[iy, ix]];
                    let rhs = global_h + mi[[iy, ix]] + (mean_head_h - global_h);
                    assert!((lhs - rhs).abs() < 1e-9, "seed {seed}: {lhs} vs {rhs}");
                }
            }
        }
    }

    #[test]
    fn argmax_of_mean_logits_is_shift_invariant() {
        let s = random_stack(3, 6, 4, 4, 9);
        let mut shifted = s.clone();
        // add a per-pixel constant across classes
        for hi in 0..3 {
            for iy in 0..4 {
                for ix in 0..4 {
                    let c0 = (iy * 4 + ix) as f32 * 0.37 - 1.0;
                    for c in 0..6 {
                        shifted.data[[hi, c, iy, ix]] += c0;
                    }
                }
            }
        }
        let argmax = |st: &LogitStack| -> Vec<usize> {
            let mut out = Vec::new();
            for iy in 0..4 {
                for ix in 0..4 {
                    let mut best = (0, f64::NEG_INFINITY);
                    for c in 0..6 {
                        let m: f64 = (0..3).map(|h| st.data[[h, c, iy, ix]] as f64).sum();
                        if m > best.1 {
                            best = (c, m);
                        }
                    }
                    out.push(best.0);
                }
            }
            out
        };
        assert_eq!(argmax(&s), argmax(&shifted));
    }

    #[test]
    fn empty_and_invalid_head_sets_error() {
        let s = random_stack(3, 4, 2, 2, 2);
        assert!(HeadSet::Custom(vec![]).resolve(&s).is_err());
        assert!(HeadSet::Custom(vec![5]).resolve(&s).is_err());
        let no_global = LogitStack::new(s.data.clone(), false);
        assert!(HeadSet::GlobalOnly.resolve(&no_global).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_stack(max_heads: usize, max_classes: usize) -> impl Strategy<Value = LogitStack> {
            (2..=max_heads, 2..=max_classes, 0u64..10_000).prop_map(|(m, n, seed)| {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                stack_from(Array4::from_shape_simple_fn((m, n, 3, 3), || {
                    rng.random::<f32>() * 10.0 - 5.0
                }))
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn softmax_distributions_sum_to_one(stack in arb_stack(6, 10)) {
                let p = softmax_per_head(&stack).unwrap();
                let (m, n) = (stack.num_heads(), stack.num_classes());
                for hi in 0..m {
                    for iy in 0..3 {
                        for ix in 0..3 {
                            let s: f64 = (0..n).map(|c| p[[hi, c, iy, ix]] as f64).sum();
                            prop_assert!((s - 1.0).abs() < 1e-6);
                        }
                    }
                }
            }

            #[test]
            fn mutual_information_is_nonnegative(stack in arb_stack(6, 8)) {
                let mi = mutual_information(&stack, &HeadSet::AllHeads).unwrap();
                prop_assert!(mi.iter().all(|&v| v >= 0.0));
            }

            #[test]
            fn variance_is_nonnegative_and_zero_for_duplicates(stack in arb_stack(5, 6)) {
                let v = prediction_variance(&stack, &HeadSet::AllHeads).unwrap();
                prop_assert!(v.iter().all(|&x| x >= 0.0));
                let one = stack.data.slice(ndarray::s![0..1, .., .., ..]).to_owned();
                let dups: Vec<_> = (0..3).map(|_| one.view()).collect();
                let dup = stack_from(ndarray::concatenate(Axis(0), &dups).unwrap());
                let vd = prediction_variance(&dup, &HeadSet::AllHeads).unwrap();
                prop_assert!(vd.iter().all(|&x| x < 1e-12));
            }
        }
    }

    #[test]
    fn score_map_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.bin");
        let s = random_stack(2, 3, 6, 5, 4);
        let m = score_entropy(&s, &HeadSet::AllHeads).unwrap();
        m.write_to(&path).unwrap();
        let r = ScoreMap::read_from(&path).unwrap();
        assert_eq!(r.values.dim(), (6, 5));
        assert_eq!(r.scoring_fn, ScoringFn::Entropy);
        for (a, b) in m.values.iter().zip(r.values.iter()) {
            assert!((*a as f32 as f64 - b).abs() < 1e-12); // f32 quantization only
        }
    }
}
