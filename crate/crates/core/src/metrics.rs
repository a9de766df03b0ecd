//! Detection and calibration metrics: area under the precision-recall curve,
//! false-positive rate at 95% true-positive rate, binned expected calibration
//! error, and mean intersection-over-union.
//!
//! AUPR and FPR95 have two code paths: an exact sort-based one used up to
//! [`EXACT_PATH_LIMIT`] samples, and a 2^16-bin histogram approximation for
//! larger inputs. The histogram path merges all scores falling into one bin
//! into a single threshold group, so its error is bounded by the precision /
//! recall change across one bin (at most `1/2^16` of the score range worth of
//! samples per bin boundary).

use serde::{Deserialize, Serialize};

use crate::error::{MooseError, Result};

/// Above this many samples the ranking metrics switch to the histogram path.
pub const EXACT_PATH_LIMIT: usize = 1_000_000;

const HISTOGRAM_BINS: usize = 1 << 16;

/// Default number of equal-width confidence bins for ECE.
pub const ECE_DEFAULT_BINS: usize = 15;

fn check_binary_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(MooseError::shape(format!(
            "scores ({}) and labels ({}) differ in length",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(MooseError::usage("empty score array"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MooseError::usage("non-finite score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(MooseError::UndefinedMetric(
            "no positive samples; AUPR/FPR95 undefined".into(),
        ));
    }
    if neg == 0 {
        return Err(MooseError::UndefinedMetric(
            "no negative samples; FPR95 undefined".into(),
        ));
    }
    Ok((pos, neg))
}

/// (tp, fp) group deltas walked in descending score order, ties merged.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut groups = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let mut tp = 0;
        let mut fp = 0;
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        groups.push((tp, fp));
    }
    groups
}

fn aupr_from_groups(groups: &[(usize, usize)], pos: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut area = 0.0f64;
    let mut prev_recall = 0.0f64;
    for &(dtp, dfp) in groups {
        tp += dtp;
        fp += dfp;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

fn fpr95_from_groups(groups: &[(usize, usize)], pos: usize, neg: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &(dtp, dfp) in groups {
        tp += dtp;
        fp += dfp;
        if tp as f64 / pos as f64 >= 0.95 {
            return fp as f64 / neg as f64;
        }
    }
    1.0
}

/// Area under the precision-recall step curve, positives scored high.
/// Thresholds are the distinct score values, descending; ties are grouped at
/// a single threshold; the area uses rectangles, not trapezoids.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _neg) = check_binary_inputs(scores, labels)?;
    if scores.len() <= EXACT_PATH_LIMIT {
        Ok(aupr_from_groups(&tie_groups(scores, labels), pos))
    } else {
        let (groups, pos, _) = histogram_groups(scores, labels);
        Ok(aupr_from_groups(&groups, pos))
    }
}

/// Points of the precision-recall step curve as `(recall, precision)`,
/// descending thresholds, ties grouped. Exact path only.
pub fn pr_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, _neg) = check_binary_inputs(scores, labels)?;
    let groups = tie_groups(scores, labels);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut pts = Vec::with_capacity(groups.len() + 1);
    pts.push((0.0, 1.0));
    for (dtp, dfp) in groups {
        tp += dtp;
        fp += dfp;
        pts.push((tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(pts)
}

/// False-positive rate at the largest threshold whose TPR is at least 0.95.
/// No interpolation between thresholds.
pub fn fpr_at_95_tpr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary_inputs(scores, labels)?;
    if scores.len() <= EXACT_PATH_LIMIT {
        Ok(fpr95_from_groups(&tie_groups(scores, labels), pos, neg))
    } else {
        let (groups, pos, neg) = histogram_groups(scores, labels);
        Ok(fpr95_from_groups(&groups, pos, neg))
    }
}

/// Bin scores into descending histogram groups for the large-input path.
fn histogram_groups(scores: &[f64], labels: &[bool]) -> (Vec<(usize, usize)>, usize, usize) {
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let mut pos_bins = vec![0usize; HISTOGRAM_BINS];
    let mut neg_bins = vec![0usize; HISTOGRAM_BINS];
    for (&s, &l) in scores.iter().zip(labels.iter()) {
        let b = (((s - lo) / span) * (HISTOGRAM_BINS as f64 - 1.0)).round() as usize;
        let b = b.min(HISTOGRAM_BINS - 1);
        if l {
            pos_bins[b] += 1;
        } else {
            neg_bins[b] += 1;
        }
    }
    let mut groups = Vec::new();
    let mut pos = 0;
    let mut neg = 0;
    for b in (0..HISTOGRAM_BINS).rev() {
        if pos_bins[b] + neg_bins[b] > 0 {
            groups.push((pos_bins[b], neg_bins[b]));
            pos += pos_bins[b];
            neg += neg_bins[b];
        }
    }
    (groups, pos, neg)
}

/// Standard binned Expected Calibration Error: equal-width confidence bins,
/// sum of `(bin mass) * |bin accuracy - bin mean confidence|`.
pub fn ece(confidences: &[f64], correctness: &[bool], num_bins: usize) -> Result<f64> {
    if confidences.len() != correctness.len() {
        return Err(MooseError::shape("confidence/correctness length mismatch"));
    }
    if confidences.is_empty() {
        return Err(MooseError::usage("empty confidence array"));
    }
    if num_bins == 0 {
        return Err(MooseError::usage("num_bins must be positive"));
    }
    let n = confidences.len() as f64;
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0f64; num_bins];
    let mut correct = vec![0usize; num_bins];
    for (&c, &ok) in confidences.iter().zip(correctness.iter()) {
        if !(0.0..=1.0).contains(&c) {
            return Err(MooseError::usage(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * num_bins as f64) as usize).min(num_bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        if ok {
            correct[b] += 1;
        }
    }
    let mut total = 0.0;
    for b in 0..num_bins {
        if count[b] == 0 {
            continue;
        }
        let mass = count[b] as f64 / n;
        let acc = correct[b] as f64 / count[b] as f64;
        let conf = conf_sum[b] / count[b] as f64;
        total += mass * (acc - conf).abs();
    }
    Ok(total)
}

/// Mean IoU over `class_subset` (or all classes when `None`), computed from
/// aggregated intersection/union counts. Pixels labelled `ignore_index` in
/// the ground truth are excluded; classes absent from both prediction and
/// ground truth are skipped.
pub fn miou(
    pred: &ndarray::Array2<u8>,
    gt: &ndarray::Array2<u8>,
    num_classes: usize,
    ignore_index: u8,
    class_subset: Option<&[usize]>,
) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(MooseError::shape("pred/gt dimensions differ"));
    }
    let mut acc = MiouAccumulator::new(num_classes, ignore_index);
    acc.update(pred, gt);
    acc.value(class_subset)
}

/// Associative reducer for mIoU over many images.
#[derive(Debug, Clone)]
pub struct MiouAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub num_classes: usize,
    pub ignore_index: u8,
}

impl MiouAccumulator {
    pub fn new(num_classes: usize, ignore_index: u8) -> Self {
        MiouAccumulator {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            num_classes,
            ignore_index,
        }
    }

    pub fn update(&mut self, pred: &ndarray::Array2<u8>, gt: &ndarray::Array2<u8>) {
        self.update_masked(pred, gt, None)
    }

    /// Restrict the update to pixels where `mask` is true (when provided).
    pub fn update_masked(
        &mut self,
        pred: &ndarray::Array2<u8>,
        gt: &ndarray::Array2<u8>,
        mask: Option<&ndarray::Array2<bool>>,
    ) {
        for ((pos, &p), &g) in pred.indexed_iter().zip(gt.iter()) {
            if g == self.ignore_index {
                continue;
            }
            if let Some(m) = mask {
                if !m[pos] {
                    continue;
                }
            }
            let (p, g) = (p as usize, g as usize);
            if p == g {
                self.intersection[g] += 1;
                self.union[g] += 1;
            } else {
                if p < self.num_classes {
                    self.union[p] += 1;
                }
                self.union[g] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &MiouAccumulator) {
        for c in 0..self.num_classes {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
        }
    }

    pub fn value(&self, class_subset: Option<&[usize]>) -> Result<f64> {
        let classes: Vec<usize> = match class_subset {
            Some(s) => s.to_vec(),
            None => (0..self.num_classes).collect(),
        };
        for &c in &classes {
            if c >= self.num_classes {
                return Err(MooseError::usage(format!("class {c} out of range")));
            }
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for &c in &classes {
            if self.union[c] == 0 {
                continue; // absent from both pred and gt
            }
            sum += self.intersection[c] as f64 / self.union[c] as f64;
            n += 1;
        }
        if n == 0 {
            return Err(MooseError::UndefinedMetric(
                "no evaluated class present in pred or gt".into(),
            ));
        }
        Ok(sum / n as f64)
    }
}

/// Evaluation summary for one (model, split, scoring-fn) triple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub aupr: f64,
    pub fpr95: f64,
    pub ece: f64,
    pub miou: f64,
    pub variance_mean: f64,
    pub mi_mean: f64,
    pub positives: u64,
    pub negatives: u64,
    pub evaluated_pixels: u64,
    pub model_id: String,
    pub split_id: String,
    pub scoring_fn: String,
    pub head_set: String,
}

impl EvalReport {
    /// Flat `key=value` text block.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("model={}\n", self.model_id));
        s.push_str(&format!("split={}\n", self.split_id));
        s.push_str(&format!("scoring_fn={}\n", self.scoring_fn));
        s.push_str(&format!("head_set={}\n", self.head_set));
        s.push_str(&format!("aupr={:.9}\n", self.aupr));
        s.push_str(&format!("fpr95={:.9}\n", self.fpr95));
        s.push_str(&format!("ece={:.9}\n", self.ece));
        s.push_str(&format!("miou={:.9}\n", self.miou));
        s.push_str(&format!("variance_mean={:.9}\n", self.variance_mean));
        s.push_str(&format!("mi_mean={:.9}\n", self.mi_mean));
        s.push_str(&format!("positives={}\n", self.positives));
        s.push_str(&format!("negatives={}\n", self.negatives));
        s.push_str(&format!("evaluated_pixels={}\n", self.evaluated_pixels));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    // ----- brute-force oracles (independent of the implementation) --------

    /// All-thresholds oracle: for every distinct score value as threshold,
    /// count tp/fp from scratch with a full pass.
    pub(crate) fn aupr_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for &t in &thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (&s, &l) in scores.iter().zip(labels.iter()) {
                if s >= t {
                    if l {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            let recall = tp / pos;
            let precision = tp / (tp + fp);
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        area
    }

    pub(crate) fn fpr95_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let neg = labels.len() as f64 - pos;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        for &t in &thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (&s, &l) in scores.iter().zip(labels.iter()) {
                if s >= t {
                    if l {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            if tp / pos >= 0.95 {
                return fp / neg;
            }
        }
        1.0
    }

    #[test]
    fn perfect_separation_gives_aupr_one_fpr_zero() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let labels = [true, true, false, false];
        assert!((aupr(&scores, &labels).unwrap() - 1.0).abs() < 1e-12);
        assert!((fpr_at_95_tpr(&scores, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn all_equal_scores_give_prevalence() {
        let scores = [0.5; 10];
        let mut labels = [false; 10];
        labels[0] = true;
        labels[1] = true;
        labels[2] = true;
        let expected = aupr_oracle(&scores, &labels);
        assert!((expected - 0.3).abs() < 1e-12); // one operating point at prevalence
        assert!((aupr(&scores, &labels).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn anticorrelated_scores_give_fpr_one() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [true, true, false, false];
        assert!((fpr_at_95_tpr(&scores, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn four_point_case_matches_oracle() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let labels = [true, false, true, false];
        let expected = aupr_oracle(&scores, &labels);
        // thresholds: .9 -> P=1,R=.5 | .8 -> P=.5,R=.5 | .3 -> P=2/3,R=1 | .1
        let hand = 0.5 * 1.0 + 0.0 * 0.5 + 0.5 * (2.0 / 3.0);
        assert!((expected - hand).abs() < 1e-12);
        assert!((aupr(&scores, &labels).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn thousand_random_instances_match_oracle_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(20_000);
        for trial in 0..1000 {
            let n = rng.random_range(2..=128);
            // Random tie patterns: draw from a small value alphabet often.
            let alphabet = rng.random_range(2..=12);
            let mut scores = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let v: f64 = if rng.random_bool(0.5) {
                    (rng.random_range(0..alphabet) as f64) / alphabet as f64
                } else {
                    rng.random()
                };
                scores.push(v);
                labels.push(rng.random_bool(0.4));
            }
            if !labels.iter().any(|&l| l) {
                labels[0] = true;
            }
            if labels.iter().all(|&l| l) {
                labels[0] = false;
            }
            let a = aupr(&scores, &labels).unwrap();
            let b = aupr_oracle(&scores, &labels);
            assert!((a - b).abs() < 1e-9, "trial {trial}: aupr {a} vs oracle {b}");
            let f = fpr_at_95_tpr(&scores, &labels).unwrap();
            let g = fpr95_oracle(&scores, &labels);
            assert!((f - g).abs() < 1e-9, "trial {trial}: fpr {f} vs oracle {g}");
        }
    }

    #[test]
    fn monotone_transform_leaves_metrics_unchanged() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(4..=64);
            let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            if !labels.iter().any(|&l| l) {
                labels[0] = true;
            }
            if labels.iter().all(|&l| l) {
                labels[0] = false;
            }
            let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp() + 1.0).collect();
            assert!(
                (aupr(&scores, &labels).unwrap() - aupr(&transformed, &labels).unwrap()).abs()
                    < 1e-12
            );
            assert!(
                (fpr_at_95_tpr(&scores, &labels).unwrap()
                    - fpr_at_95_tpr(&transformed, &labels).unwrap())
                .abs()
                    < 1e-12
            );
        }
    }

    #[test]
    fn shuffled_labels_average_to_prevalence() {
        // AP under a random ranking is biased slightly above prevalence for
        // finite samples, so the check uses the spread of the trials as
        // sigma rather than the standard error of the mean.
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let n = 400;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let prevalence = 0.2;
        let n_pos = (n as f64 * prevalence) as usize;
        let mut auprs = Vec::new();
        for _ in 0..200 {
            let mut labels = vec![false; n];
            // uniform shuffle of the positive positions
            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            for &i in idx.iter().take(n_pos) {
                labels[i] = true;
            }
            auprs.push(aupr(&scores, &labels).unwrap());
        }
        let mean = auprs.iter().sum::<f64>() / auprs.len() as f64;
        let var = auprs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (auprs.len() - 1) as f64;
        let sigma = var.sqrt();
        assert!(
            (mean - prevalence).abs() <= 3.0 * sigma,
            "mean {mean} vs prevalence {prevalence} (sigma {sigma})"
        );
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        assert!(aupr(&[], &[]).is_err());
        assert!(aupr(&[0.1, 0.2], &[false, false]).is_err());
        assert!(fpr_at_95_tpr(&[0.1, 0.2], &[true, true]).is_err());
        assert!(aupr(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn histogram_path_tracks_exact_path() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 2000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<bool> = scores.iter().map(|&s| rng.random_bool(0.2 + 0.6 * s)).collect();
        let exact = aupr(&scores, &labels).unwrap();
        let (groups, pos, neg) = histogram_groups(&scores, &labels);
        let binned = aupr_from_groups(&groups, pos);
        assert!((exact - binned).abs() < 1e-3, "exact {exact} binned {binned}");
        let exact_f = fpr_at_95_tpr(&scores, &labels).unwrap();
        let binned_f = fpr95_from_groups(&groups, pos, neg);
        assert!((exact_f - binned_f).abs() < 1e-3);
    }

    // ----- ECE -------------------------------------------------------------

    #[test]
    fn perfectly_calibrated_confident_predictions_have_zero_ece() {
        let conf = vec![1.0; 100];
        let correct = vec![true; 100];
        assert!(ece(&conf, &correct, 15).unwrap() < 1e-12);
    }

    #[test]
    fn single_bin_gap_is_exact() {
        // all confidence .8, accuracy .6 -> ECE = 0.2 exactly
        let conf = vec![0.8; 10];
        let correct: Vec<bool> = (0..10).map(|i| i < 6).collect();
        let e = ece(&conf, &correct, 15).unwrap();
        assert!((e - 0.2).abs() < 1e-15, "ece={e}");
    }

    #[test]
    fn constructed_bins_match_hand_computed_sum() {
        // bin A: conf .95 (x4), acc .75 -> gap .2, mass 4/10
        // bin B: conf .55 (x6), acc .5  -> gap .05, mass 6/10
        let conf = [vec![0.95; 4], vec![0.55; 6]].concat();
        let correct = [vec![true, true, true, false], vec![true, true, true, false, false, false]]
            .concat();
        let hand = 0.4 * 0.2 + 0.6 * 0.05;
        let e = ece(&conf, &correct, 10).unwrap();
        assert!((e - hand).abs() < 1e-12, "ece={e} hand={hand}");
    }

    #[test]
    fn adding_calibrated_mass_scales_ece() {
        let conf = vec![0.8; 8];
        let correct: Vec<bool> = (0..8).map(|i| i % 2 == 0).collect(); // acc .5, gap .3
        let base = ece(&conf, &correct, 10).unwrap();
        // add mass m = 1/3 of perfectly calibrated samples in another bin:
        // conf .25, accuracy .25 (1 of 4 correct)
        let conf2 = [conf.clone(), vec![0.25; 4]].concat();
        let correct2 = [correct.clone(), vec![true, false, false, false]].concat();
        let grown = ece(&conf2, &correct2, 10).unwrap();
        let m = 4.0 / 12.0;
        assert!(
            (grown - base * (1.0 - m)).abs() < 1e-12,
            "grown={grown} base={base}"
        );
    }

    #[test]
    fn ece_stays_in_unit_interval() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..=200);
            let conf: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let correct: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let e = ece(&conf, &correct, 15).unwrap();
            assert!((0.0..=1.0).contains(&e));
        }
    }

    // ----- mIoU --------------------------------------------------------------

    #[test]
    fn identical_masks_have_miou_one() {
        let m = array![[0u8, 1], [2, 1]];
        assert!((miou(&m, &m, 3, 255, None).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_single_class_masks_have_miou_zero() {
        let pred = array![[1u8, 1], [0, 0]];
        let gt = array![[0u8, 0], [1, 1]];
        assert!(miou(&pred, &gt, 2, 255, None).unwrap().abs() < 1e-12);
    }

    #[test]
    fn two_by_two_overlap_case() {
        // pred: class 1 on left column; gt: class 1 on top row.
        // class 1: intersection 1, union 3 -> IoU 1/3
        let pred = array![[1u8, 0], [1, 0]];
        let gt = array![[1u8, 1], [0, 0]];
        let v = miou(&pred, &gt, 2, 255, Some(&[1])).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ignore_index_pixels_are_excluded() {
        let pred = array![[1u8, 0], [1, 0]];
        let mut gt = array![[1u8, 1], [0, 0]];
        gt[[0, 1]] = 255;
        // class 1: intersection 1, union 2 -> 0.5 ; class 0: inter 1, union 2 -> 0.5
        let v = miou(&pred, &gt, 2, 255, None).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_skipped() {
        let pred = array![[0u8, 0]];
        let gt = array![[0u8, 0]];
        // class 1 absent everywhere; mean over class 0 only
        let v = miou(&pred, &gt, 2, 255, None).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
            (2usize..=96, 0u64..10_000).prop_map(|(n, seed)| {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                let scores: Vec<f64> = (0..n)
                    .map(|_| {
                        if rng.random_bool(0.4) {
                            rng.random_range(0..6) as f64 / 6.0 // tie-heavy
                        } else {
                            rng.random()
                        }
                    })
                    .collect();
                let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
                if !labels.iter().any(|&l| l) {
                    labels[0] = true;
                }
                if labels.iter().all(|&l| l) {
                    labels[0] = false;
                }
                (scores, labels)
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn ranking_metrics_match_the_oracle((scores, labels) in arb_scored()) {
                prop_assert!((aupr(&scores, &labels).unwrap() - aupr_oracle(&scores, &labels)).abs() < 1e-9);
                prop_assert!((fpr_at_95_tpr(&scores, &labels).unwrap() - fpr95_oracle(&scores, &labels)).abs() < 1e-9);
            }

            #[test]
            fn monotone_transforms_preserve_ranking_metrics((scores, labels) in arb_scored()) {
                let t: Vec<f64> = scores.iter().map(|&s| (2.0 * s).exp() - 0.5).collect();
                prop_assert!((aupr(&scores, &labels).unwrap() - aupr(&t, &labels).unwrap()).abs() < 1e-12);
                prop_assert!(
                    (fpr_at_95_tpr(&scores, &labels).unwrap() - fpr_at_95_tpr(&t, &labels).unwrap()).abs() < 1e-12
                );
            }

            #[test]
            fn ece_stays_in_unit_interval_prop(seed in 0u64..5_000, n in 1usize..128) {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                let conf: Vec<f64> = (0..n).map(|_| rng.random()).collect();
                let correct: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
                let e = ece(&conf, &correct, 15).unwrap();
                prop_assert!((0.0..=1.0).contains(&e));
            }
        }
    }

    #[test]
    fn accumulator_merge_is_order_independent() {
        let p1 = array![[0u8, 1]];
        let g1 = array![[0u8, 0]];
        let p2 = array![[1u8, 1]];
        let g2 = array![[1u8, 0]];
        let mut a = MiouAccumulator::new(2, 255);
        a.update(&p1, &g1);
        a.update(&p2, &g2);
        let mut b1 = MiouAccumulator::new(2, 255);
        b1.update(&p2, &g2);
        let mut b2 = MiouAccumulator::new(2, 255);
        b2.update(&p1, &g1);
        b1.merge(&b2);
        assert_eq!(a.intersection, b1.intersection);
        assert_eq!(a.union, b1.union);
    }
}
