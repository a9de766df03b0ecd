//! Streaming evaluation of a model (or ensemble) over a split: anomaly
//! detection metrics from score maps, calibration and segmentation quality
//! from the head-averaged prediction, and diversity means.

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;

use crate::data::{LabeledScene, IGNORE_INDEX};
use crate::error::Result;
use crate::metrics::{
    aupr, ece, fpr_at_95_tpr, EvalReport, MiouAccumulator, ECE_DEFAULT_BINS,
};
use crate::model::{LogitStack, PyramidModel};
use crate::scoring::{
    mutual_information, prediction_variance, score, softmax_per_head, HeadSet, ScoringFn,
};

/// Anything that turns an image into a stack of per-head logits.
pub trait StackForward: Sync {
    fn stack(&self, image: &Array3<f32>) -> Result<LogitStack>;
}

impl StackForward for PyramidModel {
    fn stack(&self, image: &Array3<f32>) -> Result<LogitStack> {
        self.forward_all(image)
    }
}

/// One (scoring fn, head set) evaluation request.
#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub scoring_fn: ScoringFn,
    pub head_set: HeadSet,
}

struct Partial {
    scores: Vec<Vec<f64>>, // per request
    labels: Vec<bool>,
    confidences: Vec<Vec<f64>>, // per request, non-anomalous pixels
    correct: Vec<Vec<bool>>,
    miou: Vec<MiouAccumulator>,
    var_sum: Vec<f64>,
    mi_sum: Vec<f64>,
    var_count: Vec<u64>,
}

/// Evaluate several (scoring fn, head set) pairs in a single pass over the
/// split: one forward per image, deterministic merge in image order.
pub fn evaluate_multi(
    fwd: &dyn StackForward,
    scenes: &[LabeledScene],
    requests: &[EvalRequest],
    num_classes: usize,
    model_id: &str,
    split_id: &str,
) -> Result<Vec<EvalReport>> {
    let partials: Vec<Result<Partial>> = scenes
        .par_iter()
        .map(|scene| evaluate_scene(fwd, scene, requests, num_classes))
        .collect();

    let nreq = requests.len();
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); nreq];
    let mut labels: Vec<bool> = Vec::new();
    let mut confidences: Vec<Vec<f64>> = vec![Vec::new(); nreq];
    let mut correct: Vec<Vec<bool>> = vec![Vec::new(); nreq];
    let mut mious: Vec<MiouAccumulator> =
        (0..nreq).map(|_| MiouAccumulator::new(num_classes, IGNORE_INDEX)).collect();
    let mut var_sum = vec![0.0f64; nreq];
    let mut mi_sum = vec![0.0f64; nreq];
    let mut var_count = vec![0u64; nreq];

    for partial in partials {
        let p = partial?;
        labels.extend(p.labels);
        for r in 0..nreq {
            scores[r].extend(&p.scores[r]);
            confidences[r].extend(&p.confidences[r]);
            correct[r].extend(&p.correct[r]);
            mious[r].merge(&p.miou[r]);
            var_sum[r] += p.var_sum[r];
            mi_sum[r] += p.mi_sum[r];
            var_count[r] += p.var_count[r];
        }
    }

    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;

    let mut reports = Vec::with_capacity(nreq);
    for (r, req) in requests.iter().enumerate() {
        reports.push(EvalReport {
            aupr: aupr(&scores[r], &labels)?,
            fpr95: fpr_at_95_tpr(&scores[r], &labels)?,
            ece: ece(&confidences[r], &correct[r], ECE_DEFAULT_BINS)?,
            miou: mious[r].value(None)?,
            variance_mean: var_sum[r] / var_count[r].max(1) as f64,
            mi_mean: mi_sum[r] / var_count[r].max(1) as f64,
            positives,
            negatives,
            evaluated_pixels: labels.len() as u64,
            model_id: model_id.to_string(),
            split_id: split_id.to_string(),
            scoring_fn: req.scoring_fn.tag().to_string(),
            head_set: req.head_set.tag(),
        });
    }
    Ok(reports)
}

/// Single-request wrapper.
pub fn evaluate(
    fwd: &dyn StackForward,
    scenes: &[LabeledScene],
    scoring_fn: ScoringFn,
    head_set: &HeadSet,
    num_classes: usize,
    model_id: &str,
    split_id: &str,
) -> Result<EvalReport> {
    let reports = evaluate_multi(
        fwd,
        scenes,
        &[EvalRequest {
            scoring_fn,
            head_set: head_set.clone(),
        }],
        num_classes,
        model_id,
        split_id,
    )?;
    Ok(reports.into_iter().next().unwrap())
}

fn evaluate_scene(
    fwd: &dyn StackForward,
    scene: &LabeledScene,
    requests: &[EvalRequest],
    num_classes: usize,
) -> Result<Partial> {
    let stack = fwd.stack(&scene.image)?;
    let probs = softmax_per_head(&stack)?;
    let (h, w) = (stack.height(), stack.width());
    let nreq = requests.len();

    let mut partial = Partial {
        scores: vec![Vec::with_capacity(h * w); nreq],
        labels: Vec::with_capacity(h * w),
        confidences: vec![Vec::new(); nreq],
        correct: vec![Vec::new(); nreq],
        miou: (0..nreq)
            .map(|_| MiouAccumulator::new(num_classes, IGNORE_INDEX))
            .collect(),
        var_sum: vec![0.0; nreq],
        mi_sum: vec![0.0; nreq],
        var_count: vec![0; nreq],
    };

    for iy in 0..h {
        for ix in 0..w {
            partial.labels.push(scene.anomaly[[iy, ix]] == 1);
        }
    }

    for (r, req) in requests.iter().enumerate() {
        let map = score(&stack, req.scoring_fn, &req.head_set)?;
        partial.scores[r].extend(map.values.iter());

        let idx = req.head_set.resolve(&stack)?;
        // head-averaged prediction: argmax + confidence of the mean dist
        let mut pred = Array2::<u8>::zeros((h, w));
        let inv = 1.0 / idx.len() as f64;
        for iy in 0..h {
            for ix in 0..w {
                let mut best = (0usize, f64::NEG_INFINITY);
                for c in 0..stack.num_classes() {
                    let mut m = 0.0;
                    for &hi in &idx {
                        m += probs[[hi, c, iy, ix]] as f64;
                    }
                    m *= inv;
                    if m > best.1 {
                        best = (c, m);
                    }
                }
                pred[[iy, ix]] = best.0 as u8;
                if scene.labels[[iy, ix]] != IGNORE_INDEX {
                    partial.confidences[r].push(best.1.clamp(0.0, 1.0));
                    partial.correct[r].push(best.0 as u8 == scene.labels[[iy, ix]]);
                }
            }
        }
        partial.miou[r].update(&pred, &scene.labels);

        // diversity means over all evaluated pixels
        if idx.len() >= 2 {
            let var = prediction_variance(&stack, &req.head_set)?;
            let mi = mutual_information(&stack, &req.head_set)?;
            partial.var_sum[r] += var.sum();
            partial.mi_sum[r] += mi.sum();
        }
        partial.var_count[r] += (h * w) as u64;
    }
    Ok(partial)
}

/// Per-head segmentation predictions (argmax of each slice), used by the
/// corruption analysis.
pub fn per_head_predictions(stack: &LogitStack) -> Vec<Array2<u8>> {
    (0..stack.num_heads())
        .map(|hi| crate::train::argmax_classes(&stack.data.index_axis(Axis(0), hi)))
        .collect()
}
