//! Scripted analyses with machine-readable outputs: prediction diversity
//! (variance / mutual information / calibration) across methods, foreground
//! corruption robustness per head, and the single-dilation ablation.

use rayon::prelude::*;

use crate::data::{corrupt_foreground, LabeledScene, IGNORE_INDEX};
use crate::ensemble::EnsembleModel;
use crate::error::{MooseError, Result};
use crate::evaluate::{evaluate_multi, per_head_predictions, EvalRequest};
use crate::metrics::{ece, MiouAccumulator, ECE_DEFAULT_BINS};
use crate::model::{
    build_model, build_model_single_dilation, ProbeConfig, PyramidConfig, PyramidModel,
};
use crate::scoring::{
    mutual_information, prediction_variance, softmax_per_head, HeadSet, ScoringFn,
};
use crate::train::{train_probes, train_segmentation, TrainConfig};

/// Which pixels enter the diversity means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiversityPixels {
    /// Every evaluated pixel (the default).
    All,
    /// Only pixels marked anomalous.
    AnomalousOnly,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiversityRow {
    pub method: String,
    /// None for single-prediction methods (no across-head spread exists).
    pub variance_mean: Option<f64>,
    pub mi_mean: Option<f64>,
    pub ece: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiversityReport {
    pub rows: Vec<DiversityRow>,
    pub pixels: String,
}

impl DiversityReport {
    pub fn to_kv(&self) -> String {
        let mut s = format!("report=diversity-v1\npixels={}\n", self.pixels);
        for r in &self.rows {
            let var = r.variance_mean.map_or("-".into(), |v| format!("{v:.6}"));
            let mi = r.mi_mean.map_or("-".into(), |v| format!("{v:.6}"));
            s.push_str(&format!(
                "method={} variance={} mi={} ece={:.6}\n",
                r.method, var, mi, r.ece
            ));
        }
        s
    }

    pub fn row(&self, method: &str) -> Option<&DiversityRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

struct DiversityAccum {
    var_sum: f64,
    mi_sum: f64,
    count: u64,
    confidences: Vec<f64>,
    correct: Vec<bool>,
}

fn diversity_for<F>(
    scenes: &[LabeledScene],
    pixels: DiversityPixels,
    forward: F,
) -> Result<(Option<f64>, Option<f64>, f64)>
where
    F: Fn(&LabeledScene) -> Result<crate::model::LogitStack> + Sync,
{
    let partials: Vec<Result<DiversityAccum>> = scenes
        .par_iter()
        .map(|scene| {
            let stack = forward(scene)?;
            let probs = softmax_per_head(&stack)?;
            let multi = stack.num_heads() >= 2;
            let (h, w) = (stack.height(), stack.width());
            let mut acc = DiversityAccum {
                var_sum: 0.0,
                mi_sum: 0.0,
                count: 0,
                confidences: Vec::new(),
                correct: Vec::new(),
            };
            let var = if multi {
                Some(prediction_variance(&stack, &HeadSet::AllHeads)?)
            } else {
                None
            };
            let mi = if multi {
                Some(mutual_information(&stack, &HeadSet::AllHeads)?)
            } else {
                None
            };
            let n = stack.num_classes();
            let heads = stack.num_heads();
            let inv = 1.0 / heads as f64;
            for iy in 0..h {
                for ix in 0..w {
                    let anomalous = scene.anomaly[[iy, ix]] == 1;
                    let counted = match pixels {
                        DiversityPixels::All => true,
                        DiversityPixels::AnomalousOnly => anomalous,
                    };
                    if counted {
                        if let (Some(v), Some(m)) = (&var, &mi) {
                            acc.var_sum += v[[iy, ix]];
                            acc.mi_sum += m[[iy, ix]];
                        }
                        acc.count += 1;
                    }
                    // calibration over non-anomalous pixels, mean prediction
                    if scene.labels[[iy, ix]] != IGNORE_INDEX {
                        let mut best = (0usize, f64::NEG_INFINITY);
                        for c in 0..n {
                            let mut p = 0.0;
                            for hi in 0..heads {
                                p += probs[[hi, c, iy, ix]] as f64;
                            }
                            p *= inv;
                            if p > best.1 {
                                best = (c, p);
                            }
                        }
                        acc.confidences.push(best.1.clamp(0.0, 1.0));
                        acc.correct.push(best.0 as u8 == scene.labels[[iy, ix]]);
                    }
                }
            }
            if !multi {
                acc.var_sum = f64::NAN;
            }
            Ok(acc)
        })
        .collect();

    let mut var_sum = 0.0;
    let mut mi_sum = 0.0;
    let mut count = 0u64;
    let mut confidences = Vec::new();
    let mut correct = Vec::new();
    let mut multi = true;
    for p in partials {
        let p = p?;
        if p.var_sum.is_nan() {
            multi = false;
        } else {
            var_sum += p.var_sum;
            mi_sum += p.mi_sum;
        }
        count += p.count;
        confidences.extend(p.confidences);
        correct.extend(p.correct);
    }
    let e = ece(&confidences, &correct, ECE_DEFAULT_BINS)?;
    if multi && count > 0 {
        Ok((
            Some(var_sum / count as f64),
            Some(mi_sum / count as f64),
            e,
        ))
    } else {
        Ok((None, None, e))
    }
}

/// Mean variance, mean mutual information, and ECE per method. The `global`
/// row evaluates the bare global head; `moose` evaluates all heads of the
/// same model; ensembles are included when given.
pub fn run_diversity_analysis(
    model: &PyramidModel,
    mh_ensemble: Option<&EnsembleModel>,
    deep_ensemble: Option<&EnsembleModel>,
    val_scenes: &[LabeledScene],
    pixels: DiversityPixels,
) -> Result<DiversityReport> {
    let mut rows = Vec::new();

    let (_, _, ece_g) = diversity_for(val_scenes, pixels, |s| {
        let stack = model.forward_all(&s.image)?;
        Ok(crate::model::LogitStack::new(
            stack.data.slice(ndarray::s![0..1, .., .., ..]).to_owned(),
            true,
        ))
    })?;
    rows.push(DiversityRow {
        method: "global".into(),
        variance_mean: None,
        mi_mean: None,
        ece: ece_g,
    });

    if let Some(mh) = mh_ensemble {
        let (v, m, e) = diversity_for(val_scenes, pixels, |s| mh.forward_members(&s.image))?;
        rows.push(DiversityRow {
            method: "mh_ensemble".into(),
            variance_mean: v,
            mi_mean: m,
            ece: e,
        });
    }
    if let Some(de) = deep_ensemble {
        let (v, m, e) = diversity_for(val_scenes, pixels, |s| de.forward_members(&s.image))?;
        rows.push(DiversityRow {
            method: "deep_ensemble".into(),
            variance_mean: v,
            mi_mean: m,
            ece: e,
        });
    }

    let (v, m, e) = diversity_for(val_scenes, pixels, |s| model.forward_all(&s.image))?;
    rows.push(DiversityRow {
        method: "moose".into(),
        variance_mean: v,
        mi_mean: m,
        ece: e,
    });

    Ok(DiversityReport {
        rows,
        pixels: match pixels {
            DiversityPixels::All => "all".into(),
            DiversityPixels::AnomalousOnly => "anomalous".into(),
        },
    })
}

// ---------------------------------------------------------------------------
// Foreground corruption
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CorruptionHead {
    /// "global" or "probe_c<dilation>".
    pub label: String,
    pub dilation: Option<usize>,
    pub miou_clean: f64,
    /// (noise level, retained mIoU = corrupt / clean) per level.
    pub retained: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CorruptionCurve {
    pub heads: Vec<CorruptionHead>,
    pub classes: Vec<usize>,
    pub noise_levels: Vec<f64>,
}

impl CorruptionCurve {
    pub fn to_kv(&self) -> String {
        let mut s = String::from("report=corruption-v1\n");
        s.push_str(&format!(
            "classes={}\n",
            self.classes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
        ));
        for h in &self.heads {
            s.push_str(&format!("head={} miou_clean={:.6}", h.label, h.miou_clean));
            for (lvl, r) in &h.retained {
                s.push_str(&format!(" retained@{lvl}={r:.6}"));
            }
            s.push('\n');
        }
        s
    }

    /// Probe heads only, ordered by dilation.
    pub fn probe_retained_at(&self, noise: f64) -> Vec<f64> {
        self.heads
            .iter()
            .filter(|h| h.dilation.is_some())
            .map(|h| {
                h.retained
                    .iter()
                    .find(|(l, _)| (*l - noise).abs() < 1e-12)
                    .map(|(_, r)| *r)
                    .unwrap_or(f64::NAN)
            })
            .collect()
    }
}

/// Foreground mIoU per head on corrupted inputs, relative to clean inputs.
/// Heads are evaluated on their own argmax predictions; the global head is
/// reported separately from the probes.
pub fn run_corruption_analysis(
    model: &PyramidModel,
    test_scenes: &[LabeledScene],
    classes: &[usize],
    noise_levels: &[f64],
    seed: u64,
) -> Result<CorruptionCurve> {
    if classes.is_empty() {
        return Err(MooseError::usage("empty corruption class set"));
    }
    let num_heads = 1 + model.probes.len();
    let n = model.pcfg.num_classes;

    // per noise level, per head: aggregated mIoU over the split
    let mut mious: Vec<Vec<f64>> = Vec::with_capacity(noise_levels.len());
    for (li, &level) in noise_levels.iter().enumerate() {
        let accs: Vec<Result<Vec<MiouAccumulator>>> = test_scenes
            .par_iter()
            .enumerate()
            .map(|(si, scene)| {
                let corrupted = corrupt_foreground(
                    scene,
                    classes,
                    level,
                    n,
                    seed ^ ((si as u64) << 8) ^ (li as u64),
                )?;
                let stack = model.forward_all(&corrupted.image)?;
                let preds = per_head_predictions(&stack);
                let mut accs: Vec<MiouAccumulator> = (0..num_heads)
                    .map(|_| MiouAccumulator::new(n, IGNORE_INDEX))
                    .collect();
                for (hi, pred) in preds.iter().enumerate() {
                    accs[hi].update(pred, &scene.labels);
                }
                Ok(accs)
            })
            .collect();
        let mut merged: Vec<MiouAccumulator> = (0..num_heads)
            .map(|_| MiouAccumulator::new(n, IGNORE_INDEX))
            .collect();
        for a in accs {
            let a = a?;
            for (m, p) in merged.iter_mut().zip(a.iter()) {
                m.merge(p);
            }
        }
        mious.push(
            merged
                .iter()
                .map(|m| m.value(Some(classes)))
                .collect::<Result<Vec<f64>>>()?,
        );
    }

    // clean reference: noise level 0 if present, else computed separately
    let clean: Vec<f64> = if let Some(zi) = noise_levels.iter().position(|&l| l == 0.0) {
        mious[zi].clone()
    } else {
        let mut with_zero = noise_levels.to_vec();
        with_zero.insert(0, 0.0);
        let curve = run_corruption_analysis(model, test_scenes, classes, &[0.0], seed)?;
        let mut out = vec![curve.heads[0].miou_clean];
        out.extend(curve.heads.iter().skip(1).map(|h| h.miou_clean));
        out
    };

    let mut heads = Vec::with_capacity(num_heads);
    for hi in 0..num_heads {
        let label = if hi == 0 {
            "global".to_string()
        } else {
            format!("probe_c{}", model.pcfg.branch_dilations[hi - 1])
        };
        let retained: Vec<(f64, f64)> = noise_levels
            .iter()
            .enumerate()
            .map(|(li, &lvl)| {
                // identical predictions retain exactly 1.0 even when the
                // clean mIoU is zero (untrained heads)
                let r = if mious[li][hi] == clean[hi] {
                    1.0
                } else {
                    mious[li][hi] / clean[hi]
                };
                (lvl, r)
            })
            .collect();
        heads.push(CorruptionHead {
            label,
            dilation: if hi == 0 {
                None
            } else {
                Some(model.pcfg.branch_dilations[hi - 1])
            },
            miou_clean: clean[hi],
            retained,
        });
    }
    Ok(CorruptionCurve {
        heads,
        classes: classes.to_vec(),
        noise_levels: noise_levels.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Single-dilation ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub dilations: Vec<usize>,
    pub variance_mean: f64,
    pub aupr_global: f64,
    pub aupr_probes: f64,
    pub change_abs: f64,
    pub change_rel: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub scoring_fn: String,
}

impl AblationTable {
    pub fn to_kv(&self) -> String {
        let mut s = format!("report=ablation-v1\nscoring_fn={}\n", self.scoring_fn);
        for r in &self.rows {
            s.push_str(&format!(
                "variant={} dilations={} variance={:.6} aupr_global={:.6} aupr_probes={:.6} change={:.6} change_rel={:.4}\n",
                r.label,
                r.dilations.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
                r.variance_mean,
                r.aupr_global,
                r.aupr_probes,
                r.change_abs,
                r.change_rel,
            ));
        }
        s
    }

    pub fn moose_row(&self) -> &AblationRow {
        self.rows.iter().find(|r| r.label == "moose").expect("moose row")
    }

    pub fn sd_rows(&self) -> Vec<&AblationRow> {
        self.rows.iter().filter(|r| r.label != "moose").collect()
    }
}

/// Data bundle for training-based analyses.
pub struct AblationData<'a> {
    pub train: &'a [LabeledScene],
    pub val: &'a [LabeledScene],
    pub test: &'a [LabeledScene],
}

/// Train one single-dilation variant per rate (all branches share the rate)
/// plus the standard multi-dilation model, then report prediction variance
/// and the AUPR gain of attaching the probes.
pub fn run_single_dilation_ablation(
    base_cfg: &PyramidConfig,
    hcfg: &ProbeConfig,
    data: &AblationData,
    rates: &[usize],
    base_tcfg: &TrainConfig,
    probe_tcfg: &TrainConfig,
    scoring_fn: ScoringFn,
    seed: u64,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &rate in rates {
        let model = build_model_single_dilation(base_cfg, hcfg, rate, seed)?;
        rows.push(ablation_row(
            model,
            format!("sd{rate}"),
            data,
            base_tcfg,
            probe_tcfg,
            scoring_fn,
        )?);
    }
    let model = build_model(base_cfg, hcfg, seed)?;
    rows.push(ablation_row(
        model,
        "moose".into(),
        data,
        base_tcfg,
        probe_tcfg,
        scoring_fn,
    )?);
    Ok(AblationTable {
        rows,
        scoring_fn: scoring_fn.tag().to_string(),
    })
}

fn ablation_row(
    mut model: PyramidModel,
    label: String,
    data: &AblationData,
    base_tcfg: &TrainConfig,
    probe_tcfg: &TrainConfig,
    scoring_fn: ScoringFn,
) -> Result<AblationRow> {
    train_segmentation(&mut model, data.train, data.val, base_tcfg)?;
    train_probes(&mut model, data.train, data.val, probe_tcfg)?;

    let reports = evaluate_multi(
        &model,
        data.test,
        &[
            EvalRequest {
                scoring_fn,
                head_set: HeadSet::GlobalOnly,
            },
            EvalRequest {
                scoring_fn,
                head_set: HeadSet::AllHeads,
            },
        ],
        model.pcfg.num_classes,
        &label,
        "test",
    )?;
    let aupr_global = reports[0].aupr;
    let aupr_probes = reports[1].aupr;

    // variance over the validation split, all heads
    let (var, _, _) = diversity_for(data.val, DiversityPixels::All, |s| {
        model.forward_all(&s.image)
    })?;
    let dilations = model.pcfg.branch_dilations.clone();
    Ok(AblationRow {
        label,
        dilations,
        variance_mean: var.unwrap_or(0.0),
        aupr_global,
        aupr_probes,
        change_abs: aupr_probes - aupr_global,
        change_rel: (aupr_probes - aupr_global) / aupr_global.max(1e-12),
    })
}
