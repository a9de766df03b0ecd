//! Python bindings: the pyramid model, scoring functions, detection
//! metrics, and the synthetic dataset generator, all over numpy arrays.

use ndarray::{Array2, Array3, Array4};
use numpy::{
    IntoPyArray, PyArray2, PyArray3, PyArray4, PyReadonlyArray1, PyReadonlyArray2,
    PyReadonlyArray3, PyReadonlyArray4,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use moose_core::data::{self, SceneConfig, Split};
use moose_core::evaluate::{evaluate as core_evaluate, StackForward};
use moose_core::metrics;
use moose_core::model::{LogitStack, ParamGroup, ProbeConfig, PyramidConfig, PyramidModel};
use moose_core::scoring::{self, HeadSet, ScoringFn};
use moose_core::train::{train_probes, train_segmentation, TrainConfig};

fn err(e: moose_core::MooseError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_heads(heads: &str) -> PyResult<HeadSet> {
    HeadSet::parse(heads).map_err(err)
}

fn parse_score(score: &str) -> PyResult<ScoringFn> {
    ScoringFn::parse(score).map_err(err)
}

fn stack_from_numpy(logits: PyReadonlyArray4<f32>, has_global: bool) -> PyResult<LogitStack> {
    let data: Array4<f32> = logits.as_array().as_standard_layout().into_owned();
    Ok(LogitStack::new(data, has_global))
}

/// The spatial-pyramid segmentation model with contextual probe heads.
#[pyclass(name = "PyramidModel")]
struct PyModel {
    inner: PyramidModel,
}

#[pymethods]
impl PyModel {
    /// Build with deterministic seed-derived initialization.
    #[staticmethod]
    #[pyo3(signature = (num_classes, branch_dilations, seed, encoder_channels=64,
                        branch_channels=32, include_global_pool_branch=true,
                        output_stride=8, probe_depth=1, projection_channels=32))]
    #[allow(clippy::too_many_arguments)]
    fn build(
        num_classes: usize,
        branch_dilations: Vec<usize>,
        seed: u64,
        encoder_channels: usize,
        branch_channels: usize,
        include_global_pool_branch: bool,
        output_stride: usize,
        probe_depth: usize,
        projection_channels: usize,
    ) -> PyResult<Self> {
        let pcfg = PyramidConfig {
            num_classes,
            encoder_channels,
            branch_dilations,
            branch_channels,
            include_global_pool_branch,
            output_stride,
        };
        let hcfg = ProbeConfig {
            depth: probe_depth,
            projection_channels,
        };
        let inner = moose_core::build_model(&pcfg, &hcfg, seed).map_err(err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = moose_core::checkpoint::load_model(std::path::Path::new(path)).map_err(err)?;
        Ok(PyModel { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        moose_core::checkpoint::save_model(&self.inner, std::path::Path::new(path)).map_err(err)
    }

    /// All-head logits for one image `[3, H, W]` -> `[K+1, N, H, W]`.
    fn forward_all<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f32>,
    ) -> PyResult<Bound<'py, PyArray4<f32>>> {
        let img: Array3<f32> = image.as_array().as_standard_layout().into_owned();
        let stack = self.inner.forward_all(&img).map_err(err)?;
        Ok(stack.data.into_pyarray(py))
    }

    /// Global-head logits `[N, H, W]`.
    fn forward_global<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f32>,
    ) -> PyResult<Bound<'py, PyArray3<f32>>> {
        let img: Array3<f32> = image.as_array().as_standard_layout().into_owned();
        let z = self.inner.forward_global(&img).map_err(err)?;
        Ok(z.into_pyarray(py))
    }

    /// Train the base model then the probes on a generated dataset dir.
    #[pyo3(signature = (data_dir, epochs=16, probe_epochs=20, learning_rate=0.01,
                        batch_size=8, seed=1))]
    fn train_on_dataset(
        &mut self,
        data_dir: &str,
        epochs: usize,
        probe_epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<()> {
        let ds = data::Dataset::open(std::path::Path::new(data_dir)).map_err(err)?;
        let train = ds.load_split(Split::Train).map_err(err)?;
        let val = ds.load_split(Split::Val).map_err(err)?;
        let base_cfg = TrainConfig {
            epochs,
            learning_rate,
            batch_size,
            seed,
            ..TrainConfig::default()
        };
        let probe_cfg = TrainConfig {
            epochs: probe_epochs,
            ..base_cfg.clone()
        };
        train_segmentation(&mut self.inner, &train, &val, &base_cfg).map_err(err)?;
        train_probes(&mut self.inner, &train, &val, &probe_cfg).map_err(err)?;
        Ok(())
    }

    /// Evaluate on a dataset's test split; returns a dict of metrics.
    #[pyo3(signature = (data_dir, score="h", heads="all"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data_dir: &str,
        score: &str,
        heads: &str,
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let ds = data::Dataset::open(std::path::Path::new(data_dir)).map_err(err)?;
        let test = ds.load_split(Split::Test).map_err(err)?;
        let report = core_evaluate(
            &self.inner,
            &test,
            parse_score(score)?,
            &parse_heads(heads)?,
            ds.num_classes,
            "py",
            "test",
        )
        .map_err(err)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("aupr", report.aupr)?;
        d.set_item("fpr95", report.fpr95)?;
        d.set_item("ece", report.ece)?;
        d.set_item("miou", report.miou)?;
        d.set_item("variance_mean", report.variance_mean)?;
        d.set_item("mi_mean", report.mi_mean)?;
        Ok(d)
    }

    fn param_count(&self, group: &str) -> PyResult<usize> {
        let g = match group {
            "all" => ParamGroup::All,
            "probes" => ParamGroup::Probes,
            "non_probe" => ParamGroup::NonProbe,
            other => return Err(PyValueError::new_err(format!("unknown group '{other}'"))),
        };
        Ok(self.inner.param_count(g))
    }

    fn digest(&self, group: &str) -> PyResult<String> {
        let g = match group {
            "all" => ParamGroup::All,
            "probes" => ParamGroup::Probes,
            "non_probe" => ParamGroup::NonProbe,
            other => return Err(PyValueError::new_err(format!("unknown group '{other}'"))),
        };
        Ok(self.inner.digest(g))
    }

    #[getter]
    fn num_heads(&self) -> usize {
        1 + self.inner.probes.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.pcfg.num_classes
    }

    #[getter]
    fn branch_dilations(&self) -> Vec<usize> {
        self.inner.pcfg.branch_dilations.clone()
    }
}

// -- scoring ----------------------------------------------------------------

/// Numerically stabilized per-head softmax of `[M, N, H, W]` logits.
#[pyfunction]
fn softmax_per_head<'py>(
    py: Python<'py>,
    logits: PyReadonlyArray4<'py, f32>,
) -> PyResult<Bound<'py, PyArray4<f32>>> {
    let stack = stack_from_numpy(logits, true)?;
    let probs = scoring::softmax_per_head(&stack).map_err(err)?;
    Ok(probs.into_pyarray(py))
}

/// Anomaly score map for one stack: `score` in {"msp","h","ml"},
/// `heads` in {"global","all"}.
#[pyfunction]
#[pyo3(signature = (logits, score, heads="all", has_global=true))]
fn score_map<'py>(
    py: Python<'py>,
    logits: PyReadonlyArray4<'py, f32>,
    score: &str,
    heads: &str,
    has_global: bool,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let stack = stack_from_numpy(logits, has_global)?;
    let map = scoring::score(&stack, parse_score(score)?, &parse_heads(heads)?).map_err(err)?;
    Ok(map.values.into_pyarray(py))
}

/// Mutual information map: entropy of the mean distribution minus the mean
/// per-head entropy.
#[pyfunction]
#[pyo3(signature = (logits, heads="all", has_global=true))]
fn mutual_information<'py>(
    py: Python<'py>,
    logits: PyReadonlyArray4<'py, f32>,
    heads: &str,
    has_global: bool,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let stack = stack_from_numpy(logits, has_global)?;
    let mi = scoring::mutual_information(&stack, &parse_heads(heads)?).map_err(err)?;
    Ok(mi.into_pyarray(py))
}

/// Across-head variance of class probabilities, class-averaged, x100.
#[pyfunction]
#[pyo3(signature = (logits, heads="all", has_global=true))]
fn prediction_variance<'py>(
    py: Python<'py>,
    logits: PyReadonlyArray4<'py, f32>,
    heads: &str,
    has_global: bool,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let stack = stack_from_numpy(logits, has_global)?;
    let v = scoring::prediction_variance(&stack, &parse_heads(heads)?).map_err(err)?;
    Ok(v.into_pyarray(py))
}

// -- metrics ------------------------------------------------------------------

/// Area under the precision-recall step curve (anomalies = positives).
#[pyfunction]
fn aupr(scores: PyReadonlyArray1<f64>, labels: PyReadonlyArray1<bool>) -> PyResult<f64> {
    let s = scores.as_slice()?;
    let l = labels.as_slice()?;
    metrics::aupr(s, l).map_err(err)
}

/// False-positive rate at 95% true-positive rate, no interpolation.
#[pyfunction]
fn fpr_at_95_tpr(scores: PyReadonlyArray1<f64>, labels: PyReadonlyArray1<bool>) -> PyResult<f64> {
    let s = scores.as_slice()?;
    let l = labels.as_slice()?;
    metrics::fpr_at_95_tpr(s, l).map_err(err)
}

/// Binned expected calibration error.
#[pyfunction]
#[pyo3(signature = (confidences, correctness, num_bins=15))]
fn ece(
    confidences: PyReadonlyArray1<f64>,
    correctness: PyReadonlyArray1<bool>,
    num_bins: usize,
) -> PyResult<f64> {
    metrics::ece(confidences.as_slice()?, correctness.as_slice()?, num_bins).map_err(err)
}

/// Mean IoU between two label masks.
#[pyfunction]
#[pyo3(signature = (pred, gt, num_classes, ignore_index=255, class_subset=None))]
fn miou(
    pred: PyReadonlyArray2<u8>,
    gt: PyReadonlyArray2<u8>,
    num_classes: usize,
    ignore_index: u8,
    class_subset: Option<Vec<usize>>,
) -> PyResult<f64> {
    let p: Array2<u8> = pred.as_array().as_standard_layout().into_owned();
    let g: Array2<u8> = gt.as_array().as_standard_layout().into_owned();
    metrics::miou(&p, &g, num_classes, ignore_index, class_subset.as_deref()).map_err(err)
}

// -- data ---------------------------------------------------------------------

fn scene_cfg(image_size: usize, seed: u64) -> SceneConfig {
    SceneConfig {
        image_size,
        seed,
        ..SceneConfig::default()
    }
}

/// Generate one deterministic scene; returns (image, labels, anomaly).
#[pyfunction]
#[pyo3(signature = (index, split="train", image_size=128, seed=7))]
fn generate_scene<'py>(
    py: Python<'py>,
    index: usize,
    split: &str,
    image_size: usize,
    seed: u64,
) -> PyResult<(
    Bound<'py, PyArray3<f32>>,
    Bound<'py, PyArray2<u8>>,
    Bound<'py, PyArray2<u8>>,
)> {
    let cfg = scene_cfg(image_size, seed);
    let s = data::generate_scene(&cfg, index, Split::parse(split).map_err(err)?).map_err(err)?;
    Ok((
        s.image.into_pyarray(py),
        s.labels.into_pyarray(py),
        s.anomaly.into_pyarray(py),
    ))
}

/// Write a full dataset (train/val/test + manifest) to `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, image_size=128, train_scenes=300, val_scenes=60,
                    test_scenes=80, seed=7))]
fn generate_dataset(
    out_dir: &str,
    image_size: usize,
    train_scenes: usize,
    val_scenes: usize,
    test_scenes: usize,
    seed: u64,
) -> PyResult<usize> {
    let cfg = SceneConfig {
        image_size,
        train_scenes,
        val_scenes,
        test_scenes,
        seed,
        ..SceneConfig::default()
    };
    data::generate_split(&cfg, std::path::Path::new(out_dir)).map_err(err)?;
    Ok(cfg.num_classes())
}

/// Blend the pixels of the listed classes with uniform noise.
#[pyfunction]
#[pyo3(signature = (image, labels, classes, noise_level, num_classes, seed=0))]
fn corrupt_foreground<'py>(
    py: Python<'py>,
    image: PyReadonlyArray3<'py, f32>,
    labels: PyReadonlyArray2<'py, u8>,
    classes: Vec<usize>,
    noise_level: f64,
    num_classes: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyArray3<f32>>> {
    let scene = data::LabeledScene {
        image: image.as_array().as_standard_layout().into_owned(),
        labels: labels.as_array().as_standard_layout().into_owned(),
        anomaly: Array2::zeros(labels.as_array().dim()),
    };
    let out =
        data::corrupt_foreground(&scene, &classes, noise_level, num_classes, seed).map_err(err)?;
    Ok(out.image.into_pyarray(py))
}

/// Member-averaged logits of an ensemble checkpoint for one image.
#[pyfunction]
fn ensemble_forward<'py>(
    py: Python<'py>,
    path: &str,
    image: PyReadonlyArray3<'py, f32>,
) -> PyResult<Bound<'py, PyArray4<f32>>> {
    let ens = moose_core::ensemble::load_ensemble(std::path::Path::new(path)).map_err(err)?;
    let img: Array3<f32> = image.as_array().as_standard_layout().into_owned();
    let stack = ens.stack(&img).map_err(err)?;
    Ok(stack.data.into_pyarray(py))
}

#[pymodule]
fn moose_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(softmax_per_head, m)?)?;
    m.add_function(wrap_pyfunction!(score_map, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(prediction_variance, m)?)?;
    m.add_function(wrap_pyfunction!(aupr, m)?)?;
    m.add_function(wrap_pyfunction!(fpr_at_95_tpr, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt_foreground, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_forward, m)?)?;
    m.add("IGNORE_INDEX", data::IGNORE_INDEX)?;
    Ok(())
}
