//! Flat sectioned `key = value` run configuration with dotted-path
//! overrides. Unknown sections or keys are rejected so typos fail loudly,
//! and the resolved config can be snapshotted back to text.

use std::collections::BTreeMap;

use crate::data::SceneConfig;
use crate::ensemble::EnsembleConfig;
use crate::error::{MooseError, Result};
use crate::model::{ProbeConfig, PyramidConfig};
use crate::scoring::{HeadSet, ScoringFn};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<FileConfig> {
        let mut cfg = FileConfig::default();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = name.trim().to_string();
                cfg.sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                MooseError::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            if current.is_empty() {
                return Err(MooseError::config(format!(
                    "line {}: key outside any [section]",
                    lineno + 1
                )));
            }
            cfg.sections
                .get_mut(&current)
                .unwrap()
                .insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<FileConfig> {
        FileConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Apply a `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| MooseError::usage(format!("override '{assignment}' is not key=value")))?;
        let (section, key) = path.trim().split_once('.').ok_or_else(|| {
            MooseError::usage(format!("override key '{path}' must be section.key"))
        })?;
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, kv) in &self.sections {
            s.push_str(&format!("[{name}]\n"));
            for (k, v) in kv {
                s.push_str(&format!("{k} = {v}\n"));
            }
            s.push('\n');
        }
        s
    }
}

/// One section with consumed-key tracking for unknown-key rejection.
struct SectionReader<'a> {
    name: &'a str,
    kv: BTreeMap<String, String>,
}

impl<'a> SectionReader<'a> {
    fn take(&mut self, key: &str) -> Option<String> {
        self.kv.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse::<T>().map_err(|_| {
                MooseError::config(format!("[{}] {key}: bad value '{v}'", self.name))
            }),
        }
    }

    fn parse_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(MooseError::config(format!(
                    "[{}] {key}: expected bool, got '{v}'",
                    self.name
                ))),
            },
        }
    }

    fn parse_list<T: std::str::FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|t| t.trim().parse::<T>())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map_err(|_| MooseError::config(format!("[{}] {key}: bad list '{v}'", self.name))),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(k) = self.kv.keys().next() {
            return Err(MooseError::config(format!(
                "unknown key '[{}] {k}'",
                self.name
            )));
        }
        Ok(())
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: SceneConfig,
    pub model: PyramidConfig,
    pub probe: ProbeConfig,
    pub train_base: TrainConfig,
    pub train_probe: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub noise_levels: Vec<f64>,
    pub sd_rates: Vec<usize>,
    pub diversity_over_anomalous_only: bool,
    pub outlier_exposure_weight: f64,
    pub oe_scenes: usize,
    pub eval_score: ScoringFn,
    pub eval_heads: HeadSet,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SceneConfig::default();
        let model = PyramidConfig {
            num_classes: data.num_classes(),
            ..PyramidConfig::default()
        };
        RunConfig {
            data,
            model,
            probe: ProbeConfig::default(),
            train_base: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            train_probe: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            ensemble: EnsembleConfig::default(),
            noise_levels: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            sd_rates: vec![1, 2, 4, 6],
            diversity_over_anomalous_only: false,
            outlier_exposure_weight: 0.0,
            oe_scenes: 0,
            eval_score: ScoringFn::Entropy,
            eval_heads: HeadSet::AllHeads,
        }
    }
}

impl RunConfig {
    /// Resolve a parsed file against the defaults, rejecting unknown keys.
    pub fn from_file(file: &FileConfig) -> Result<RunConfig> {
        let mut out = RunConfig::default();
        for (section, kv) in &file.sections {
            let mut r = SectionReader {
                name: section,
                kv: kv.clone(),
            };
            match section.as_str() {
                "data" => {
                    out.data.image_size = r.parse("image_size", out.data.image_size)?;
                    out.data.num_background_classes =
                        r.parse("background_classes", out.data.num_background_classes)?;
                    out.data.num_foreground_classes =
                        r.parse("foreground_classes", out.data.num_foreground_classes)?;
                    out.data.context_pair_count =
                        r.parse("context_pairs", out.data.context_pair_count)?;
                    out.data.objects_per_scene.0 =
                        r.parse("objects_min", out.data.objects_per_scene.0)?;
                    out.data.objects_per_scene.1 =
                        r.parse("objects_max", out.data.objects_per_scene.1)?;
                    out.data.noise_floor = r.parse("noise_floor", out.data.noise_floor)?;
                    out.data.train_scenes = r.parse("train_scenes", out.data.train_scenes)?;
                    out.data.val_scenes = r.parse("val_scenes", out.data.val_scenes)?;
                    out.data.test_scenes = r.parse("test_scenes", out.data.test_scenes)?;
                    out.data.anomaly_prevalence.0 =
                        r.parse("anomaly_min_frac", out.data.anomaly_prevalence.0)?;
                    out.data.anomaly_prevalence.1 =
                        r.parse("anomaly_max_frac", out.data.anomaly_prevalence.1)?;
                    out.data.seed = r.parse("seed", out.data.seed)?;
                }
                "model" => {
                    out.model.encoder_channels =
                        r.parse("encoder_channels", out.model.encoder_channels)?;
                    out.model.branch_channels =
                        r.parse("branch_channels", out.model.branch_channels)?;
                    out.model.branch_dilations =
                        r.parse_list("branch_dilations", out.model.branch_dilations.clone())?;
                    out.model.include_global_pool_branch =
                        r.parse_bool("global_pool", out.model.include_global_pool_branch)?;
                    out.model.output_stride = r.parse("output_stride", out.model.output_stride)?;
                }
                "probe" => {
                    out.probe.depth = r.parse("depth", out.probe.depth)?;
                    out.probe.projection_channels =
                        r.parse("projection_channels", out.probe.projection_channels)?;
                }
                "train" => {
                    out.train_base.epochs = r.parse("epochs", out.train_base.epochs)?;
                    out.train_probe.epochs = r.parse("probe_epochs", out.train_base.epochs)?;
                    out.train_base.learning_rate =
                        r.parse("learning_rate", out.train_base.learning_rate)?;
                    out.train_probe.learning_rate =
                        r.parse("probe_learning_rate", out.train_base.learning_rate)?;
                    out.train_base.batch_size = r.parse("batch_size", out.train_base.batch_size)?;
                    out.train_probe.batch_size = out.train_base.batch_size;
                    out.train_base.seed = r.parse("seed", out.train_base.seed)?;
                    out.train_probe.seed = out.train_base.seed ^ 0x9e3779b9;
                    let early = r.parse_bool("early_stop", out.train_base.early_stop_on_miou_plateau)?;
                    out.train_base.early_stop_on_miou_plateau = early;
                    out.train_probe.early_stop_on_miou_plateau = early;
                    out.outlier_exposure_weight =
                        r.parse("oe_weight", out.outlier_exposure_weight)?;
                    out.oe_scenes = r.parse("oe_scenes", out.oe_scenes)?;
                }
                "ensemble" => {
                    out.ensemble.num_members = r.parse("members", out.ensemble.num_members)?;
                    out.ensemble.bootstrap_fraction =
                        r.parse("bootstrap_fraction", out.ensemble.bootstrap_fraction)?;
                    out.ensemble.member_seeds =
                        r.parse_list("member_seeds", out.ensemble.member_seeds.clone())?;
                }
                "eval" => {
                    if let Some(v) = r.take("score") {
                        out.eval_score = ScoringFn::parse(&v)?;
                    }
                    if let Some(v) = r.take("heads") {
                        out.eval_heads = HeadSet::parse(&v)?;
                    }
                }
                "analysis" => {
                    out.noise_levels = r.parse_list("noise_levels", out.noise_levels.clone())?;
                    out.sd_rates = r.parse_list("sd_rates", out.sd_rates.clone())?;
                    if let Some(v) = r.take("diversity_pixels") {
                        out.diversity_over_anomalous_only = match v.as_str() {
                            "all" => false,
                            "anomalous" => true,
                            _ => {
                                return Err(MooseError::config(format!(
                                    "[analysis] diversity_pixels: '{v}'"
                                )))
                            }
                        };
                    }
                }
                other => {
                    return Err(MooseError::config(format!("unknown section '[{other}]'")));
                }
            }
            r.finish()?;
        }
        out.model.num_classes = out.data.num_classes();
        if out.ensemble.member_seeds.len() != out.ensemble.num_members {
            // derive the member seeds when only the count was configured
            out.ensemble.member_seeds =
                (0..out.ensemble.num_members).map(|i| 1001 + i as u64).collect();
        }
        out.data.validate()?;
        out.model.validate()?;
        out.probe.validate()?;
        Ok(out)
    }

    /// Render the fully resolved configuration back to sectioned text.
    pub fn to_text(&self) -> String {
        let mut f = FileConfig::default();
        let mut set = |s: &str, k: &str, v: String| {
            f.sections
                .entry(s.to_string())
                .or_default()
                .insert(k.to_string(), v);
        };
        set("data", "image_size", self.data.image_size.to_string());
        set(
            "data",
            "background_classes",
            self.data.num_background_classes.to_string(),
        );
        set(
            "data",
            "foreground_classes",
            self.data.num_foreground_classes.to_string(),
        );
        set("data", "context_pairs", self.data.context_pair_count.to_string());
        set("data", "objects_min", self.data.objects_per_scene.0.to_string());
        set("data", "objects_max", self.data.objects_per_scene.1.to_string());
        set("data", "noise_floor", self.data.noise_floor.to_string());
        set("data", "train_scenes", self.data.train_scenes.to_string());
        set("data", "val_scenes", self.data.val_scenes.to_string());
        set("data", "test_scenes", self.data.test_scenes.to_string());
        set(
            "data",
            "anomaly_min_frac",
            self.data.anomaly_prevalence.0.to_string(),
        );
        set(
            "data",
            "anomaly_max_frac",
            self.data.anomaly_prevalence.1.to_string(),
        );
        set("data", "seed", self.data.seed.to_string());
        set(
            "model",
            "encoder_channels",
            self.model.encoder_channels.to_string(),
        );
        set(
            "model",
            "branch_channels",
            self.model.branch_channels.to_string(),
        );
        set(
            "model",
            "branch_dilations",
            self.model
                .branch_dilations
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        set(
            "model",
            "global_pool",
            self.model.include_global_pool_branch.to_string(),
        );
        set("model", "output_stride", self.model.output_stride.to_string());
        set("probe", "depth", self.probe.depth.to_string());
        set(
            "probe",
            "projection_channels",
            self.probe.projection_channels.to_string(),
        );
        set("train", "epochs", self.train_base.epochs.to_string());
        set("train", "probe_epochs", self.train_probe.epochs.to_string());
        set(
            "train",
            "learning_rate",
            self.train_base.learning_rate.to_string(),
        );
        set(
            "train",
            "probe_learning_rate",
            self.train_probe.learning_rate.to_string(),
        );
        set("train", "batch_size", self.train_base.batch_size.to_string());
        set("train", "seed", self.train_base.seed.to_string());
        set(
            "train",
            "early_stop",
            self.train_base.early_stop_on_miou_plateau.to_string(),
        );
        set(
            "train",
            "oe_weight",
            self.outlier_exposure_weight.to_string(),
        );
        set("train", "oe_scenes", self.oe_scenes.to_string());
        set("ensemble", "members", self.ensemble.num_members.to_string());
        set(
            "ensemble",
            "bootstrap_fraction",
            self.ensemble.bootstrap_fraction.to_string(),
        );
        set(
            "ensemble",
            "member_seeds",
            self.ensemble
                .member_seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        set("eval", "score", self.eval_score.tag().to_string());
        set(
            "eval",
            "heads",
            match self.eval_heads {
                HeadSet::GlobalOnly => "global".into(),
                _ => "all".to_string(),
            },
        );
        set(
            "analysis",
            "noise_levels",
            self.noise_levels
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        set(
            "analysis",
            "sd_rates",
            self.sd_rates
                .iter()
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        set(
            "analysis",
            "diversity_pixels",
            if self.diversity_over_anomalous_only {
                "anomalous".into()
            } else {
                "all".to_string()
            },
        );
        f.to_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_override_roundtrip() {
        let text = "[data]\nimage_size = 64\ntrain_scenes = 10\n\n[train]\nepochs = 5\n";
        let mut f = FileConfig::parse(text).unwrap();
        f.set("train.epochs=9").unwrap();
        f.set("model.branch_dilations=1,2,4").unwrap();
        let cfg = RunConfig::from_file(&f).unwrap();
        assert_eq!(cfg.data.image_size, 64);
        assert_eq!(cfg.train_base.epochs, 9);
        assert_eq!(cfg.model.branch_dilations, vec![1, 2, 4]);
        assert_eq!(cfg.model.num_classes, cfg.data.num_classes());
        // resolved snapshot reparses to the same config
        let snap = cfg.to_text();
        let cfg2 = RunConfig::from_file(&FileConfig::parse(&snap).unwrap()).unwrap();
        assert_eq!(cfg2.data.image_size, 64);
        assert_eq!(cfg2.train_base.epochs, 9);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let f = FileConfig::parse("[data]\nimagesize = 64\n").unwrap();
        assert!(RunConfig::from_file(&f).is_err());
        let f = FileConfig::parse("[zydata]\nx = 1\n").unwrap();
        assert!(RunConfig::from_file(&f).is_err());
    }

    #[test]
    fn malformed_lines_are_errors() {
        assert!(FileConfig::parse("[data]\nnonsense line\n").is_err());
        assert!(FileConfig::parse("orphan = 1\n").is_err());
        let mut f = FileConfig::default();
        assert!(f.set("notdotted=3").is_err());
        assert!(f.set("no_equals").is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let f = FileConfig::parse("# top\n[data]\n# inner\n\nimage_size = 96\n").unwrap();
        let cfg = RunConfig::from_file(&f).unwrap();
        assert_eq!(cfg.data.image_size, 96);
    }
}
