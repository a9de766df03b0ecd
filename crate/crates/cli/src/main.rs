//! `moose`: single entrypoint for dataset generation, training, evaluation,
//! ensemble baselines, and the analysis experiments. Every run writes a
//! resolved-config snapshot into the output directory before any work
//! starts. Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use moose_core::analysis::{
    run_corruption_analysis, run_diversity_analysis, run_single_dilation_ablation, AblationData,
    DiversityPixels,
};
use moose_core::checkpoint::{load_model, save_model};
use moose_core::config::{FileConfig, RunConfig};
use moose_core::data::{generate_scenes, generate_split, Dataset, Split};
use moose_core::ensemble::{
    cost_report, load_ensemble, save_ensemble, select_median_member, train_deep_ensemble,
    train_multihead_ensemble, CostTarget, EnsembleModel,
};
use moose_core::error::MooseError;
use moose_core::evaluate::{evaluate_multi, EvalRequest};
use moose_core::metrics::EvalReport;
use moose_core::model::{build_base_only, build_model};
use moose_core::pipeline;
use moose_core::scoring::{HeadSet, ScoringFn};
use moose_core::train::{train_probes_with_exposure, TrainConfig};

#[derive(Parser)]
#[command(
    name = "moose",
    version,
    about = "Multi-head contextual probing for dense out-of-distribution detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreArg {
    Msp,
    H,
    Ml,
}

impl From<ScoreArg> for ScoringFn {
    fn from(s: ScoreArg) -> ScoringFn {
        match s {
            ScoreArg::Msp => ScoringFn::Msp,
            ScoreArg::H => ScoringFn::Entropy,
            ScoreArg::Ml => ScoringFn::MaxLogit,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadsArg {
    Global,
    All,
}

impl From<HeadsArg> for HeadSet {
    fn from(h: HeadsArg) -> HeadSet {
        match h {
            HeadsArg::Global => HeadSet::GlobalOnly,
            HeadsArg::All => HeadSet::AllHeads,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EnsembleKind {
    Deep,
    Mh,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Run configuration file (sectioned key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; all artifacts land here.
    #[arg(long)]
    out: PathBuf,
    /// Seed folded into model init and data order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dotted overrides, e.g. --set train.epochs=12 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset splits to disk.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the base model and its probes on a generated dataset.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a deep or multi-head ensemble baseline.
    TrainEnsemble {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        kind: EnsembleKind,
        /// Base checkpoint providing the frozen trunk (multi-head only;
        /// defaults to <out>/moose.ckpt).
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split and store the report.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint (moose-ckpt-v1) or ensemble (moose-ens-v1).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        score: Option<ScoreArg>,
        #[arg(long, value_enum)]
        heads: Option<HeadsArg>,
    },
    /// Diversity and corruption analyses for a trained checkpoint.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Optional ensemble checkpoints for the diversity table.
        #[arg(long)]
        mh_ensemble: Option<PathBuf>,
        #[arg(long)]
        deep_ensemble: Option<PathBuf>,
        /// Emit PNG plots (corruption and precision-recall curves).
        #[arg(long)]
        plots: bool,
    },
    /// Single-dilation ablation: one variant per rate plus standard MOoSe.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Parameter counts and forward latency for single/MOoSe/ensembles.
    Cost {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Render stored evaluation reports as a results table.
    Report {
        #[command(flatten)]
        common: CommonArgs,
    },
}

enum CliError {
    /// Bad invocation or configuration: exit 2.
    Usage(String),
    /// Failure after work started: exit 1.
    Runtime(String),
}

impl From<MooseError> for CliError {
    fn from(e: MooseError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn resolve_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut file = match &common.config {
        Some(path) => FileConfig::load(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {path:?}: {e}")))?,
        None => FileConfig::default(),
    };
    for ov in &common.overrides {
        file.set(ov)
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let cfg = RunConfig::from_file(&file).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Write the resolved configuration before any work starts.
fn snapshot(cfg: &RunConfig, common: &CommonArgs) -> Result<(), CliError> {
    std::fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Usage(format!("cannot create {:?}: {e}", common.out)))?;
    let mut text = cfg.to_text();
    text.push_str(&format!("\n# cli seed = {}\n", common.seed));
    std::fs::write(common.out.join("resolved.cfg"), text)
        .map_err(|e| CliError::Usage(format!("cannot write resolved config: {e}")))?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::open(path).map_err(|e| CliError::Usage(format!("cannot open dataset {path:?}: {e}")))
}

fn check_class_counts(model_classes: usize, ds: &Dataset) -> Result<(), CliError> {
    if model_classes != ds.num_classes {
        return Err(CliError::Runtime(format!(
            "class-count mismatch: checkpoint expects N={model_classes} but dataset declares N={}",
            ds.num_classes
        )));
    }
    Ok(())
}

fn write_report(out: &Path, name: &str, report: &EvalReport) -> Result<(), CliError> {
    std::fs::write(out.join(format!("{name}.kv")), report.to_kv())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(out.join(format!("{name}.json")), json)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    pipeline::init_workers();
    match cli.command {
        Command::GenData { common } => {
            let cfg = resolve_config(&common)?;
            snapshot(&cfg, &common)?;
            let root = common.out.join("dataset");
            generate_split(&cfg.data, &root)?;
            println!("dataset written to {}", root.display());
            Ok(())
        }
        Command::Train { common, data } => {
            let cfg = resolve_config(&common)?;
            snapshot(&cfg, &common)?;
            let ds = load_dataset(&data)?;
            check_class_counts(cfg.model.num_classes, &ds)?;
            let splits = pipeline::SplitData {
                train: ds.load_split(Split::Train)?,
                val: ds.load_split(Split::Val)?,
                test: Vec::new(),
            };
            let trained = pipeline::train_moose(&cfg, &splits, common.seed)?;
            let mut model = trained.model;
            std::fs::write(common.out.join("train_base.log"), trained.base_log.to_text())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            std::fs::write(common.out.join("train_probes.log"), trained.probe_log.to_text())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            if cfg.outlier_exposure_weight > 0.0 && cfg.oe_scenes > 0 {
                let exposure = generate_scenes(&cfg.data, Split::Oe, cfg.oe_scenes)?;
                let oe_cfg = TrainConfig {
                    epochs: 3,
                    ..cfg.train_probe.clone()
                };
                let log = train_probes_with_exposure(
                    &mut model,
                    &splits.train,
                    &exposure,
                    &oe_cfg,
                    cfg.outlier_exposure_weight,
                )?;
                std::fs::write(common.out.join("train_oe.log"), log.to_text())
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
            }
            let path = common.out.join("moose.ckpt");
            save_model(&model, &path)?;
            println!("checkpoint written to {}", path.display());
            Ok(())
        }
        Command::TrainEnsemble {
            common,
            data,
            kind,
            base,
        } => {
            let cfg = resolve_config(&common)?;
            snapshot(&cfg, &common)?;
            let ds = load_dataset(&data)?;
            check_class_counts(cfg.model.num_classes, &ds)?;
            let train = ds.load_split(Split::Train)?;
            let val = ds.load_split(Split::Val)?;
            let tcfg = TrainConfig {
                seed: cfg.train_base.seed ^ common.seed,
                ..cfg.train_base.clone()
            };
            let (ens, logs, name) = match kind {
                EnsembleKind::Deep => {
                    let (ens, logs) = train_deep_ensemble(
                        &cfg.ensemble,
                        &cfg.model,
                        &cfg.probe,
                        &train,
                        &val,
                        &tcfg,
                    )?;
                    (ens, logs, "deep")
                }
                EnsembleKind::Mh => {
                    let base_path = base.unwrap_or_else(|| common.out.join("moose.ckpt"));
                    let base_model = load_model(&base_path)?;
                    check_class_counts(base_model.pcfg.num_classes, &ds)?;
                    let mut ecfg = cfg.ensemble.clone();
                    ecfg.shared_encoder = true;
                    let (ens, logs) = train_multihead_ensemble(&ecfg, &base_model, &train, &tcfg)?;
                    (ens, logs, "mh")
                }
            };
            for (i, log) in logs.iter().enumerate() {
                std::fs::write(
                    common.out.join(format!("train_{name}_member{i}.log")),
                    log.to_text(),
                )
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            }
            let test = ds.load_split(Split::Test)?;
            let median = select_median_member(&ens, &test, cfg.eval_score)?;
            std::fs::write(
                common.out.join(format!("{name}_median_member.txt")),
                format!("median_member={median}\n"),
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            let path = common.out.join(format!("{name}.ens"));
            save_ensemble(&ens, &path)?;
            println!("ensemble written to {}", path.display());
            Ok(())
        }
        Command::Eval {
            common,
            data,
            ckpt,
            score,
            heads,
        } => {
            let cfg = resolve_config(&common)?;
            snapshot(&cfg, &common)?;
            let ds = load_dataset(&data)?;
            let test = ds.load_split(Split::Test)?;
            let scoring: ScoringFn = score.map(Into::into).unwrap_or(cfg.eval_score);
            let head_set: HeadSet = heads.map(Into::into).unwrap_or(cfg.eval_heads.clone());
            let model_name = ckpt
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());

            // model or ensemble checkpoint, decided by the magic line
            let head_tag = head_set.tag();
            let report = match load_model(&ckpt) {
                Ok(model) => {
                    check_class_counts(model.pcfg.num_classes, &ds)?;
                    evaluate_multi(
                        &model,
                        &test,
                        &[EvalRequest {
                            scoring_fn: scoring,
                            head_set,
                        }],
                        ds.num_classes,
                        &model_name,
                        "test",
                    )?
                    .remove(0)
                }
                Err(_) => {
                    let ens = load_ensemble(&ckpt)?;
                    evaluate_multi(
                        &ens,
                        &test,
                        &[EvalRequest {
                            scoring_fn: scoring,
                            head_set: HeadSet::AllHeads,
                        }],
                        ds.num_classes,
                        &model_name,
                        "test",
                    )?
                    .remove(0)
                }
            };
            let name = format!("eval_{model_name}_{}_{}", scoring.tag(), head_tag);
            write_report(&common.out, &name, &report)?;
            println!(
                "{model_name} {} {} aupr={:.4} fpr95={:.4} ece={:.4} miou={:.4}",
                scoring.tag(),
                head_tag,
                report.aupr,
                report.fpr95,
                report.ece,
                report.miou
            );
            Ok(())
        }
        Command::Analyze {
            common,
            data,
            ckpt,
            mh_ensemble,
            deep_ensemble,
            plots,
        } => {
            let cfg = resolve_config(&common)?;
            snapshot(&cfg, &common)?;
            let ds = load_dataset(&data)?;
            let model = load_model(&ckpt)?;
            check_class_counts(model.pcfg.num_classes, &ds)?;
            let val = ds.load_split(Split::Val)?;
            let test = ds.load_split(Split::Test)?;
            let mh: Option<EnsembleModel> = match mh_ensemble {
                Some(p) => Some(load_ensemble(&p)?),
                None => None,
            };
            let deep: Option<EnsembleModel> = match deep_ensemble {
                Some(p) => Some(load_ensemble(&p)?),
                None => None,
            };
            // anomalous-pixel diversity only makes sense on a split that
            // carries anomalies
            let (pixels, diversity_scenes) = if cfg.diversity_over_anomalous_only {
                (DiversityPixels::AnomalousOnly, &test)
            } else {
                (DiversityPixels::All, &val)
            };
            let diversity =
                run_diversity_analysis(&model, mh.as_ref(), deep.as_ref(), diversity_scenes, pixels)?;
            std::fs::write(common.out.join("diversity.kv"), diversity.to_kv())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            std::fs::write(
                common.out.join("diversity.json"),
                serde_json::to_string_pretty(&diversity.rows)
                    .map_err(|e| CliError::Runtime(e.to_string()))?,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;

            let classes = ds.foreground_classes();
            let curve = run_corruption_analysis(
                &model,
                &test,
                &classes,
                &cfg.noise_levels,
                common.seed,
            )?;
            std::fs::write(common.out.join("corruption.kv"), curve.to_kv())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            std::fs::write(
                common.out.join("corruption.json"),
                serde_json::to_string_pretty(&curve)
                    .map_err(|e| CliError::Runtime(e.to_string()))?,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;

            if plots {
                plot::corruption_plot(&curve, &common.out.join("corruption.png"))
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                plot::pr_curve_plot(&model, &test, &common.out.join("pr_curve.png"))
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
            }
            println!("analysis reports written to {}", common.out.display());
            Ok(())
        }
        Command::Ablate { common, data } => {
            let cfg = resolve_config(&common)?;
            snapshot(&cfg, &common)?;
            let ds = load_dataset(&data)?;
            check_class_counts(cfg.model.num_classes, &ds)?;
            let train = ds.load_split(Split::Train)?;
            let val = ds.load_split(Split::Val)?;
            let test = ds.load_split(Split::Test)?;
            let table = run_single_dilation_ablation(
                &cfg.model,
                &cfg.probe,
                &AblationData {
                    train: &train,
                    val: &val,
                    test: &test,
                },
                &cfg.sd_rates,
                &TrainConfig {
                    seed: cfg.train_base.seed ^ common.seed,
                    ..cfg.train_base.clone()
                },
                &TrainConfig {
                    seed: cfg.train_probe.seed ^ common.seed,
                    ..cfg.train_probe.clone()
                },
                cfg.eval_score,
                common.seed,
            )?;
            std::fs::write(common.out.join("ablation.kv"), table.to_kv())
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            std::fs::write(
                common.out.join("ablation.json"),
                serde_json::to_string_pretty(&table.rows)
                    .map_err(|e| CliError::Runtime(e.to_string()))?,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("{}", table.to_kv());
            Ok(())
        }
        Command::Cost { common } => {
            let cfg = resolve_config(&common)?;
            snapshot(&cfg, &common)?;
            let hw = (cfg.data.image_size, cfg.data.image_size);
            let single = build_base_only(&cfg.model, &cfg.probe, common.seed)?;
            let moose = build_model(&cfg.model, &cfg.probe, common.seed)?;
            let members: Vec<_> = cfg
                .ensemble
                .member_seeds
                .iter()
                .map(|&s| build_base_only(&cfg.model, &cfg.probe, s))
                .collect::<Result<_, _>>()?;
            let deep = EnsembleModel::Deep(members);
            let base = build_model(&cfg.model, &cfg.probe, common.seed)?;
            let heads = cfg
                .ensemble
                .member_seeds
                .iter()
                .map(|&s| {
                    moose_core::model::SegHead::new(
                        cfg.model.global_head_input(),
                        cfg.model.encoder_channels,
                        cfg.probe.depth,
                        cfg.model.num_classes,
                        s,
                        "ens_head",
                    )
                })
                .collect();
            let mh = EnsembleModel::MultiHead {
                trunk: Box::new(base),
                heads,
            };

            let mut lines = String::from("report=cost-v1\n");
            for target in [
                CostTarget::Single(&single),
                CostTarget::Moose(&moose),
                CostTarget::Ensemble(&mh),
                CostTarget::Ensemble(&deep),
            ] {
                let r = cost_report(&target, hw, 31)?;
                lines.push_str(&format!(
                    "target={} params={} median_forward_ms={:.3} runs={}\n",
                    r.label, r.parameter_count, r.median_forward_ms, r.runs
                ));
                println!(
                    "{:>14}: {:>9} params, {:.2} ms median forward",
                    r.label, r.parameter_count, r.median_forward_ms
                );
            }
            std::fs::write(common.out.join("cost.kv"), lines)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok(())
        }
        Command::Report { common } => {
            let cfg = resolve_config(&common)?;
            snapshot(&cfg, &common)?;
            let mut reports: Vec<EvalReport> = Vec::new();
            for entry in std::fs::read_dir(&common.out)
                .map_err(|e| CliError::Usage(format!("cannot read {:?}: {e}", common.out)))?
            {
                let path = entry.map_err(|e| CliError::Runtime(e.to_string()))?.path();
                let name = path.file_name().map(|s| s.to_string_lossy().into_owned());
                if let Some(n) = name {
                    if n.starts_with("eval_") && n.ends_with(".json") {
                        let text = std::fs::read_to_string(&path)
                            .map_err(|e| CliError::Runtime(e.to_string()))?;
                        reports.push(
                            serde_json::from_str(&text)
                                .map_err(|e| CliError::Runtime(format!("{path:?}: {e}")))?,
                        );
                    }
                }
            }
            if reports.is_empty() {
                return Err(CliError::Runtime(format!(
                    "no eval_*.json reports under {:?}",
                    common.out
                )));
            }
            reports.sort_by(|a, b| {
                (&a.scoring_fn, &a.model_id, &a.head_set).cmp(&(
                    &b.scoring_fn,
                    &b.model_id,
                    &b.head_set,
                ))
            });
            println!(
                "{:<8} {:<24} {:<12} {:>8} {:>8}",
                "score", "model", "heads", "AUPR%", "FPR95%"
            );
            for r in &reports {
                println!(
                    "{:<8} {:<24} {:<12} {:>8.2} {:>8.2}",
                    r.scoring_fn,
                    r.model_id,
                    r.head_set,
                    100.0 * r.aupr,
                    100.0 * r.fpr95
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
