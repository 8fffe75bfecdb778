//! Subcommands. Each is a thin wrapper over the library stages and shares
//! `--seed`, `--config` and `--out`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use distadapt_core::par::default_workers;
use distadapt_core::scenes::{corrupt_split, generate_split, load_split, load_split_images, save_split};
use distadapt_core::{DistortionKind, DistortionSpec, RandomSource, Role};
use distadapt_models::segmentation::SegModel;
use distadapt_models::translation::{train, TrainOptions, TranslationModel};
use serde_json::json;

use crate::config::{DatasetConfig, ExperimentConfig, Resolved};
use crate::error::{CliError, CliResult};
use crate::pipeline::{
    emulate_split, evaluate_files, predict_to, train_segmentation, write_json, Experiment, PREDICTIONS, REPORT,
    TRANSLATION_LOG, TRANSLATION_MODEL,
};
use crate::report::{load_reports, write_tables, GAIN_TABLE};

#[derive(Debug, Parser)]
#[command(name = "distadapt", version, about = "Distortion adaptation experiments for instance segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Master seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RoleArg {
    Train,
    Test,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Train => Role::Train,
            RoleArg::Test => Role::Test,
        }
    }
}

fn parse_kind(s: &str) -> Result<DistortionKind, String> {
    DistortionKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = DistortionKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown kind `{s}`; expected one of {}", names.join(", "))
    })
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate pristine synthetic train and test scenes.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Apply a true distortion to a pristine split.
    Corrupt {
        #[command(flatten)]
        common: Common,
        /// Split root containing `<role>/manifest.json`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        role: RoleArg,
        #[arg(long, value_parser = parse_kind)]
        kind: DistortionKind,
        #[arg(long)]
        level: f64,
    },
    /// Train the unpaired translation model (pristine source images against
    /// distorted target images; labels are never read).
    TrainTranslation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        source_role: RoleArg,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        target_role: RoleArg,
    },
    /// Emulate the learned distortion on a labelled split.
    Emulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        role: RoleArg,
        /// Distortion the model emulates; read from `target.json` beside the
        /// model when omitted.
        #[arg(long, value_parser = parse_kind, requires = "level")]
        kind: Option<DistortionKind>,
        #[arg(long, requires = "kind")]
        level: Option<f64>,
    },
    /// Train a segmenter from scratch or fine-tune a checkpoint.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        role: RoleArg,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a model or a prediction file on a labelled split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        model: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        role: RoleArg,
    },
    /// Run every grid cell for every configured branch.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild the CSV tables from an experiment's reports.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

/// Config from `--config` (or defaults) with `--seed` and `--out` applied.
fn load_config(common: &Common) -> CliResult<(ExperimentConfig, Option<String>)> {
    let (mut cfg, text) = match &common.config {
        Some(path) => {
            let (c, t) = ExperimentConfig::load(path)?;
            (c, Some(t))
        }
        None => (ExperimentConfig::default(), None),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    Ok((cfg, text))
}

fn out_dir(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    cfg.out.clone().ok_or_else(|| CliError::usage("an output directory is required (--out or `out` in the config)"))
}

fn resolved(common: &Common) -> CliResult<(Resolved, PathBuf, Option<String>)> {
    let (cfg, text) = load_config(common)?;
    let out = out_dir(&cfg)?;
    Ok((cfg.resolve()?, out, text))
}

fn mkdir(stage: &str, dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::stage(stage, e))
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate {
            common,
            train,
            test,
            classes,
            size,
        } => {
            let (mut cfg, _) = load_config(&common)?;
            let out = out_dir(&cfg)?;
            let DatasetConfig::Generate(g) = &mut cfg.dataset else {
                return Err(CliError::usage("generate needs a `generate` dataset source"));
            };
            g.train = train.unwrap_or(g.train);
            g.test = test.unwrap_or(g.test);
            g.classes = classes.unwrap_or(g.classes);
            g.size = size.unwrap_or(g.size);
            let g = g.clone();
            if g.train == 0 || g.test == 0 || !(2..=8).contains(&g.classes) || g.size < 64 {
                return Err(CliError::usage(format!(
                    "generate needs train, test >= 1, classes in [2, 8] and size >= 64; got {g:?}"
                )));
            }
            let rng = RandomSource::new(cfg.seed, "scenes");
            let workers = default_workers();
            let run = || -> anyhow::Result<()> {
                std::fs::create_dir_all(&out)?;
                save_split(&generate_split(Role::Train, g.train, g.classes, g.size, &rng, workers)?, &out)?;
                save_split(&generate_split(Role::Test, g.test, g.classes, g.size, &rng, workers)?, &out)?;
                Ok(())
            };
            run().map_err(|e| CliError::stage("generate", e))?;
            println!("wrote {} train and {} test scenes to {}", g.train, g.test, out.display());
            Ok(())
        }
        Command::Corrupt {
            common,
            input,
            role,
            kind,
            level,
        } => {
            let (cfg, _) = load_config(&common)?;
            let out = out_dir(&cfg)?;
            let spec = DistortionSpec::new(kind, level);
            spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
            let role = Role::from(role);
            let rng = RandomSource::new(cfg.seed, &format!("corrupt/{role}/{}", spec.label()));
            let run = || -> anyhow::Result<Option<f64>> {
                let split = load_split(&input, role)?;
                let corrupted = corrupt_split(&split, &spec, &rng, default_workers())?;
                std::fs::create_dir_all(&out)?;
                save_split(&corrupted, &out)?;
                Ok(corrupted.mean_psnr())
            };
            let mean = run().map_err(|e| CliError::stage("corrupt", e))?;
            println!("{spec}: mean PSNR {:.3} dB -> {}", mean.unwrap_or(f64::NAN), out.display());
            Ok(())
        }
        Command::TrainTranslation {
            common,
            source,
            source_role,
            target,
            target_role,
        } => {
            let (cfg, out, _) = resolved(&common)?;
            mkdir("train-translation", &out)?;
            let run = || -> anyhow::Result<()> {
                let x = load_split_images(&source, source_role.into())?;
                let y = load_split_images(&target, target_role.into())?;
                let label = y.provenance.map_or_else(|| "custom".to_owned(), |s| s.label());
                let rng = RandomSource::new(cfg.seed, &format!("translation/{label}"));
                let images = |s: &distadapt_core::DatasetSplit| s.samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>();
                let opts = TrainOptions {
                    checkpoint_dir: Some(out.join("checkpoints")),
                    checkpoint_every: 10,
                    log_path: Some(out.join(TRANSLATION_LOG)),
                    steps_per_epoch: None,
                };
                let outcome = train(&cfg.translation, &images(&x), &images(&y), &rng, &opts)?;
                outcome.model.save(&out.join(TRANSLATION_MODEL))?;
                write_json(&out.join("target.json"), &json!({ "provenance": y.provenance }))?;
                Ok(())
            };
            run().map_err(|e| CliError::stage("train-translation", e))?;
            println!("translation model -> {}", out.join(TRANSLATION_MODEL).display());
            Ok(())
        }
        Command::Emulate {
            common,
            model,
            input,
            role,
            kind,
            level,
        } => {
            let (cfg, _) = load_config(&common)?;
            let out = out_dir(&cfg)?;
            let spec = match (kind, level) {
                (Some(k), Some(l)) => DistortionSpec::new(k, l),
                _ => target_spec(&model)?,
            };
            spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
            let run = || -> anyhow::Result<Option<f64>> {
                let m = TranslationModel::load(&model)?;
                let split = load_split(&input, role.into())?;
                let emulated = emulate_split(&m, &split, spec, default_workers())?;
                std::fs::create_dir_all(&out)?;
                save_split(&emulated, &out)?;
                Ok(emulated.mean_psnr())
            };
            let mean = run().map_err(|e| CliError::stage("emulate", e))?;
            println!("emulated {spec}: mean PSNR {:.3} dB -> {}", mean.unwrap_or(f64::NAN), out.display());
            Ok(())
        }
        Command::TrainSeg {
            common,
            data,
            role,
            init,
        } => {
            let (mut cfg, out, _) = resolved(&common)?;
            mkdir("train-seg", &out)?;
            let mut run = || -> anyhow::Result<()> {
                let split = load_split(&data, role.into())?;
                let init = init.as_deref().map(SegModel::load).transpose()?;
                if let Some(m) = &init {
                    cfg.segmentation.classes = m.config.classes;
                }
                let stream = if init.is_some() { "segmentation/finetune" } else { "segmentation/baseline" };
                train_segmentation(init, &split, &cfg.segmentation, &RandomSource::new(cfg.seed, stream), &out)?;
                Ok(())
            };
            run().map_err(|e| CliError::stage("train-seg", e))?;
            println!("segmentation model -> {}", out.join(crate::pipeline::SEG_MODEL).display());
            Ok(())
        }
        Command::Evaluate {
            common,
            model,
            predictions,
            data,
            role,
        } => {
            let (cfg, out, _) = resolved(&common)?;
            mkdir("evaluate", &out)?;
            let run = || -> anyhow::Result<f64> {
                let role = Role::from(role);
                let (pred_path, classes) = match (&model, &predictions) {
                    (Some(m), _) => {
                        let m = SegModel::load(m)?;
                        let path = out.join(PREDICTIONS);
                        predict_to(&m, &load_split_images(&data, role)?, default_workers(), &path)?;
                        (path, m.config.classes)
                    }
                    (None, Some(p)) => (p.clone(), cfg.segmentation.classes),
                    (None, None) => unreachable!("clap requires one of the two"),
                };
                let report = evaluate_files(&pred_path, &load_split(&data, role)?, classes, &cfg.overlaps)?;
                write_json(&out.join(REPORT), &report)?;
                Ok(report.map)
            };
            let map = run().map_err(|e| CliError::stage("evaluate", e))?;
            println!("mAP {map:.4} -> {}", out.join(REPORT).display());
            Ok(())
        }
        Command::Experiment { common } => {
            let (cfg, out, text) = resolved(&common)?;
            let summary = Experiment::new(cfg, &out, text).run()?;
            for c in &summary.manifest.cells {
                let label = c.spec.map_or_else(|| "pristine".to_owned(), |s| s.to_string());
                println!("{:<9} {:<18} mAP {:.4}", c.branch.name(), label, c.map);
            }
            println!("manifest -> {}", out.join("manifest.json").display());
            Ok(())
        }
        Command::Report { common } => {
            let (cfg, _) = load_config(&common)?;
            let out = out_dir(&cfg)?;
            let reports = load_reports(&out)?;
            for path in write_tables(&out, &reports)? {
                println!("{}", path.display());
            }
            let gains = out.join(GAIN_TABLE);
            if gains.is_file() {
                print!("{}", std::fs::read_to_string(&gains).map_err(|e| CliError::stage("report", e))?);
            }
            Ok(())
        }
    }
}

fn target_spec(model: &Path) -> CliResult<DistortionSpec> {
    let path = model.parent().unwrap_or(Path::new(".")).join("target.json");
    let value: serde_json::Value = crate::pipeline::read_json(&path)
        .map_err(|_| CliError::usage("emulate needs --kind and --level (no target.json beside the model)"))?;
    serde_json::from_value::<Option<DistortionSpec>>(value["provenance"].clone())
        .ok()
        .flatten()
        .ok_or_else(|| CliError::usage("target.json carries no distortion; pass --kind and --level"))
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
