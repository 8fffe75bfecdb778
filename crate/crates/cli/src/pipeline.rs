//! The three-branch experiment as a graph of cached stages.
//!
//! Stage outputs live under `<out>/cache`; per-cell reports under
//! `<out>/reports/<branch>/<label>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::Context;
use distadapt_core::evaluation::PredictionFile;
use distadapt_core::par::{default_workers, parallel_map};
use distadapt_core::scenes::{
    corrupt_split, generate_split, load_cityscapes_format, load_split, load_split_images, save_split, ClassMapping,
    Decibels, Domain,
};
use distadapt_core::{map_cityscapes_at, psnr, DatasetSplit, DistortionSpec, EvalReport, RandomSource, Role, Sample};
use distadapt_models::segmentation::{pretrain_baseline, train_or_finetune, SegModel, SegOutcome, SegTrainOptions};
use distadapt_models::translation::{train, TrainOptions, TranslationModel};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cache::{Cache, StageRecord, TOOL_VERSION};
use crate::config::{Branch, DatasetConfig, Resolved};
use crate::error::{CliError, CliResult};
use crate::report::{self, ReportFile};

pub const SEG_MODEL: &str = "model.ckpt";
pub const SEG_LOSSES: &str = "losses.csv";
pub const TRANSLATION_MODEL: &str = "model.ckpt";
pub const TRANSLATION_LOG: &str = "epoch_log.csv";
pub const TRANSLATION_STEPS: &str = "step_log.csv";
pub const PREDICTIONS: &str = "predictions.json";
pub const REPORT: &str = "report.json";

/// Per-cell provenance kept in the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub branch: Branch,
    pub spec: Option<DistortionSpec>,
    pub map: f64,
    pub report: PathBuf,
    pub model_checkpoint: PathBuf,
    pub translation_checkpoint: Option<PathBuf>,
    pub test_split: PathBuf,
    /// Keys of the stages this cell depends on, upstream first.
    pub stages: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub status: String,
    #[serde(default)]
    pub error: Option<String>,
    pub config_text: Option<String>,
    pub config: Resolved,
    pub workers: usize,
    pub seconds: f64,
    pub stages: Vec<StageRecord>,
    pub cells: Vec<CellRecord>,
    pub outputs: Vec<PathBuf>,
}

pub struct RunSummary {
    pub manifest: RunManifest,
    pub reports: Vec<ReportFile>,
}

/// Writes `value` as pretty JSON.
pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_losses(path: &Path, out: &SegOutcome, cfg: &distadapt_models::segmentation::SegConfig) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "lr", "loss"])?;
    for (i, l) in out.losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{:e}", cfg.lr_at(i)), format!("{l:.8e}")])?;
    }
    w.flush()?;
    Ok(())
}

fn rel_files(dir: &Path, sub: &str) -> anyhow::Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir.join(sub))?
        .map(|e| e.map(|e| format!("{sub}/{}", e.file_name().to_string_lossy())))
        .collect::<Result<_, _>>()?;
    names.sort();
    Ok(names)
}

/// Trains from scratch (`init = None`) or fine-tunes, saving the model and
/// the per-iteration loss log into `dir`.
pub fn train_segmentation(
    init: Option<SegModel<f32>>,
    data: &DatasetSplit,
    cfg: &distadapt_models::segmentation::SegConfig,
    rng: &RandomSource,
    dir: &Path,
) -> anyhow::Result<Vec<String>> {
    let out = match init {
        None => pretrain_baseline(data, cfg, rng, &SegTrainOptions::default())?,
        Some(m) => train_or_finetune(Some(m), data, cfg, rng, &SegTrainOptions::default())?,
    };
    out.model.save(&dir.join(SEG_MODEL))?;
    write_losses(&dir.join(SEG_LOSSES), &out, cfg)?;
    Ok(vec![SEG_MODEL.into(), SEG_LOSSES.into()])
}

/// Runs `model` on every image of `split` (labels unused) and writes the
/// per-image predictions.
pub fn predict_to(model: &SegModel<f32>, split: &DatasetSplit, workers: usize, path: &Path) -> anyhow::Result<()> {
    let preds = model.predict_split(split, workers)?;
    let files: Vec<PredictionFile> = preds
        .into_iter()
        .map(|(id, predictions)| PredictionFile { id, predictions })
        .collect();
    write_json(path, &files)
}

/// Scores a prediction file against a labelled split.
pub fn evaluate_files(predictions: &Path, split: &DatasetSplit, classes: usize, overlaps: &[f64]) -> anyhow::Result<EvalReport> {
    let files: Vec<PredictionFile> = read_json(predictions)?;
    let preds: BTreeMap<_, _> = files.into_iter().map(|f| (f.id, f.predictions)).collect();
    let gts: BTreeMap<_, _> = split.samples.iter().map(|s| (s.id.clone(), s.annotations.clone())).collect();
    let mut report = map_cityscapes_at(&preds, &gts, classes, overlaps)?;
    report.mean_psnr = split.mean_psnr().map(Decibels);
    Ok(report)
}

/// Passes every training image through the learned mapping. Annotations are
/// carried over; PSNR is measured against the pristine input.
pub fn emulate_split(model: &TranslationModel<f32>, source: &DatasetSplit, spec: DistortionSpec, workers: usize) -> anyhow::Result<DatasetSplit> {
    let results = parallel_map(&source.samples, workers, |s| -> anyhow::Result<(Sample, f64)> {
        let image = model.emulate(&s.image)?.quantized();
        let p = psnr(&s.image, &image)?;
        Ok((
            Sample {
                id: s.id.clone(),
                image,
                annotations: s.annotations.clone(),
            },
            p,
        ))
    });
    let mut samples = Vec::with_capacity(results.len());
    let mut psnrs = BTreeMap::new();
    for r in results {
        let (s, p) = r?;
        psnrs.insert(s.id.clone(), p);
        samples.push(s);
    }
    Ok(DatasetSplit {
        role: source.role,
        domain: Domain::TargetY,
        samples,
        provenance: Some(spec),
        seed: source.seed,
        psnr: psnrs,
    })
}

pub struct Experiment {
    pub cfg: Resolved,
    pub out: PathBuf,
    pub cache: Cache,
    pub workers: usize,
    config_text: Option<String>,
    records: Mutex<Vec<StageRecord>>,
}

impl Experiment {
    pub fn new(cfg: Resolved, out: impl Into<PathBuf>, config_text: Option<String>) -> Self {
        let out = out.into();
        Self {
            cfg,
            cache: Cache::new(out.join("cache")),
            out,
            workers: default_workers(),
            config_text,
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn records(&self) -> Vec<StageRecord> {
        self.records.lock().expect("records lock").clone()
    }

    fn rng(&self, stream: &str) -> RandomSource {
        RandomSource::new(self.cfg.seed, stream)
    }

    fn stage(
        &self,
        stage: &str,
        mut params: Value,
        stream: Option<&str>,
        inputs: &[&StageRecord],
        build: impl FnOnce(&Path) -> anyhow::Result<Vec<String>>,
    ) -> CliResult<StageRecord> {
        if let Some(s) = stream {
            params["seed"] = json!(self.cfg.seed);
            params["stream"] = json!(s);
        }
        let rec = self.cache.run(stage, params, inputs, build)?;
        let mut all = self.records.lock().expect("records lock");
        if !all.iter().any(|r| r.key == rec.key) {
            all.push(rec.clone());
        }
        Ok(rec)
    }

    /// Pristine train and test splits.
    pub fn scenes(&self) -> CliResult<StageRecord> {
        let dataset = self.cfg.dataset.clone();
        let workers = self.workers;
        let stream = "scenes";
        let rng = self.rng(stream);
        self.stage("scenes", json!({ "dataset": dataset }), Some(stream), &[], |dir| {
            let (train, test) = match &dataset {
                DatasetConfig::Generate(g) => (
                    generate_split(Role::Train, g.train, g.classes, g.size, &rng, workers)?,
                    generate_split(Role::Test, g.test, g.classes, g.size, &rng, workers)?,
                ),
                DatasetConfig::Cityscapes(c) => {
                    let mapping = ClassMapping::load(&c.mapping)?;
                    (
                        load_cityscapes_format(&c.train, &mapping, Role::Train)?,
                        load_cityscapes_format(&c.test, &mapping, Role::Test)?,
                    )
                }
            };
            save_split(&train, dir)?;
            save_split(&test, dir)?;
            Ok(vec!["train".into(), "test".into()])
        })
    }

    /// The segmenter trained on pristine training data, built once per dataset.
    pub fn baseline_model(&self, scenes: &StageRecord) -> CliResult<StageRecord> {
        let cfg = self.cfg.segmentation.clone();
        let stream = "segmentation/baseline";
        let rng = self.rng(stream);
        let root = scenes.require("train")?.parent().map(Path::to_path_buf).unwrap_or_default();
        self.stage("baseline", json!({ "segmentation": cfg }), Some(stream), &[scenes], |dir| {
            let data = load_split(&root, Role::Train)?;
            train_segmentation(None, &data, &cfg, &rng, dir)
        })
    }

    /// `spec` applied to the pristine split of `role`.
    pub fn corrupt(&self, scenes: &StageRecord, role: Role, spec: DistortionSpec) -> CliResult<StageRecord> {
        let stream = format!("corrupt/{role}/{}", spec.label());
        let rng = self.rng(&stream);
        let workers = self.workers;
        let root = scenes.require(role.name())?.parent().map(Path::to_path_buf).unwrap_or_default();
        self.stage("corrupt", json!({ "role": role, "spec": spec }), Some(&stream), &[scenes], |dir| {
            let split = load_split(&root, role)?;
            save_split(&corrupt_split(&split, &spec, &rng, workers)?, dir)?;
            Ok(vec![role.name().into()])
        })
    }

    /// CycleGAN on pristine training images against distorted test images.
    /// Only images are read from either split.
    pub fn translation(&self, scenes: &StageRecord, corrupt_test: &StageRecord, spec: DistortionSpec) -> CliResult<StageRecord> {
        let cfg = self.cfg.translation.clone();
        let stream = format!("translation/{}", spec.label());
        let rng = self.rng(&stream);
        let x_root = scenes.require("train")?.parent().map(Path::to_path_buf).unwrap_or_default();
        let y_root = corrupt_test.require("test")?.parent().map(Path::to_path_buf).unwrap_or_default();
        let params = json!({ "translation": cfg, "spec": spec });
        self.stage("translation", params, Some(&stream), &[scenes, corrupt_test], |dir| {
            let x = load_split_images(&x_root, Role::Train)?;
            let y = load_split_images(&y_root, Role::Test)?;
            let images = |s: &DatasetSplit| s.samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>();
            let opts = TrainOptions {
                checkpoint_dir: Some(dir.join("checkpoints")),
                checkpoint_every: 10,
                log_path: Some(dir.join(TRANSLATION_LOG)),
                steps_per_epoch: None,
            };
            let out = train(&cfg, &images(&x), &images(&y), &rng, &opts)?;
            out.model.save(&dir.join(TRANSLATION_MODEL))?;
            let mut w = csv::Writer::from_path(dir.join(TRANSLATION_STEPS))?;
            for row in &out.step_log {
                w.serialize(row)?;
            }
            w.flush()?;
            let mut artifacts = vec![TRANSLATION_MODEL.to_owned(), TRANSLATION_LOG.to_owned(), TRANSLATION_STEPS.to_owned()];
            artifacts.extend(rel_files(dir, "checkpoints")?);
            Ok(artifacts)
        })
    }

    /// The pristine training split passed through the learned mapping.
    pub fn emulate(&self, scenes: &StageRecord, translation: &StageRecord, spec: DistortionSpec) -> CliResult<StageRecord> {
        let model_path = translation.require(TRANSLATION_MODEL)?;
        let root = scenes.require("train")?.parent().map(Path::to_path_buf).unwrap_or_default();
        let workers = self.workers;
        self.stage("emulate", json!({ "spec": spec }), None, &[scenes, translation], |dir| {
            let model = TranslationModel::load(&model_path)?;
            let source = load_split(&root, Role::Train)?;
            save_split(&emulate_split(&model, &source, spec, workers)?, dir)?;
            Ok(vec!["train".into()])
        })
    }

    /// Fine-tunes the baseline on a training split.
    pub fn finetune(&self, branch: Branch, spec: DistortionSpec, baseline: &StageRecord, data: &StageRecord) -> CliResult<StageRecord> {
        let cfg = self.cfg.segmentation.clone();
        let stream = format!("segmentation/{branch}/{}", spec.label());
        let rng = self.rng(&stream);
        let init_path = baseline.require(SEG_MODEL)?;
        let root = data.require("train")?.parent().map(Path::to_path_buf).unwrap_or_default();
        self.stage("finetune", json!({ "segmentation": cfg }), Some(&stream), &[baseline, data], |dir| {
            let init = SegModel::load(&init_path)?;
            let split = load_split(&root, Role::Train)?;
            train_segmentation(Some(init), &split, &cfg, &rng, dir)
        })
    }

    pub fn predict(&self, model: &StageRecord, test: &StageRecord) -> CliResult<StageRecord> {
        let model_path = model.require(SEG_MODEL)?;
        let root = test.require("test")?.parent().map(Path::to_path_buf).unwrap_or_default();
        let workers = self.workers;
        self.stage("predict", json!({}), None, &[model, test], |dir| {
            let model = SegModel::load(&model_path)?;
            let split = load_split_images(&root, Role::Test)?;
            predict_to(&model, &split, workers, &dir.join(PREDICTIONS))?;
            Ok(vec![PREDICTIONS.into()])
        })
    }

    pub fn evaluate(&self, predictions: &StageRecord, test: &StageRecord) -> CliResult<(StageRecord, EvalReport)> {
        let pred_path = predictions.require(PREDICTIONS)?;
        let root = test.require("test")?.parent().map(Path::to_path_buf).unwrap_or_default();
        let classes = self.cfg.segmentation.classes;
        let overlaps = self.cfg.overlaps.clone();
        let params = json!({ "classes": classes, "overlaps": overlaps });
        let rec = self.stage("evaluate", params, None, &[predictions, test], |dir| {
            let split = load_split(&root, Role::Test)?;
            write_json(&dir.join(REPORT), &evaluate_files(&pred_path, &split, classes, &overlaps)?)?;
            Ok(vec![REPORT.into()])
        })?;
        let report = read_json(&rec.require(REPORT)?).map_err(|e| CliError::stage("evaluate", e))?;
        Ok((rec, report))
    }

    /// Shared upstream of every cell.
    pub fn prepare(&self) -> CliResult<(StageRecord, StageRecord)> {
        let scenes = self.scenes()?;
        let baseline = self.baseline_model(&scenes)?;
        Ok((scenes, baseline))
    }

    /// The baseline model on the pristine test split.
    pub fn pristine(&self, scenes: &StageRecord, baseline: &StageRecord) -> CliResult<ReportFile> {
        let preds = self.predict(baseline, scenes)?;
        let (eval, report) = self.evaluate(&preds, scenes)?;
        Ok(ReportFile {
            branch: Branch::Baseline,
            spec: None,
            report,
            model_checkpoint: baseline.path(SEG_MODEL),
            translation_checkpoint: None,
            test_split: scenes.path("test"),
            stages: vec![scenes.key.clone(), baseline.key.clone(), preds.key.clone(), eval.key.clone()],
        })
    }

    /// One (branch, spec) cell; `test` is the distorted test split.
    pub fn run_branch(&self, branch: Branch, spec: DistortionSpec, scenes: &StageRecord, baseline: &StageRecord, test: &StageRecord) -> CliResult<ReportFile> {
        let mut stages = vec![scenes.key.clone(), baseline.key.clone(), test.key.clone()];
        let mut translation_checkpoint = None;
        let model = match branch {
            Branch::Baseline => baseline.clone(),
            Branch::Oracle => {
                let train = self.corrupt(scenes, Role::Train, spec)?;
                stages.push(train.key.clone());
                self.finetune(branch, spec, baseline, &train)?
            }
            Branch::Proposed => {
                let tr = self.translation(scenes, test, spec)?;
                let emulated = self.emulate(scenes, &tr, spec)?;
                translation_checkpoint = Some(tr.path(TRANSLATION_MODEL));
                stages.push(tr.key.clone());
                stages.push(emulated.key.clone());
                self.finetune(branch, spec, baseline, &emulated)?
            }
        };
        if branch != Branch::Baseline {
            stages.push(model.key.clone());
        }
        let preds = self.predict(&model, test)?;
        let (eval, report) = self.evaluate(&preds, test)?;
        stages.push(preds.key.clone());
        stages.push(eval.key.clone());
        Ok(ReportFile {
            branch,
            spec: Some(spec),
            report,
            model_checkpoint: model.path(SEG_MODEL),
            translation_checkpoint,
            test_split: test.path("test"),
            stages,
        })
    }

    fn cells(&self, scenes: &StageRecord, baseline: &StageRecord) -> CliResult<Vec<ReportFile>> {
        // Each distorted test split is materialized once and shared by all
        // branches of its cell.
        let mut work = Vec::new();
        for &spec in &self.cfg.grid {
            let test = self.corrupt(scenes, Role::Test, spec)?;
            for &branch in &self.cfg.branches {
                work.push((branch, spec, test.clone()));
            }
        }
        let outer = if work.len() > 1 { self.workers } else { 1 };
        let results = parallel_map(&work, outer, |(branch, spec, test)| self.run_branch(*branch, *spec, scenes, baseline, test));
        results.into_iter().collect()
    }

    /// Every (spec, branch) cell plus the pristine reference, then reports,
    /// CSV tables and the manifest. A failing stage still leaves a manifest
    /// with status `failed`.
    pub fn run(self) -> CliResult<RunSummary> {
        let start = Instant::now();
        let outcome = self.run_inner();
        let (status, error, reports, outputs) = match &outcome {
            Ok((reports, outputs)) => ("complete", None, reports.clone(), outputs.clone()),
            Err(e) => ("failed", Some(e.to_string()), Vec::new(), Vec::new()),
        };
        let manifest = RunManifest {
            tool_version: TOOL_VERSION.into(),
            status: status.into(),
            error,
            config_text: self.config_text.clone(),
            config: self.cfg.clone(),
            workers: self.workers,
            seconds: start.elapsed().as_secs_f64(),
            stages: self.records(),
            cells: reports.iter().map(|r| r.cell(&self.out)).collect(),
            outputs,
        };
        write_json(&self.out.join("manifest.json"), &manifest).map_err(|e| CliError::stage("manifest", e))?;
        outcome.map(|(reports, _)| RunSummary { manifest, reports })
    }

    fn run_inner(&self) -> CliResult<(Vec<ReportFile>, Vec<PathBuf>)> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::stage("setup", e))?;
        let (scenes, baseline) = self.prepare()?;
        let mut reports = vec![self.pristine(&scenes, &baseline)?];
        reports.extend(self.cells(&scenes, &baseline)?);
        let mut outputs = report::write_reports(&self.out, &reports)?;
        outputs.extend(report::write_tables(&self.out, &reports)?);
        Ok((reports, outputs))
    }
}

