//! Declarative TOML experiment configuration and its resolved form.

use std::path::{Path, PathBuf};

use distadapt_core::evaluation::overlaps;
use distadapt_core::DistortionKind;
use distadapt_core::DistortionSpec;
use distadapt_models::segmentation::SegConfig;
use distadapt_models::translation::TranslationConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Baseline,
    Oracle,
    Proposed,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Baseline, Branch::Oracle, Branch::Proposed];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Baseline => "baseline",
            Branch::Oracle => "oracle",
            Branch::Proposed => "proposed",
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    pub size: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            train: 400,
            test: 100,
            classes: 3,
            size: 64,
        }
    }
}

/// Cityscapes-layout roots for the two roles plus a class-id mapping file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CityscapesConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    pub mapping: PathBuf,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    Generate(GenerateConfig),
    Cityscapes(CityscapesConfig),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::Generate(GenerateConfig::default())
    }
}

impl DatasetConfig {
    pub fn classes(&self) -> usize {
        match self {
            Self::Generate(g) => g.classes,
            Self::Cityscapes(c) => c.classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub kind: DistortionKind,
    pub levels: Vec<f64>,
}

/// Level grids used when a config names none.
pub fn default_grid() -> Vec<GridEntry> {
    let e = |kind, levels: &[f64]| GridEntry {
        kind,
        levels: levels.to_vec(),
    };
    vec![
        e(DistortionKind::Blur, &[1.0, 2.0, 3.0, 5.0]),
        e(DistortionKind::Awgn, &[10.0, 25.0, 50.0]),
        e(DistortionKind::BlockDct, &[10.0, 30.0, 50.0, 90.0]),
        e(DistortionKind::WaveletPsnr, &[28.0, 34.0, 40.0]),
        e(DistortionKind::VarblockQp, &[22.0, 34.0, 46.0]),
    ]
}

/// A named profile (`paper`, `toy` or `custom`) with field overrides. For
/// `custom` the overrides must give every field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSection {
    #[serde(default = "toy_name")]
    pub profile: String,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

fn toy_name() -> String {
    "toy".into()
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            profile: toy_name(),
            overrides: toml::Table::new(),
        }
    }
}

impl ProfileSection {
    fn resolve<T>(&self, section: &str, lookup: impl Fn(&str) -> Option<T>) -> CliResult<T>
    where
        T: Serialize + for<'de> Deserialize<'de>,
    {
        let mut table = if self.profile == "custom" {
            toml::Table::new()
        } else {
            let base = lookup(&self.profile).ok_or_else(|| {
                CliError::usage(format!(
                    "[{section}] unknown profile `{}` (expected paper, toy or custom)",
                    self.profile
                ))
            })?;
            match toml::Value::try_from(base) {
                Ok(toml::Value::Table(t)) => t,
                _ => unreachable!("profiles serialize to tables"),
            }
        };
        merge(&mut table, &self.overrides);
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::usage(format!("[{section}] {e}")))
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "overlaps")]
    pub overlaps: Vec<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { overlaps: overlaps() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "all_branches")]
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_grid")]
    pub grid: Vec<GridEntry>,
    #[serde(default)]
    pub translation: ProfileSection,
    #[serde(default)]
    pub segmentation: ProfileSection,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

fn all_branches() -> Vec<Branch> {
    Branch::ALL.to_vec()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            branches: all_branches(),
            dataset: DatasetConfig::default(),
            grid: default_grid(),
            translation: ProfileSection::default(),
            segmentation: ProfileSection::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("invalid config: {e}")))
    }

    /// Reads and parses a config file, returning it with its text.
    pub fn load(path: &Path) -> CliResult<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn resolve(&self) -> CliResult<Resolved> {
        let mut branches = self.branches.clone();
        branches.sort();
        branches.dedup();
        if branches.is_empty() {
            return Err(CliError::usage("branch set is empty"));
        }
        let mut grid = Vec::new();
        for entry in &self.grid {
            for &level in &entry.levels {
                let spec = DistortionSpec::new(entry.kind, level);
                spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
                if !grid.contains(&spec) {
                    grid.push(spec);
                }
            }
        }
        if grid.is_empty() {
            return Err(CliError::usage("distortion grid is empty"));
        }
        let classes = self.dataset.classes();
        let mut translation = self.translation.resolve("translation", TranslationConfig::profile)?;
        translation.seed = self.seed;
        translation
            .validate()
            .map_err(|e| CliError::usage(format!("[translation] {e}")))?;
        let mut segmentation = self.segmentation.resolve("segmentation", SegConfig::profile)?;
        segmentation.seed = self.seed;
        segmentation.classes = classes;
        segmentation
            .validate()
            .map_err(|e| CliError::usage(format!("[segmentation] {e}")))?;
        let ov = &self.evaluation.overlaps;
        if ov.is_empty() || ov.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(CliError::usage(format!("[evaluation] overlaps must be a nonempty list in [0, 1], got {ov:?}")));
        }
        if let DatasetConfig::Generate(g) = &self.dataset {
            if g.train == 0 || g.test == 0 || !(2..=8).contains(&g.classes) || g.size < 64 {
                return Err(CliError::usage(format!(
                    "[dataset] generate needs train, test >= 1, classes in [2, 8] and size >= 64; got {g:?}"
                )));
            }
            if g.size < translation.crop {
                return Err(CliError::usage(format!(
                    "[dataset] size {} is smaller than the translation crop {}",
                    g.size, translation.crop
                )));
            }
        }
        Ok(Resolved {
            seed: self.seed,
            branches,
            dataset: self.dataset.clone(),
            grid,
            translation,
            segmentation,
            overlaps: ov.clone(),
        })
    }
}

/// A validated config with profiles expanded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub seed: u64,
    pub branches: Vec<Branch>,
    pub dataset: DatasetConfig,
    pub grid: Vec<DistortionSpec>,
    pub translation: TranslationConfig,
    pub segmentation: SegConfig,
    pub overlaps: Vec<f64>,
}
