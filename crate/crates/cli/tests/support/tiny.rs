#![allow(dead_code)]

use distadapt_cli::config::{Branch, DatasetConfig, GenerateConfig, GridEntry};
use distadapt_cli::ExperimentConfig;
use distadapt_core::DistortionKind;

pub const TINY: &str = r#"
seed = 3

[dataset]
source = "generate"
train = 6
test = 4
classes = 2
size = 64

[[grid]]
kind = "awgn"
levels = [0, 25]

[translation]
profile = "toy"
crop = 16
residual_blocks = 1
base_filters = 4
epochs_constant = 1
epochs_decay = 1

[segmentation]
profile = "toy"
max_iterations = 3
lr_drop_at = 2
batch_size = 2

[segmentation.arch]
base_filters = 4
depth = 1
"#;

pub fn tiny() -> ExperimentConfig {
    ExperimentConfig::parse(TINY).unwrap()
}

pub fn tiny_with(branches: &[Branch], grid: &[(DistortionKind, &[f64])]) -> ExperimentConfig {
    ExperimentConfig {
        branches: branches.to_vec(),
        grid: grid
            .iter()
            .map(|(kind, levels)| GridEntry {
                kind: *kind,
                levels: levels.to_vec(),
            })
            .collect(),
        ..tiny()
    }
}

pub fn generate(train: usize, test: usize) -> DatasetConfig {
    DatasetConfig::Generate(GenerateConfig {
        train,
        test,
        classes: 2,
        size: 64,
    })
}
