#[path = "support/tiny.rs"]
mod tiny;

use distadapt_cli::config::{default_grid, Branch, DatasetConfig};
use distadapt_cli::{CliError, ExperimentConfig};
use distadapt_core::{DistortionKind, DistortionSpec};
use distadapt_models::segmentation::SegConfig;
use distadapt_models::translation::TranslationConfig;
use proptest::prelude::*;
use tiny::*;

fn usage(r: Result<impl std::fmt::Debug, CliError>) -> String {
    match r {
        Err(CliError::Usage(m)) => m,
        other => panic!("expected a usage error, got {other:?}"),
    }
}

#[test]
fn empty_file_gives_toy_defaults() {
    let cfg = ExperimentConfig::parse("").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    let r = cfg.resolve().unwrap();
    assert_eq!(r.branches, Branch::ALL.to_vec());
    assert_eq!(r.grid.len(), 17);
    assert_eq!(r.translation, TranslationConfig::toy());
    assert_eq!(r.segmentation, SegConfig::toy());
    assert_eq!(r.overlaps.len(), 10);
}

#[test]
fn default_grid_levels() {
    let levels = |k| default_grid().into_iter().find(|e| e.kind == k).unwrap().levels;
    assert_eq!(levels(DistortionKind::Blur), [1.0, 2.0, 3.0, 5.0]);
    assert_eq!(levels(DistortionKind::Awgn), [10.0, 25.0, 50.0]);
    assert_eq!(levels(DistortionKind::BlockDct), [10.0, 30.0, 50.0, 90.0]);
    assert_eq!(levels(DistortionKind::WaveletPsnr), [28.0, 34.0, 40.0]);
    assert_eq!(levels(DistortionKind::VarblockQp), [22.0, 34.0, 46.0]);
}

#[test]
fn overrides_merge_into_the_profile() {
    let r = tiny().resolve().unwrap();
    assert_eq!(r.translation.crop, 16);
    assert_eq!(r.translation.lambda_cycle, 10.0);
    assert_eq!(r.segmentation.max_iterations, 3);
    assert_eq!(r.segmentation.arch.depth, 1);
    assert_eq!(r.segmentation.lr_initial, SegConfig::toy().lr_initial);
    assert_eq!(r.segmentation.classes, 2, "classes follow the dataset");
    assert_eq!((r.translation.seed, r.segmentation.seed), (3, 3));
}

#[test]
fn paper_profile_resolves() {
    let r = ExperimentConfig::parse("[translation]\nprofile = \"paper\"\n[segmentation]\nprofile = \"paper\"\n[dataset]\nsource = \"generate\"\nsize = 256\n")
        .unwrap()
        .resolve()
        .unwrap();
    assert_eq!(r.translation.epochs(), 200);
    assert_eq!(r.segmentation.lr_drop_at, 18000);
}

#[test]
fn custom_profile_needs_every_field() {
    let msg = usage(ExperimentConfig::parse("[translation]\nprofile = \"custom\"\ncrop = 16\n").unwrap().resolve());
    assert!(msg.contains("[translation]") && msg.contains("missing field"), "{msg}");
    let full = toml::to_string(&TranslationConfig::toy()).unwrap();
    let text = format!("[translation]\nprofile = \"custom\"\n{full}");
    assert_eq!(ExperimentConfig::parse(&text).unwrap().resolve().unwrap().translation, TranslationConfig::toy());
}

#[test]
fn unknown_profile_is_rejected() {
    let msg = usage(ExperimentConfig::parse("[segmentation]\nprofile = \"huge\"\n").unwrap().resolve());
    assert!(msg.contains("huge"), "{msg}");
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(ExperimentConfig::parse("sed = 1\n").is_err());
    assert!(ExperimentConfig::parse("[evaluation]\noverlap = [0.5]\n").is_err());
    assert!(ExperimentConfig::parse("[[grid]]\nkind = \"blur\"\nlevel = [1]\n").is_err());
    let msg = usage(ExperimentConfig::parse("[translation]\ncropp = 16\n").unwrap().resolve());
    assert!(msg.contains("cropp"), "{msg}");
}

#[test]
fn invalid_level_names_the_range() {
    let msg = usage(ExperimentConfig::parse("[[grid]]\nkind = \"varblock_qp\"\nlevels = [60]\n").unwrap().resolve());
    assert!(msg.contains("[0, 51]"), "{msg}");
}

#[test]
fn empty_grid_and_empty_branches_are_rejected() {
    assert!(usage(ExperimentConfig::parse("grid = []\n").unwrap().resolve()).contains("grid"));
    assert!(usage(ExperimentConfig::parse("[[grid]]\nkind = \"blur\"\nlevels = []\n").unwrap().resolve()).contains("grid"));
    assert!(usage(ExperimentConfig::parse("branches = []\n").unwrap().resolve()).contains("branch"));
}

#[test]
fn bad_overlaps_are_rejected() {
    assert!(usage(ExperimentConfig::parse("[evaluation]\noverlaps = []\n").unwrap().resolve()).contains("overlaps"));
    assert!(usage(ExperimentConfig::parse("[evaluation]\noverlaps = [1.5]\n").unwrap().resolve()).contains("overlaps"));
}

#[test]
fn dataset_too_small_for_the_crop_is_rejected() {
    let msg = usage(ExperimentConfig::parse("[translation]\ncrop = 128\n").unwrap().resolve());
    assert!(msg.contains("crop"), "{msg}");
}

#[test]
fn cityscapes_source_parses() {
    let cfg = ExperimentConfig::parse(
        "[dataset]\nsource = \"cityscapes\"\ntrain = \"a\"\ntest = \"b\"\nmapping = \"m.json\"\nclasses = 4\n",
    )
    .unwrap();
    assert!(matches!(&cfg.dataset, DatasetConfig::Cityscapes(c) if c.classes == 4));
    assert_eq!(cfg.resolve().unwrap().segmentation.classes, 4);
    assert!(ExperimentConfig::parse("[dataset]\nsource = \"imagenet\"\n").is_err());
}

#[test]
fn branches_are_deduplicated_and_ordered() {
    let r = ExperimentConfig::parse("branches = [\"proposed\", \"baseline\", \"proposed\"]\n").unwrap().resolve().unwrap();
    assert_eq!(r.branches, [Branch::Baseline, Branch::Proposed]);
}

fn level_strategy(kind: DistortionKind) -> BoxedStrategy<f64> {
    match kind {
        DistortionKind::Blur => (-10.0f64..60.0).boxed(),
        DistortionKind::Awgn => (-10.0f64..300.0).boxed(),
        DistortionKind::BlockDct => (-5i32..110).prop_map(f64::from).boxed(),
        DistortionKind::WaveletPsnr => (-5.0f64..320.0).boxed(),
        DistortionKind::VarblockQp => (-5i32..60).prop_map(f64::from).boxed(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn grid_resolves_exactly_when_every_level_is_valid(
        (kind, levels) in prop::sample::select(DistortionKind::ALL.to_vec())
            .prop_flat_map(|k| (Just(k), prop::collection::vec(level_strategy(k), 1..5)))
    ) {
        let cfg = tiny_with(&[Branch::Baseline], &[(kind, &levels)]);
        let all_valid = levels.iter().all(|&l| DistortionSpec::new(kind, l).validate().is_ok());
        match cfg.resolve() {
            Ok(r) => {
                prop_assert!(all_valid);
                prop_assert!(!r.grid.is_empty());
                prop_assert!(r.grid.iter().all(|s| s.kind == kind && levels.contains(&s.level)));
            }
            Err(CliError::Usage(m)) => {
                prop_assert!(!all_valid);
                prop_assert!(m.contains(kind.range()), "{}", m);
            }
            Err(e) => prop_assert!(false, "{}", e),
        }
    }
}
