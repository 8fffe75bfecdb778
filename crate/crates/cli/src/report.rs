//! Per-cell report files and the CSV tables derived from them.

use std::fs;
use std::path::{Path, PathBuf};

use distadapt_core::evaluation::{gain_table, map_over_psnr, write_curve_csv, write_gain_csv, GridCell, MapGrid};
use distadapt_core::{DistortionSpec, EvalReport};
use serde::{Deserialize, Serialize};

use crate::config::Branch;
use crate::error::{CliError, CliResult};
use crate::pipeline::{read_json, write_json, CellRecord};

pub const MAP_OVER_LEVEL: &str = "map_over_level.csv";
pub const MAP_OVER_PSNR: &str = "map_over_psnr.csv";
pub const GAIN_TABLE: &str = "gain_table.csv";

/// `reports/<branch>/<label>.json`. `spec = None` is the pristine test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub branch: Branch,
    pub spec: Option<DistortionSpec>,
    pub report: EvalReport,
    pub model_checkpoint: PathBuf,
    pub translation_checkpoint: Option<PathBuf>,
    pub test_split: PathBuf,
    pub stages: Vec<String>,
}

impl ReportFile {
    pub fn label(&self) -> String {
        self.spec.map_or_else(|| "pristine".into(), |s| s.label())
    }

    pub fn relative_path(&self) -> PathBuf {
        Path::new("reports").join(self.branch.name()).join(format!("{}.json", self.label()))
    }

    pub fn cell(&self, out: &Path) -> CellRecord {
        CellRecord {
            branch: self.branch,
            spec: self.spec,
            map: self.report.map,
            report: out.join(self.relative_path()),
            model_checkpoint: self.model_checkpoint.clone(),
            translation_checkpoint: self.translation_checkpoint.clone(),
            test_split: self.test_split.clone(),
            stages: self.stages.clone(),
        }
    }
}

fn fail(e: impl Into<anyhow::Error>) -> CliError {
    CliError::stage("report", e)
}

pub fn write_reports(out: &Path, reports: &[ReportFile]) -> CliResult<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(reports.len());
    for r in reports {
        let path = out.join(r.relative_path());
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(fail)?;
        }
        write_json(&path, r).map_err(fail)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Every report under `<out>/reports`, in branch then file-name order.
pub fn load_reports(out: &Path) -> CliResult<Vec<ReportFile>> {
    let root = out.join("reports");
    if !root.is_dir() {
        return Err(CliError::stage(
            "report",
            anyhow::anyhow!("{} has no reports; run `experiment` first", out.display()),
        ));
    }
    let mut reports = Vec::new();
    for branch in Branch::ALL {
        let dir = root.join(branch.name());
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(fail)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            reports.push(read_json::<ReportFile>(&f).map_err(fail)?);
        }
    }
    Ok(reports)
}

/// Severity rank of a cell: larger means stronger distortion.
fn severity(spec: &DistortionSpec) -> f64 {
    if spec.kind.level_increases_severity() {
        spec.level
    } else {
        -spec.level
    }
}

fn psnr_field(r: &EvalReport) -> String {
    match r.mean_psnr {
        Some(p) if p.0.is_infinite() => "inf".into(),
        Some(p) => format!("{:.4}", p.0),
        None => "inf".into(),
    }
}

/// `map_over_level.csv`, `map_over_psnr.csv` (baseline branch) and, when all
/// three branches are present, `gain_table.csv`.
pub fn write_tables(out: &Path, reports: &[ReportFile]) -> CliResult<Vec<PathBuf>> {
    let mut written = Vec::new();

    let mut rows: Vec<&ReportFile> = reports.iter().collect();
    rows.sort_by(|a, b| {
        a.branch.cmp(&b.branch).then_with(|| match (&a.spec, &b.spec) {
            (None, None) => std::cmp::Ordering::Equal,
            (None, Some(_)) => std::cmp::Ordering::Less,
            (Some(_), None) => std::cmp::Ordering::Greater,
            (Some(x), Some(y)) => x.kind.cmp(&y.kind).then(severity(x).total_cmp(&severity(y))),
        })
    });
    let path = out.join(MAP_OVER_LEVEL);
    let mut w = csv::Writer::from_path(&path).map_err(fail)?;
    w.write_record(["branch", "kind", "level", "psnr", "map"]).map_err(fail)?;
    for r in rows {
        let (kind, level) = r
            .spec
            .map_or(("pristine".to_owned(), String::new()), |s| (s.kind.name().to_owned(), s.level.to_string()));
        w.write_record([r.branch.name().to_owned(), kind, level, psnr_field(&r.report), format!("{:.6}", r.report.map)])
            .map_err(fail)?;
    }
    w.flush().map_err(fail)?;
    written.push(path);

    let baseline: Vec<(Option<DistortionSpec>, &EvalReport)> = reports
        .iter()
        .filter(|r| r.branch == Branch::Baseline)
        .map(|r| (r.spec, &r.report))
        .collect();
    if !baseline.is_empty() {
        let curve = map_over_psnr(&baseline).map_err(fail)?;
        let path = out.join(MAP_OVER_PSNR);
        write_curve_csv(&curve, fs::File::create(&path).map_err(fail)?).map_err(fail)?;
        written.push(path);
    }

    let grid = |b: Branch| -> MapGrid {
        reports
            .iter()
            .filter(|r| r.branch == b)
            .filter_map(|r| r.spec.map(|s| (GridCell::from(s), r.report.map)))
            .collect()
    };
    let (b, o, p) = (grid(Branch::Baseline), grid(Branch::Oracle), grid(Branch::Proposed));
    if !b.is_empty() && !o.is_empty() && !p.is_empty() {
        let rows = gain_table(&b, &o, &p).map_err(fail)?;
        let path = out.join(GAIN_TABLE);
        write_gain_csv(&rows, fs::File::create(&path).map_err(fail)?).map_err(fail)?;
        written.push(path);
    } else {
        log::info!("gain table needs all three branches; skipped");
    }
    Ok(written)
}
