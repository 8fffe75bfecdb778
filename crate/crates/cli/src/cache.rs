//! Content-addressed stage cache under `<out>/cache/<stage>/<key>`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
const MARKER: &str = "stage.json";

/// What a stage consumed and produced. Stored as `stage.json` next to the
/// artifacts; artifact paths are relative to `dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub dir: PathBuf,
    pub params: Value,
    pub inputs: Vec<String>,
    pub artifacts: Vec<String>,
    pub seconds: f64,
    #[serde(default)]
    pub cached: bool,
}

impl StageRecord {
    pub fn path(&self, artifact: &str) -> PathBuf {
        self.dir.join(artifact)
    }

    /// The recorded path of `artifact`, or an error naming this stage when
    /// it has gone missing.
    pub fn require(&self, artifact: &str) -> CliResult<PathBuf> {
        let p = self.path(artifact);
        if p.exists() {
            Ok(p)
        } else {
            Err(missing(&self.stage, &p))
        }
    }
}

fn missing(stage: &str, path: &Path) -> CliError {
    CliError::stage(
        stage,
        anyhow::anyhow!("artifact {} is missing; re-run stage `{stage}`", path.display()),
    )
}

#[derive(Clone, Debug)]
pub struct Cache {
    root: PathBuf,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key(stage: &str, params: &Value, inputs: &[&StageRecord]) -> String {
        let doc = json!({
            "stage": stage,
            "version": TOOL_VERSION,
            "params": params,
            "inputs": inputs.iter().map(|r| &r.key).collect::<Vec<_>>(),
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }

    /// Returns the cached record for this (stage, params, inputs) or runs
    /// `build` in a scratch directory, which is renamed into place on success.
    /// `build` returns the artifact paths it wrote, relative to its directory.
    pub fn run(
        &self,
        stage: &str,
        params: Value,
        inputs: &[&StageRecord],
        build: impl FnOnce(&Path) -> anyhow::Result<Vec<String>>,
    ) -> CliResult<StageRecord> {
        let key = Self::key(stage, &params, inputs);
        let dir = self.root.join(stage).join(&key[..24]);
        let marker = dir.join(MARKER);
        if marker.is_file() {
            let text = fs::read_to_string(&marker).map_err(|e| CliError::stage(stage, e))?;
            let mut rec: StageRecord = serde_json::from_str(&text).map_err(|e| CliError::stage(stage, e))?;
            rec.dir = dir;
            rec.cached = true;
            for a in &rec.artifacts {
                rec.require(a)?;
            }
            log::debug!("{stage} {} served from cache", &key[..12]);
            return Ok(rec);
        }
        let scratch = self.root.join(stage).join(format!(".build-{}", &key[..24]));
        let io = |e: std::io::Error| CliError::stage(stage, e);
        if scratch.exists() {
            fs::remove_dir_all(&scratch).map_err(io)?;
        }
        fs::create_dir_all(&scratch).map_err(io)?;
        log::info!("running {stage} {}", &key[..12]);
        let start = Instant::now();
        let artifacts = build(&scratch).map_err(|e| CliError::stage(stage, e))?;
        let seconds = start.elapsed().as_secs_f64();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io)?;
        }
        fs::rename(&scratch, &dir).map_err(io)?;
        let rec = StageRecord {
            stage: stage.to_owned(),
            key,
            dir,
            params,
            inputs: inputs.iter().map(|r| r.key.clone()).collect(),
            artifacts,
            seconds,
            cached: false,
        };
        for a in &rec.artifacts {
            rec.require(a)?;
        }
        let text = serde_json::to_string_pretty(&rec).map_err(|e| CliError::stage(stage, e))?;
        fs::write(&marker, text).map_err(io)?;
        Ok(rec)
    }
}
