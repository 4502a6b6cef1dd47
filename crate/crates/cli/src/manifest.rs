use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use son_core::presets::ExperimentPreset;
use son_core::runner::ModelKind;
use son_core::{Error, Result};

/// What a command did and where its outputs went. The preset and seed are
/// enough to rerun it.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub model: Option<ModelKind>,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub train_seconds: Option<f64>,
    pub preset: ExperimentPreset,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn start(
        command: &str,
        preset: &ExperimentPreset,
        model: Option<ModelKind>,
        out: &Path,
    ) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: preset.train.seed,
            model,
            out: out.to_path_buf(),
            data: None,
            artifacts: BTreeMap::new(),
            started_unix: now(),
            finished_unix: None,
            train_seconds: None,
            preset: preset.clone(),
        }
    }

    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_unix = Some(now());
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self).map_err(|e| Error::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        std::fs::write(&path, text + "\n").map_err(|source| Error::Io { path, source })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            message: e.to_string(),
        })?;
        m.preset.validate()?;
        Ok(m)
    }
}

pub fn read_preset(path: &Path) -> Result<ExperimentPreset> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentPreset::from_toml(&text)
}
