use std::fs;
use std::path::{Path, PathBuf};

use super::infer::{MetricRow, METRICS_HEADER};
use crate::config::RunConfig;
use crate::data::Level;
use crate::error::{Error, Result};

/// Layout of one run directory:
///
/// ```text
/// config.json
/// checkpoints/{stage1,stage2,latest}.ckpt
/// metrics.csv
/// outputs/<slide>/<level>/…
/// eval/, ablation/, decouple/, report.md
/// ```
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    /// Creates the directory and writes the resolved config.
    pub fn create(root: impl Into<PathBuf>, cfg: &RunConfig) -> Result<Self> {
        let dir = RunDir::new(root);
        fs::create_dir_all(dir.checkpoints()).map_err(|e| Error::io(dir.checkpoints(), e))?;
        if dir.config_path().exists() {
            let existing = dir.config()?;
            if existing.hash()? != cfg.hash()? {
                return Err(Error::Config(format!(
                    "{} holds a different config; use a fresh run directory",
                    dir.root.display()
                )));
            }
        } else {
            cfg.save(&dir.config_path())?;
        }
        Ok(dir)
    }

    /// Opens an existing run directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let dir = RunDir::new(root);
        if !dir.config_path().exists() {
            return Err(Error::Config(format!("{} is not a run directory (no config.json)", dir.root.display())));
        }
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config_path())
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints().join(format!("{name}.ckpt"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn outputs(&self, slide: &str, level: Level) -> PathBuf {
        self.root.join("outputs").join(slide).join(level.file_tag())
    }

    /// Replaces all rows of `phase` in `metrics.csv`, keeping other phases.
    pub fn write_metrics(&self, phase: &str, rows: &[MetricRow]) -> Result<()> {
        let path = self.metrics_path();
        let mut lines: Vec<String> = match fs::read_to_string(&path) {
            Ok(text) => text
                .lines()
                .skip(1)
                .filter(|l| !l.starts_with(&format!("{phase},")))
                .map(str::to_string)
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        lines.extend(rows.iter().map(MetricRow::csv));
        let mut text = String::from(METRICS_HEADER);
        text.push('\n');
        for l in lines {
            text.push_str(&l);
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
