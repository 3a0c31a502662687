//! Run metadata, evaluation reports, training history and episode traces.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use segplay_core::env::StepRecord;
use segplay_core::metrics::Aggregate;
use segplay_core::selfplay::HistoryRow;

use crate::error::{Error, Result};
use crate::pipeline::{EvalReport, ImageEval};

/// Version string baked in at build time (`git describe` when available).
pub const VERSION: &str = env!("SEGPLAY_VERSION");

/// Written next to every artifact so a run can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Value,
}

impl RunInfo {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed,
            config: serde_json::to_value(config)?,
        })
    }

    /// Path of the run file belonging to `artifact`: `<stem>.run.json` beside
    /// it, or `run.json` inside it when the artifact is a directory.
    pub fn path_for(artifact: &Path) -> PathBuf {
        if artifact.is_dir() {
            return artifact.join("run.json");
        }
        let stem = artifact
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        artifact.with_file_name(format!("{stem}.run.json"))
    }

    pub fn write_for(&self, artifact: &Path) -> Result<PathBuf> {
        let p = Self::path_for(artifact);
        write_json(&p, self)?;
        Ok(p)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trace(path: &Path, steps: &[StepRecord]) -> Result<()> {
    write_jsonl(path, steps)
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Evaluation report as written by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub per_image: Vec<ImageEval>,
    pub aggregate: Aggregate,
    pub notes: Vec<String>,
    pub config_echo: Value,
    pub seed: u64,
    pub version: String,
}

impl Report {
    pub fn new(method: &str, eval: EvalReport, config: &impl Serialize, seed: u64) -> Result<Self> {
        Ok(Self {
            method: method.to_string(),
            per_image: eval.per_image,
            aggregate: eval.aggregate,
            notes: vec![
                "binary foreground metrics, averaged per image".into(),
                "an empty prediction on an empty ground truth scores IoU = Dice = 1".into(),
                "tp/tn/fp/fn are percentages of each image, averaged".into(),
            ],
            config_echo: serde_json::to_value(config)?,
            seed,
            version: VERSION.to_string(),
        })
    }

    /// Fixed-width summary table.
    pub fn table(&self) -> String {
        let a = &self.aggregate;
        format!(
            "{:<16} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n{:<16} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}\n",
            "method", "mIoU", "mDSC", "TP", "TN", "FP", "FN",
            self.method, 100.0 * a.miou, 100.0 * a.mdsc, a.tp, a.tn, a.fp, a.fn_,
        )
    }
}
