//! On-disk layout of one edit run.
//!
//! ```text
//! <dir>/spec.toml          job as run
//! <dir>/trajectory.jsonl   one TrajectoryRecord per line, appended live
//! <dir>/previews/iter_NNNNN.png
//! <dir>/result.json        ResultSummary
//! <dir>/edited.png         only when the run finished
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clipdrag::image_io::Image;
use clipdrag::pipeline::{EditMetrics, EditResult, JobSpec, RunStatus, TrajectoryRecord};
use clipdrag::{DragPair, Error, Result};
use serde::{Deserialize, Serialize};

pub const SPEC_FILE: &str = "spec.toml";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const RESULT_FILE: &str = "result.json";
pub const EDITED_FILE: &str = "edited.png";
pub const PREVIEW_DIR: &str = "previews";

/// Everything in an [`EditResult`] except the image and the trajectory,
/// which live in their own files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub iterations_used: usize,
    pub converged: bool,
    pub final_pairs: Vec<DragPair>,
    pub metrics: Option<EditMetrics>,
    pub finetune_loss: Vec<f64>,
    pub has_image: bool,
}

impl ResultSummary {
    pub fn from_result(result: &EditResult) -> Self {
        Self {
            status: result.status,
            error: result.error.clone(),
            iterations_used: result.iterations_used,
            converged: result.converged,
            final_pairs: result.final_pairs.clone(),
            metrics: result.metrics,
            finetune_loss: result.finetune_loss.clone(),
            has_image: result.edited_image.is_some(),
        }
    }

    /// A run that ended before producing anything.
    pub fn empty(status: RunStatus, error: Option<String>, pairs: Vec<DragPair>) -> Self {
        Self {
            status,
            error,
            iterations_used: 0,
            converged: false,
            final_pairs: pairs,
            metrics: None,
            finetune_loss: Vec::new(),
            has_image: false,
        }
    }
}

pub fn preview_name(iteration: usize) -> String {
    format!("iter_{iteration:05}.png")
}

/// Writes files into a bundle directory as a run progresses.
pub struct BundleWriter {
    dir: PathBuf,
    trajectory: File,
}

impl BundleWriter {
    /// Creates the directory and starts an empty trajectory log.
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join(PREVIEW_DIR))?;
        let trajectory = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(dir.join(TRAJECTORY_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            trajectory,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_spec(&self, job: &JobSpec) -> Result<()> {
        write_atomic(&self.dir.join(SPEC_FILE), job.to_toml()?.as_bytes())
    }

    pub fn append_record(&mut self, record: &TrajectoryRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.trajectory.write_all(&line)?;
        self.trajectory.flush()?;
        Ok(())
    }

    pub fn write_preview(&self, iteration: usize, image: &Image) -> Result<()> {
        write_atomic(&self.preview_path(iteration), &image.png_bytes()?)
    }

    pub fn preview_path(&self, iteration: usize) -> PathBuf {
        self.dir.join(PREVIEW_DIR).join(preview_name(iteration))
    }

    /// Writes `result.json` and, when present, `edited.png`.
    pub fn finish(&self, result: &EditResult) -> Result<ResultSummary> {
        if let Some(image) = &result.edited_image {
            write_atomic(&self.dir.join(EDITED_FILE), &image.png_bytes()?)?;
        }
        let summary = ResultSummary::from_result(result);
        self.write_summary(&summary)?;
        Ok(summary)
    }

    pub fn write_summary(&self, summary: &ResultSummary) -> Result<()> {
        write_atomic(&self.dir.join(RESULT_FILE), &serde_json::to_vec_pretty(summary)?)
    }
}

/// Writes to a sibling temporary file and renames it into place so readers
/// never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_summary(dir: &Path) -> Result<Option<ResultSummary>> {
    let path = dir.join(RESULT_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
}

/// Reads a trajectory log, ignoring a trailing partial line.
pub fn read_trajectory(dir: &Path) -> Result<Vec<TrajectoryRecord>> {
    let path = dir.join(TRAJECTORY_FILE);
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let mut records = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(record) => records.push(record),
            Err(_) => break,
        }
    }
    Ok(records)
}

/// Iterations that have a preview image, ascending.
pub fn list_previews(dir: &Path) -> Vec<usize> {
    let Ok(entries) = fs::read_dir(dir.join(PREVIEW_DIR)) else {
        return Vec::new();
    };
    let mut out: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("iter_")?.strip_suffix(".png")?.parse().ok()
        })
        .collect();
    out.sort_unstable();
    out
}
