//! Implementations of the `edit`, `eval` and `finetune` subcommands.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use clipdrag::evaluation::{run_benchmark, BenchmarkReport};
use clipdrag::finetune::{finetune_identity, LoraConfig};
use clipdrag::image_io::Image;
use clipdrag::pipeline::{run_edit, BackendSpec, EditObserver, JobSpec, RunStatus, Stage, TrajectoryRecord};
use clipdrag::Error;
use log::{info, warn};
use serde::Serialize;

use crate::bundle::{BundleWriter, ResultSummary};

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Failed = 1,
    Invalid = 2,
    Cancelled = 130,
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        Self {
            exit: Exit::Invalid,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    /// Problems with the inputs exit with [`Exit::Invalid`], anything raised
    /// by the computation itself with [`Exit::Failed`].
    fn from(e: Error) -> Self {
        let exit = match e {
            Error::InvalidJob(_)
            | Error::Image { .. }
            | Error::Config(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Checkpoint(_)
            | Error::EmptySelector(_) => Exit::Invalid,
            _ => Exit::Failed,
        };
        Self {
            exit,
            message: e.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

struct BundleObserver<'a> {
    writer: BundleWriter,
    cancel: &'a AtomicBool,
    max_iterations: usize,
    failures: usize,
}

impl BundleObserver<'_> {
    fn note(&mut self, what: &str, result: clipdrag::Result<()>) {
        if let Err(e) = result {
            self.failures += 1;
            warn!("{what}: {e}");
        }
    }
}

impl EditObserver for BundleObserver<'_> {
    fn stage(&mut self, stage: Stage) {
        info!("{stage:?}");
    }

    fn iteration(&mut self, record: &TrajectoryRecord) {
        let written = self.writer.append_record(record);
        self.note("trajectory log", written);
        if record.preview {
            info!(
                "iteration {}/{}: L_ms {:.4}, mean distance {:.2}",
                record.iteration, self.max_iterations, record.motion_loss, record.mean_target_distance
            );
        }
    }

    fn preview(&mut self, iteration: usize, image: &Image) {
        let written = self.writer.write_preview(iteration, image);
        self.note("preview", written);
    }

    fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }
}

/// Runs one job file and writes its bundle into `out`. Returns the summary
/// and the exit code matching its status.
pub fn edit(config: &Path, out: &Path, seed: Option<u64>, cancel: &AtomicBool) -> Result<(ResultSummary, Exit), CliError> {
    let mut job = JobSpec::load(config).map_err(|e| CliError::invalid(format!("{}: {e}", config.display())))?;
    if let Some(seed) = seed {
        job.hyperparams.seed = seed;
    }
    let inputs = job.load_inputs()?;
    let dims = inputs.image.dims();
    let model = job.backend.build(dims)?;
    let encoder = job.encoder.build(dims)?;

    let writer = BundleWriter::create(out)?;
    writer.write_spec(&job)?;
    let mut observer = BundleObserver {
        writer,
        cancel,
        max_iterations: job.hyperparams.max_iterations,
        failures: 0,
    };
    let result = run_edit(&job, &inputs, model, &encoder, &mut observer)?;
    let summary = observer.writer.finish(&result)?;
    if observer.failures > 0 {
        warn!("{} bundle writes failed", observer.failures);
    }
    let exit = match result.status {
        RunStatus::Done => Exit::Ok,
        RunStatus::Failed => Exit::Failed,
        RunStatus::Cancelled => Exit::Cancelled,
    };
    Ok((summary, exit))
}

/// Runs a benchmark sweep and writes `report.{json,txt,svg}` into `out`.
pub fn eval(jobs: &Path, sweep: &[usize], out: &Path) -> Result<BenchmarkReport, CliError> {
    if sweep.is_empty() {
        return Err(CliError::invalid("sweep must list at least one iteration cap"));
    }
    let report = run_benchmark(jobs, sweep)?;
    report.write(out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneSummary {
    pub adapters: PathBuf,
    pub layers: usize,
    pub parameters: usize,
    pub steps: usize,
    pub loss_first: Option<f64>,
    pub loss_last: Option<f64>,
}

/// Finetunes adapters for one image on the backend described by `backend`.
/// A job that sets `backend.adapters` to `out` must use the same backend.
pub fn finetune(
    image: &Path,
    prompt: &str,
    out: &Path,
    backend: &BackendSpec,
    lora: &LoraConfig,
    seed: u64,
) -> Result<FinetuneSummary, CliError> {
    if prompt.trim().is_empty() {
        return Err(CliError::invalid("prompt must not be empty"));
    }
    if lora.steps == 0 {
        return Err(CliError::invalid("steps must be at least 1"));
    }
    let image = Image::load_png(image)?;
    let backend = BackendSpec {
        adapters: None,
        ..backend.clone()
    };
    let model = backend.build(image.dims())?;
    let schedule = model.noise_schedule(clipdrag::pipeline::Hyperparams::default().denoise_steps)?;
    let outcome = finetune_identity(model, &image.to_tensor()?, prompt, lora, &schedule, seed)?;
    let adapters = outcome
        .adapters
        .ok_or_else(|| CliError::invalid("finetuning produced no adapters"))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(Error::from)?;
    }
    adapters.save(out)?;
    Ok(FinetuneSummary {
        adapters: out.to_path_buf(),
        layers: adapters.layers.len(),
        parameters: adapters.parameter_count(),
        steps: outcome.loss_trace.len(),
        loss_first: outcome.loss_trace.first().copied(),
        loss_last: outcome.loss_trace.last().copied(),
    })
}

/// Parses `10,20,40` into caps.
pub fn parse_sweep(text: &str) -> Result<Vec<usize>, String> {
    let caps: Vec<usize> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| format!("{s:?} is not an iteration count")))
        .collect::<Result<_, _>>()?;
    if caps.is_empty() {
        return Err("sweep must list at least one iteration cap".into());
    }
    Ok(caps)
}
