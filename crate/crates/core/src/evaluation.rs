//! Drag accuracy (mean distance) and image fidelity metrics, and the sweep
//! over iteration budgets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::encoder::ToyClipEncoder;
use crate::error::{Error, Result};
use crate::finetune::finetune_identity;
use crate::geometry::{bilinear_sample, euclidean_distance, FeatureMap, PixelPoint};
use crate::image_io::Image;
use crate::pipeline::{run_edit, EditResult, JobSpec, NoObserver, RunStatus};
use crate::tensor;
use crate::tracking::best_match;

/// Where the content that started at `handle_0` ended up: nearest neighbour
/// of its original feature over the whole final map.
pub fn retrack(
    final_features: &FeatureMap,
    original_features: &FeatureMap,
    handle_0: PixelPoint,
    target: PixelPoint,
) -> PixelPoint {
    let reference = bilinear_sample(original_features, handle_0);
    let dims = final_features.dims();
    let everywhere: Vec<PixelPoint> = (0..dims.height)
        .flat_map(|y| (0..dims.width).map(move |x| PixelPoint::new(x as f64, y as f64)))
        .collect();
    best_match(final_features, &reference, &everywhere, target)
        .map(|(p, _)| p)
        .unwrap_or(handle_0)
}

/// Mean over pairs of the distance between the re-tracked handle and its
/// target, in feature-grid units.
pub fn mean_distance(result: &EditResult) -> Result<f64> {
    let snap = result
        .snapshot
        .as_ref()
        .ok_or(Error::Unsupported("mean distance without final features"))?;
    if snap.targets.is_empty() {
        return Err(Error::InvalidJob("no drag pairs".into()));
    }
    let total: f64 = snap
        .original_handles
        .iter()
        .zip(&snap.targets)
        .map(|(&h, &g)| euclidean_distance(retrack(&snap.final_features, &snap.original_features, h, g), g))
        .sum();
    Ok(total / snap.targets.len() as f64)
}

/// A perceptual distance normalized to `[0, 1]`.
pub trait PerceptualMetric {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

/// Mean over the encoder's feature scales of the per-location cosine
/// distance `(1 - cos) / 2` between channel vectors.
pub struct PatchCosineMetric {
    encoder: Arc<ToyClipEncoder>,
}

impl PatchCosineMetric {
    pub fn new(encoder: Arc<ToyClipEncoder>) -> Self {
        Self { encoder }
    }

    fn levels(&self, image: &Image) -> Result<Vec<FeatureMap>> {
        let mut maps = vec![FeatureMap::from_tensor(&image.to_tensor()?)?];
        for level in self.encoder.feature_pyramid(&image.to_tensor()?)? {
            maps.push(FeatureMap::from_tensor(&level)?);
        }
        Ok(maps)
    }
}

fn cell_cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (tensor::norm(a), tensor::norm(b));
    let cos = match (na < 1e-12, nb < 1e-12) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (tensor::dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
    };
    (1.0 - cos) / 2.0
}

impl PerceptualMetric for PatchCosineMetric {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        if a.dims() != b.dims() {
            return Err(Error::ShapeMismatch {
                expected: vec![a.height, a.width],
                actual: vec![b.height, b.width],
            });
        }
        let (la, lb) = (self.levels(a)?, self.levels(b)?);
        let mut total = 0.0;
        for (fa, fb) in la.iter().zip(&lb) {
            let mut level = 0.0;
            for y in 0..fa.height {
                for x in 0..fa.width {
                    level += cell_cosine_distance(&fa.vector_at(y, x), &fb.vector_at(y, x));
                }
            }
            total += level / (fa.height * fa.width) as f64;
        }
        Ok(total / la.len() as f64)
    }
}

/// `1 - d(original, edited)`; identical images score 1.
pub fn image_fidelity(original: &Image, edited: &Image, metric: &dyn PerceptualMetric) -> Result<f64> {
    Ok((1.0 - metric.distance(original, edited)?).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub job: String,
    pub cap: usize,
    pub mean_distance: Option<f64>,
    pub image_fidelity: Option<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapSummary {
    pub cap: usize,
    pub mean_distance: Option<f64>,
    pub image_fidelity: Option<f64>,
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobMetadata {
    pub job: String,
    pub seed: u64,
    pub tracking: crate::tracking::TrackingStrategy,
    pub fusion: crate::fusion::FusionVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub sweep: Vec<usize>,
    pub jobs: Vec<JobMetadata>,
    pub rows: Vec<BenchmarkRow>,
    pub summary: Vec<CapSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl BenchmarkReport {
    fn summarize(sweep: &[usize], rows: &[BenchmarkRow]) -> Vec<CapSummary> {
        sweep
            .iter()
            .map(|&cap| {
                let at: Vec<_> = rows.iter().filter(|r| r.cap == cap && r.error.is_none()).collect();
                CapSummary {
                    cap,
                    mean_distance: mean(at.iter().filter_map(|r| r.mean_distance)),
                    image_fidelity: mean(at.iter().filter_map(|r| r.image_fidelity)),
                    jobs: at.len(),
                }
            })
            .collect()
    }

    /// Times a job's distance grows from one cap to the next larger one.
    pub fn monotonicity_violations(&self) -> usize {
        let mut caps = self.sweep.clone();
        caps.sort_unstable();
        let mut violations = 0;
        for job in &self.jobs {
            let series: Vec<Option<f64>> = caps
                .iter()
                .map(|&c| {
                    self.rows
                        .iter()
                        .find(|r| r.job == job.job && r.cap == c)
                        .and_then(|r| r.mean_distance)
                })
                .collect();
            for w in series.windows(2) {
                if let [Some(a), Some(b)] = w {
                    if *b > *a + 1e-9 {
                        violations += 1;
                    }
                }
            }
        }
        violations
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>6} {:>10} {:>10} {:>6} {:>9}", "job", "cap", "MD", "IF", "iters", "converged");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:>6} {:>10} {:>10} {:>6} {:>9}{}",
                r.job,
                r.cap,
                fmt(r.mean_distance),
                fmt(r.image_fidelity),
                r.iterations_used,
                r.converged,
                r.error.as_ref().map(|e| format!("  error: {e}")).unwrap_or_default()
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<24} {:>6} {:>10} {:>10}", "mean", "cap", "MD", "IF");
        for s in &self.summary {
            let _ = writeln!(out, "{:<24} {:>6} {:>10} {:>10}", format!("({} jobs)", s.jobs), s.cap, fmt(s.mean_distance), fmt(s.image_fidelity));
        }
        out
    }

    /// Two line charts, MD and IF against the iteration cap.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (360.0, 240.0, 40.0);
        let caps: Vec<f64> = self.summary.iter().map(|s| s.cap as f64).collect();
        let (cmin, cmax) = caps.iter().fold((f64::MAX, f64::MIN), |(a, b), &c| (a.min(c), b.max(c)));
        let panel = |title: &str, values: Vec<Option<f64>>, x0: f64| -> String {
            let present: Vec<f64> = values.iter().flatten().copied().collect();
            let (vmin, vmax) = present.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
            let px = |c: f64| x0 + pad + (c - cmin) / span(cmin, cmax) * (w - 2.0 * pad);
            let py = |v: f64| h - pad - (v - vmin) / span(vmin, vmax) * (h - 2.0 * pad);
            let points: Vec<String> = caps
                .iter()
                .zip(&values)
                .filter_map(|(&c, v)| v.map(|v| format!("{:.1},{:.1}", px(c), py(v))))
                .collect();
            let mut s = format!(
                "<g><rect x=\"{x0}\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\" stroke=\"#888\"/>\
                 <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\
                 <polyline fill=\"none\" stroke=\"#c33\" stroke-width=\"2\" points=\"{}\"/>",
                x0 + w / 2.0,
                points.join(" ")
            );
            for (&c, v) in caps.iter().zip(&values) {
                let _ = write!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{c}</text>", px(c), h - pad / 2.0);
                if let Some(v) = v {
                    let _ = write!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#c33\"><title>{v:.4}</title></circle>", px(c), py(*v));
                }
            }
            s.push_str("</g>");
            s
        };
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{h}\">{}{}</svg>\n",
            2.0 * w,
            panel("MD vs max iterations", self.summary.iter().map(|s| s.mean_distance).collect(), 0.0),
            panel("IF vs max iterations", self.summary.iter().map(|s| s.image_fidelity).collect(), w),
        )
    }

    /// Writes `report.json`, `report.txt` and `report.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("report.txt"), self.to_table())?;
        std::fs::write(dir.join("report.svg"), self.to_svg())?;
        Ok(())
    }
}

/// Job files (`*.toml`) in `dir`, sorted by name.
pub fn job_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    files.sort();
    Ok(files)
}

struct PreparedJob {
    name: String,
    spec: JobSpec,
    inputs: crate::pipeline::JobInputs,
    model: Arc<dyn Denoiser>,
    encoder: Arc<ToyClipEncoder>,
}

fn prepare(path: &Path) -> Result<PreparedJob> {
    let mut spec = JobSpec::load(path)?;
    let inputs = spec.load_inputs()?;
    let dims = inputs.image.dims();
    let mut model = spec.backend.build(dims)?;
    let encoder = Arc::new(spec.encoder.build(dims)?);
    let hp = &spec.hyperparams;
    // the adapted model does not depend on the cap, so finetune once per job
    if !hp.skip_finetune && hp.lora.steps > 0 {
        let schedule = model.noise_schedule(hp.denoise_steps)?;
        model = finetune_identity(model, &inputs.image.to_tensor()?, &spec.prompt_original, &hp.lora, &schedule, hp.seed)?.model;
        spec.hyperparams.skip_finetune = true;
    }
    Ok(PreparedJob {
        name: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        spec,
        inputs,
        model,
        encoder,
    })
}

fn run_row(job: &PreparedJob, cap: usize) -> BenchmarkRow {
    let mut spec = job.spec.clone();
    spec.hyperparams.max_iterations = cap;
    let mut row = BenchmarkRow {
        job: job.name.clone(),
        cap,
        mean_distance: None,
        image_fidelity: None,
        iterations_used: 0,
        converged: false,
        error: None,
    };
    let outcome = run_edit(&spec, &job.inputs, job.model.clone(), job.encoder.as_ref(), &mut NoObserver);
    match outcome {
        Ok(result) if result.status == RunStatus::Done => {
            row.iterations_used = result.iterations_used;
            row.converged = result.converged;
            row.mean_distance = result.metrics.map(|m| m.mean_distance);
            let metric = PatchCosineMetric::new(job.encoder.clone());
            match result.edited_image.as_ref().map(|img| image_fidelity(&job.inputs.image, img, &metric)) {
                Some(Ok(v)) => row.image_fidelity = Some(v),
                Some(Err(e)) => row.error = Some(e.to_string()),
                None => {}
            }
        }
        Ok(result) => row.error = Some(result.error.unwrap_or_else(|| format!("{:?}", result.status))),
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Runs every job in `jobs_dir` at every iteration cap of `sweep`. Jobs run
/// in parallel; failures are recorded per row.
pub fn run_benchmark(jobs_dir: &Path, sweep: &[usize]) -> Result<BenchmarkReport> {
    if sweep.is_empty() {
        return Err(Error::Config("sweep must list at least one iteration cap".into()));
    }
    let files = job_files(jobs_dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no job files in {}", jobs_dir.display())));
    }
    let per_job: Vec<(String, Result<PreparedJob>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = files
            .iter()
            .map(|path| {
                let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (name, scope.spawn(move || prepare(path)))
            })
            .collect();
        handles
            .into_iter()
            .map(|(name, h)| (name, h.join().unwrap_or_else(|_| Err(Error::Config("job thread panicked".into())))))
            .collect()
    });

    let mut rows = Vec::new();
    let mut jobs = Vec::new();
    let mut prepared = Vec::new();
    for (name, job) in per_job {
        match job {
            Ok(job) => {
                jobs.push(JobMetadata {
                    job: job.name.clone(),
                    seed: job.spec.hyperparams.seed,
                    tracking: job.spec.hyperparams.tracking,
                    fusion: job.spec.hyperparams.fusion,
                });
                prepared.push(job);
            }
            Err(e) => {
                warn!("job {name} could not be prepared: {e}");
                for &cap in sweep {
                    rows.push(BenchmarkRow {
                        job: name.clone(),
                        cap,
                        mean_distance: None,
                        image_fidelity: None,
                        iterations_used: 0,
                        converged: false,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }
    let computed: Vec<Vec<BenchmarkRow>> = std::thread::scope(|scope| {
        let handles: Vec<_> = prepared
            .iter()
            .map(|job| scope.spawn(move || sweep.iter().map(|&cap| run_row(job, cap)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_default()).collect()
    });
    for job_rows in computed {
        for row in &job_rows {
            info!("{} cap {}: MD {:?} IF {:?}", row.job, row.cap, row.mean_distance, row.image_fidelity);
        }
        rows.extend(job_rows);
    }
    rows.sort_by(|a, b| a.job.cmp(&b.job).then(a.cap.cmp(&b.cap)));
    let summary = BenchmarkReport::summarize(sweep, &rows);
    Ok(BenchmarkReport {
        sweep: sweep.to_vec(),
        jobs,
        rows,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ToyEncoderConfig;
    use crate::geometry::Dims;
    use crate::pipeline::TrackingSnapshot;
    use crate::synthetic::blob_scene;

    fn peak(h: usize, w: usize, px: f64, py: f64) -> FeatureMap {
        FeatureMap::from_fn(1, h, w, move |_, y, x| -((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt())
    }

    fn result_with(final_features: FeatureMap, original: FeatureMap, h: PixelPoint, g: PixelPoint) -> EditResult {
        EditResult {
            status: RunStatus::Done,
            error: None,
            edited_image: None,
            final_pairs: vec![],
            iterations_used: 0,
            converged: true,
            finetune_loss: vec![],
            trajectory: vec![],
            metrics: None,
            snapshot: Some(TrackingSnapshot {
                final_features,
                original_features: original,
                original_handles: vec![h],
                targets: vec![g],
            }),
        }
    }

    #[test]
    fn mean_distance_cases() {
        let (h, g) = (PixelPoint::new(3.0, 5.0), PixelPoint::new(9.0, 5.0));
        let at_target = result_with(peak(12, 12, 9.0, 5.0), peak(12, 12, 3.0, 5.0), h, g);
        assert_eq!(mean_distance(&at_target).unwrap(), 0.0);
        let short = result_with(peak(12, 12, 6.0, 5.0), peak(12, 12, 3.0, 5.0), h, g);
        assert_eq!(mean_distance(&short).unwrap(), 3.0);
        let mut none = short.clone();
        none.snapshot = None;
        assert!(mean_distance(&none).is_err());
    }

    fn metric() -> PatchCosineMetric {
        PatchCosineMetric::new(Arc::new(ToyClipEncoder::new(5, ToyEncoderConfig::default()).unwrap()))
    }

    #[test]
    fn fidelity_bounds() {
        let dims = Dims::new(16, 16);
        let a = blob_scene(dims, PixelPoint::new(5.0, 5.0), 3.0, [0.9, 0.1, 0.1], 1);
        let m = metric();
        assert_eq!(image_fidelity(&a, &a, &m).unwrap(), 1.0);
        let b = blob_scene(dims, PixelPoint::new(10.0, 9.0), 3.0, [0.1, 0.1, 0.9], 2);
        let f = image_fidelity(&a, &b, &m).unwrap();
        assert!((0.0..1.0).contains(&f));
        assert!(image_fidelity(&a, &Image::filled(Dims::new(8, 8), [0.0; 3]), &m).is_err());
    }

    #[test]
    fn cell_distance_extremes() {
        let (a, b) = (vec![1.0, 1.0, 1.0], vec![-1.0, -1.0, -1.0]);
        assert_eq!(cell_cosine_distance(&a, &b), 1.0);
        assert_eq!(cell_cosine_distance(&a, &a), 0.0);
        assert_eq!(cell_cosine_distance(&[0.0; 3], &[0.0; 3]), 0.0);
    }

    #[test]
    fn empty_sweep_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(run_benchmark(dir.path(), &[]).is_err());
        assert!(run_benchmark(dir.path(), &[10]).is_err());
    }

    #[test]
    fn violations_count_increases() {
        let row = |job: &str, cap, md| BenchmarkRow {
            job: job.into(),
            cap,
            mean_distance: Some(md),
            image_fidelity: None,
            iterations_used: cap,
            converged: false,
            error: None,
        };
        let meta = |job: &str| JobMetadata {
            job: job.into(),
            seed: 0,
            tracking: Default::default(),
            fusion: Default::default(),
        };
        let rows = vec![row("a", 10, 3.0), row("a", 20, 2.0), row("a", 40, 2.5), row("b", 10, 1.0), row("b", 20, 1.0), row("b", 40, 0.0)];
        let report = BenchmarkReport {
            sweep: vec![10, 20, 40],
            jobs: vec![meta("a"), meta("b")],
            summary: BenchmarkReport::summarize(&[10, 20, 40], &rows),
            rows,
        };
        assert_eq!(report.monotonicity_violations(), 1);
        assert_eq!(report.summary[0].mean_distance, Some(2.0));
        assert!(report.to_table().lines().count() >= 6);
        assert!(report.to_svg().starts_with("<svg"));
    }
}
