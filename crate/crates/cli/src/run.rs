//! Executing guided runs and persisting their artifacts.
//!
//! Each run directory holds `manifest.json`, `trace.jsonl`, `best.png`,
//! `final.png` and `summary.json`. A failed run keeps whatever it produced
//! plus the partial trace.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use featinv::backbone::DiffusionBackbone;
use featinv::guidance::{generate, GuidanceConfig, StepRecord};
use featinv::schedule::ScheduleSpec;
use serde::{Deserialize, Serialize};

use crate::config::{Prepared, RunConfig, TargetProvenance};
use crate::error::{CliError, CliResult};

/// Per-run seed derived from the base seed and the run index (splitmix64 mixing).
pub fn run_seed(base: u64, index: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(base ^ mix(index as u64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub run_index: usize,
    pub seed: u64,
    pub scalar: String,
    /// Fully resolved configuration, defaults included.
    pub config: RunConfig,
    /// Guidance settings actually used (per-run seed, sweep overrides).
    pub guidance: GuidanceConfig,
    pub extractor_id: String,
    pub extractor_kind: String,
    pub extractor_digest: Option<String>,
    pub schedule: ScheduleSpec,
    pub backbone_checkpoint: PathBuf,
    pub backbone_digest: String,
    pub target: TargetProvenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_index: usize,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub best_distance: Option<f64>,
    pub best_step: Option<(usize, usize)>,
    pub final_distance: Option<f64>,
    pub flagged_steps: usize,
    pub records: usize,
    pub elapsed_secs: f64,
}

/// One guided run to execute.
#[derive(Debug, Clone)]
pub struct Job {
    pub dir: PathBuf,
    pub run_index: usize,
    pub guidance: GuidanceConfig,
}

/// Jobs for a plain `generate` call: `config.runs` runs under `output_dir/run_XXX`.
pub fn generate_jobs(config: &RunConfig) -> Vec<Job> {
    (0..config.runs)
        .map(|i| Job {
            dir: config.output_dir.join(format!("run_{i:03}")),
            run_index: i,
            guidance: GuidanceConfig { seed: run_seed(config.guidance.seed, i), ..config.guidance.clone() },
        })
        .collect()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Run(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::run)?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_trace(path: &Path, records: &[StepRecord]) -> CliResult<()> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(CliError::run)?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_trace(path: &Path) -> CliResult<Vec<StepRecord>> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    std::io::BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| io_err(path, e))?;
            serde_json::from_str(&l).map_err(|e| io_err(path, e))
        })
        .collect()
}

/// Numbers re-derived from a trace file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub records: usize,
    pub best_distance: f64,
    pub best_step: (usize, usize),
    /// Loss of the final image, if the run completed.
    pub final_distance: Option<f64>,
    pub flagged_steps: usize,
}

pub fn summarize_records(records: &[StepRecord]) -> CliResult<TraceSummary> {
    let mut best: Option<&StepRecord> = None;
    for r in records {
        if best.is_none_or(|b| r.loss < b.loss) {
            best = Some(r);
        }
    }
    let best = best.ok_or_else(|| CliError::Run("empty trace".into()))?;
    Ok(TraceSummary {
        records: records.len(),
        best_distance: best.loss,
        best_step: (best.t, best.k),
        final_distance: records.last().filter(|r| r.is_final()).map(|r| r.loss),
        flagged_steps: records.iter().filter(|r| r.flagged).count(),
    })
}

pub fn summarize_trace(path: &Path) -> CliResult<TraceSummary> {
    summarize_records(&read_trace(path)?)
}

/// Execute one job and write its directory. Errors are folded into the summary.
pub fn execute(prepared: &Prepared, job: &Job) -> RunSummary {
    let start = Instant::now();
    let mut summary = RunSummary {
        run_index: job.run_index,
        seed: job.guidance.seed,
        status: RunStatus::Failed,
        error: None,
        best_distance: None,
        best_step: None,
        final_distance: None,
        flagged_steps: 0,
        records: 0,
        elapsed_secs: 0.0,
    };
    if let Err(e) = execute_inner(prepared, job, &mut summary) {
        summary.error = Some(e.to_string());
    }
    summary.elapsed_secs = start.elapsed().as_secs_f64();
    if std::fs::create_dir_all(&job.dir).is_ok() {
        let _ = write_json(&job.dir.join("summary.json"), &summary);
    }
    summary
}

fn execute_inner(prepared: &Prepared, job: &Job, summary: &mut RunSummary) -> CliResult<()> {
    std::fs::create_dir_all(&job.dir).map_err(|e| io_err(&job.dir, e))?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        run_index: job.run_index,
        seed: job.guidance.seed,
        scalar: "f32".into(),
        config: prepared.config.clone(),
        guidance: job.guidance.clone(),
        extractor_id: prepared.extractor.id().to_string(),
        extractor_kind: prepared.extractor_kind.clone(),
        extractor_digest: prepared.extractor_digest.clone(),
        schedule: prepared.backbone.schedule().spec(),
        backbone_checkpoint: prepared.config.backbone.checkpoint.clone(),
        backbone_digest: prepared.backbone_digest.clone(),
        target: prepared.provenance.clone(),
    };
    write_json(&job.dir.join("manifest.json"), &manifest)?;
    prepared.target.save(&job.dir.join("target.fvec")).map_err(CliError::run)?;

    let trace_path = job.dir.join("trace.jsonl");
    match generate(&prepared.target, &prepared.backbone, prepared.extractor.as_ref(), &job.guidance) {
        Ok(trace) => {
            write_trace(&trace_path, &trace.records)?;
            trace.best_image.save_png(&job.dir.join("best.png")).map_err(CliError::run)?;
            trace.final_image.save_png(&job.dir.join("final.png")).map_err(CliError::run)?;
            summary.status = RunStatus::Ok;
            summary.best_distance = Some(trace.best_distance);
            summary.best_step = Some(trace.best_step);
            summary.final_distance = Some(trace.final_distance);
            summary.flagged_steps = trace.flagged_steps;
            summary.records = trace.records.len();
            Ok(())
        }
        Err(e) => {
            write_trace(&trace_path, &e.records)?;
            summary.records = e.records.len();
            if let Ok(partial) = summarize_records(&e.records) {
                summary.best_distance = Some(partial.best_distance);
                summary.best_step = Some(partial.best_step);
            }
            Err(CliError::Run(e.to_string()))
        }
    }
}

/// Run `jobs` on up to `workers` threads; results come back in job order.
pub fn execute_all(prepared: &Prepared, jobs: &[Job], workers: usize, progress: bool) -> Vec<RunSummary> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<RunSummary>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let summary = execute(prepared, job);
                if progress {
                    report_line(job, &summary);
                }
                results.lock().expect("no panics while locked")[i] = Some(summary);
            });
        }
    });
    results.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every job ran")).collect()
}

fn report_line(job: &Job, s: &RunSummary) {
    match s.status {
        RunStatus::Ok => eprintln!(
            "{}: best {:.6} at {:?}, final {:.6} ({:.1}s)",
            job.dir.display(),
            s.best_distance.unwrap_or(f64::NAN),
            s.best_step.unwrap_or_default(),
            s.final_distance.unwrap_or(f64::NAN),
            s.elapsed_secs
        ),
        RunStatus::Failed => eprintln!("{}: FAILED: {}", job.dir.display(), s.error.as_deref().unwrap_or("unknown")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: usize, k: usize, loss: f64) -> StepRecord {
        StepRecord {
            t,
            k,
            loss,
            grad_std: None,
            grad_max_abs: None,
            grad_norm: None,
            eps_norm: None,
            normalized_norm: None,
            normalized_std: None,
            clip_threshold: None,
            clipped_max_abs: None,
            flagged: false,
        }
    }

    #[test]
    fn run_seeds_are_distinct_and_stable() {
        let seeds: Vec<u64> = (0..100).map(|i| run_seed(7, i)).collect();
        let mut uniq = seeds.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 100);
        assert_eq!(run_seed(7, 3), seeds[3]);
        assert_ne!(run_seed(8, 3), seeds[3]);
    }

    #[test]
    fn summary_from_records_takes_first_minimum() {
        let records = vec![rec(3, 1, 5.0), rec(2, 1, 1.0), rec(1, 1, 1.0), rec(0, 0, 2.0)];
        let s = summarize_records(&records).unwrap();
        assert_eq!(s.best_distance, 1.0);
        assert_eq!(s.best_step, (2, 1));
        assert_eq!(s.final_distance, Some(2.0));
        assert!(summarize_records(&[]).is_err());
    }

    #[test]
    fn trace_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let records = vec![rec(2, 1, 0.5), rec(0, 0, 0.25)];
        write_trace(&path, &records).unwrap();
        assert_eq!(read_trace(&path).unwrap(), records);
    }
}
