//! Hyperparameter sweeps over the guidance weight, the clip multiplier, or
//! early-step emphasis. Every value reuses the same per-run seeds, so rows are
//! paired comparisons.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use featinv::analysis::BoxStats;
use featinv::guidance::GuidanceConfig;
use serde::{Deserialize, Serialize};

use crate::config::Prepared;
use crate::error::{CliError, CliResult};
use crate::run::{execute_all, run_seed, Job, RunStatus, RunSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    GuidanceWeight,
    ClipMultiplier,
    Emphasis,
}

impl FromStr for SweepParam {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "w_g" | "guidance-weight" | "guidance_weight" => Ok(Self::GuidanceWeight),
            "clip" | "clip-multiplier" | "clip_multiplier" => Ok(Self::ClipMultiplier),
            "emphasis" => Ok(Self::Emphasis),
            _ => Err(CliError::Config(format!("unknown sweep parameter '{s}' (w_g, clip_multiplier, emphasis)"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::GuidanceWeight => "w_g",
            Self::ClipMultiplier => "clip_multiplier",
            Self::Emphasis => "emphasis",
        }
    }
}

/// Apply one sweep value to a base guidance configuration.
pub fn apply(param: SweepParam, value: &str, base: &GuidanceConfig) -> CliResult<GuidanceConfig> {
    let number = || -> CliResult<f64> {
        value.parse::<f64>().map_err(|_| CliError::Config(format!("'{value}' is not a number")))
    };
    let mut g = base.clone();
    match param {
        SweepParam::GuidanceWeight => g.guidance_weight = number()?,
        SweepParam::ClipMultiplier => g.clip_multiplier = number()?,
        SweepParam::Emphasis => match value {
            "on" => {
                if g.early_steps == 0 {
                    g.early_steps = GuidanceConfig::default().early_steps;
                }
            }
            "off" => g.early_steps = 0,
            _ => return Err(CliError::Config(format!("emphasis values are 'on' and 'off', got '{value}'"))),
        },
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub runs: usize,
    pub failures: usize,
    pub best_distances: Vec<f64>,
    pub final_distances: Vec<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub best: Option<BoxStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, value: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    /// Plain-text table of best distances per value.
    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:>5} {:>5} {:>12} {:>12} {:>12}\n", self.parameter.name(), "runs", "fail", "mean", "std", "median");
        for r in &self.rows {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                s,
                "{:<16} {:>5} {:>5} {:>12} {:>12} {:>12}",
                r.value,
                r.runs,
                r.failures,
                f(r.mean),
                f(r.std),
                f(r.best.as_ref().map(|b| b.median))
            );
        }
        s
    }

    /// Box-plot data, one row per value.
    pub fn boxplot_csv(&self) -> String {
        let mut s = String::from("value,count,min,q1,median,q3,max,mean,std\n");
        for r in &self.rows {
            match &r.best {
                Some(b) => {
                    let _ = writeln!(s, "{},{},{},{},{},{},{},{},{}", r.value, b.count, b.min, b.q1, b.median, b.q3, b.max, b.mean, b.std);
                }
                None => {
                    let _ = writeln!(s, "{},0,,,,,,,", r.value);
                }
            }
        }
        s
    }
}

fn value_dir(root: &Path, value: &str) -> PathBuf {
    let clean: String = value.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
    root.join(format!("value_{clean}"))
}

/// Run the sweep and write `sweep.json`, `boxplot.csv` and `table.txt` under
/// `output_dir/sweep_<param>/`.
pub fn run_sweep(prepared: &Prepared, param: SweepParam, values: &[String], workers: usize, progress: bool) -> CliResult<SweepReport> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let cfg = &prepared.config;
    let steps = featinv::backbone::DiffusionBackbone::schedule(&prepared.backbone).steps();
    let root = cfg.output_dir.join(format!("sweep_{}", param.name()));
    let mut jobs = Vec::new();
    for value in values {
        let g = apply(param, value, &cfg.guidance)?;
        g.validate(steps).map_err(|e| CliError::Config(format!("{}={value}: {e}", param.name())))?;
        for i in 0..cfg.runs {
            jobs.push(Job {
                dir: value_dir(&root, value).join(format!("run_{i:03}")),
                run_index: i,
                guidance: GuidanceConfig { seed: run_seed(cfg.guidance.seed, i), ..g.clone() },
            });
        }
    }
    let summaries = execute_all(prepared, &jobs, workers, progress);
    let rows = values
        .iter()
        .enumerate()
        .map(|(vi, value)| row(value, &summaries[vi * cfg.runs..(vi + 1) * cfg.runs]))
        .collect::<CliResult<Vec<_>>>()?;
    let report = SweepReport { parameter: param, rows };
    std::fs::create_dir_all(&root).map_err(CliError::run)?;
    let write = |name: &str, text: String| std::fs::write(root.join(name), text).map_err(CliError::run);
    write("sweep.json", serde_json::to_string_pretty(&report).map_err(CliError::run)?)?;
    write("boxplot.csv", report.boxplot_csv())?;
    write("table.txt", report.table())?;
    Ok(report)
}

fn row(value: &str, runs: &[RunSummary]) -> CliResult<SweepRow> {
    let ok: Vec<&RunSummary> = runs.iter().filter(|s| s.status == RunStatus::Ok).collect();
    let best_distances: Vec<f64> = ok.iter().filter_map(|s| s.best_distance).collect();
    let final_distances: Vec<f64> = ok.iter().filter_map(|s| s.final_distance).collect();
    let best = if best_distances.is_empty() { None } else { Some(BoxStats::from_values(&best_distances).map_err(CliError::run)?) };
    Ok(SweepRow {
        value: value.to_string(),
        runs: runs.len(),
        failures: runs.len() - ok.len(),
        mean: best.as_ref().map(|b| b.mean),
        std: best.as_ref().map(|b| b.std),
        best,
        best_distances,
        final_distances,
    })
}
