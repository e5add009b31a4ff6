//! Run configuration (TOML) and its resolution into loaded models and a target feature.

use std::path::{Path, PathBuf};

use featinv::analysis::{norm_statistics, normalize_to_norm, scale_feature};
use featinv::backbone::{DiffusionBackbone, ToyUnet};
use featinv::extractor::{FeatureExtractor, PooledMeanExtractor, ToyCnnExtractor};
use featinv::feature::FeatureVector;
use featinv::guidance::GuidanceConfig;
use featinv::quantizer::QuantizedImage;
use featinv::schedule::ScheduleSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::S;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default = "one")]
    pub workers: usize,
    pub backbone: BackboneSource,
    pub extractor: ExtractorSource,
    pub target: TargetSpec,
    /// Expected schedule; must match the one stored in the backbone checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    /// `guidance.seed` is the base seed; run `i` uses `run_seed(seed, i)`.
    #[serde(default)]
    pub guidance: GuidanceConfig,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSource {
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExtractorSource {
    ToyCnn { checkpoint: PathBuf },
    PooledMean {
        #[serde(default = "two")]
        grid: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub source: TargetSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<Transform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSource {
    /// Feature file produced by the active extractor.
    Feature { path: PathBuf },
    /// Image encoded with the active extractor.
    Image { path: PathBuf },
    /// Externally produced feature (e.g. a caption embedding); adopted by the active extractor.
    Caption { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Transform {
    Scale { factor: f64 },
    Normalize { norm: f64 },
    /// Rescale to the mean norm of a cohort of feature files.
    CohortNorm { cohort: Vec<PathBuf> },
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(CliError::config)
    }

    /// Parse `path` and resolve relative paths against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.backbone.checkpoint);
        if let ExtractorSource::ToyCnn { checkpoint } = &mut self.extractor {
            fix(checkpoint);
        }
        match &mut self.target.source {
            TargetSource::Feature { path } | TargetSource::Image { path } | TargetSource::Caption { path } => fix(path),
        }
        if let Some(Transform::CohortNorm { cohort }) = &mut self.target.transform {
            cohort.iter_mut().for_each(fix);
        }
    }

    /// Checks that need no model loading.
    pub fn validate(&self) -> CliResult<()> {
        if self.runs == 0 {
            return Err(CliError::Config("runs must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        let mut paths = vec![&self.backbone.checkpoint];
        if let ExtractorSource::ToyCnn { checkpoint } = &self.extractor {
            paths.push(checkpoint);
        }
        match &self.target.source {
            TargetSource::Feature { path } | TargetSource::Image { path } | TargetSource::Caption { path } => paths.push(path),
        }
        match &self.target.transform {
            Some(Transform::CohortNorm { cohort }) => {
                if cohort.is_empty() {
                    return Err(CliError::Config("cohort-norm transform needs at least one feature file".into()));
                }
                paths.extend(cohort.iter());
            }
            Some(Transform::Scale { factor }) if !factor.is_finite() => {
                return Err(CliError::Config("scale factor must be finite".into()));
            }
            Some(Transform::Normalize { norm }) if !(*norm > 0.0 && norm.is_finite()) => {
                return Err(CliError::Config("normalize target norm must be positive".into()));
            }
            _ => {}
        }
        for p in paths {
            if !p.exists() {
                return Err(CliError::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// What the target feature was made from, as recorded in every run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetProvenance {
    pub source: TargetSource,
    pub transform: Option<Transform>,
    /// Extractor id found in the source file, when it differed from the active one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relabeled_from: Option<String>,
    pub source_norm: f64,
    pub target_norm: f64,
}

pub type BoxedExtractor = Box<dyn FeatureExtractor<S>>;

/// Loaded models plus the resolved target; shared read-only by all runs.
pub struct Prepared {
    pub config: RunConfig,
    pub backbone: ToyUnet<S>,
    pub backbone_digest: String,
    pub extractor: BoxedExtractor,
    pub extractor_digest: Option<String>,
    pub extractor_kind: String,
    pub target: FeatureVector<S>,
    pub provenance: TargetProvenance,
}

pub fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Load the extractor named by `source` for images of `shape`.
pub fn load_extractor(source: &ExtractorSource, shape: [usize; 3]) -> CliResult<(BoxedExtractor, Option<String>, String)> {
    match source {
        ExtractorSource::ToyCnn { checkpoint } => {
            let ex = ToyCnnExtractor::<S>::load(checkpoint).map_err(|e| CliError::Config(format!("{}: {e}", checkpoint.display())))?;
            if FeatureExtractor::<S>::image_shape(&ex) != shape {
                return Err(CliError::Config(format!(
                    "extractor expects images of shape {:?}, backbone produces {:?}",
                    FeatureExtractor::<S>::image_shape(&ex),
                    shape
                )));
            }
            Ok((Box::new(ex), Some(file_digest(checkpoint)?), "toy-cnn".into()))
        }
        ExtractorSource::PooledMean { grid } => {
            let ex = PooledMeanExtractor::new(shape, *grid).map_err(CliError::config)?;
            Ok((Box::new(ex), None, "pooled-mean".into()))
        }
    }
}

fn load_feature(path: &Path) -> CliResult<FeatureVector<S>> {
    FeatureVector::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Build the target feature from its source and optional transform.
pub fn resolve_target(spec: &TargetSpec, extractor: &dyn FeatureExtractor<S>) -> CliResult<(FeatureVector<S>, TargetProvenance)> {
    let mut relabeled_from = None;
    let base = match &spec.source {
        TargetSource::Feature { path } => load_feature(path)?,
        TargetSource::Image { path } => {
            let channels = extractor.image_shape()[0];
            let img = QuantizedImage::<S>::load_png(path, channels).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            extractor.extract(&img).map_err(CliError::config)?
        }
        TargetSource::Caption { path } => {
            let f = load_feature(path)?;
            if f.extractor_id() != extractor.id() {
                relabeled_from = Some(f.extractor_id().to_string());
            }
            f.relabel(extractor.id())
        }
    };
    if base.extractor_id() != extractor.id() {
        return Err(CliError::Config(format!(
            "target feature comes from extractor '{}', active extractor is '{}'",
            base.extractor_id(),
            extractor.id()
        )));
    }
    if base.dim() != extractor.dim() {
        return Err(CliError::Config(format!("target has dimension {}, extractor produces {}", base.dim(), extractor.dim())));
    }
    let target = match &spec.transform {
        None => base.clone(),
        Some(Transform::Scale { factor }) => scale_feature(&base, *factor as S).map_err(CliError::config)?,
        Some(Transform::Normalize { norm }) => normalize_to_norm(&base, *norm as S).map_err(CliError::config)?,
        Some(Transform::CohortNorm { cohort }) => {
            let feats = cohort.iter().map(|p| load_feature(p)).collect::<CliResult<Vec<_>>>()?;
            let mean = norm_statistics(&feats).map_err(CliError::config)?.mean;
            normalize_to_norm(&base, mean as S).map_err(CliError::config)?
        }
    };
    let provenance = TargetProvenance {
        source: spec.source.clone(),
        transform: spec.transform.clone(),
        relabeled_from,
        source_norm: base.norm() as f64,
        target_norm: target.norm() as f64,
    };
    Ok((target, provenance))
}

impl Prepared {
    /// Load every referenced artifact; all failures here are configuration errors.
    pub fn load(config: RunConfig) -> CliResult<Self> {
        config.validate()?;
        let ck = &config.backbone.checkpoint;
        let backbone = ToyUnet::<S>::load(ck).map_err(|e| CliError::Config(format!("{}: {e}", ck.display())))?;
        let backbone_digest = file_digest(ck)?;
        if let Some(expected) = &config.schedule {
            if *expected != backbone.schedule().spec() {
                return Err(CliError::Config(format!(
                    "config schedule {expected:?} differs from the checkpoint's {:?}",
                    backbone.schedule().spec()
                )));
            }
        }
        config.guidance.validate(backbone.schedule().steps()).map_err(CliError::config)?;
        let (extractor, extractor_digest, extractor_kind) = load_extractor(&config.extractor, backbone.image_shape())?;
        let (target, provenance) = resolve_target(&config.target, extractor.as_ref())?;
        Ok(Self { config, backbone, backbone_digest, extractor, extractor_digest, extractor_kind, target, provenance })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        output_dir = "out"
        [backbone]
        checkpoint = "unet.json"
        [extractor]
        kind = "pooled-mean"
        [target.source]
        kind = "image"
        path = "target.png"
    "#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.runs, 1);
        assert_eq!(cfg.extractor, ExtractorSource::PooledMean { grid: 2 });
        assert_eq!(cfg.guidance, GuidanceConfig::default());
        assert!(cfg.target.transform.is_none());
    }

    #[test]
    fn nested_sections_parse() {
        let text = format!(
            "{MINIMAL}\n[target.transform]\nkind = \"scale\"\nfactor = 0.8\n[guidance]\nguidance_weight = 2.0\nearly_steps = 0\n[schedule]\nsteps = 50\nbeta_start = 0.002\nbeta_end = 0.3\n"
        );
        let cfg = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.target.transform, Some(Transform::Scale { factor: 0.8 }));
        assert_eq!(cfg.guidance.guidance_weight, 2.0);
        assert_eq!(cfg.guidance.early_iterations, 1000);
        assert_eq!(cfg.schedule.unwrap().steps, 50);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::from_toml(&format!("{MINIMAL}\n[guidance]\nweight = 3\n")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.resolve_paths(Path::new("/data/exp"));
        assert_eq!(cfg.backbone.checkpoint, PathBuf::from("/data/exp/unet.json"));
        assert_eq!(cfg.output_dir, PathBuf::from("/data/exp/out"));
    }

    #[test]
    fn missing_paths_and_zero_runs_fail_validation() {
        let mut cfg = RunConfig::from_toml(MINIMAL).unwrap();
        cfg.resolve_paths(Path::new("/nonexistent"));
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        cfg.runs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn resolved_config_roundtrips_through_toml() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }
}
