//! The JSON run configuration and its override rules
//! (command-line flag > environment variable > config file).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::analysis::DEFAULT_THRESHOLD;
use crate::curation::{SeriesMetadata, SplitConfig, TestSet};
use crate::metrics::SubgroupKey;

pub const ENV_OUT_DIR: &str = "MUSCLE_EVAL_OUT_DIR";
pub const ENV_JOBS: &str = "MUSCLE_EVAL_JOBS";
/// Model name reserved for the voxelwise mean of the `ensemble` inputs.
pub const ENSEMBLE: &str = "ensemble";

const PLACEHOLDERS: [&str; 4] = ["{case_id}", "{series_id}", "{patient_id}", "{exam_id}"];

/// Which test set to evaluate, taken from a stored plan or built from the
/// cohort on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSelection {
    #[serde(default)]
    pub plan: Option<PathBuf>,
    #[serde(default)]
    pub construct: Option<SplitConfig>,
    pub test_set: TestSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Cohort CSV or JSON (by extension).
    pub cohort: PathBuf,
    /// Ground-truth mask path template.
    pub mask: String,
    /// Optional image template; only checked for presence.
    #[serde(default)]
    pub image: Option<String>,
    /// Model name → probability-map path template.
    pub predictions: BTreeMap<String, String>,
    /// Models averaged into the `ensemble` map (empty: no ensemble).
    #[serde(default)]
    pub ensemble: Vec<String>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_subgroup_keys")]
    pub subgroup_keys: Vec<SubgroupKey>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub split: Option<SplitSelection>,
    #[serde(default)]
    pub smi_height_squared: bool,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_subgroup_keys() -> Vec<SubgroupKey> {
    SubgroupKey::ALL.to_vec()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("report")
}

fn default_jobs() -> usize {
    1
}

/// Flag values that win over the environment and the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub threshold: Option<f64>,
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Reads, resolves relative paths against the config's directory,
    /// applies overrides and validates.
    pub fn load(path: &Path, overrides: &Overrides, env: impl Fn(&str) -> Option<String>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("malformed config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.resolve_relative_to(&base);

        if let Some(dir) = env(ENV_OUT_DIR).filter(|s| !s.is_empty()) {
            config.output_dir = PathBuf::from(dir);
        }
        if let Some(jobs) = env(ENV_JOBS).filter(|s| !s.is_empty()) {
            config.jobs =
                jobs.parse().map_err(|_| CliError::Config(format!("{ENV_JOBS}='{jobs}' is not a positive integer")))?;
        }
        if let Some(dir) = &overrides.output_dir {
            config.output_dir = dir.clone();
        }
        config.jobs = overrides.jobs.unwrap_or(config.jobs);
        config.threshold = overrides.threshold.unwrap_or(config.threshold);
        config.seed = overrides.seed.unwrap_or(config.seed);
        config.validate()?;
        Ok(config)
    }

    fn resolve_relative_to(&mut self, base: &Path) {
        let join = |p: &str| -> String {
            if Path::new(p).is_absolute() {
                p.to_string()
            } else {
                base.join(p).to_string_lossy().into_owned()
            }
        };
        self.cohort = base.join(&self.cohort);
        self.output_dir = base.join(&self.output_dir);
        self.mask = join(&self.mask);
        self.image = self.image.as_deref().map(join);
        for template in self.predictions.values_mut() {
            *template = join(template);
        }
        if let Some(plan) = self.split.as_mut().and_then(|s| s.plan.as_mut()) {
            *plan = base.join(&*plan);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.predictions.is_empty() {
            return bad("no prediction maps configured".into());
        }
        if self.predictions.contains_key(ENSEMBLE) {
            return bad(format!("'{ENSEMBLE}' is reserved for the averaged map"));
        }
        if self.ensemble.len() == 1 {
            return bad("an ensemble needs at least two inputs".into());
        }
        for name in &self.ensemble {
            if !self.predictions.contains_key(name) {
                return bad(format!("ensemble input '{name}' has no prediction template"));
            }
        }
        let templates = std::iter::once(&self.mask).chain(self.image.iter()).chain(self.predictions.values());
        for t in templates {
            let stripped = PLACEHOLDERS.iter().fold(t.clone(), |acc, p| acc.replace(p, ""));
            if stripped.contains('{') || stripped.contains('}') {
                return bad(format!("template '{t}' has an unknown placeholder"));
            }
        }
        if !self.cohort.is_file() {
            return bad(format!("cohort file {} does not exist", self.cohort.display()));
        }
        if let Some(split) = &self.split {
            match (&split.plan, &split.construct) {
                (Some(plan), None) if !plan.is_file() => {
                    return bad(format!("split plan {} does not exist", plan.display()))
                }
                (Some(_), None) | (None, Some(_)) => {}
                _ => return bad("split needs exactly one of 'plan' or 'construct'".into()),
            }
        }
        Ok(())
    }

    /// Name of the model whose scores go into `cases.csv`.
    pub fn primary(&self) -> String {
        if self.ensemble.is_empty() {
            self.predictions.keys().next().cloned().unwrap_or_default()
        } else {
            ENSEMBLE.to_string()
        }
    }
}

pub fn render(template: &str, meta: &SeriesMetadata) -> PathBuf {
    PathBuf::from(
        template
            .replace("{case_id}", &meta.series_id)
            .replace("{series_id}", &meta.series_id)
            .replace("{patient_id}", &meta.patient_id)
            .replace("{exam_id}", &meta.exam_id),
    )
}
