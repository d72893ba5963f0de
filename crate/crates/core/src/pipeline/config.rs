use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::completeness::CoverageParams;
use crate::error::{Error, Result};
use crate::presence::PresenceParams;
use crate::roi::CoverageMode;
use crate::ssim::{FlagPolicy, SsimParams, TemplateId};
use crate::superimpose::{ThresholdParams, DEFAULT_BATCH_SIZE};
use crate::volume::LocaliserCriteria;

pub const PLACEHOLDERS: [&str; 4] = ["{input}", "{reference}", "{output}", "{transform}"];

/// Run configuration. Keys mirror the CLI flags; the nested tables expose
/// the module parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: Option<PathBuf>,
    pub template_dir: Option<PathBuf>,
    pub roi_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Shell command with `{input}`, `{reference}`, `{output}` and
    /// `{transform}` placeholders.
    pub registration_cmd: Option<String>,
    pub batch_size: usize,
    pub ssim_percentile: f64,
    pub presence_tolerance: f64,
    pub hu_threshold: f64,
    /// Superimposition annotation log applied in replay mode. Without it the
    /// run pauses after building batches.
    pub replay_annotations: Option<PathBuf>,
    /// JSON-lines verdicts for series flagged by similarity QC.
    pub similarity_reviews: Option<PathBuf>,
    /// Patients younger than this use the younger template.
    pub age_cut_years: f64,
    pub default_template: TemplateId,
    /// Worker threads for per-series stages; 0 uses all cores.
    pub workers: usize,
    pub roi_coverage: CoverageMode,
    pub heatmap_presence_bins: usize,
    pub histogram_bins: usize,
    pub ssim: SsimParams,
    pub completeness: CoverageParams,
    pub localiser: LocaliserCriteria,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            manifest: None,
            template_dir: None,
            roi_dir: None,
            out_dir: None,
            registration_cmd: None,
            batch_size: DEFAULT_BATCH_SIZE,
            ssim_percentile: 0.05,
            presence_tolerance: 0.05,
            hu_threshold: 100.0,
            replay_annotations: None,
            similarity_reviews: None,
            age_cut_years: 72.5,
            default_template: TemplateId::Older7580,
            workers: 0,
            roi_coverage: CoverageMode::Extent,
            heatmap_presence_bins: 20,
            histogram_bins: 40,
            ssim: SsimParams::default(),
            completeness: CoverageParams::default(),
            localiser: LocaliserCriteria::default(),
        }
    }
}

/// Paths a full run needs.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub template_dir: PathBuf,
    pub roi_dir: PathBuf,
    pub out_dir: PathBuf,
    pub registration_cmd: String,
}

impl PipelineConfig {
    /// Reads JSON (`.json`) or TOML (anything else). Relative paths are
    /// taken from the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.manifest,
            &mut cfg.template_dir,
            &mut cfg.roi_dir,
            &mut cfg.out_dir,
            &mut cfg.replay_annotations,
            &mut cfg.similarity_reviews,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.batch_size > u16::MAX as usize {
            return bad("batch_size must be between 1 and 65535");
        }
        if !(0.0..=1.0).contains(&self.ssim_percentile) {
            return bad("ssim_percentile must lie in [0, 1]");
        }
        if !self.hu_threshold.is_finite() {
            return bad("hu_threshold must be finite");
        }
        if !self.age_cut_years.is_finite() {
            return bad("age_cut_years must be finite");
        }
        if self.heatmap_presence_bins == 0 || self.histogram_bins == 0 {
            return bad("bin counts must be positive");
        }
        if let CoverageMode::Presence { tolerance } = self.roi_coverage {
            PresenceParams::new(tolerance)?;
        }
        PresenceParams::new(self.presence_tolerance)?;
        self.ssim.validate()?;
        self.completeness.validate()?;
        if let Some(cmd) = &self.registration_cmd {
            check_command_template(cmd)?;
        }
        Ok(())
    }

    pub fn run_paths(&self) -> Result<RunPaths> {
        let need =
            |v: &Option<PathBuf>, name: &str| v.clone().ok_or_else(|| Error::Config(format!("{name} is required")));
        let registration_cmd = self
            .registration_cmd
            .clone()
            .ok_or_else(|| Error::Config("registration_cmd is required".into()))?;
        check_command_template(&registration_cmd)?;
        Ok(RunPaths {
            template_dir: need(&self.template_dir, "template_dir")?,
            roi_dir: need(&self.roi_dir, "roi_dir")?,
            out_dir: need(&self.out_dir, "out_dir")?,
            registration_cmd,
        })
    }

    pub fn presence(&self) -> PresenceParams {
        PresenceParams {
            tolerance: self.presence_tolerance,
        }
    }

    pub fn threshold(&self) -> ThresholdParams {
        ThresholdParams {
            thresh: self.hu_threshold,
        }
    }

    pub fn flag_policy(&self) -> FlagPolicy {
        FlagPolicy {
            percentile: self.ssim_percentile,
            ..FlagPolicy::default()
        }
    }
}

pub fn check_command_template(cmd: &str) -> Result<()> {
    let missing: Vec<&str> = PLACEHOLDERS.into_iter().filter(|p| !cmd.contains(p)).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "registration_cmd lacks placeholders {}",
            missing.join(", ")
        )))
    }
}
