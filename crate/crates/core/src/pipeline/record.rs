use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::ledger::{RejectionReason, Stage};
use crate::completeness::Subgroup;
use crate::roi::RoiCoverage;
use crate::ssim::{InspectionFlag, TemplateId};
use crate::superimpose::Verdict;
use crate::volume::{Orientation, SeriesMetadata};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Passed,
    Rejected { reason: RejectionReason, detail: String },
}

/// Inspector decision applied to a series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewOutcome {
    pub verdict: Verdict,
    pub comment: String,
    pub inspector: String,
}

/// One series and its QC state. Stage statuses are kept in pipeline order
/// and a series rejected at one stage stays pending at every later stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub series_id: String,
    pub patient_id: String,
    pub source_path: PathBuf,
    pub age_years: Option<f64>,
    pub metadata: SeriesMetadata,
    stage_status: BTreeMap<Stage, StageStatus>,
    pub orientation: Option<Orientation>,
    pub template_id: Option<TemplateId>,
    /// Native world mm to template world mm, row-major.
    pub transform: Option<[[f64; 4]; 4]>,
    pub subgroup: Option<Subgroup>,
    pub band_coverage: Option<[f64; 3]>,
    pub ssim_score: Option<f64>,
    pub flag: Option<InspectionFlag>,
    pub similarity_review: Option<ReviewOutcome>,
    pub batch_id: Option<String>,
    pub annotation: Option<ReviewOutcome>,
    pub roi_coverages: Vec<RoiCoverage>,
}

impl SeriesRecord {
    pub fn new(
        series_id: impl Into<String>,
        patient_id: impl Into<String>,
        source_path: impl Into<PathBuf>,
        age_years: Option<f64>,
        metadata: SeriesMetadata,
    ) -> Self {
        let mut stage_status: BTreeMap<Stage, StageStatus> =
            Stage::ALL.into_iter().map(|s| (s, StageStatus::Pending)).collect();
        stage_status.insert(Stage::Source, StageStatus::Passed);
        SeriesRecord {
            series_id: series_id.into(),
            patient_id: patient_id.into(),
            source_path: source_path.into(),
            age_years,
            metadata,
            stage_status,
            orientation: None,
            template_id: None,
            transform: None,
            subgroup: None,
            band_coverage: None,
            ssim_score: None,
            flag: None,
            similarity_review: None,
            batch_id: None,
            annotation: None,
            roi_coverages: Vec::new(),
        }
    }

    pub fn status(&self, stage: Stage) -> &StageStatus {
        self.stage_status.get(&stage).unwrap_or(&StageStatus::Pending)
    }

    pub fn stage_statuses(&self) -> impl Iterator<Item = (Stage, &StageStatus)> {
        self.stage_status.iter().map(|(s, st)| (*s, st))
    }

    /// True when every earlier stage passed and `stage` is still pending.
    pub fn is_due(&self, stage: Stage) -> bool {
        self.status(stage) == &StageStatus::Pending
            && Stage::ALL[..stage.index()]
                .iter()
                .all(|&s| self.status(s) == &StageStatus::Passed)
    }

    pub fn rejection(&self) -> Option<(Stage, RejectionReason)> {
        self.stage_status.iter().find_map(|(s, st)| match st {
            StageStatus::Rejected { reason, .. } => Some((*s, *reason)),
            _ => None,
        })
    }

    pub fn is_rejected(&self) -> bool {
        self.rejection().is_some()
    }

    fn settle(&mut self, stage: Stage, status: StageStatus) {
        assert!(
            self.is_due(stage),
            "series {} is not due for {stage}: statuses must follow stage order",
            self.series_id
        );
        self.stage_status.insert(stage, status);
    }

    pub fn pass(&mut self, stage: Stage) {
        self.settle(stage, StageStatus::Passed);
    }

    pub fn reject(&mut self, stage: Stage, reason: RejectionReason, detail: impl Into<String>) {
        self.settle(
            stage,
            StageStatus::Rejected {
                reason,
                detail: detail.into(),
            },
        );
    }

    /// Statuses read in stage order are a run of passes, at most one
    /// rejection, then pendings.
    pub fn check_stage_order(&self) -> bool {
        let mut phase = 0;
        for s in Stage::ALL {
            let p = match self.status(s) {
                StageStatus::Passed => 0,
                StageStatus::Rejected { .. } => 1,
                StageStatus::Pending => 2,
            };
            if p < phase || (p == 1 && phase == 1) {
                return false;
            }
            phase = if p == 1 { 2 } else { p };
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec() -> SeriesRecord {
        SeriesRecord::new("s", "p", "s.nii.gz", None, SeriesMetadata::default())
    }

    #[test]
    fn stages_advance_in_order() {
        let mut r = rec();
        assert!(r.is_due(Stage::ConversionToNifti));
        assert!(!r.is_due(Stage::LimitToAxial));
        r.pass(Stage::ConversionToNifti);
        r.reject(Stage::LimitToAxial, RejectionReason::NonAxial, "coronal");
        assert!(!r.is_due(Stage::RemoveLocaliser));
        assert_eq!(r.rejection(), Some((Stage::LimitToAxial, RejectionReason::NonAxial)));
        assert!(r.check_stage_order());
    }

    #[test]
    #[should_panic(expected = "not due")]
    fn rejected_series_cannot_be_processed() {
        let mut r = rec();
        r.reject(Stage::ConversionToNifti, RejectionReason::ConversionFailure, "");
        r.pass(Stage::LimitToAxial);
    }

    #[test]
    fn serde_round_trip() {
        let mut r = rec();
        r.pass(Stage::ConversionToNifti);
        r.reject(
            Stage::LimitToAxial,
            RejectionReason::ToolFailure(Stage::LimitToAxial),
            "x",
        );
        let json = serde_json::to_string(&r).unwrap();
        let back: SeriesRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert!(json.contains("\"reason\":\"tool_failure:limit_to_axial\""));
    }
}
