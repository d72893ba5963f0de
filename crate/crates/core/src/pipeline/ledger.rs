//! Staged count-and-rejection ledger and its rendered report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::record::{SeriesRecord, StageStatus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Source,
    ConversionToNifti,
    LimitToAxial,
    RemoveLocaliser,
    AffineCoregistration,
    SimilarityQc,
    SuperimpositionQc,
    RoiCoverage,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Source,
        Stage::ConversionToNifti,
        Stage::LimitToAxial,
        Stage::RemoveLocaliser,
        Stage::AffineCoregistration,
        Stage::SimilarityQc,
        Stage::SuperimpositionQc,
        Stage::RoiCoverage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Source => "source",
            Stage::ConversionToNifti => "conversion_to_nifti",
            Stage::LimitToAxial => "limit_to_axial",
            Stage::RemoveLocaliser => "remove_localiser",
            Stage::AffineCoregistration => "affine_coregistration",
            Stage::SimilarityQc => "similarity_qc",
            Stage::SuperimpositionQc => "superimposition_qc",
            Stage::RoiCoverage => "roi_coverage",
        }
    }

    /// Row label in the rendered table.
    pub fn label(self) -> &'static str {
        match self {
            Stage::Source => "Source CT series",
            Stage::ConversionToNifti => "Conversion to NIfTI",
            Stage::LimitToAxial => "Limit to axial series",
            Stage::RemoveLocaliser => "Remove localiser series",
            Stage::AffineCoregistration => "Affine co-registration",
            Stage::SimilarityQc => "Similarity QC",
            Stage::SuperimpositionQc => "Superimposition QC",
            Stage::RoiCoverage => "Containing >=1 ROI",
        }
    }

    pub fn index(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).expect("listed")
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown stage {s:?}")))
    }
}

/// Closed vocabulary of rejection reasons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectionReason {
    NonAxial,
    Localiser,
    ConversionFailure,
    RegistrationFailure,
    SimilarityQc,
    SuperimpositionQc,
    RoiCoverage,
    ToolFailure(Stage),
}

impl fmt::Display for RejectionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectionReason::NonAxial => f.write_str("non_axial"),
            RejectionReason::Localiser => f.write_str("localiser"),
            RejectionReason::ConversionFailure => f.write_str("conversion_failure"),
            RejectionReason::RegistrationFailure => f.write_str("registration_failure"),
            RejectionReason::SimilarityQc => f.write_str("similarity_qc"),
            RejectionReason::SuperimpositionQc => f.write_str("superimposition_qc"),
            RejectionReason::RoiCoverage => f.write_str("roi_coverage"),
            RejectionReason::ToolFailure(stage) => write!(f, "tool_failure:{stage}"),
        }
    }
}

impl FromStr for RejectionReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(stage) = s.strip_prefix("tool_failure:") {
            return Ok(RejectionReason::ToolFailure(stage.parse()?));
        }
        Ok(match s {
            "non_axial" => RejectionReason::NonAxial,
            "localiser" => RejectionReason::Localiser,
            "conversion_failure" => RejectionReason::ConversionFailure,
            "registration_failure" => RejectionReason::RegistrationFailure,
            "similarity_qc" => RejectionReason::SimilarityQc,
            "superimposition_qc" => RejectionReason::SuperimpositionQc,
            "roi_coverage" => RejectionReason::RoiCoverage,
            _ => return Err(Error::InvalidParameter(format!("unknown rejection reason {s:?}"))),
        })
    }
}

impl Serialize for RejectionReason {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RejectionReason {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub stage: Stage,
    pub series_remaining: u64,
    pub series_change: i64,
    pub patients_remaining: u64,
    pub patients_change: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionRecord {
    pub series_id: String,
    pub patient_id: String,
    pub stage: Stage,
    pub reason: RejectionReason,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineLedger {
    rows: Vec<LedgerRow>,
    /// Whether `rejections` itemises every change.
    itemised: bool,
    rejections: Vec<RejectionRecord>,
}

impl PipelineLedger {
    /// Ledger from `(stage, series_remaining, patients_remaining)` counts,
    /// without per-series records.
    pub fn from_counts(counts: &[(Stage, u64, u64)]) -> Result<Self> {
        let rows = counts
            .iter()
            .enumerate()
            .map(|(i, &(stage, series, patients))| {
                let (ps, pp) = if i == 0 {
                    (series, patients)
                } else {
                    (counts[i - 1].1, counts[i - 1].2)
                };
                LedgerRow {
                    stage,
                    series_remaining: series,
                    series_change: series as i64 - ps as i64,
                    patients_remaining: patients,
                    patients_change: patients as i64 - pp as i64,
                }
            })
            .collect();
        let ledger = PipelineLedger {
            rows,
            itemised: false,
            rejections: Vec::new(),
        };
        ledger.validate()?;
        Ok(ledger)
    }

    /// Rows for every stage that all of its input series have finished.
    pub fn from_records(records: &[SeriesRecord]) -> Result<Self> {
        let mut rows = Vec::new();
        let mut rejections = Vec::new();
        let mut alive: Vec<&SeriesRecord> = records.iter().collect();
        let mut prev: Option<(u64, u64)> = None;
        for stage in Stage::ALL {
            if alive.iter().any(|r| r.status(stage) == &StageStatus::Pending) {
                break;
            }
            let mut survivors = Vec::with_capacity(alive.len());
            for r in alive {
                match r.status(stage) {
                    StageStatus::Rejected { reason, detail } => rejections.push(RejectionRecord {
                        series_id: r.series_id.clone(),
                        patient_id: r.patient_id.clone(),
                        stage,
                        reason: *reason,
                        detail: detail.clone(),
                    }),
                    _ => survivors.push(r),
                }
            }
            alive = survivors;
            let series = alive.len() as u64;
            let patients = alive
                .iter()
                .map(|r| r.patient_id.as_str())
                .collect::<BTreeSet<_>>()
                .len() as u64;
            let (ps, pp) = prev.unwrap_or((series, patients));
            rows.push(LedgerRow {
                stage,
                series_remaining: series,
                series_change: series as i64 - ps as i64,
                patients_remaining: patients,
                patients_change: patients as i64 - pp as i64,
            });
            prev = Some((series, patients));
        }
        let ledger = PipelineLedger {
            rows,
            itemised: true,
            rejections,
        };
        ledger.validate()?;
        Ok(ledger)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Ledger(m));
        let Some(first) = self.rows.first() else {
            return fail("ledger has no rows".into());
        };
        if first.series_change != 0 || first.patients_change != 0 {
            return fail("first row must have zero change".into());
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.patients_remaining > row.series_remaining {
                return fail(format!("{}: more patients than series", row.stage));
            }
            if i == 0 {
                continue;
            }
            let before = &self.rows[i - 1];
            if row.stage <= before.stage {
                return fail(format!("{} is out of order", row.stage));
            }
            if row.series_change > 0 || row.patients_change > 0 {
                return fail(format!("{}: counts increased", row.stage));
            }
            if row.series_remaining as i64 != before.series_remaining as i64 + row.series_change
                || row.patients_remaining as i64 != before.patients_remaining as i64 + row.patients_change
            {
                return fail(format!("{}: remaining does not equal previous plus change", row.stage));
            }
            if self.itemised {
                let rejected = self.rejections.iter().filter(|r| r.stage == row.stage).count() as i64;
                if rejected != -row.series_change {
                    return fail(format!(
                        "{}: {rejected} rejections recorded for a change of {}",
                        row.stage, row.series_change
                    ));
                }
            }
        }
        if !self.itemised && !self.rejections.is_empty() {
            return fail("count-only ledger carries rejection records".into());
        }
        Ok(())
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn rejections(&self) -> &[RejectionRecord] {
        &self.rejections
    }

    pub fn row(&self, stage: Stage) -> Option<&LedgerRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    /// Whether every stage has a row.
    pub fn is_complete(&self) -> bool {
        self.rows.len() == Stage::ALL.len()
    }

    pub fn initial(&self) -> &LedgerRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &LedgerRow {
        self.rows.last().expect("validated ledger has rows")
    }

    pub fn rejections_by_reason(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for r in &self.rejections {
            *out.entry(r.reason.to_string()).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub stage: Stage,
    pub step: String,
    pub series_remaining: u64,
    pub series_change: i64,
    pub patients_remaining: u64,
    pub patients_change: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalChange {
    pub change: i64,
    /// `change / initial`.
    pub fraction: f64,
    /// `fraction` as a whole percentage, rounded half away from zero.
    pub percent: i64,
}

impl TotalChange {
    fn new(initial: u64, last: u64) -> Self {
        let change = last as i64 - initial as i64;
        let fraction = if initial == 0 {
            0.0
        } else {
            change as f64 / initial as f64
        };
        TotalChange {
            change,
            fraction,
            percent: (fraction * 100.0).round() as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub complete: bool,
    pub stages: Vec<ReportRow>,
    pub total_series: TotalChange,
    pub total_patients: TotalChange,
    pub rejections_by_reason: BTreeMap<String, u64>,
    pub rejections_by_stage: BTreeMap<String, BTreeMap<String, u64>>,
    pub rejected_series: Vec<RejectionRecord>,
}

pub fn emit_report(ledger: &PipelineLedger) -> Report {
    let mut by_stage: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for r in ledger.rejections() {
        *by_stage
            .entry(r.stage.to_string())
            .or_default()
            .entry(r.reason.to_string())
            .or_insert(0) += 1;
    }
    let mut rejected = ledger.rejections().to_vec();
    rejected.sort_by(|a, b| (a.stage, &a.series_id).cmp(&(b.stage, &b.series_id)));
    Report {
        complete: ledger.is_complete(),
        stages: ledger
            .rows()
            .iter()
            .map(|r| ReportRow {
                stage: r.stage,
                step: r.stage.label().to_string(),
                series_remaining: r.series_remaining,
                series_change: r.series_change,
                patients_remaining: r.patients_remaining,
                patients_change: r.patients_change,
            })
            .collect(),
        total_series: TotalChange::new(ledger.initial().series_remaining, ledger.last().series_remaining),
        total_patients: TotalChange::new(ledger.initial().patients_remaining, ledger.last().patients_remaining),
        rejections_by_reason: ledger.rejections_by_reason(),
        rejections_by_stage: by_stage,
        rejected_series: rejected,
    }
}

/// `-4322` -> `"-4,322"`.
pub fn thousands(n: i64) -> String {
    let digits = n.unsigned_abs().to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    if n < 0 {
        format!("-{out}")
    } else {
        out
    }
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Plain-text table with the step, series and patient columns.
    pub fn render_text(&self) -> String {
        let header = ["Step", "No. of series", "Change", "No. of patients", "Change"];
        let mut lines: Vec<[String; 5]> = self
            .stages
            .iter()
            .map(|r| {
                [
                    r.step.clone(),
                    thousands(r.series_remaining as i64),
                    thousands(r.series_change),
                    thousands(r.patients_remaining as i64),
                    thousands(r.patients_change),
                ]
            })
            .collect();
        lines.push([
            "Total change".to_string(),
            format!("{}%", self.total_series.percent),
            thousands(self.total_series.change),
            format!("{}%", self.total_patients.percent),
            thousands(self.total_patients.change),
        ]);
        let mut width = header.map(str::len);
        for l in &lines {
            for (w, cell) in width.iter_mut().zip(l) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let fmt_row = |cells: [&str; 5]| {
            let mut s = format!("{:<w$}", cells[0], w = width[0]);
            for (cell, w) in cells[1..].iter().zip(&width[1..]) {
                s.push_str(&format!("  {cell:>w$}"));
            }
            s.trim_end().to_string()
        };
        let rule = "-".repeat(width.iter().sum::<usize>() + 2 * (width.len() - 1));
        let mut out = vec![fmt_row(header), rule.clone()];
        let n = lines.len();
        for (i, l) in lines.iter().enumerate() {
            if i + 1 == n {
                out.push(rule.clone());
            }
            out.push(fmt_row([&l[0], &l[1], &l[2], &l[3], &l[4]]));
        }
        if !self.complete {
            out.push(String::new());
            out.push("Pipeline incomplete: later stages are pending.".to_string());
        }
        if !self.rejections_by_reason.is_empty() {
            out.push(String::new());
            out.push("Rejections by reason".to_string());
            let w = self.rejections_by_reason.keys().map(|k| k.len()).max().unwrap_or(0);
            for (reason, n) in &self.rejections_by_reason {
                out.push(format!("  {reason:<w$}  {}", thousands(*n as i64)));
            }
        }
        let mut s = out.join("\n");
        s.push('\n');
        s
    }
}
