//! Coverage subgroups from a z-profile in template space.
//!
//! The template's z extent is split into low, mid and high bands (skull
//! base to vault). A band is covered when enough of its length is spanned by
//! slices whose presence reaches `presence_floor`. Interior runs of empty
//! slices, or content far outside the template, make a series incomplete.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::presence::ZProfile;
use crate::volume::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subgroup {
    Complete,
    SkullBase,
    Medial,
    SkullVault,
    Incomplete,
}

impl Subgroup {
    pub const ALL: [Subgroup; 5] = [
        Subgroup::Complete,
        Subgroup::SkullBase,
        Subgroup::Medial,
        Subgroup::SkullVault,
        Subgroup::Incomplete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Subgroup::Complete => "complete",
            Subgroup::SkullBase => "skull_base",
            Subgroup::Medial => "medial",
            Subgroup::SkullVault => "skull_vault",
            Subgroup::Incomplete => "incomplete",
        }
    }
}

impl fmt::Display for Subgroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subgroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subgroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown subgroup {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageParams {
    /// Minimum presence for a slice to count towards band coverage.
    pub presence_floor: f64,
    pub low_band: [f64; 2],
    pub mid_band: [f64; 2],
    pub high_band: [f64; 2],
    /// Fraction of a band's length that must be covered.
    pub band_coverage_min: f64,
    /// Longest tolerated run of empty slices between slices with content.
    pub gap_max: usize,
    /// Slices at or below this presence are empty for the gap rule.
    pub gap_presence_max: f64,
}

impl Default for CoverageParams {
    fn default() -> Self {
        CoverageParams {
            presence_floor: 0.05,
            low_band: [0.0, 0.33],
            mid_band: [0.33, 0.66],
            high_band: [0.66, 1.0],
            band_coverage_min: 0.5,
            gap_max: 3,
            gap_presence_max: 0.0,
        }
    }
}

impl CoverageParams {
    pub fn validate(&self) -> Result<()> {
        let bands = self.bands();
        let ordered = bands.iter().all(|b| b[0] < b[1]);
        let partition =
            bands[0][0] == 0.0 && bands[0][1] == bands[1][0] && bands[1][1] == bands[2][0] && bands[2][1] == 1.0;
        if !ordered || !partition {
            return Err(Error::InvalidParameter(format!(
                "bands {bands:?} do not partition [0, 1]"
            )));
        }
        for (name, v) in [
            ("presence_floor", self.presence_floor),
            ("band_coverage_min", self.band_coverage_min),
            ("gap_presence_max", self.gap_presence_max),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn bands(&self) -> [[f64; 2]; 3] {
        [self.low_band, self.mid_band, self.high_band]
    }
}

/// World z extent of the template, from the outer edge of its first slice to
/// the outer edge of its last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateZRange {
    pub inferior_mm: f64,
    pub superior_mm: f64,
}

impl TemplateZRange {
    pub fn new(inferior_mm: f64, superior_mm: f64) -> Result<Self> {
        if !(superior_mm > inferior_mm) {
            return Err(Error::InvalidParameter(format!(
                "template z range [{inferior_mm}, {superior_mm}] is empty"
            )));
        }
        Ok(TemplateZRange {
            inferior_mm,
            superior_mm,
        })
    }

    pub fn from_grid(template: &Grid) -> Result<Self> {
        let nz = template.slice_count();
        let a = template.slice_world_z(0);
        let b = template.slice_world_z(nz - 1);
        let half = if nz > 1 {
            (b - a).abs() / (nz - 1) as f64 / 2.0
        } else {
            template.spacing()[2] / 2.0
        };
        TemplateZRange::new(a.min(b) - half, a.max(b) + half)
    }

    pub fn fraction(&self, z_mm: f64) -> f64 {
        (z_mm - self.inferior_mm) / (self.superior_mm - self.inferior_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub series_id: String,
    pub subgroup: Subgroup,
    /// Covered fraction of the low, mid and high bands.
    pub band_coverage: [f64; 3],
    pub note: Option<String>,
}

struct Slice {
    lo: f64,
    hi: f64,
    centre: f64,
    presence: f64,
}

/// Slices in increasing fractional z, each owning the interval up to the
/// midpoints with its neighbours.
fn slices_in_template(profile: &ZProfile, range: &TemplateZRange) -> Vec<Slice> {
    let mut pts: Vec<(f64, f64)> = profile.iter().map(|(z, p)| (range.fraction(z), p)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pts.len();
    (0..n)
        .map(|i| {
            let c = pts[i].0;
            let lo = if i > 0 {
                (pts[i - 1].0 + c) / 2.0
            } else if n > 1 {
                c - (pts[1].0 - c) / 2.0
            } else {
                c
            };
            let hi = if i + 1 < n {
                (c + pts[i + 1].0) / 2.0
            } else if n > 1 {
                c + (c - pts[n - 2].0) / 2.0
            } else {
                c
            };
            Slice {
                lo,
                hi,
                centre: c,
                presence: pts[i].1,
            }
        })
        .collect()
}

fn longest_interior_gap(slices: &[Slice], empty_max: f64) -> usize {
    let content: Vec<bool> = slices.iter().map(|s| s.presence > empty_max).collect();
    let (Some(first), Some(last)) = (content.iter().position(|&c| c), content.iter().rposition(|&c| c)) else {
        return 0;
    };
    let mut longest = 0;
    let mut run = 0;
    for &c in &content[first..=last] {
        if c {
            run = 0;
        } else {
            run += 1;
            longest = longest.max(run);
        }
    }
    longest
}

pub fn classify_completeness(profile: &ZProfile, range: &TemplateZRange, params: &CoverageParams) -> Classification {
    let slices = slices_in_template(profile, range);
    let bands = params.bands();

    let mut band_coverage = [0.0; 3];
    for (cov, band) in band_coverage.iter_mut().zip(bands) {
        let covered: f64 = slices
            .iter()
            .filter(|s| s.presence >= params.presence_floor)
            .map(|s| (s.hi.min(band[1]) - s.lo.max(band[0])).max(0.0))
            .sum();
        *cov = (covered / (band[1] - band[0])).clamp(0.0, 1.0);
    }

    let result = |subgroup, note: Option<String>| Classification {
        series_id: profile.series_id.clone(),
        subgroup,
        band_coverage,
        note,
    };

    let low_width = bands[0][1] - bands[0][0];
    let high_width = bands[2][1] - bands[2][0];
    if let Some(s) = slices
        .iter()
        .find(|s| s.presence > params.gap_presence_max && (s.centre < -low_width || s.centre > 1.0 + high_width))
    {
        return result(
            Subgroup::Incomplete,
            Some(format!("range violation: content at template fraction {:.3}", s.centre)),
        );
    }

    let gap = longest_interior_gap(&slices, params.gap_presence_max);
    if gap > params.gap_max {
        return result(
            Subgroup::Incomplete,
            Some(format!("interior gap of {gap} empty slices")),
        );
    }

    let [low, mid, high] = band_coverage.map(|c| c >= params.band_coverage_min);
    let subgroup = match (low, mid, high) {
        (true, true, true) => Subgroup::Complete,
        (true, _, false) => Subgroup::SkullBase,
        (false, _, true) => Subgroup::SkullVault,
        (false, true, false) => Subgroup::Medial,
        _ => Subgroup::Incomplete,
    };
    result(subgroup, None)
}

/// `series_id,subgroup,low,mid,high` rows.
pub fn write_classifications_csv<'a>(path: &Path, rows: impl IntoIterator<Item = &'a Classification>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series_id", "subgroup", "low_covered", "mid_covered", "high_covered"])?;
    for c in rows {
        w.write_record([
            c.series_id.clone(),
            c.subgroup.to_string(),
            format!("{:.4}", c.band_coverage[0]),
            format!("{:.4}", c.band_coverage[1]),
            format!("{:.4}", c.band_coverage[2]),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
