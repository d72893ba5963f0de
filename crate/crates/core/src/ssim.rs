//! Template similarity scoring and grouped inspection flags.
//!
//! Scores are 2D SSIM (Gaussian-weighted luminance, contrast and structure)
//! per axial slice, averaged over the slices the series actually acquired.
//! CT and MRI intensities live on different scales, so by default each slice
//! is rank-normalised to [0, 1] before comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::completeness::Subgroup;
use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    #[serde(rename = "younger_65_70")]
    Younger6570,
    #[serde(rename = "older_75_80")]
    Older7580,
}

impl TemplateId {
    pub const ALL: [TemplateId; 2] = [TemplateId::Younger6570, TemplateId::Older7580];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Younger6570 => "younger_65_70",
            TemplateId::Older7580 => "older_75_80",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown template {s:?}")))
    }
}

/// Per-slice intensity mapping applied to both images before SSIM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Normalization {
    /// Average rank among the slice's voxels, scaled to [0, 1].
    Rank,
    /// Linear window/level mapped to [0, 1].
    Window {
        level: f64,
        width: f64,
    },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    /// Gaussian window standard deviation, voxels.
    pub sigma: f64,
    /// Window support, voxels; odd.
    pub support: usize,
    pub k1: f64,
    pub k2: f64,
    /// Fixed dynamic range; `None` uses the joint extent of both images.
    pub dynamic_range: Option<f64>,
    /// Value clamp applied before normalisation.
    pub clamp: Option<[f64; 2]>,
    pub normalization: Normalization,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            sigma: 1.5,
            support: 11,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: None,
            clamp: Some([-1024.0, 3071.0]),
            normalization: Normalization::Rank,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::InvalidParameter("k1 and k2 must be positive".into()));
        }
        if self.support.is_multiple_of(2) || self.support == 0 {
            return Err(Error::InvalidParameter(format!(
                "window support {} must be odd",
                self.support
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter("sigma must be positive".into()));
        }
        if let Some(l) = self.dynamic_range {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidParameter("dynamic range must be positive".into()));
            }
        }
        if let Normalization::Window { width, .. } = self.normalization {
            if !(width > 0.0) {
                return Err(Error::InvalidParameter("window width must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn kernel(&self) -> Vec<f64> {
        let c = (self.support / 2) as f64;
        let w: Vec<f64> = (0..self.support)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = w.iter().sum();
        w.into_iter().map(|v| v / sum).collect()
    }
}

/// Average ranks scaled to [0, 1]; NaN ranks lowest.
fn rank_normalize(values: &mut [f64]) {
    let n = values.len();
    if n == 0 {
        return;
    }
    if n == 1 {
        values[0] = 0.5;
        return;
    }
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| key(values[a]).total_cmp(&key(values[b])));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && key(values[order[j + 1]]) == key(values[order[i]]) {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg / (n - 1) as f64;
        }
        i = j + 1;
    }
    values.copy_from_slice(&ranks);
}

fn prepare_slice(slice: ArrayView2<'_, f32>, params: &SsimParams) -> Array2<f64> {
    let mut out = slice.mapv(|v| {
        let v = v as f64;
        match params.clamp {
            Some([lo, hi]) if v.is_finite() => v.clamp(lo, hi),
            _ => v,
        }
    });
    match params.normalization {
        Normalization::Rank => {
            let mut flat: Vec<f64> = out.iter().copied().collect();
            rank_normalize(&mut flat);
            for (o, v) in out.iter_mut().zip(flat) {
                *o = v;
            }
        }
        Normalization::Window { level, width } => {
            let lo = level - width / 2.0;
            out.mapv_inplace(|v| {
                if v.is_nan() {
                    0.0
                } else {
                    ((v - lo) / width).clamp(0.0, 1.0)
                }
            });
        }
        Normalization::None => out.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v }),
    }
    out
}

/// 'Valid' separable filtering: only windows fully inside the image.
fn filter_valid(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let s = kernel.len();
    let (nx, ny) = img.dim();
    let mut rows = Array2::<f64>::zeros((nx + 1 - s, ny));
    for ((i, j), o) in rows.indexed_iter_mut() {
        *o = kernel.iter().enumerate().map(|(k, w)| w * img[[i + k, j]]).sum();
    }
    let mut out = Array2::<f64>::zeros((nx + 1 - s, ny + 1 - s));
    for ((i, j), o) in out.indexed_iter_mut() {
        *o = kernel.iter().enumerate().map(|(k, w)| w * rows[[i, j + k]]).sum();
    }
    out
}

/// Local SSIM for every full window position of two equally sized images.
pub fn local_ssim_map(
    x: &Array2<f64>,
    y: &Array2<f64>,
    params: &SsimParams,
    dynamic_range: f64,
) -> Result<Array2<f64>> {
    if x.dim() != y.dim() {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", x.dim(), y.dim())));
    }
    let (nx, ny) = x.dim();
    if nx < params.support || ny < params.support {
        return Err(Error::InvalidParameter(format!(
            "slice {nx}x{ny} smaller than window support {}",
            params.support
        )));
    }
    let kernel = params.kernel();
    let mu_x = filter_valid(x, &kernel);
    let mu_y = filter_valid(y, &kernel);
    let xx = filter_valid(&(x * x), &kernel);
    let yy = filter_valid(&(y * y), &kernel);
    let xy = filter_valid(&(x * y), &kernel);
    let c1 = (params.k1 * dynamic_range).powi(2);
    let c2 = (params.k2 * dynamic_range).powi(2);

    let mut out = Array2::<f64>::zeros(mu_x.dim());
    for ((idx, o), (&mx, &my)) in out.indexed_iter_mut().zip(mu_x.iter().zip(mu_y.iter())) {
        let var_x = (xx[idx] - mx * mx).max(0.0);
        let var_y = (yy[idx] - my * my).max(0.0);
        let cov = xy[idx] - mx * my;
        let luminance = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        let structure = (2.0 * cov + c2) / (var_x + var_y + c2);
        // E[x^2] - mu^2 round-off can push the product a few ulps past +-1
        *o = (luminance * structure).clamp(-1.0, 1.0);
    }
    Ok(out)
}

/// Slices of the registered series that hold acquired data: anything above
/// the series' fill (minimum) value.
pub fn acquired_slices(registered: &Volume) -> Vec<usize> {
    let Some((lo, _)) = registered.finite_range() else {
        return Vec::new();
    };
    (0..registered.grid().slice_count())
        .filter(|&z| registered.slice(z).iter().any(|&v| v.is_finite() && v > lo))
        .collect()
}

/// Mean per-slice SSIM over the registered series' acquired slices.
pub fn compute_ssim(registered: &Volume, template: &Volume, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    registered
        .grid()
        .check_matches(template.grid(), "registered series vs template")?;
    let valid = acquired_slices(registered);
    if valid.is_empty() {
        return Err(Error::EmptyValidRegion(format!(
            "series {} has no acquired slices",
            registered.series_id()
        )));
    }
    let pairs: Vec<(Array2<f64>, Array2<f64>)> = valid
        .iter()
        .map(|&z| {
            (
                prepare_slice(registered.slice(z), params),
                prepare_slice(template.slice(z), params),
            )
        })
        .collect();
    let dynamic_range = params.dynamic_range.unwrap_or_else(|| {
        let (lo, hi) = pairs
            .iter()
            .flat_map(|(a, b)| a.iter().chain(b.iter()))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if hi > lo {
            hi - lo
        } else {
            1.0
        }
    });
    let mut total = 0.0;
    for (x, y) in &pairs {
        let map = local_ssim_map(x, y, params, dynamic_range)?;
        total += map.mean().expect("non-empty map");
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimScore {
    pub series_id: String,
    pub subgroup: Subgroup,
    pub score: f64,
    pub template_id: TemplateId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InspectionFlag {
    AutoAccept,
    Inspect,
}

impl fmt::Display for InspectionFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InspectionFlag::AutoAccept => "auto_accept",
            InspectionFlag::Inspect => "inspect",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlagPolicy {
    /// Fraction of lowest scores inspected in percentile subgroups.
    pub percentile: f64,
    /// Subgroups inspected in full.
    pub inspect_all: Vec<Subgroup>,
}

impl Default for FlagPolicy {
    fn default() -> Self {
        FlagPolicy {
            percentile: 0.05,
            inspect_all: vec![Subgroup::Medial, Subgroup::Incomplete],
        }
    }
}

impl FlagPolicy {
    /// Number of lowest scores inspected out of `n`: `ceil(percentile * n)`.
    pub fn quota(&self, n: usize) -> usize {
        let raw = self.percentile * n as f64;
        // 0.05 * 100 must give 5, not 6
        let k = (raw - 1e-9).ceil().max(0.0) as usize;
        k.min(n)
    }
}

/// Flags in input order. Scores are grouped by (template, subgroup); ties at
/// the percentile boundary are all inspected.
pub fn flag_for_inspection(scores: &[SsimScore], policy: &FlagPolicy) -> Vec<InspectionFlag> {
    let mut flags = vec![InspectionFlag::AutoAccept; scores.len()];
    let mut groups: BTreeMap<(TemplateId, Subgroup), Vec<usize>> = BTreeMap::new();
    for (i, s) in scores.iter().enumerate() {
        groups.entry((s.template_id, s.subgroup)).or_default().push(i);
    }
    for ((_, subgroup), members) in groups {
        if policy.inspect_all.contains(&subgroup) {
            for i in members {
                flags[i] = InspectionFlag::Inspect;
            }
            continue;
        }
        let k = policy.quota(members.len());
        if k == 0 {
            continue;
        }
        let key = |i: usize| {
            let s = scores[i].score;
            if s.is_nan() {
                f64::NEG_INFINITY
            } else {
                s
            }
        };
        let mut sorted: Vec<f64> = members.iter().map(|&i| key(i)).collect();
        sorted.sort_by(f64::total_cmp);
        let cutoff = sorted[k - 1];
        for i in members {
            if key(i) <= cutoff {
                flags[i] = InspectionFlag::Inspect;
            }
        }
    }
    flags
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlagPartition {
    pub inspected: Vec<u64>,
    pub accepted: Vec<u64>,
}

impl FlagPartition {
    fn zeros(bins: usize) -> Self {
        FlagPartition {
            inspected: vec![0; bins],
            accepted: vec![0; bins],
        }
    }

    pub fn total(&self) -> u64 {
        self.inspected.iter().chain(&self.accepted).sum()
    }
}

/// Score histogram over [-1, 1] split into inspected and accepted counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimHistogram {
    pub edges: Vec<f64>,
    pub all: FlagPartition,
    pub subgroups: BTreeMap<Subgroup, FlagPartition>,
}

impl SsimHistogram {
    pub fn merge(&mut self, other: &SsimHistogram) -> Result<()> {
        if self.edges != other.edges {
            return Err(Error::InvalidParameter("histogram edges differ".into()));
        }
        let add = |a: &mut FlagPartition, b: &FlagPartition| {
            for (x, y) in a.inspected.iter_mut().zip(&b.inspected) {
                *x += y;
            }
            for (x, y) in a.accepted.iter_mut().zip(&b.accepted) {
                *x += y;
            }
        };
        add(&mut self.all, &other.all);
        let bins = self.edges.len() - 1;
        for (g, part) in &other.subgroups {
            add(
                self.subgroups.entry(*g).or_insert_with(|| FlagPartition::zeros(bins)),
                part,
            );
        }
        Ok(())
    }
}

pub fn ssim_histogram(scores: &[SsimScore], flags: &[InspectionFlag], bins: usize) -> SsimHistogram {
    let bins = bins.max(1);
    let edges: Vec<f64> = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
    let mut all = FlagPartition::zeros(bins);
    let mut subgroups: BTreeMap<Subgroup, FlagPartition> = BTreeMap::new();
    for (s, flag) in scores.iter().zip(flags) {
        // half-open [edge_i, edge_i+1), last bin closed
        let b = edges[1..bins].partition_point(|&e| e <= s.score);
        let part = subgroups
            .entry(s.subgroup)
            .or_insert_with(|| FlagPartition::zeros(bins));
        for p in [&mut all, part] {
            match flag {
                InspectionFlag::Inspect => p.inspected[b] += 1,
                InspectionFlag::AutoAccept => p.accepted[b] += 1,
            }
        }
    }
    SsimHistogram { edges, all, subgroups }
}

/// `series_id,subgroup,template_id,score,flag` rows.
pub fn write_scores_csv(path: &Path, scores: &[SsimScore], flags: &[InspectionFlag]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series_id", "subgroup", "template_id", "score", "flag"])?;
    for (s, f) in scores.iter().zip(flags) {
        w.write_record([
            s.series_id.clone(),
            s.subgroup.to_string(),
            s.template_id.to_string(),
            format!("{:.6}", s.score),
            f.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(id: &str, group: Subgroup, s: f64) -> SsimScore {
        SsimScore {
            series_id: id.into(),
            subgroup: group,
            score: s,
            template_id: TemplateId::Younger6570,
        }
    }

    #[test]
    fn rank_normalization_averages_ties() {
        let mut v = vec![10.0, 30.0, 20.0, 20.0, f64::NAN];
        rank_normalize(&mut v);
        assert_eq!(v, vec![0.25, 1.0, 0.625, 0.625, 0.0]);
        let mut c = vec![3.0; 4];
        rank_normalize(&mut c);
        assert_eq!(c, vec![0.5; 4]);
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = SsimParams::default().kernel();
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..11 {
            assert_eq!(k[i], k[10 - i]);
        }
    }

    #[test]
    fn params_validation() {
        assert!(SsimParams::default().validate().is_ok());
        let even = SsimParams {
            support: 10,
            ..Default::default()
        };
        assert!(even.validate().is_err());
        let zero_k = SsimParams {
            k1: 0.0,
            ..Default::default()
        };
        assert!(zero_k.validate().is_err());
    }

    #[test]
    fn quota_is_ceiling() {
        let p = FlagPolicy::default();
        assert_eq!(p.quota(100), 5);
        assert_eq!(p.quota(13), 1);
        assert_eq!(p.quota(7), 1);
        assert_eq!(p.quota(101), 6);
        assert_eq!(p.quota(0), 0);
    }

    #[test]
    fn hundred_complete_flags_five_lowest() {
        let scores: Vec<SsimScore> = (0..100)
            .map(|i| score(&format!("s{i}"), Subgroup::Complete, 1.0 - i as f64 / 200.0))
            .collect();
        let flags = flag_for_inspection(&scores, &FlagPolicy::default());
        let flagged: Vec<usize> = (0..100).filter(|&i| flags[i] == InspectionFlag::Inspect).collect();
        assert_eq!(flagged, vec![95, 96, 97, 98, 99]);
    }

    #[test]
    fn medial_is_inspected_in_full() {
        let scores: Vec<SsimScore> = (0..7).map(|i| score(&format!("m{i}"), Subgroup::Medial, 0.9)).collect();
        let flags = flag_for_inspection(&scores, &FlagPolicy::default());
        assert!(flags.iter().all(|&f| f == InspectionFlag::Inspect));
    }

    #[test]
    fn boundary_ties_are_all_inspected() {
        let mut scores: Vec<SsimScore> = (0..20)
            .map(|i| score(&format!("s{i}"), Subgroup::SkullBase, 0.5 + i as f64 / 100.0))
            .collect();
        scores[1].score = 0.5;
        scores[2].score = 0.5;
        let flags = flag_for_inspection(&scores, &FlagPolicy::default());
        let n = flags.iter().filter(|&&f| f == InspectionFlag::Inspect).count();
        assert_eq!(n, 3);
    }

    #[test]
    fn templates_are_flagged_separately() {
        let mut scores = vec![score("a", Subgroup::Complete, 0.1), score("b", Subgroup::Complete, 0.9)];
        scores[1].template_id = TemplateId::Older7580;
        let flags = flag_for_inspection(&scores, &FlagPolicy::default());
        assert_eq!(flags, vec![InspectionFlag::Inspect; 2]);
    }

    #[test]
    fn histogram_partitions() {
        let scores = vec![
            score("a", Subgroup::Complete, 1.0),
            score("b", Subgroup::Complete, -1.0),
            score("c", Subgroup::Incomplete, -0.3),
        ];
        let flags = vec![
            InspectionFlag::AutoAccept,
            InspectionFlag::Inspect,
            InspectionFlag::Inspect,
        ];
        let h = ssim_histogram(&scores, &flags, 4);
        assert_eq!(h.edges, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(h.all.accepted, vec![0, 0, 0, 1]);
        assert_eq!(h.all.inspected, vec![1, 1, 0, 0]);
        let inc = &h.subgroups[&Subgroup::Incomplete];
        assert_eq!(inc.inspected.iter().sum::<u64>(), inc.total());
    }

    #[test]
    fn template_ids_serialize_by_age_band() {
        assert_eq!(
            serde_json::to_string(&TemplateId::Younger6570).unwrap(),
            "\"younger_65_70\""
        );
        assert_eq!("older_75_80".parse::<TemplateId>().unwrap(), TemplateId::Older7580);
    }
}
