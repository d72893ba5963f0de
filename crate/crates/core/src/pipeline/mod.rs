//! Staged pipeline over a manifest of series.
//!
//! Each stage is a parallel pass over the series still due for it, followed
//! by a checkpoint of every record to `<out>/checkpoint.json`. Superimposition
//! QC either replays an annotation log or, without one, pauses after writing
//! its batches so inspectors can annotate through the service; `resume`
//! picks the run up from the checkpoint.

mod config;
pub mod fixture;
mod ledger;
mod manifest;
mod record;
mod registration;

pub use config::{check_command_template, PipelineConfig, RunPaths, PLACEHOLDERS};
pub use ledger::{
    emit_report, thousands, LedgerRow, PipelineLedger, RejectionReason, RejectionRecord, Report, ReportRow, Stage,
    TotalChange,
};
pub use manifest::load_manifest;
pub use record::{ReviewOutcome, SeriesRecord, StageStatus};
pub use registration::{invoke_registration, select_template};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::Matrix4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::completeness::{classify_completeness, write_classifications_csv, Classification, TemplateZRange};
use crate::error::{Error, Result};
use crate::presence::{presence_heatmap, presence_profile, write_profiles_csv, HeatmapAxes, ZProfile};
use crate::roi::{load_roi_set, roi_coverage, series_retained, transfer_roi, write_coverage_csv, RoiDefinition};
use crate::ssim::{
    compute_ssim, flag_for_inspection, ssim_histogram, write_scores_csv, InspectionFlag, SsimScore, TemplateId,
};
use crate::superimpose::{
    binarize, build_batch, read_log, resolve_verdicts, BatchManifest, BatchMember, DataDir, Verdict,
};
use crate::volume::{classify_orientation, load_volume, save_volume, AffineTransform, Orientation, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// Batches are written and wait for superimposition annotations.
    AwaitingAnnotations,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub status: RunStatus,
    pub records: Vec<SeriesRecord>,
    pub ledger: PipelineLedger,
    pub report: Report,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    records: Vec<SeriesRecord>,
}

/// Verdict on a series flagged by similarity QC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReview {
    pub series_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub comment: String,
    #[serde(default)]
    pub inspector: String,
    #[serde(default)]
    pub timestamp: String,
}

pub fn read_similarity_reviews(path: &Path) -> Result<Vec<SimilarityReview>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.json")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn matrix_rows(t: &AffineTransform) -> [[f64; 4]; 4] {
    let m = t.matrix();
    [0, 1, 2, 3].map(|r| [0, 1, 2, 3].map(|c| m[(r, c)]))
}

fn from_rows(rows: &[[f64; 4]; 4]) -> Result<AffineTransform> {
    AffineTransform::new(Matrix4::from_fn(|r, c| rows[r][c]))
}

struct Context<'a> {
    cfg: &'a PipelineConfig,
    paths: RunPaths,
    data: DataDir,
    templates: BTreeMap<TemplateId, Volume>,
    rois: BTreeMap<TemplateId, Vec<RoiDefinition>>,
    pool: rayon::ThreadPool,
}

fn find_template(dir: &Path, id: TemplateId) -> Option<PathBuf> {
    ["nii.gz", "nii"]
        .into_iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.exists())
}

impl<'a> Context<'a> {
    fn new(cfg: &'a PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let paths = cfg.run_paths()?;
        let data = DataDir::new(&paths.out_dir);
        data.create()?;
        let mut templates = BTreeMap::new();
        let mut rois = BTreeMap::new();
        for id in TemplateId::ALL {
            let Some(path) = find_template(&paths.template_dir, id) else {
                continue;
            };
            let t = load_volume(&path)?.with_series_id(id.as_str());
            rois.insert(id, load_roi_set(&paths.roi_dir, id, t.grid())?);
            save_volume(&data.template_path(id), &t)?;
            templates.insert(id, t);
        }
        if templates.is_empty() {
            return Err(Error::Config(format!(
                "no templates found in {}",
                paths.template_dir.display()
            )));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Context {
            cfg,
            paths,
            data,
            templates,
            rois,
            pool,
        })
    }

    fn checkpoint(&self, records: &[SeriesRecord]) -> Result<()> {
        let json = serde_json::to_vec_pretty(&Checkpoint {
            records: records.to_vec(),
        })?;
        write_atomic(&checkpoint_path(&self.paths.out_dir), &json)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.paths.out_dir.join(name)
    }

    /// Runs `f` on every series due for `stage`, in parallel, and collects
    /// its outputs in record order.
    fn per_series<T: Send>(
        &self,
        records: &mut [SeriesRecord],
        stage: Stage,
        f: impl Fn(&mut SeriesRecord) -> Option<T> + Sync,
    ) -> Vec<T> {
        self.pool.install(|| {
            records
                .par_iter_mut()
                .filter(|r| r.is_due(stage))
                .filter_map(&f)
                .collect()
        })
    }
}

fn stage_done(records: &[SeriesRecord], stage: Stage) -> bool {
    !records.iter().any(|r| r.is_due(stage))
}

/// Runs the whole pipeline from manifest seeds.
pub fn run_pipeline(manifest: Vec<SeriesRecord>, config: &PipelineConfig) -> Result<PipelineRun> {
    if manifest.is_empty() {
        return Err(Error::Manifest("manifest lists no series".into()));
    }
    let ctx = Context::new(config)?;
    let batches = ctx.paths.out_dir.join("batches");
    if batches.exists() {
        std::fs::remove_dir_all(&batches).map_err(|e| Error::io(&batches, e))?;
    }
    run_stages(&ctx, manifest, false)
}

/// Continues a checkpointed run, taking superimposition verdicts from the
/// data directory's annotation log unless a replay log is configured.
pub fn resume_pipeline(config: &PipelineConfig) -> Result<PipelineRun> {
    let ctx = Context::new(config)?;
    let path = checkpoint_path(&ctx.paths.out_dir);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cp: Checkpoint = serde_json::from_str(&text)?;
    run_stages(&ctx, cp.records, true)
}

fn run_stages(ctx: &Context<'_>, mut records: Vec<SeriesRecord>, resume: bool) -> Result<PipelineRun> {
    for stage in &Stage::ALL[1..] {
        let stage = *stage;
        if stage_done(&records, stage) {
            continue;
        }
        info!(
            "stage {stage}: {} series due",
            records.iter().filter(|r| r.is_due(stage)).count()
        );
        match stage {
            Stage::Source => {}
            Stage::ConversionToNifti => conversion(ctx, &mut records),
            Stage::LimitToAxial => axial(ctx, &mut records),
            Stage::RemoveLocaliser => localiser(ctx, &mut records),
            Stage::AffineCoregistration => coregistration(ctx, &mut records),
            Stage::SimilarityQc => similarity(ctx, &mut records)?,
            Stage::SuperimpositionQc => {
                if !superimposition(ctx, &mut records, resume)? {
                    ctx.checkpoint(&records)?;
                    return finish(ctx, records, RunStatus::AwaitingAnnotations);
                }
            }
            Stage::RoiCoverage => roi_stage(ctx, &mut records)?,
        }
        ctx.checkpoint(&records)?;
    }
    finish(ctx, records, RunStatus::Complete)
}

fn finish(ctx: &Context<'_>, records: Vec<SeriesRecord>, status: RunStatus) -> Result<PipelineRun> {
    debug_assert!(records.iter().all(SeriesRecord::check_stage_order));
    let ledger = PipelineLedger::from_records(&records)?;
    let report = emit_report(&ledger);
    write_atomic(&ctx.out("ledger.json"), &serde_json::to_vec_pretty(&ledger)?)?;
    write_atomic(&ctx.out("report.json"), report.to_json()?.as_bytes())?;
    write_atomic(&ctx.out("report.txt"), report.render_text().as_bytes())?;
    write_atomic(&ctx.out("series.json"), &serde_json::to_vec_pretty(&records)?)?;
    Ok(PipelineRun {
        status,
        records,
        ledger,
        report,
    })
}

fn conversion(ctx: &Context<'_>, records: &mut [SeriesRecord]) {
    let stage = Stage::ConversionToNifti;
    ctx.per_series(records, stage, |r| {
        match load_volume(&r.source_path) {
            Ok(_) => r.pass(stage),
            Err(e) => r.reject(stage, RejectionReason::ConversionFailure, e.to_string()),
        }
        None::<()>
    });
}

fn axial(ctx: &Context<'_>, records: &mut [SeriesRecord]) {
    let stage = Stage::LimitToAxial;
    ctx.per_series(records, stage, |r| {
        match load_volume(&r.source_path) {
            Ok(v) => {
                let o = classify_orientation(&v);
                r.orientation = Some(o);
                if o == Orientation::Axial {
                    r.pass(stage);
                } else {
                    let name = serde_json::to_value(o).ok().and_then(|v| v.as_str().map(String::from));
                    r.reject(stage, RejectionReason::NonAxial, name.unwrap_or_default());
                }
            }
            Err(e) => r.reject(stage, RejectionReason::ToolFailure(stage), e.to_string()),
        }
        None::<()>
    });
}

fn localiser(ctx: &Context<'_>, records: &mut [SeriesRecord]) {
    let stage = Stage::RemoveLocaliser;
    ctx.per_series(records, stage, |r| {
        match load_volume(&r.source_path) {
            Ok(v) if ctx.cfg.localiser.detect(&v, &r.metadata) => {
                r.reject(stage, RejectionReason::Localiser, format!("dims {:?}", v.dims()))
            }
            Ok(_) => r.pass(stage),
            Err(e) => r.reject(stage, RejectionReason::ToolFailure(stage), e.to_string()),
        }
        None::<()>
    });
}

fn coregistration(ctx: &Context<'_>, records: &mut [SeriesRecord]) {
    let stage = Stage::AffineCoregistration;
    ctx.per_series(records, stage, |r| {
        let id = select_template(r.age_years, ctx.cfg.age_cut_years, ctx.cfg.default_template);
        r.template_id = Some(id);
        let Some(template) = ctx.templates.get(&id) else {
            r.reject(
                stage,
                RejectionReason::RegistrationFailure,
                format!("template {id} not available"),
            );
            return None::<()>;
        };
        let work = ctx.paths.out_dir.join("work").join(&r.series_id);
        let result = invoke_registration(
            &r.source_path,
            &ctx.data.template_path(id),
            template.grid(),
            &ctx.paths.registration_cmd,
            &work,
            &r.series_id,
        );
        match result {
            Ok((registered, t)) => {
                let saved = ctx
                    .data
                    .registered_path(&r.series_id)
                    .and_then(|p| save_volume(&p, &registered));
                match saved {
                    Ok(()) => {
                        r.transform = Some(matrix_rows(&t));
                        r.pass(stage);
                    }
                    Err(e) => r.reject(stage, RejectionReason::ToolFailure(stage), e.to_string()),
                }
            }
            Err(e) => r.reject(stage, RejectionReason::RegistrationFailure, e.to_string()),
        }
        None
    });
}

struct Scored {
    template_id: TemplateId,
    profile: ZProfile,
    classification: Classification,
}

fn similarity(ctx: &Context<'_>, records: &mut [SeriesRecord]) -> Result<()> {
    let stage = Stage::SimilarityQc;
    let scored = ctx.per_series(records, stage, |r| {
        let run = || -> Result<(f64, Scored)> {
            let id = r
                .template_id
                .ok_or_else(|| Error::InvalidParameter("no template".into()))?;
            let template = &ctx.templates[&id];
            let registered = load_volume(&ctx.data.registered_path(&r.series_id)?)?.with_series_id(&r.series_id);
            let profile = presence_profile(&registered, &ctx.cfg.presence())?;
            let range = TemplateZRange::from_grid(template.grid())?;
            let classification = classify_completeness(&profile, &range, &ctx.cfg.completeness);
            let score = compute_ssim(&registered, template, &ctx.cfg.ssim)?;
            Ok((
                score,
                Scored {
                    template_id: id,
                    profile,
                    classification,
                },
            ))
        };
        match run() {
            Ok((score, s)) => {
                r.subgroup = Some(s.classification.subgroup);
                r.band_coverage = Some(s.classification.band_coverage);
                r.ssim_score = Some(score);
                Some(s)
            }
            Err(e) => {
                r.reject(stage, RejectionReason::ToolFailure(stage), e.to_string());
                None
            }
        }
    });

    let due: Vec<usize> = (0..records.len()).filter(|&i| records[i].is_due(stage)).collect();
    let scores: Vec<SsimScore> = due
        .iter()
        .map(|&i| {
            let r = &records[i];
            SsimScore {
                series_id: r.series_id.clone(),
                subgroup: r.subgroup.expect("scored"),
                score: r.ssim_score.expect("scored"),
                template_id: r.template_id.expect("registered"),
            }
        })
        .collect();
    let flags = flag_for_inspection(&scores, &ctx.cfg.flag_policy());

    let reviews = match &ctx.cfg.similarity_reviews {
        Some(p) => read_similarity_reviews(p)?,
        None => Vec::new(),
    };
    let mut latest: BTreeMap<&str, &SimilarityReview> = BTreeMap::new();
    for rv in &reviews {
        latest.insert(&rv.series_id, rv);
    }
    let mut unreviewed = 0;
    for (&i, &flag) in due.iter().zip(&flags) {
        let r = &mut records[i];
        r.flag = Some(flag);
        let review = latest.remove(r.series_id.as_str());
        if flag == InspectionFlag::AutoAccept {
            if review.is_some() {
                warn!("review for auto-accepted series {} ignored", r.series_id);
            }
            r.pass(stage);
            continue;
        }
        match review {
            Some(rv) => {
                r.similarity_review = Some(ReviewOutcome {
                    verdict: rv.verdict,
                    comment: rv.comment.clone(),
                    inspector: rv.inspector.clone(),
                });
                if rv.verdict == Verdict::Reject {
                    r.reject(stage, RejectionReason::SimilarityQc, rv.comment.clone());
                } else {
                    r.pass(stage);
                }
            }
            None => {
                unreviewed += 1;
                r.pass(stage);
            }
        }
    }
    if unreviewed > 0 {
        warn!("{unreviewed} flagged series had no similarity review and were accepted");
    }
    for id in latest.keys() {
        warn!("similarity review for unknown series {id} ignored");
    }

    write_profiles_csv(&ctx.out("profiles.csv"), scored.iter().map(|s| &s.profile))?;
    write_classifications_csv(
        &ctx.out("classifications.csv"),
        scored.iter().map(|s| &s.classification),
    )?;
    for (id, template) in &ctx.templates {
        let axes = HeatmapAxes::for_template(template.grid(), ctx.cfg.heatmap_presence_bins)?;
        let map = presence_heatmap(scored.iter().filter(|s| s.template_id == *id).map(|s| &s.profile), axes);
        map.write_csv(&ctx.out(&format!("heatmap_{id}.csv")))?;
        let meta = serde_json::to_vec_pretty(&map.metadata_json())?;
        write_atomic(&ctx.out(&format!("heatmap_{id}.json")), &meta)?;
    }
    write_scores_csv(&ctx.out("ssim_scores.csv"), &scores, &flags)?;
    let hist = ssim_histogram(&scores, &flags, ctx.cfg.histogram_bins);
    write_atomic(&ctx.out("ssim_histogram.json"), &serde_json::to_vec_pretty(&hist)?)?;
    Ok(())
}

fn batch_id(template: TemplateId, index: usize) -> String {
    format!("{template}_{index:03}")
}

/// Returns false when the run has to pause for annotations.
fn superimposition(ctx: &Context<'_>, records: &mut [SeriesRecord], resume: bool) -> Result<bool> {
    let stage = Stage::SuperimpositionQc;
    let batched = records.iter().any(|r| r.is_due(stage) && r.batch_id.is_some());
    if !batched {
        build_batches(ctx, records)?;
    }
    let log_path = match (&ctx.cfg.replay_annotations, resume) {
        (Some(p), _) => p.clone(),
        (None, true) => ctx.data.annotation_log_path(),
        (None, false) => {
            info!(
                "batches written to {}; annotate and resume",
                ctx.paths.out_dir.join("batches").display()
            );
            return Ok(false);
        }
    };
    let log = read_log(&log_path)?;
    let mut verdicts = resolve_verdicts(&log);
    for r in records.iter_mut().filter(|r| r.is_due(stage)) {
        match verdicts.remove(&r.series_id) {
            Some(a) => {
                r.annotation = Some(ReviewOutcome {
                    verdict: a.verdict,
                    comment: a.comment.clone(),
                    inspector: a.inspector.clone(),
                });
                if a.verdict == Verdict::Reject {
                    r.reject(stage, RejectionReason::SuperimpositionQc, a.comment.clone());
                } else {
                    r.pass(stage);
                }
            }
            None => r.pass(stage),
        }
    }
    for id in verdicts.keys() {
        warn!("annotation for series {id} outside the current batches ignored");
    }
    Ok(true)
}

fn build_batches(ctx: &Context<'_>, records: &mut [SeriesRecord]) -> Result<()> {
    let stage = Stage::SuperimpositionQc;
    let threshold = ctx.cfg.threshold();
    for id in ctx.templates.keys() {
        let mut members: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].is_due(stage) && records[i].template_id == Some(*id))
            .collect();
        members.sort_by(|&a, &b| records[a].series_id.cmp(&records[b].series_id));
        let mut index = 0;
        for chunk in members.chunks(ctx.cfg.batch_size) {
            let loaded: Vec<(usize, Result<_>)> = ctx.pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| {
                        let sid = &records[i].series_id;
                        let mask = ctx
                            .data
                            .registered_path(sid)
                            .and_then(|p| load_volume(&p))
                            .map(|v| binarize(&v.with_series_id(sid), &threshold));
                        (i, mask)
                    })
                    .collect()
            });
            let mut masks = Vec::with_capacity(chunk.len());
            let mut ok = Vec::with_capacity(chunk.len());
            for (i, m) in loaded {
                match m {
                    Ok(m) => {
                        masks.push(m);
                        ok.push(i);
                    }
                    Err(e) => records[i].reject(stage, RejectionReason::ToolFailure(stage), e.to_string()),
                }
            }
            if ok.is_empty() {
                continue;
            }
            let bid = batch_id(*id, index);
            index += 1;
            let batch = ctx.pool.install(|| build_batch(&bid, &masks, ctx.cfg.batch_size))?;
            let manifest = BatchManifest {
                batch_id: bid.clone(),
                template_id: *id,
                threshold_hu: threshold.thresh,
                dims: batch.grid().dims(),
                members: ok
                    .iter()
                    .map(|&i| {
                        Ok(BatchMember {
                            series_id: records[i].series_id.clone(),
                            registered: DataDir::registered_relative(&records[i].series_id)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            };
            ctx.data.save_batch(&batch, &manifest)?;
            for &i in &ok {
                records[i].batch_id = Some(bid.clone());
            }
        }
    }
    Ok(())
}

fn roi_stage(ctx: &Context<'_>, records: &mut [SeriesRecord]) -> Result<()> {
    let stage = Stage::RoiCoverage;
    ctx.per_series(records, stage, |r| {
        let run = || -> Result<Vec<crate::roi::RoiCoverage>> {
            let id = r
                .template_id
                .ok_or_else(|| Error::InvalidParameter("no template".into()))?;
            let t = from_rows(r.transform.as_ref().ok_or(Error::SingularTransform)?)?;
            let native = load_volume(&r.source_path)?.with_series_id(&r.series_id);
            ctx.rois[&id]
                .iter()
                .map(|roi| {
                    let moved = transfer_roi(roi, &t, native.grid());
                    roi_coverage(&moved, &native, ctx.cfg.roi_coverage)
                })
                .collect()
        };
        match run() {
            Ok(cov) => {
                let retained = series_retained(&cov);
                let best = cov.iter().map(|c| c.covered_fraction).fold(0.0, f64::max);
                r.roi_coverages = cov;
                if retained {
                    r.pass(stage);
                } else {
                    r.reject(
                        stage,
                        RejectionReason::RoiCoverage,
                        format!("best ROI coverage {best:.3}"),
                    );
                }
            }
            Err(e) => r.reject(stage, RejectionReason::ToolFailure(stage), e.to_string()),
        }
        None::<()>
    });
    write_coverage_csv(
        &ctx.out("roi_coverage.csv"),
        records.iter().flat_map(|r| r.roi_coverages.iter()),
    )
}
