use ctqc::pipeline::fixture::{write_pipeline_fixture, EXPECTED_PATIENTS, EXPECTED_SERIES};
use ctqc::pipeline::{load_manifest, resume_pipeline, run_pipeline, RejectionReason, RunStatus, Stage, StageStatus};
use ctqc::superimpose::{AnnotationLog, AnnotationRecord, DataDir, Verdict};

#[test]
fn synthetic_run_matches_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_pipeline_fixture(&dir.path().join("fx")).unwrap();
    let out = dir.path().join("out");
    let cfg = fx.config(&out);
    let run = run_pipeline(load_manifest(&fx.manifest).unwrap(), &cfg).unwrap();
    println!("{}", run.report.render_text());
    assert_eq!(run.status, RunStatus::Complete);
    let series: Vec<u64> = run.ledger.rows().iter().map(|r| r.series_remaining).collect();
    let patients: Vec<u64> = run.ledger.rows().iter().map(|r| r.patients_remaining).collect();
    assert_eq!(series, EXPECTED_SERIES);
    assert_eq!(patients, EXPECTED_PATIENTS);

    let reason = |sid: &str| {
        run.records
            .iter()
            .find(|r| r.series_id == sid)
            .and_then(|r| r.rejection())
            .map(|(_, reason)| reason)
    };
    assert_eq!(reason("s01"), Some(RejectionReason::NonAxial));
    assert_eq!(reason("s06"), Some(RejectionReason::Localiser));
    assert_eq!(reason("s07"), Some(RejectionReason::RegistrationFailure));
    assert_eq!(reason("s09"), Some(RejectionReason::SimilarityQc));
    assert_eq!(reason("s11"), Some(RejectionReason::SuperimpositionQc));
    assert_eq!(reason("s12"), Some(RejectionReason::RoiCoverage));
    assert_eq!(reason("s14"), None);
    assert!(run.records.iter().all(|r| r.check_stage_order()));

    for f in [
        "report.json",
        "report.txt",
        "ledger.json",
        "series.json",
        "checkpoint.json",
        "ssim_scores.csv",
        "roi_coverage.csv",
        "profiles.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let batches = DataDir::new(&out).list_batches().unwrap();
    assert_eq!(batches.len(), 2);
}

#[test]
fn interactive_run_pauses_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_pipeline_fixture(&dir.path().join("fx")).unwrap();
    let out = dir.path().join("out");
    let mut cfg = fx.config(&out);
    cfg.replay_annotations = None;
    let paused = run_pipeline(load_manifest(&fx.manifest).unwrap(), &cfg).unwrap();
    assert_eq!(paused.status, RunStatus::AwaitingAnnotations);
    assert_eq!(paused.ledger.last().stage, Stage::SimilarityQc);
    assert!(!paused.report.complete);
    let s11 = paused.records.iter().find(|r| r.series_id == "s11").unwrap();
    assert_eq!(s11.status(Stage::SuperimpositionQc), &StageStatus::Pending);

    let data = DataDir::new(&out);
    let log = AnnotationLog::open(data.annotation_log_path()).unwrap();
    log.append(&AnnotationRecord {
        timestamp: "2024-01-02T00:00:00.000Z".into(),
        inspector: "a".into(),
        batch_id: s11.batch_id.clone().unwrap(),
        series_id: "s11".into(),
        voxel: [1, 1, 1],
        verdict: Verdict::Reject,
        comment: "tilt".into(),
    })
    .unwrap();
    let done = resume_pipeline(&cfg).unwrap();
    assert_eq!(done.status, RunStatus::Complete);
    let series: Vec<u64> = done.ledger.rows().iter().map(|r| r.series_remaining).collect();
    assert_eq!(series, EXPECTED_SERIES);
}
