use std::path::Path;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use ndarray::Array3;
use tower::ServiceExt;

use ctqc::ssim::TemplateId;
use ctqc::superimpose::{
    binarize, build_batch, read_log, resolve_verdicts, BatchManifest, BatchMember, DataDir, ThresholdParams, Verdict,
};
use ctqc::volume::{load_volume, save_volume, Grid, Volume};
use ctqc_server::{apply_window, router, AppState, BatchSummary, ServerConfig, VoxelMembers};

const DIMS: [usize; 3] = [7, 5, 4];

fn grid() -> Grid {
    Grid::axis_aligned(DIMS, [2.0; 3], [0.0; 3]).unwrap()
}

fn registered(id: &str, k: usize) -> Volume {
    let data = Array3::from_shape_fn((DIMS[0], DIMS[1], DIMS[2]), |(x, y, z)| {
        if (x + 2 * y + z + k).is_multiple_of(4) {
            250.0 + k as f32
        } else {
            -30.0 + (x * y) as f32
        }
    });
    Volume::new(id, grid(), data).unwrap()
}

/// Two batches: b_000 = {s1, s2, s3}, b_001 = {s4}.
fn fixture(root: &Path) {
    let d = DataDir::new(root);
    d.create().unwrap();
    let template = Volume::new(
        "t",
        grid(),
        Array3::from_shape_fn((DIMS[0], DIMS[1], DIMS[2]), |(x, _, _)| 10.0 * x as f32),
    )
    .unwrap();
    save_volume(&d.template_path(TemplateId::Younger6570), &template).unwrap();
    for (batch_id, ids) in [("b_000", &["s1", "s2", "s3"][..]), ("b_001", &["s4"][..])] {
        let vols: Vec<Volume> = ids.iter().enumerate().map(|(k, id)| registered(id, k)).collect();
        for v in &vols {
            save_volume(&d.registered_path(v.series_id()).unwrap(), v).unwrap();
        }
        let masks: Vec<_> = vols.iter().map(|v| binarize(v, &ThresholdParams::default())).collect();
        let batch = build_batch(batch_id, &masks, 100).unwrap();
        let manifest = BatchManifest {
            batch_id: batch_id.into(),
            template_id: TemplateId::Younger6570,
            threshold_hu: 100.0,
            dims: DIMS,
            members: ids
                .iter()
                .map(|id| BatchMember {
                    series_id: id.to_string(),
                    registered: DataDir::registered_relative(id).unwrap(),
                })
                .collect(),
        };
        d.save_batch(&batch, &manifest).unwrap();
    }
}

fn app(root: &Path, read_only: bool) -> Router {
    router(
        AppState::open(ServerConfig {
            data_dir: root.to_path_buf(),
            read_only,
            cors_origin: None,
        })
        .unwrap(),
    )
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_json(app: &Router, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/annotations")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

/// Splits a binary slice payload into its header and raw data section.
fn split_binary(bytes: &[u8]) -> (serde_json::Value, &[u8]) {
    let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    (serde_json::from_slice(&bytes[4..4 + n]).unwrap(), &bytes[4 + n..])
}

fn x_fastest<T: Copy>(a: &Array3<T>, z: usize) -> Vec<T> {
    let mut out = Vec::new();
    for y in 0..a.dim().1 {
        for x in 0..a.dim().0 {
            out.push(a[[x, y, z]]);
        }
    }
    out
}

#[tokio::test]
async fn lists_batches() {
    let dir = tempfile::tempdir().unwrap();
    let empty = app(dir.path(), false);
    let (status, body) = get(&empty, "/batches").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body), serde_json::json!([]));

    fixture(dir.path());
    let (_, body) = get(&app(dir.path(), false), "/batches").await;
    let list: Vec<BatchSummary> = serde_json::from_slice(&body).unwrap();
    assert_eq!(list.len(), 2);
    assert_eq!(list[0].batch_id, "b_000");
    assert_eq!(list[0].member_count, 3);
    assert_eq!(list[0].z_extent, DIMS[2]);
    assert_eq!(list[1].member_count, 1);
}

#[tokio::test]
async fn batch_slices_match_the_engine() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path(), false);
    let (engine, _) = DataDir::new(dir.path()).load_batch("b_000").unwrap();
    for z in 0..DIMS[2] {
        let (status, body) = get(&app, &format!("/batches/b_000/slice/{z}")).await;
        assert_eq!(status, StatusCode::OK);
        let (header, data) = split_binary(&body);
        assert_eq!(header["dims"], serde_json::json!([DIMS[0], DIMS[1]]));
        assert_eq!(header["z"], z);
        assert_eq!(header["layers"][0]["dtype"], "u16");
        let expect: Vec<u8> = x_fastest(engine.count_volume(), z)
            .iter()
            .flat_map(|c| c.to_le_bytes())
            .collect();
        assert_eq!(data, &expect[..]);

        let (_, body) = get(&app, &format!("/batches/b_000/slice/{z}?format=json")).await;
        let values: Vec<u16> = serde_json::from_value(json(&body)["layers"][0]["values"].clone()).unwrap();
        assert_eq!(values, x_fastest(engine.count_volume(), z));
    }
    assert_eq!(
        get(&app, &format!("/batches/b_000/slice/{}", DIMS[2])).await.0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(get(&app, "/batches/nope/slice/0").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/batches/b_000/slice/-1").await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn voxel_queries_match_the_engine() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path(), false);
    let (engine, _) = DataDir::new(dir.path()).load_batch("b_000").unwrap();
    let mut saw_empty = false;
    for z in 0..DIMS[2] {
        for y in 0..DIMS[1] {
            for x in 0..DIMS[0] {
                let (status, body) = get(&app, &format!("/batches/b_000/voxel/{x}/{y}/{z}")).await;
                assert_eq!(status, StatusCode::OK);
                let got: VoxelMembers = serde_json::from_slice(&body).unwrap();
                assert_eq!(got.series_ids, engine.query_voxel(x, y, z).unwrap());
                saw_empty |= got.series_ids.is_empty();
            }
        }
    }
    assert!(saw_empty);
    assert_eq!(get(&app, "/batches/b_000/voxel/7/0/0").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/batches/zz/voxel/0/0/0").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn series_views() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path(), false);
    let stored = load_volume(&DataDir::new(dir.path()).registered_path("s2").unwrap()).unwrap();

    let (status, body) = get(&app, "/series/s2/slice/1?view=registered&window=400&level=100").await;
    assert_eq!(status, StatusCode::OK);
    let (header, data) = split_binary(&body);
    assert_eq!(header["window"], serde_json::json!([400.0, 100.0]));
    let expect: Vec<u8> = x_fastest(stored.data(), 1)
        .into_iter()
        .map(|a| apply_window(a, 400.0, 100.0))
        .collect();
    assert_eq!(data, &expect[..]);

    let (status, body) = get(&app, "/series/s2/slice/1?view=mask_on_template&format=json").await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["dims"], serde_json::json!([DIMS[0], DIMS[1]]));
    assert_eq!(v["layers"][0]["name"], "mask");
    assert_eq!(v["layers"][1]["name"], "template");
    let mask: Vec<u8> = serde_json::from_value(v["layers"][0]["values"].clone()).unwrap();
    let expect: Vec<u8> = x_fastest(binarize(&stored, &ThresholdParams::default()).data(), 1)
        .into_iter()
        .map(u8::from)
        .collect();
    assert_eq!(mask, expect);
    let template: Vec<u8> = serde_json::from_value(v["layers"][1]["values"].clone()).unwrap();
    assert_eq!(template.len(), DIMS[0] * DIMS[1]);
    assert_eq!((template[0], template[DIMS[0] - 1]), (0, 255));

    assert_eq!(
        get(&app, "/series/s2/slice/0?view=sagittal").await.0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        get(&app, "/series/s2/slice/4?view=registered").await.0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        get(&app, "/series/s9/slice/0?view=registered").await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        get(&app, "/series/s2/slice/0?window=0").await.0,
        StatusCode::BAD_REQUEST
    );
}

#[tokio::test]
async fn gets_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path(), false);
    for uri in [
        "/batches",
        "/batches/b_001/slice/2",
        "/batches/b_000/voxel/1/1/1",
        "/series/s1/slice/0",
        "/annotations",
    ] {
        let first = get(&app, uri).await;
        assert_eq!(first.0, StatusCode::OK, "{uri}");
        assert_eq!(get(&app, uri).await, first, "{uri}");
    }
    assert!(
        !DataDir::new(dir.path()).annotation_log_path().exists()
            || read_log(&DataDir::new(dir.path()).annotation_log_path())
                .unwrap()
                .is_empty()
    );
}

#[tokio::test]
async fn annotations_are_logged_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path(), false);
    let (status, body) = post_json(
        &app,
        r#"{"batch_id":"b_000","series_id":"s2","voxel":[1,2,3],"verdict":"reject","comment":"coronal series"}"#,
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    let echo = json(&body);
    assert_eq!(echo["series_id"], "s2");
    assert_eq!(echo["verdict"], "reject");
    assert_eq!(echo["voxel"], serde_json::json!([1, 2, 3]));
    assert_eq!(echo["comment"], "coronal series");

    let (status, _) = post_json(
        &app,
        r#"{"batch_id":"b_000","series_id":"s3","voxel":[0,0,0],"verdict":"accept","inspector":"rk"}"#,
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);

    let log_path = DataDir::new(dir.path()).annotation_log_path();
    let text = std::fs::read_to_string(&log_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(json(lines[0].as_bytes()), echo);
    assert_eq!(body, lines[0].as_bytes());

    let replayed = read_log(&log_path).unwrap();
    let (_, body) = get(&app, "/annotations").await;
    let in_memory: Vec<ctqc::superimpose::AnnotationRecord> = serde_json::from_slice(&body).unwrap();
    assert_eq!(in_memory, replayed);
    let verdicts = resolve_verdicts(&replayed);
    assert_eq!(verdicts["s2"].verdict, Verdict::Reject);
    assert_eq!(verdicts["s3"].inspector, "rk");

    // a fresh service over the same directory starts from the replayed log
    let (_, body) = get(&self::app(dir.path(), true), "/annotations").await;
    assert_eq!(
        serde_json::from_slice::<Vec<ctqc::superimpose::AnnotationRecord>>(&body).unwrap(),
        replayed
    );
}

#[tokio::test]
async fn annotation_errors() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path(), false);
    let cases = [
        (
            r#"{"batch_id":"b_000","series_id":"s4","voxel":[0,0,0],"verdict":"reject"}"#,
            StatusCode::NOT_FOUND,
        ),
        (
            r#"{"batch_id":"b_9","series_id":"s1","voxel":[0,0,0],"verdict":"reject"}"#,
            StatusCode::NOT_FOUND,
        ),
        (
            r#"{"batch_id":"b_000","series_id":"s1","voxel":[0,0],"verdict":"reject"}"#,
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            r#"{"batch_id":"b_000","series_id":"s1","voxel":[-1,0,0],"verdict":"reject"}"#,
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            r#"{"batch_id":"b_000","series_id":"s1","voxel":[9,0,0],"verdict":"reject"}"#,
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            r#"{"batch_id":"b_000","series_id":"s1","voxel":[0,0,0],"verdict":"maybe"}"#,
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            r#"{"batch_id":"b_000","series_id":"s1","voxel":[0,0,0]"#,
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            r#"{"batch_id":"b_000","series_id":"s1","voxel":[0,0,0],"verdict":"reject","extra":1}"#,
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
    ];
    for (body, want) in cases {
        let (status, resp) = post_json(&app, body).await;
        assert_eq!(status, want, "{body}");
        assert!(json(&resp)["error"].is_string());
    }
    let no_type = Request::post("/annotations").body(Body::from("{}")).unwrap();
    assert_eq!(send(&app, no_type).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(read_log(&DataDir::new(dir.path()).annotation_log_path())
        .unwrap()
        .is_empty());
}

#[tokio::test]
async fn read_only_refuses_writes() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path(), true);
    let (status, _) = post_json(
        &app,
        r#"{"batch_id":"b_000","series_id":"s1","voxel":[0,0,0],"verdict":"reject"}"#,
    )
    .await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert!(!DataDir::new(dir.path()).annotation_log_path().exists());
    assert_eq!(get(&app, "/batches").await.0, StatusCode::OK);
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = app(dir.path(), false);
    let req = Request::options("/annotations")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}

#[test]
fn missing_data_dir_is_refused() {
    assert!(AppState::open(ServerConfig {
        data_dir: "/nonexistent/ctqc".into(),
        read_only: false,
        cors_origin: None,
    })
    .is_err());
}
