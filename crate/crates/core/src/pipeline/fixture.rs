//! Twenty-series synthetic run whose every rejection is forced.
//!
//! | series    | construction                         | rejected at            |
//! |-----------|--------------------------------------|------------------------|
//! | s01..s04  | coronal, sagittal, 45° tilt, coronal | limit to axial         |
//! | s05, s06  | two slices; `LOCALIZER` image type   | localiser removal      |
//! | s07       | stub registration exits non-zero     | co-registration        |
//! | s08..s10  | mid-head only, reviewer rejects      | similarity QC          |
//! | s11       | complete, inspector rejects          | superimposition QC     |
//! | s12, s13  | vault only, misses every ROI         | ROI coverage           |
//! | s14..s20  | complete                             | retained               |
//!
//! Twelve patients share these series so that patient counts fall more
//! slowly than series counts.

use std::path::{Path, PathBuf};

use super::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::phantom::{axial_grid, coronal_grid, roi_set, sagittal_grid, template_grid, tilted_grid, HeadPhantom};
use crate::roi::save_roi_set;
use crate::ssim::TemplateId;
use crate::superimpose::{AnnotationRecord, Verdict};
use crate::volume::{save_volume, Grid, SeriesMetadata, Volume};

/// Series remaining after each stage.
pub const EXPECTED_SERIES: [u64; 8] = [20, 20, 16, 14, 13, 10, 9, 7];
/// Patients remaining after each stage.
pub const EXPECTED_PATIENTS: [u64; 8] = [12, 12, 11, 10, 9, 8, 8, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Complete,
    Coronal,
    Sagittal,
    Tilted,
    TwoSlices,
    TaggedLocaliser,
    RegistrationFails,
    Medial,
    Vault,
}

const SERIES: [(&str, &str, Kind); 20] = [
    ("s01", "p01", Kind::Coronal),
    ("s02", "p02", Kind::Sagittal),
    ("s03", "p03", Kind::Tilted),
    ("s04", "p04", Kind::Coronal),
    ("s05", "p04", Kind::TwoSlices),
    ("s06", "p05", Kind::TaggedLocaliser),
    ("s07", "p06", Kind::RegistrationFails),
    ("s08", "p07", Kind::Medial),
    ("s09", "p08", Kind::Medial),
    ("s10", "p08", Kind::Medial),
    ("s11", "p09", Kind::Complete),
    ("s12", "p10", Kind::Vault),
    ("s13", "p11", Kind::Vault),
    ("s14", "p01", Kind::Complete),
    ("s15", "p02", Kind::Complete),
    ("s16", "p05", Kind::Complete),
    ("s17", "p07", Kind::Complete),
    ("s18", "p09", Kind::Complete),
    ("s19", "p10", Kind::Complete),
    ("s20", "p12", Kind::Complete),
];

const AGES: [(&str, Option<f64>); 12] = [
    ("p01", Some(66.0)),
    ("p02", Some(78.0)),
    ("p03", Some(70.0)),
    ("p04", Some(80.0)),
    ("p05", Some(69.0)),
    ("p06", Some(77.0)),
    ("p07", Some(71.0)),
    ("p08", Some(79.0)),
    ("p09", Some(67.0)),
    ("p10", Some(76.0)),
    ("p11", Some(68.0)),
    ("p12", None),
];

const SIMILARITY_REJECTS: [&str; 3] = ["s08", "s09", "s10"];
const SUPERIMPOSITION_REJECT: &str = "s11";

fn grid_for(kind: Kind) -> Grid {
    const FOV: usize = 40;
    const PIXEL: f64 = 5.5;
    match kind {
        Kind::Complete | Kind::TaggedLocaliser | Kind::RegistrationFails => axial_grid(FOV, PIXEL, 5.0, -90.0, 90.0),
        Kind::Coronal => coronal_grid(FOV, PIXEL, 30, 6.0),
        Kind::Sagittal => sagittal_grid(FOV, PIXEL, 26, 6.0),
        Kind::Tilted => tilted_grid(FOV, PIXEL, 30, 5.0, 45.0),
        Kind::TwoSlices => axial_grid(FOV, PIXEL, 5.0, -5.0, 0.0),
        Kind::Medial => axial_grid(FOV, PIXEL, 5.0, -20.0, 30.0),
        Kind::Vault => axial_grid(FOV, PIXEL, 5.0, 20.0, 85.0),
    }
}

#[derive(Debug, Clone)]
pub struct PipelineFixture {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub template_dir: PathBuf,
    pub roi_dir: PathBuf,
    pub registration_cmd: String,
    pub similarity_reviews: PathBuf,
    pub annotations: PathBuf,
}

impl PipelineFixture {
    /// Replay-mode configuration writing to `out_dir`.
    pub fn config(&self, out_dir: &Path) -> PipelineConfig {
        PipelineConfig {
            manifest: Some(self.manifest.clone()),
            template_dir: Some(self.template_dir.clone()),
            roi_dir: Some(self.roi_dir.clone()),
            out_dir: Some(out_dir.to_path_buf()),
            registration_cmd: Some(self.registration_cmd.clone()),
            similarity_reviews: Some(self.similarity_reviews.clone()),
            replay_annotations: Some(self.annotations.clone()),
            ..PipelineConfig::default()
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Deterministic ±6 HU texture on soft tissue, so that similarity scores
/// differ between series. Values stay below the bone threshold and above the
/// presence floor.
fn with_tissue_noise(v: Volume, seed: &str) -> Volume {
    let grid = v.grid().clone();
    let id = v.series_id().to_string();
    let seed = seed.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    let mut data = v.into_data();
    for ((x, y, z), value) in data.indexed_iter_mut() {
        if *value > -100.0 && *value < 90.0 {
            let mut h = seed ^ ((x as u64) << 40 | (y as u64) << 20 | z as u64);
            h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            h ^= h >> 31;
            *value += ((h >> 11) as f64 / (1u64 << 53) as f64 * 12.0 - 6.0) as f32;
        }
    }
    Volume::new(id, grid, data).expect("shape unchanged")
}

fn stub_script(failing: &[&str]) -> String {
    let mut s = String::from(
        "#!/bin/sh\n# usage: register_stub.sh INPUT REFERENCE OUTPUT TRANSFORM\n\
         # Series share the template's world frame, so the identity is exact.\nset -e\n",
    );
    for id in failing {
        s.push_str(&format!(
            "case \"$(basename \"$1\")\" in {id}.nii*) echo \"stub: {id} did not converge\" >&2; exit 2;; esac\n"
        ));
    }
    s.push_str("test -f \"$2\"\ncp \"$1\" \"$3\"\nprintf '1 0 0 0\\n0 1 0 0\\n0 0 1 0\\n0 0 0 1\\n' > \"$4\"\n");
    s
}

/// Writes series, sidecars, manifest, templates, ROIs, the registration
/// stub and both review logs under `root`.
pub fn write_pipeline_fixture(root: &Path) -> Result<PipelineFixture> {
    let series_dir = root.join("series");
    let template_dir = root.join("templates");
    let roi_dir = root.join("rois");
    for d in [&series_dir, &template_dir, &roi_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let phantom = HeadPhantom::default();
    let mut manifest = String::from("series_id,patient_id,path,age,tags\n");
    for (sid, pid, kind) in SERIES {
        let v = with_tissue_noise(phantom.ct_volume(sid, &grid_for(kind)), sid);
        let file = format!("{sid}.nii.gz");
        save_volume(&series_dir.join(&file), &v)?;
        let meta = SeriesMetadata {
            series_id: Some(sid.into()),
            patient_id: Some(pid.into()),
            kernel: Some(if sid < "s10" { "H30s" } else { "H70h" }.into()),
            image_type: if kind == Kind::TaggedLocaliser {
                vec!["ORIGINAL".into(), "PRIMARY".into(), "LOCALIZER".into()]
            } else {
                vec!["ORIGINAL".into(), "PRIMARY".into(), "AXIAL".into()]
            },
            labels: Vec::new(),
        };
        write(
            &series_dir.join(format!("{sid}.json")),
            &serde_json::to_string_pretty(&meta)?,
        )?;
        let age = AGES
            .iter()
            .find(|(p, _)| *p == pid)
            .and_then(|(_, a)| *a)
            .map(|a| a.to_string())
            .unwrap_or_default();
        manifest.push_str(&format!("{sid},{pid},series/{file},{age},head;non_contrast\n"));
    }
    let manifest_path = root.join("manifest.csv");
    write(&manifest_path, &manifest)?;

    let grid = template_grid();
    for id in TemplateId::ALL {
        let t = HeadPhantom::for_template(id).template_volume(id, &grid);
        save_volume(&template_dir.join(format!("{id}.nii.gz")), &t)?;
        save_roi_set(&roi_dir, &roi_set(id, &grid)?)?;
    }

    let failing: Vec<&str> = SERIES
        .iter()
        .filter(|s| s.2 == Kind::RegistrationFails)
        .map(|s| s.0)
        .collect();
    let stub = root.join("register_stub.sh");
    write(&stub, &stub_script(&failing))?;
    let registration_cmd = format!(
        "sh '{}' {{input}} {{reference}} {{output}} {{transform}}",
        stub.to_string_lossy().replace('\'', r"'\''")
    );

    let mut reviews = String::new();
    let line = |sid: &str, verdict: &str, comment: &str| {
        format!(
            "{{\"series_id\":\"{sid}\",\"verdict\":\"{verdict}\",\"comment\":\"{comment}\",\
             \"inspector\":\"reviewer\",\"timestamp\":\"2024-01-01T00:00:00.000Z\"}}\n"
        )
    };
    reviews.push_str(&line("s08", "accept", "first look"));
    for sid in SIMILARITY_REJECTS {
        reviews.push_str(&line(sid, "reject", "registration misaligned"));
    }
    let reviews_path = root.join("similarity_reviews.jsonl");
    write(&reviews_path, &reviews)?;

    let annotation = |sid: &str, verdict, comment: &str| AnnotationRecord {
        timestamp: "2024-01-02T00:00:00.000Z".into(),
        inspector: "inspector".into(),
        batch_id: format!("{}_000", TemplateId::Younger6570),
        series_id: sid.into(),
        voxel: [24, 28, 20],
        verdict,
        comment: comment.into(),
    };
    let mut log = String::new();
    for rec in [
        annotation(SUPERIMPOSITION_REJECT, Verdict::Accept, "looks fine"),
        annotation(
            SUPERIMPOSITION_REJECT,
            Verdict::Reject,
            "coronal registered to axial plane",
        ),
        annotation("s14", Verdict::Accept, "aligned"),
    ] {
        log.push_str(&serde_json::to_string(&rec)?);
        log.push('\n');
    }
    let annotations = root.join("annotations.jsonl");
    write(&annotations, &log)?;

    Ok(PipelineFixture {
        root: root.to_path_buf(),
        manifest: manifest_path,
        template_dir,
        roi_dir,
        registration_cmd,
        similarity_reviews: reviews_path,
        annotations,
    })
}
