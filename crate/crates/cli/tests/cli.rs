use std::path::Path;
use std::process::{Command, Output};

fn ctqc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctqc")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("demo");
    ok(&ctqc(&["synth", s(&root)]));
    let config = root.join("config.toml");
    assert!(config.exists());

    let text = ok(&ctqc(&["run", "--config", s(&config)]));
    assert!(text.contains("Containing >=1 ROI"), "{text}");
    assert!(text.contains("Total change"), "{text}");

    let out = root.join("out");
    let json = ok(&ctqc(&["report", "--out-dir", s(&out), "--json"]));
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(report["complete"], true);
    let series: Vec<u64> = report["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["series_remaining"].as_u64().unwrap())
        .collect();
    assert_eq!(series, [20, 20, 16, 14, 13, 10, 9, 7]);
    assert_eq!(report["total_series"]["change"], -13);
    assert_eq!(ok(&ctqc(&["report", "--out-dir", s(&out)])), text);
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("demo");
    ok(&ctqc(&["synth", s(&root)]));
    let other = dir.path().join("elsewhere");
    ok(&ctqc(&[
        "run",
        "--config",
        s(&root.join("config.toml")),
        "--out-dir",
        s(&other),
        "--batch-size",
        "3",
    ]));
    let batches = std::fs::read_dir(other.join("batches")).unwrap().count();
    assert!(batches >= 4, "{batches} batches");
    assert!(!root.join("out").exists());

    let bad = ctqc(&[
        "run",
        "--config",
        s(&root.join("config.toml")),
        "--ssim-percentile",
        "2",
    ]);
    assert!(!bad.status.success());
}

#[test]
fn module_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("demo");
    ok(&ctqc(&["synth", s(&root)]));
    let series = |id: &str| root.join("series").join(format!("{id}.nii.gz"));
    let template = root.join("templates").join("older_75_80.nii.gz");
    let (complete, medial) = (series("s14"), series("s08"));

    let profiles = dir.path().join("profiles.csv");
    ok(&ctqc(&["profile", s(&complete), s(&medial), "--out", s(&profiles)]));
    let text = std::fs::read_to_string(&profiles).unwrap();
    assert!(text.starts_with("series_id,slice_index,world_z_mm,presence"));
    assert!(text
        .lines()
        .skip(1)
        .all(|l| l.starts_with("s14,") || l.starts_with("s08,")));

    let classes = dir.path().join("classes.csv");
    let stdout = ok(&ctqc(&[
        "classify",
        s(&complete),
        s(&medial),
        "--template",
        s(&template),
        "--out",
        s(&classes),
    ]));
    assert!(stdout.contains("s14\tcomplete"), "{stdout}");
    assert!(stdout.contains("s08\tmedial"), "{stdout}");

    ok(&ctqc(&["run", "--config", s(&root.join("config.toml"))]));
    let registered = |id: &str| root.join("out/registered").join(format!("{id}.nii.gz"));
    let scores = dir.path().join("scores.csv");
    let stdout = ok(&ctqc(&[
        "ssim",
        s(&registered("s14")),
        s(&registered("s15")),
        "--template",
        s(&template),
        "--classifications",
        s(&classes),
        "--out",
        s(&scores),
    ]));
    assert_eq!(stdout.lines().count(), 2, "{stdout}");
    let text = std::fs::read_to_string(&scores).unwrap();
    assert!(text.starts_with("series_id,subgroup,template_id,score,flag"));
    assert!(text.contains("s14,complete,older_75_80,"), "{text}");

    let data = dir.path().join("data");
    ok(&ctqc(&[
        "superimpose",
        s(&registered("s14")),
        s(&registered("s15")),
        "--data-dir",
        s(&data),
        "--batch-id",
        "manual_000",
        "--template",
        s(&template),
    ]));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("batches/manual_000/members.json")).unwrap()).unwrap();
    assert_eq!(manifest["members"].as_array().unwrap().len(), 2);
    assert!(data.join("batches/manual_000/count.nii.gz").exists());
    assert!(data.join("templates/older_75_80.nii.gz").exists());
}

#[test]
fn errors_exit_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctqc(&["report", "--out-dir", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert!(!ctqc(&["profile"]).status.success());
    assert!(!ctqc(&["run"]).status.success());
}
