//! External registration command and template choice.

use std::path::Path;
use std::process::Command;

use log::warn;

use super::config::check_command_template;
use crate::error::{Error, Result};
use crate::ssim::TemplateId;
use crate::volume::{load_volume, resample, AffineTransform, Grid, Interpolation, Volume};

/// Younger template below the age cut, older at or above it, the default
/// when the age is unknown.
pub fn select_template(age_years: Option<f64>, age_cut_years: f64, default: TemplateId) -> TemplateId {
    match age_years {
        Some(a) if a < age_cut_years => TemplateId::Younger6570,
        Some(_) => TemplateId::Older7580,
        None => {
            warn!("patient age missing, using template {default}");
            default
        }
    }
}

fn quote(path: &Path) -> String {
    format!("'{}'", path.to_string_lossy().replace('\'', r"'\''"))
}

/// Runs `command_template` through `sh -c` with its placeholders replaced
/// by quoted paths, then loads the registered volume and the 4×4 world
/// transform (native to template). A registered volume that is not on the
/// template grid is resampled onto it through the transform.
pub fn invoke_registration(
    input: &Path,
    reference: &Path,
    template_grid: &Grid,
    command_template: &str,
    work_dir: &Path,
    series_id: &str,
) -> Result<(Volume, AffineTransform)> {
    check_command_template(command_template)?;
    std::fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
    let output = work_dir.join("registered.nii.gz");
    let transform = work_dir.join("transform.txt");
    for stale in [&output, &transform] {
        if stale.exists() {
            std::fs::remove_file(stale).map_err(|e| Error::io(stale, e))?;
        }
    }
    let cmd = command_template
        .replace("{input}", &quote(input))
        .replace("{reference}", &quote(reference))
        .replace("{output}", &quote(&output))
        .replace("{transform}", &quote(&transform));
    let out = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| Error::Registration(format!("cannot start registration command: {e}")))?;
    if !out.status.success() {
        let stderr = String::from_utf8_lossy(&out.stderr);
        return Err(Error::Registration(format!(
            "command exited with {}: {}",
            out.status,
            stderr.trim()
        )));
    }
    let missing = |p: &Path| Error::Registration(format!("command did not write {}", p.display()));
    if !output.exists() {
        return Err(missing(&output));
    }
    if !transform.exists() {
        return Err(missing(&transform));
    }
    let t = AffineTransform::read(&transform).map_err(|e| Error::Registration(format!("transform: {e}")))?;
    let registered = load_volume(&output).map_err(|e| Error::Registration(format!("registered volume: {e}")))?;
    let registered = if registered.grid().matches(template_grid, 1e-4) {
        registered
    } else {
        resample(&registered, &t, template_grid, Interpolation::Trilinear, None)
    };
    Ok((registered.with_series_id(series_id), t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{axial_grid, template_grid, HeadPhantom};
    use crate::volume::save_volume;

    const IDENTITY: &str = "printf '1 0 0 0\\n0 1 0 0\\n0 0 1 0\\n0 0 0 1\\n' > {transform}";

    fn inputs(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf, Volume) {
        let p = HeadPhantom::default();
        let native = p.ct_volume("s", &axial_grid(24, 8.0, 10.0, -60.0, 60.0));
        let template = p.template_volume(TemplateId::Younger6570, &template_grid());
        let input = dir.join("s.nii.gz");
        let reference = dir.join("t.nii.gz");
        save_volume(&input, &native).unwrap();
        save_volume(&reference, &template).unwrap();
        (input, reference, native)
    }

    #[test]
    fn copy_stub_resamples_onto_template() {
        let dir = tempfile::tempdir().unwrap();
        let (input, reference, native) = inputs(dir.path());
        let cmd = format!("cp {{input}} {{output}} && {IDENTITY} && test -f {{reference}}");
        let g = template_grid();
        let (reg, t) = invoke_registration(&input, &reference, &g, &cmd, &dir.path().join("w"), "s").unwrap();
        assert_eq!(t, AffineTransform::identity());
        assert!(reg.grid().matches(&g, 1e-9));
        let want = resample(&native, &t, &g, Interpolation::Trilinear, None);
        assert_eq!(reg.data(), want.data());
        assert_eq!(reg.series_id(), "s");
    }

    #[test]
    fn failures() {
        let dir = tempfile::tempdir().unwrap();
        let (input, reference, _) = inputs(dir.path());
        let g = template_grid();
        let w = dir.path().join("w");
        let suffix = "# {input} {reference} {output} {transform}";
        let cases = [
            format!("exit 3 {suffix}"),
            format!("cp {{input}} {{output}} {suffix}"),
            format!(
                "cp {{input}} {{output}} && printf '1 0 0 0\\n0 0 0 0\\n0 0 1 0\\n0 0 0 1\\n' > {{transform}} {suffix}"
            ),
        ];
        for cmd in cases {
            let r = invoke_registration(&input, &reference, &g, &cmd, &w, "s");
            assert!(matches!(r, Err(Error::Registration(_))), "{cmd}: {r:?}");
        }
    }

    #[test]
    fn template_by_age() {
        let d = TemplateId::Older7580;
        assert_eq!(select_template(Some(60.0), 72.5, d), TemplateId::Younger6570);
        assert_eq!(select_template(Some(80.0), 72.5, d), TemplateId::Older7580);
        assert_eq!(select_template(Some(72.5), 72.5, d), TemplateId::Older7580);
        assert_eq!(select_template(None, 72.5, d), TemplateId::Older7580);
    }
}
