use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctqc::completeness::{classify_completeness, write_classifications_csv, Subgroup, TemplateZRange};
use ctqc::error::{Error, Result};
use ctqc::pipeline::fixture::write_pipeline_fixture;
use ctqc::pipeline::{
    emit_report, load_manifest, resume_pipeline, run_pipeline, PipelineConfig, PipelineLedger, RunStatus,
};
use ctqc::presence::{presence_profile, write_profiles_csv, PresenceParams};
use ctqc::ssim::{compute_ssim, flag_for_inspection, write_scores_csv, FlagPolicy, SsimScore, TemplateId};
use ctqc::superimpose::{binarize, build_batch, BatchManifest, BatchMember, DataDir, ThresholdParams};
use ctqc::volume::{load_volume, save_volume, Volume};
use ctqc_server::ServerConfig;

#[derive(Debug, Parser)]
#[command(name = "ctqc", version, about = "Quality control for co-registered CT head series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the staged pipeline over a manifest.
    Run {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Write per-slice presence profiles of volumes.
    Profile {
        volumes: Vec<PathBuf>,
        #[arg(long, default_value = "profiles.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        presence_tolerance: f64,
    },
    /// Classify volumes by which part of the template they cover.
    Classify {
        volumes: Vec<PathBuf>,
        /// Template whose grid defines the z range.
        #[arg(long)]
        template: PathBuf,
        #[arg(long, default_value = "classifications.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        presence_tolerance: f64,
    },
    /// Score registered volumes against a template and flag the lowest.
    Ssim {
        registered: Vec<PathBuf>,
        #[arg(long)]
        template: PathBuf,
        #[arg(long, default_value = "older_75_80")]
        template_id: TemplateId,
        /// `classify` output giving each series' subgroup; complete otherwise.
        #[arg(long)]
        classifications: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        ssim_percentile: f64,
        #[arg(long, default_value = "ssim_scores.csv")]
        out: PathBuf,
    },
    /// Build a superimposed batch from registered volumes into a data directory.
    Superimpose {
        registered: Vec<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        batch_id: String,
        #[arg(long, default_value = "older_75_80")]
        template_id: TemplateId,
        /// Template volume to copy into the data directory for the overlay view.
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
        #[arg(long, default_value_t = 100.0)]
        hu_threshold: f64,
    },
    /// Serve a data directory to the inspection UI.
    Serve {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long)]
        read_only: bool,
        #[arg(long)]
        cors_origin: Option<String>,
    },
    /// Print the attrition report of a finished or paused run.
    Report {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a small synthetic cohort with templates, ROIs and a registration stub.
    Synth { dir: PathBuf },
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// TOML or JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    template_dir: Option<PathBuf>,
    #[arg(long)]
    roi_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Shell command with {input}, {reference}, {output} and {transform}.
    #[arg(long)]
    registration_cmd: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    ssim_percentile: Option<f64>,
    #[arg(long)]
    presence_tolerance: Option<f64>,
    #[arg(long)]
    hu_threshold: Option<f64>,
    /// Annotation log to replay instead of pausing for inspection.
    #[arg(long)]
    replay_annotations: Option<PathBuf>,
    #[arg(long)]
    similarity_reviews: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = Some(v.clone());
                }
            )*};
        }
        set!(
            manifest,
            template_dir,
            roi_dir,
            out_dir,
            registration_cmd,
            replay_annotations,
            similarity_reviews
        );
        macro_rules! set_value {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            )*};
        }
        set_value!(batch_size, ssim_percentile, presence_tolerance, hu_threshold, workers);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(args: &PipelineArgs, resume: bool) -> Result<()> {
    let cfg = args.config()?;
    let result = if resume {
        resume_pipeline(&cfg)?
    } else {
        let manifest = cfg
            .manifest
            .as_deref()
            .ok_or_else(|| Error::Config("a manifest is required".into()))?;
        run_pipeline(load_manifest(manifest)?, &cfg)?
    };
    print!("{}", result.report.render_text());
    if result.status == RunStatus::AwaitingAnnotations {
        let out = cfg.run_paths()?.out_dir;
        println!(
            "\npaused for superimposition review: serve {} and annotate, then rerun with --resume",
            out.display()
        );
    }
    Ok(())
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<Volume>> {
    if paths.is_empty() {
        return Err(Error::InvalidParameter("no input volumes given".into()));
    }
    paths.iter().map(|p| load_volume(p)).collect()
}

fn profile(volumes: &[PathBuf], out: &Path, tolerance: f64) -> Result<()> {
    let p = PresenceParams::new(tolerance)?;
    let profiles = load_all(volumes)?
        .iter()
        .map(|v| presence_profile(v, &p))
        .collect::<Result<Vec<_>>>()?;
    write_profiles_csv(out, &profiles)?;
    println!("{} profiles -> {}", profiles.len(), out.display());
    Ok(())
}

fn classify(volumes: &[PathBuf], template: &Path, out: &Path, tolerance: f64) -> Result<()> {
    let p = PresenceParams::new(tolerance)?;
    let range = TemplateZRange::from_grid(load_volume(template)?.grid())?;
    let params = Default::default();
    let mut rows = Vec::new();
    for v in load_all(volumes)? {
        let c = classify_completeness(&presence_profile(&v, &p)?, &range, &params);
        println!("{}\t{}", c.series_id, c.subgroup);
        rows.push(c);
    }
    write_classifications_csv(out, &rows)
}

fn read_subgroups(path: &Path) -> Result<HashMap<String, Subgroup>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = HashMap::new();
    for row in r.records() {
        let row = row?;
        let (Some(id), Some(g)) = (row.get(0), row.get(1)) else {
            return Err(Error::InvalidParameter(format!("{}: short row", path.display())));
        };
        out.insert(id.to_string(), g.parse()?);
    }
    Ok(out)
}

fn ssim(
    registered: &[PathBuf],
    template: &Path,
    template_id: TemplateId,
    classifications: Option<&Path>,
    percentile: f64,
    out: &Path,
) -> Result<()> {
    let groups = classifications.map(read_subgroups).transpose()?.unwrap_or_default();
    let t = load_volume(template)?;
    let params = Default::default();
    let scores = load_all(registered)?
        .iter()
        .map(|v| {
            Ok(SsimScore {
                series_id: v.series_id().to_string(),
                subgroup: groups.get(v.series_id()).copied().unwrap_or(Subgroup::Complete),
                score: compute_ssim(v, &t, &params)?,
                template_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let flags = flag_for_inspection(
        &scores,
        &FlagPolicy {
            percentile,
            ..FlagPolicy::default()
        },
    );
    for (s, f) in scores.iter().zip(&flags) {
        println!("{}\t{:.4}\t{f}", s.series_id, s.score);
    }
    write_scores_csv(out, &scores, &flags)
}

#[allow(clippy::too_many_arguments)]
fn superimpose(
    registered: &[PathBuf],
    data_dir: &Path,
    batch_id: &str,
    template_id: TemplateId,
    template: Option<&Path>,
    batch_size: usize,
    hu_threshold: f64,
) -> Result<()> {
    let data = DataDir::new(data_dir);
    data.create()?;
    if let Some(t) = template {
        save_volume(&data.template_path(template_id), &load_volume(t)?)?;
    }
    let threshold = ThresholdParams { thresh: hu_threshold };
    let vols = load_all(registered)?;
    let mut members = Vec::new();
    for v in &vols {
        save_volume(&data.registered_path(v.series_id())?, v)?;
        members.push(BatchMember {
            series_id: v.series_id().to_string(),
            registered: DataDir::registered_relative(v.series_id())?,
        });
    }
    let masks: Vec<_> = vols.iter().map(|v| binarize(v, &threshold)).collect();
    let batch = build_batch(batch_id, &masks, batch_size)?;
    let manifest = BatchManifest {
        batch_id: batch_id.to_string(),
        template_id,
        threshold_hu: hu_threshold,
        dims: batch.grid().dims(),
        members,
    };
    data.save_batch(&batch, &manifest)?;
    println!(
        "batch {batch_id}: {} members -> {}",
        vols.len(),
        data.batch_dir(batch_id)?.display()
    );
    Ok(())
}

fn report(out_dir: &Path, json: bool) -> Result<()> {
    let path = out_dir.join("ledger.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ledger: PipelineLedger = serde_json::from_str(&text)?;
    ledger.validate()?;
    let report = emit_report(&ledger);
    if json {
        println!("{}", report.to_json()?);
    } else {
        print!("{}", report.render_text());
    }
    Ok(())
}

fn synth(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // absolute, so the config works from any directory
    let dir = &std::fs::canonicalize(dir).map_err(|e| Error::io(dir, e))?;
    let fixture = write_pipeline_fixture(dir)?;
    let cfg = fixture.config(&dir.join("out"));
    let path = dir.join("config.toml");
    let text = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    println!(
        "synthetic cohort in {}; run with: ctqc run --config {}",
        dir.display(),
        path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { pipeline, resume } => run(pipeline, *resume),
        Command::Profile {
            volumes,
            out,
            presence_tolerance,
        } => profile(volumes, out, *presence_tolerance),
        Command::Classify {
            volumes,
            template,
            out,
            presence_tolerance,
        } => classify(volumes, template, out, *presence_tolerance),
        Command::Ssim {
            registered,
            template,
            template_id,
            classifications,
            ssim_percentile,
            out,
        } => ssim(
            registered,
            template,
            *template_id,
            classifications.as_deref(),
            *ssim_percentile,
            out,
        ),
        Command::Superimpose {
            registered,
            data_dir,
            batch_id,
            template_id,
            template,
            batch_size,
            hu_threshold,
        } => superimpose(
            registered,
            data_dir,
            batch_id,
            *template_id,
            template.as_deref(),
            *batch_size,
            *hu_threshold,
        ),
        Command::Serve {
            data_dir,
            port,
            host,
            read_only,
            cors_origin,
        } => {
            let config = ServerConfig {
                data_dir: data_dir.clone(),
                read_only: *read_only,
                cors_origin: cors_origin.clone(),
            };
            return match ctqc_server::serve_blocking(config, SocketAddr::new(*host, *port)) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            };
        }
        Command::Report { out_dir, json } => report(out_dir, *json),
        Command::Synth { dir } => synth(dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
