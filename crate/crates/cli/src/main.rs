mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use her2_core::gateway::{ModelBinding, ModelBindings, ModelGateway, ModelRole};
use her2_core::mapping::verify_bijection;
use her2_core::metrics::{apply_truth, dca_csv, evaluate, read_predictions, roc_csv, EvalOptions};
use her2_core::render::{mosaic, save_png, read_tally_csv, tally_csv, tally_report, CaseArtifacts};
use her2_core::slide::{read_patch_dir, write_patch_dir};
use her2_core::{
    compute_grid_spec, extract_patches, run_with_gateway, Her2Error, Modality, PipelineConfig,
    SlideImage,
};

use config::{ModeArg, RunConfig, MIN_TILE_SIZE_PX};

#[derive(Parser)]
#[command(name = "her2", version, about = "Patch-grid HER2 scoring for paired H&E / IHC slides")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut slides into patch PNGs plus a grid manifest.
    Tile(TileArgs),
    /// Score one case end to end.
    Run(RunArgs),
    /// Metrics from a prediction CSV.
    Eval(EvalArgs),
    #[command(subcommand)]
    Render(RenderCommand),
    /// Check that the configured mapping is a bijection.
    VerifyMapping(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    He,
    Ihc,
}

#[derive(Args)]
struct TileArgs {
    /// Tile both slides named in a run config.
    #[arg(long, conflicts_with = "input")]
    config: Option<PathBuf>,
    /// A single slide to tile.
    #[arg(long, requires = "modality")]
    input: Option<PathBuf>,
    #[arg(long)]
    modality: Option<ModalityArg>,
    #[arg(long)]
    case_id: Option<String>,
    #[arg(long)]
    tile_size: Option<u32>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SidecarArgs {
    /// Sidecar command for all three roles.
    #[arg(long)]
    sidecar: Option<String>,
    #[arg(long)]
    sidecar_tumor: Option<String>,
    #[arg(long)]
    sidecar_stain: Option<String>,
    #[arg(long)]
    sidecar_segment: Option<String>,
}

impl SidecarArgs {
    fn apply(&self, bindings: &mut ModelBindings) {
        let slots = [
            (&mut bindings.tumor, ModelRole::TumorC, &self.sidecar_tumor),
            (&mut bindings.stain, ModelRole::StainM, &self.sidecar_stain),
            (&mut bindings.segment, ModelRole::SegmenterL, &self.sidecar_segment),
        ];
        for (slot, role, specific) in slots {
            if let Some(cmd) = specific.as_ref().or(self.sidecar.as_ref()) {
                let size = slot.input_size_px;
                *slot = ModelBinding::sidecar(role, cmd.clone());
                slot.input_size_px = size;
            }
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    sidecars: SidecarArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// `id,true_label,pred_label,prob_<label>...`
    #[arg(long)]
    predictions: PathBuf,
    /// `id,true_label`; replaces the true labels of the prediction file.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    roc: bool,
    #[arg(long)]
    dca: bool,
    /// Directory for metrics.json and curve CSVs. Without it the metrics
    /// are printed only.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum RenderCommand {
    /// Per-ROI real vs predicted counts from a labelled patch CSV.
    Tally {
        /// `patch_id,roi_id,true_tumor,true_stain,pred_tumor,pred_stain`
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reassemble a tiled patch directory into one image.
    Mosaic {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        grid_lines: bool,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|e| e.downcast_ref::<Her2Error>()) else {
        return 2;
    };
    match e.root() {
        Her2Error::MappingOutOfRange { .. } | Her2Error::NotInvertible(_) => 3,
        Her2Error::BackendUnavailable(_) | Her2Error::ProtocolViolation(_) => 4,
        Her2Error::UndefinedRoc(_) => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tile(a) => cmd_tile(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(r) => cmd_render(r),
        Command::VerifyMapping(a) => cmd_verify(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Her2Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| Her2Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn to_json(value: &impl serde::Serialize) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn tile_one(slide: &SlideImage, tile_size: u32, out: &Path) -> anyhow::Result<PathBuf> {
    let spec = compute_grid_spec(slide.width_px(), slide.height_px(), tile_size)?;
    let grid = extract_patches(slide, &spec)?;
    Ok(write_patch_dir(&grid, out)?)
}

fn cmd_tile(a: TileArgs) -> anyhow::Result<u8> {
    let mut jobs: Vec<(PathBuf, Modality, String)> = Vec::new();
    let mut tile_size = 512;
    let mut workers = 1;
    if let Some(path) = &a.config {
        let config = RunConfig::load(path)?;
        config.validate()?;
        let case_id = a.case_id.clone().unwrap_or_else(|| config.case_id());
        tile_size = config.tile_size_px;
        workers = config.workers;
        jobs.push((config.he_slide_path.clone(), Modality::He, case_id.clone()));
        jobs.push((config.ihc_slide_path.clone(), Modality::Ihc, case_id));
    } else if let (Some(input), Some(m)) = (&a.input, a.modality) {
        let case_id = a.case_id.clone().unwrap_or_else(|| {
            input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "case".into())
        });
        let modality = match m {
            ModalityArg::He => Modality::He,
            ModalityArg::Ihc => Modality::Ihc,
        };
        jobs.push((input.clone(), modality, case_id));
    } else {
        bail!(Her2Error::InvalidArgument("tile needs --config or --input with --modality".into()));
    }
    let tile_size = a.tile_size.unwrap_or(tile_size);
    if tile_size < MIN_TILE_SIZE_PX {
        bail!(Her2Error::InvalidArgument(format!(
            "tile size must be at least {MIN_TILE_SIZE_PX}, got {tile_size}"
        )));
    }
    let workers = a.workers.unwrap_or(workers);
    if workers == 0 {
        bail!(Her2Error::InvalidArgument("workers must be positive".into()));
    }
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building worker pool")?;
    for (path, modality, case_id) in jobs {
        let slide = SlideImage::load(&path, case_id, modality)?;
        let manifest = threads.install(|| tile_one(&slide, tile_size, &a.out))?;
        println!("{}", manifest.display());
    }
    Ok(0)
}

fn cmd_run(a: RunArgs) -> anyhow::Result<u8> {
    let mut config = RunConfig::load(&a.config)?;
    if let Some(w) = a.workers {
        config.workers = w;
    }
    if let Some(m) = a.mode {
        config.scoring_mode = m;
    }
    if let Some(o) = a.out {
        config.output_dir = o;
    }
    config.validate()?;
    let mut bindings = config.models.resolve();
    a.sidecars.apply(&mut bindings);

    let case_id = config.case_id();
    let he = SlideImage::load(&config.he_slide_path, case_id.clone(), Modality::He)?;
    let ihc = SlideImage::load(&config.ihc_slide_path, case_id, Modality::Ihc)?;
    let he_spec = compute_grid_spec(he.width_px(), he.height_px(), config.tile_size_px)?;
    let ihc_spec = compute_grid_spec(ihc.width_px(), ihc.height_px(), config.tile_size_px)?;
    let mapping = config.mapping.build(he_spec, ihc_spec)?;
    let report = verify_bijection(&mapping);
    if !report.is_bijective() {
        return Err(Her2Error::NotInvertible(format!(
            "configured mapping is not a bijection: {} collisions, {} unreached, {} out of range",
            report.collisions.len(),
            report.unreached.len(),
            report.out_of_range.len()
        ))
        .into());
    }

    let pipeline = PipelineConfig {
        tile_size_px: config.tile_size_px,
        scoring_mode: config.scoring_mode.into(),
        workers: config.workers,
    };
    let artifacts = CaseArtifacts::new(&config.output_dir, ihc.identity(), ihc_spec, config.artifacts.clone())?;
    let gateway = ModelGateway::start(&bindings, config.workers)?;
    let visit = |o: &her2_core::pipeline::PatchOutput<'_>| artifacts.visit(o);
    let result = run_with_gateway(&he, &ihc, &mapping, &gateway, &pipeline, Some(&visit));
    gateway.shutdown();
    let mut case = result?;
    let case_dir = artifacts.case_dir().to_path_buf();
    artifacts.finish(&mut case)?;
    println!(
        "{}: {} ({:.1}% of patches 2+ or 3+) -> {}",
        case.case_id,
        case.wsi_score,
        case.coverage_pct,
        case_dir.join("report.json").display()
    );
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<u8> {
    let mut table = read_predictions(&a.predictions)?;
    if let Some(t) = &a.truth {
        apply_truth(&mut table, t)?;
    }
    let report = evaluate(&table, EvalOptions { roc: a.roc, dca: a.dca })?;
    let json = to_json(&report)?;
    if let Some(out) = &a.out {
        write_file(&out.join("metrics.json"), &json)?;
        for (label, curve) in &report.roc_curves {
            write_file(&out.join(format!("roc_{label}.csv")), roc_csv(curve))?;
        }
        for (label, curve) in &report.dca_curves {
            write_file(&out.join(format!("dca_{label}.csv")), dca_csv(curve))?;
        }
    }
    for label in &report.roc_undefined {
        eprintln!("warning: ROC undefined for {label:?}");
    }
    print!("{json}");
    Ok(0)
}

fn cmd_render(r: RenderCommand) -> anyhow::Result<u8> {
    match r {
        RenderCommand::Tally { input, out } => {
            let data = read_tally_csv(&input)?;
            let tallies = tally_report(&data.truth, &data.predicted, &data.partition)?;
            let csv = tally_csv(&tallies);
            write_file(&out.join("tally.csv"), &csv)?;
            write_file(&out.join("tally.json"), to_json(&tallies)?)?;
            print!("{csv}");
        }
        RenderCommand::Mosaic { manifest, grid_lines, out } => {
            let grid = read_patch_dir(&manifest)?;
            let image = mosaic(&grid, grid_lines)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|source| Her2Error::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
            save_png(&out, &image)?;
            println!("{}", out.display());
        }
    }
    Ok(0)
}

fn cmd_verify(a: VerifyArgs) -> anyhow::Result<u8> {
    let config = RunConfig::load(&a.config)?;
    config.validate()?;
    let (hw, hh) = SlideImage::read_dimensions(&config.he_slide_path)?;
    let (iw, ih) = SlideImage::read_dimensions(&config.ihc_slide_path)?;
    let mapping = config.mapping.build(
        compute_grid_spec(hw, hh, config.tile_size_px)?,
        compute_grid_spec(iw, ih, config.tile_size_px)?,
    )?;
    let report = verify_bijection(&mapping);
    print!("{}", to_json(&report)?);
    Ok(if report.is_bijective() { 0 } else { 3 })
}
