//! `panoworld` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 oracle failure, 4 any
//! other stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use panoworld::distortion::{fit, to_float_image, DistortionField, FieldConfig, FitConfig, FitPair};
use panoworld::oracle::directory::serve_directory;
use panoworld::oracle::http::HttpOracleServer;
use panoworld::oracle::mock::MockOracle;
use panoworld::pano::HeuristicKind;
use panoworld::pipeline::metrics::{format_psnr, psnr};
use panoworld::pipeline::{Pipeline, PipelineConfig, PipelineError, Stage};
use panoworld::raster::{Mask, RgbImage};

#[derive(Parser)]
#[command(name = "panoworld", version, about = "Single image to navigable 3D scene assets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Pipeline config file (JSON); defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// ad_hoc, sequential or anchored.
    #[arg(long)]
    heuristic: Option<String>,
    /// Inpaint only this many evenly spaced grid poses.
    #[arg(long)]
    grid_subset: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default config.
    Config,
    /// Outpaint the panorama.
    Pano(ConfigArgs),
    /// Run through lifting the panorama to a point cloud.
    Lift(ConfigArgs),
    /// Run through inpainting the grid views.
    Grid(ConfigArgs),
    /// Run through writing the reconstruction export.
    Export(ConfigArgs),
    /// Run the pipeline, optionally stopping after a stage.
    Run {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long, default_value = "export")]
        stop_after: String,
    },
    /// Write forward-backward warp pairs from the lifted views.
    Pairs {
        #[command(flatten)]
        args: ConfigArgs,
        /// Dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Report metrics of a run, or the PSNR between two images.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long, requires = "b")]
        a: Option<PathBuf>,
        #[arg(long, requires = "a")]
        b: Option<PathBuf>,
        /// Restrict the PSNR to pixels where this mask is white.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Fit a distortion field that warps IMAGE onto TARGET.
    DistortFit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 128)]
        grid_res: usize,
        #[arg(long, default_value_t = 0.02)]
        offset_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the mock oracle over HTTP or a directory exchange.
    ServeOracle {
        /// Address such as 127.0.0.1:8080.
        #[arg(long, conflicts_with = "dir")]
        http: Option<String>,
        #[arg(long)]
        dir: Option<PathBuf>,
        /// JSON mock settings; the default mock otherwise.
        #[arg(long)]
        mock: Option<PathBuf>,
    },
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = &args.input {
        cfg.input = v.clone();
    }
    if let Some(v) = &args.output {
        cfg.output = v.clone();
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.heuristic {
        cfg.heuristic = v.parse::<HeuristicKind>().map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    if let Some(v) = args.grid_subset {
        cfg.grid.subset = Some(v);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_stages(args: &ConfigArgs, stop_after: Stage) -> Result<(), PipelineError> {
    let pipeline = Pipeline::new(load_config(args)?)?;
    let summary = pipeline.run(stop_after)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn read_rgb(path: &Path) -> Result<RgbImage, PipelineError> {
    let img = image::open(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    Ok(RgbImage::from_rgb8(&img.to_rgb8()))
}

fn eval(args: &ConfigArgs, a: Option<&Path>, b: Option<&Path>, mask: Option<&Path>) -> Result<(), PipelineError> {
    if let (Some(a), Some(b)) = (a, b) {
        let (a, b) = (read_rgb(a)?, read_rgb(b)?);
        let mask = match mask {
            Some(p) => Some(Mask::from_gray(
                &image::open(p).map_err(|e| PipelineError::Config(e.to_string()))?.to_luma8(),
            )),
            None => None,
        };
        let db = psnr(&a, &b, mask.as_ref()).map_err(|e| PipelineError::Config(e.to_string()))?;
        println!("{{\"psnr_db\": \"{}\"}}", format_psnr(db));
        return Ok(());
    }
    let report = Pipeline::new(load_config(args)?)?.evaluate()?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn distort_fit(
    image: &Path,
    target: &Path,
    out: &Path,
    steps: usize,
    lr: f64,
    grid_res: usize,
    offset_scale: f64,
    seed: u64,
) -> Result<(), PipelineError> {
    let img = to_float_image(&read_rgb(image)?);
    let tgt = to_float_image(&read_rgb(target)?);
    if !img.same_dims(&tgt) {
        return Err(PipelineError::Config("image and target differ in size".into()));
    }
    let fail = |e: panoworld::distortion::DistortionError| PipelineError::Stage {
        stage: Stage::Export,
        step: None,
        message: format!("distortion fit: {e}"),
    };
    let mut field = DistortionField::new(&FieldConfig {
        grid_res,
        offset_scale,
        seed,
        ..FieldConfig::default()
    })
    .map_err(|e| PipelineError::Config(e.to_string()))?;
    let pairs = [FitPair {
        image: img,
        target: tgt,
        id: "image".into(),
    }];
    let report = fit(
        &mut field,
        &pairs,
        &FitConfig {
            steps,
            lr,
            ..FitConfig::default()
        },
    )
    .map_err(fail)?;
    field.save(out).map_err(fail)?;
    println!(
        "{{\"steps\": {}, \"initial_loss\": {}, \"final_loss\": {}, \"reduction\": {}}}",
        report.steps,
        report.initial(),
        report.last(),
        report.reduction()
    );
    Ok(())
}

fn serve(http: Option<&str>, dir: Option<&Path>, mock: Option<&Path>) -> Result<(), PipelineError> {
    let oracle: MockOracle = match mock {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PipelineError::Config(e.to_string()))?;
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?
        }
        None => MockOracle::default(),
    };
    let oracle = Arc::new(oracle);
    match (http, dir) {
        (Some(addr), _) => {
            let server = HttpOracleServer::spawn(addr, oracle).map_err(|e| PipelineError::Config(e.to_string()))?;
            eprintln!("serving mock oracle at {}{}", server.url(), panoworld::oracle::http::ENDPOINT);
            server.wait();
            Ok(())
        }
        (None, Some(dir)) => {
            eprintln!("serving mock oracle jobs under {}", dir.display());
            let stop = AtomicBool::new(false);
            serve_directory(dir, &*oracle, &stop, Duration::from_millis(50)).map_err(|source| PipelineError::Oracle {
                stage: Stage::Pano,
                step: 0,
                source,
            })
        }
        (None, None) => Err(PipelineError::Config("pass --http ADDR or --dir PATH".into())),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Config => {
            println!("{}", PipelineConfig::default().to_json());
            Ok(())
        }
        Command::Pano(a) => run_stages(a, Stage::Pano),
        Command::Lift(a) => run_stages(a, Stage::Lift),
        Command::Grid(a) => run_stages(a, Stage::Grid),
        Command::Export(a) => run_stages(a, Stage::Export),
        Command::Run { args, stop_after } => stop_after.parse().and_then(|s| run_stages(args, s)),
        Command::Pairs { args, out, limit } => load_config(args)
            .and_then(Pipeline::new)
            .and_then(|p| p.build_pair_dataset(out, *limit))
            .map(|n| println!("{{\"pairs\": {n}}}")),
        Command::Eval { args, a, b, mask } => eval(args, a.as_deref(), b.as_deref(), mask.as_deref()),
        Command::DistortFit {
            image,
            target,
            out,
            steps,
            lr,
            grid_res,
            offset_scale,
            seed,
        } => distort_fit(image, target, out, *steps, *lr, *grid_res, *offset_scale, *seed),
        Command::ServeOracle { http, dir, mock } => serve(http.as_deref(), dir.as_deref(), mock.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
