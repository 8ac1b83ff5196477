//! Command-line front end: synthetic data generation, tiling, statistics,
//! training, evaluation, single-grid upscaling, and gradient verification.
//!
//! Progress goes to stderr; stdout carries only machine-readable results.
//! Exit codes: 0 success, 1 verification/contract failure, 2 usage error,
//! 3 I/O or format error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use demsr::config::{ModelKind, RunConfig};
use demsr::data::{
    self, dataset_stats, downsample_avg, load_pairs, pair_and_filter, read_grid_auto,
    synthesize_terrain, tile_grid, write_manifest, Grid, ManifestEntry, NormStats,
};
use demsr::error::{Error, Result};
use demsr::interp::InterpMethod;
use demsr::model::Model;
use demsr::train::{
    evaluate, export_report, fit, load_model, load_training_checkpoint, upscale_grid, FitOptions,
    Predictor,
};
use demsr::verify;

#[derive(Parser)]
#[command(
    name = "demsr",
    version,
    about = "16x super-resolution for digital elevation models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic terrain pairs (HR grids + 16x-averaged LR grids).
    Synth(SynthArgs),
    /// Split aligned HR/LR rasters into tile pairs and drop nodata.
    Tile(TileArgs),
    /// Print elevation statistics for a manifest's HR tiles.
    Stats(StatsArgs),
    /// Train the network; writes history.csv and checkpoints.
    Train(Box<TrainArgs>),
    /// Evaluate the network or a classical baseline against a manifest.
    Eval(EvalArgs),
    /// Upscale one grid 16x through a trained network.
    Upscale(UpscaleArgs),
    /// Run the double-precision gradient verification suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Base RNG seed; terrain i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of tile pairs to emit.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// HR grid size in pixels (must be divisible by the scale factor).
    #[arg(long, default_value_t = 400)]
    size: usize,
    #[arg(long, default_value_t = 0.7)]
    roughness: f64,
    #[arg(long, default_value_t = 205.0)]
    elev_lo: f64,
    #[arg(long, default_value_t = 985.0)]
    elev_hi: f64,
    #[arg(long, default_value_t = 16)]
    scale_factor: usize,
    #[arg(long)]
    out_dir: PathBuf,
    /// ascii or raw
    #[arg(long, default_value = "ascii")]
    format: String,
}

#[derive(Args)]
struct TileArgs {
    /// High-resolution source raster.
    #[arg(long)]
    hr: PathBuf,
    /// Low-resolution source raster covering the same extent.
    #[arg(long)]
    lr: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// HR tile edge length; the LR tile is this divided by the scale factor.
    #[arg(long, default_value_t = 400)]
    tile_size: usize,
    #[arg(long, default_value_t = 16)]
    scale_factor: usize,
    #[arg(long, default_value = "ascii")]
    format: String,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: Option<bool>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    plateau_patience: Option<usize>,
    #[arg(long)]
    plateau_factor: Option<f64>,
    #[arg(long)]
    plateau_threshold: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    leaky_slope: Option<f64>,
    #[arg(long)]
    skip_interpolation: Option<String>,
    #[arg(long)]
    tile_size: Option<usize>,
    #[arg(long)]
    scale_factor: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint (required when method is "model").
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// model, bicubic, or bilinear
    #[arg(long)]
    method: String,
    /// Report CSV destination.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    bins: usize,
}

#[derive(Args)]
struct UpscaleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

fn write_grid(grid: &Grid, path: &Path, format: &str) -> Result<()> {
    match format {
        "ascii" => data::write_ascii_grid(grid, path),
        "raw" => data::write_raw_raster(grid, path),
        other => Err(Error::Config(format!(
            "format: expected 'ascii' or 'raw', got '{other}'"
        ))),
    }
}

fn grid_ext(format: &str) -> &'static str {
    if format == "raw" {
        "demr"
    } else {
        "asc"
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    if args.count == 0 {
        return Err(Error::Config("count: must be positive".into()));
    }
    std::fs::create_dir_all(&args.out_dir)?;
    let ext = grid_ext(&args.format);
    let mut entries = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let hr = synthesize_terrain(
            args.seed + i as u64,
            args.size,
            args.roughness,
            (args.elev_lo, args.elev_hi),
        )?;
        let lr = downsample_avg(&hr, args.scale_factor)?;
        let hr_name = format!("hr_{i:04}.{ext}");
        let lr_name = format!("lr_{i:04}.{ext}");
        write_grid(&hr, &args.out_dir.join(&hr_name), &args.format)?;
        write_grid(&lr, &args.out_dir.join(&lr_name), &args.format)?;
        entries.push(ManifestEntry {
            id: format!("synth{}:{i:04}", args.seed),
            lr_path: lr_name.into(),
            hr_path: hr_name.into(),
        });
        eprintln!("synth: wrote pair {} of {}", i + 1, args.count);
    }
    write_manifest(&args.out_dir.join("manifest.tsv"), &entries)?;
    Ok(())
}

fn cmd_tile(args: &TileArgs) -> Result<()> {
    if args.scale_factor == 0 || args.tile_size % args.scale_factor != 0 {
        return Err(Error::Config(format!(
            "tile_size: {} must be divisible by scale_factor {}",
            args.tile_size, args.scale_factor
        )));
    }
    let hr = read_grid_auto(&args.hr)?;
    let lr = read_grid_auto(&args.lr)?;
    let hr_tiles = tile_grid(&hr, args.tile_size)?;
    let lr_tiles = tile_grid(&lr, args.tile_size / args.scale_factor)?;
    let source = args
        .hr
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "tiles".into());
    let pairs = pair_and_filter(&source, &lr_tiles, &hr_tiles, args.scale_factor)?;
    eprintln!(
        "tile: {} of {} pairs survived the nodata filter",
        pairs.len(),
        hr_tiles.len()
    );

    std::fs::create_dir_all(&args.out_dir)?;
    let ext = grid_ext(&args.format);
    let mut entries = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let stem = pair.id.replace(':', "_");
        let hr_name = format!("{stem}_hr.{ext}");
        let lr_name = format!("{stem}_lr.{ext}");
        write_grid(&pair.hr, &args.out_dir.join(&hr_name), &args.format)?;
        write_grid(&pair.lr, &args.out_dir.join(&lr_name), &args.format)?;
        entries.push(ManifestEntry {
            id: pair.id.clone(),
            lr_path: lr_name.into(),
            hr_path: hr_name.into(),
        });
    }
    write_manifest(&args.out_dir.join("manifest.tsv"), &entries)?;
    Ok(())
}

fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let pairs = load_pairs(&args.manifest)?;
    if pairs.is_empty() {
        return Err(Error::Contract("stats: manifest lists no pairs".into()));
    }
    let stats = dataset_stats(pairs.iter().map(|p| &p.hr))?;
    println!("avg_elevation_m\tmin_elevation_m\tmax_elevation_m\tpixel_count");
    println!(
        "{:.3}\t{:.3}\t{:.3}\t{}",
        stats.avg, stats.min, stats.max, stats.count
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.merge_file(path)?;
    }
    if let Some(v) = &args.model {
        cfg.model = v.parse()?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.deterministic {
        cfg.deterministic = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = args.plateau_patience {
        cfg.plateau_patience = v;
    }
    if let Some(v) = args.plateau_factor {
        cfg.plateau_factor = v;
    }
    if let Some(v) = args.plateau_threshold {
        cfg.plateau_threshold = v;
    }
    if let Some(v) = args.min_lr {
        cfg.min_lr = v;
    }
    if let Some(v) = args.leaky_slope {
        cfg.leaky_slope = v;
    }
    if let Some(v) = &args.skip_interpolation {
        cfg.skip_interpolation = v.parse()?;
    }
    if let Some(v) = args.tile_size {
        cfg.tile_size = v;
    }
    if let Some(v) = args.scale_factor {
        cfg.scale_factor = v;
    }
    if let Some(v) = args.bins {
        cfg.bins = v;
    }
    if let Some(v) = &args.manifest {
        cfg.manifest = Some(v.clone());
    }
    if let Some(v) = &args.out_dir {
        cfg.out_dir = Some(v.clone());
    }

    eprintln!("effective config:\n{}", cfg.render());
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("manifest: required for training".into()))?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("out_dir: required for training".into()))?;

    let pairs = load_pairs(&manifest)?;
    let train_cfg = cfg.train_config()?;

    let (mut model, norm, resume) = match &args.resume {
        Some(path) => {
            let (model, norm, resume) = load_training_checkpoint(path)?;
            eprintln!("resuming from epoch {}", resume.epoch);
            (model, norm, Some(resume))
        }
        None => {
            let model: Model<f32> = Model::build(cfg.model_config()?)?;
            let stats = dataset_stats(pairs.iter().map(|p| &p.hr))?;
            let norm = NormStats::from_dataset(&stats)?;
            eprintln!(
                "built {} model: {} parameters in {} blocks",
                cfg.model,
                model.count_params(),
                model.num_blocks()
            );
            (model, norm, None)
        }
    };

    let result = fit(
        &mut model,
        &pairs,
        &norm,
        &train_cfg,
        FitOptions {
            out_dir: Some(&out_dir),
            resume,
            progress: true,
        },
    )?;
    eprintln!(
        "training done: {} epochs, best loss {:.6e}",
        result.history.len(),
        result.best_loss
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let pairs = load_pairs(&args.manifest)?;
    let loaded;
    let predictor = match args.method.as_str() {
        "bicubic" => Predictor::Baseline(InterpMethod::Bicubic),
        "bilinear" => Predictor::Baseline(InterpMethod::Bilinear),
        "model" => {
            let path = args.checkpoint.as_ref().ok_or_else(|| {
                Error::Config("checkpoint: required when method is 'model'".into())
            })?;
            loaded = load_model(path)?;
            Predictor::Network {
                model: &loaded.0,
                norm: loaded.1,
            }
        }
        other => {
            return Err(Error::Config(format!(
                "method: expected model, bicubic, or bilinear, got '{other}'"
            )))
        }
    };
    let report = evaluate(&predictor, &pairs, args.bins)?;
    if let Some(out) = &args.out {
        export_report(&report, out)?;
        eprintln!("eval: report written to {}", out.display());
    }
    println!("mse\terr_mean\terr_median\terr_std\twithin_one_std_frac\tpixel_count");
    println!(
        "{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}\t{}",
        report.mse,
        report.err_mean,
        report.err_median,
        report.err_std,
        report.within_one_std_frac,
        report.pixel_count
    );
    Ok(())
}

fn cmd_upscale(args: &UpscaleArgs) -> Result<()> {
    let (model, norm) = load_model(&args.checkpoint)?;
    let grid = read_grid_auto(&args.input)?;
    let up = upscale_grid(&model, &norm, &grid)?;
    let format = if args
        .output
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("demr"))
    {
        "raw"
    } else {
        "ascii"
    };
    write_grid(&up, &args.output, format)?;
    eprintln!(
        "upscale: {}x{} -> {}x{} written to {}",
        grid.nrows,
        grid.ncols,
        up.nrows,
        up.ncols,
        args.output.display()
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let results = verify::gradient_suite(args.seeds)?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<28} max_rel_err {:>12.3e}  {}",
            r.name,
            r.max_rel_err,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if !failed.is_empty() {
        return Err(Error::Contract(format!(
            "gradient checks failed for: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Tile(args) => cmd_tile(args),
        Cmd::Stats(args) => cmd_stats(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Upscale(args) => cmd_upscale(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
