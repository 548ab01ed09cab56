use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

const EXIT_CODES: &str = "\
Exit codes:
  0   success
  1   unexpected failure
  2   invalid command line
  3   DimensionError
  4   FormatError
  5   ConfigError
  6   WeightError
  7   IoError
  8   RangeError
  9   DegenerateBandError
  10  DegenerateSampleError
  11  EmptyGeometryError
  12  TrainingError";

/// Field-boundary delineation: synthetic data, inference and
/// raster-to-polygon post-processing.
#[derive(Parser, Debug)]
#[command(name = "fieldbound", version, after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic scene: optical and radar series, cloud
    /// masks, target rasters and target polygons.
    SynthData(SynthArgs),
    /// Convert the angle band to radians and log-scale the intensities of
    /// a five-band radar stack.
    TransformS1(TransformArgs),
    /// Entropy, mean alpha and anisotropy of a raster of 2x2 coherency
    /// matrices stored as 8 real bands.
    DecomposeDualpol(DecomposeArgs),
    /// Write freshly initialized weights for a model configuration.
    InitWeights(InitArgs),
    /// Run a model and write its extent, boundary and distance maps.
    Predict(PredictArgs),
    /// Raster metrics of a predicted extent against a reference.
    Metrics(MetricsArgs),
    /// Threshold, split, trace and simplify field polygons.
    Polygonize(PolygonizeArgs),
    /// Match predicted to reference polygons and score each match.
    MatchPolygons(MatchArgs),
    /// Grid search over the two thresholds; reports the Pareto front.
    TuneThresholds(TuneArgs),
    /// Train the small model on generated scenes by gradient descent.
    FitToy(FitArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side length in pixels (at least 64).
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 6)]
    fields: usize,
    #[arg(long, default_value_t = 4)]
    times: usize,
    #[arg(long, default_value_t = 0.0)]
    cloud_fraction: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct TransformArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    /// Bands: re/im of J_xx, J_xy, J_yx, J_yy.
    #[arg(long)]
    in_j: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InitArgs {
    /// JSON model specification.
    #[arg(long)]
    model_cfg: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start every residual branch at zero.
    #[arg(long)]
    identity_residuals: bool,
    #[arg(long)]
    out_weights: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// JSON model specification; defaults to the one stored with the weights.
    #[arg(long)]
    model_cfg: Option<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    /// Input series; give two (optical, then radar) for the fusion model.
    #[arg(long = "in", required = true, num_args = 1..=2)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct PolygonizeArgs {
    /// Raster holding an `extent` band (or a single band).
    #[arg(long)]
    extent: PathBuf,
    /// Raster holding a `boundary` band; defaults to the extent raster.
    #[arg(long)]
    bounds: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    tb: f64,
    #[arg(long, default_value_t = 0.4)]
    te: f64,
    /// Smallest polygon kept, in square map units.
    #[arg(long, default_value_t = 100.0)]
    min_area: f64,
    /// Simplification tolerance in map units.
    #[arg(long, default_value_t = 10.0)]
    tolerance: f64,
    #[arg(long)]
    out_geojson: PathBuf,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    iou_min: f64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[arg(long)]
    extent: PathBuf,
    #[arg(long)]
    bounds: Option<PathBuf>,
    /// Raster whose `extent` band (or single band) is the reference mask.
    #[arg(long)]
    truth: PathBuf,
    /// Spacing of both threshold axes; must divide 1.
    #[arg(long, default_value_t = 0.05)]
    grid_step: f64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// Number of generated training scenes.
    #[arg(long, default_value_t = 2)]
    samples: usize,
    #[arg(long)]
    out_weights: PathBuf,
    /// Loss per step, one JSON record per line.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use fieldbound::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Dimension(_)) => 3,
        Some(E::Format(_)) => 4,
        Some(E::Config(_)) => 5,
        Some(E::Weight(_)) => 6,
        Some(E::Io(_)) => 7,
        Some(E::Range(_)) => 8,
        Some(E::DegenerateBand { .. }) => 9,
        Some(E::DegenerateSample(_)) => 10,
        Some(E::EmptyGeometry(_)) => 11,
        Some(E::Training(_)) => 12,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
