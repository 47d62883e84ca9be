use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use geoloc::dense::FallbackDenseExtractor;
use geoloc::geo::{evaluate_trajectory, read_trajectory_csv, GeoRef, MetricsSummary};
use geoloc::imaging::load_rgb;
use geoloc::pipeline::synth::{synth_dataset, SynthConfig};
use geoloc::pipeline::{
    build_database, run_sequence, BuildOptions, Database, FineBackendKind, MatchingMode, Models,
    PipelineConfig,
};
use geoloc::sascm::{build_training_pairs, train_epoch, PairBuilder};
use geoloc::store::DatasetManifest;
use geoloc::tensor::Conv4dModel;
use geoloc::GeolocError;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(name = "geoloc", version, about = "UAV absolute visual localization against a geo-referenced map")]
struct Cli {
    /// JSON file with `pipeline`, `build`, `train` and `synth` sections;
    /// flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tile a map and build the retrieval database.
    BuildDb(BuildDbArgs),
    /// Localize every frame of a manifest.
    Localize(LocalizeArgs),
    /// Metrics for a results CSV.
    Evaluate(EvaluateArgs),
    /// Train the consensus network on a manifest with ground truth.
    TrainSascm(TrainArgs),
    /// Generate the synthetic benchmark.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DenseBackendArg {
    /// Built-in deterministic features.
    Fallback,
    /// Precomputed tensors given by --descriptors-from.
    External,
}

#[derive(Args)]
struct BuildDbArgs {
    map: PathBuf,
    /// JSON georeference of the map's top-left pixel.
    georef: PathBuf,
    #[arg(long)]
    tile_size: Option<u32>,
    #[arg(long)]
    overlap: Option<u32>,
    #[arg(long, value_enum, default_value = "fallback")]
    backend: DenseBackendArg,
    /// Directory of `tile_NNNN.desc.glft` (and optional `.dense.glft`) files.
    #[arg(long)]
    descriptors_from: Option<PathBuf>,
    #[arg(long, default_value = "db")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    RetrievalOnly,
}

#[derive(Args)]
struct LocalizeArgs {
    manifest: PathBuf,
    db: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    /// Keypoint threshold on softmax probability × reliability.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    center_neighborhood: Option<usize>,
    #[arg(long)]
    region_margin: Option<usize>,
    #[arg(long)]
    score_threshold: Option<f64>,
    /// Minimum number of consistent center-block matches.
    #[arg(long)]
    min_support: Option<usize>,
    #[arg(long)]
    ransac_threshold: Option<f64>,
    #[arg(long)]
    ransac_max_iters: Option<usize>,
    #[arg(long)]
    min_inliers: Option<usize>,
    /// Directory of trained consensus weights.
    #[arg(long)]
    consensus_weights: Option<PathBuf>,
    /// Use the neural fine backend with weights from this directory.
    #[arg(long)]
    neural_weights: Option<PathBuf>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    results: PathBuf,
    /// Print the summary as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    manifest: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    negatives: Option<usize>,
    /// Side of the satellite patches in map pixels (default: the tile size).
    #[arg(long)]
    patch_size: Option<u32>,
    /// Feature grids are pooled to at most this many cells per side.
    #[arg(long)]
    max_cells: Option<usize>,
    #[arg(long, default_value = "consensus")]
    out_weights: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    map_size: Option<u32>,
    #[arg(long)]
    gsd: Option<f64>,
    #[arg(long, default_value = "synth")]
    out: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
struct TrainSettings {
    epochs: usize,
    lr: f64,
    seed: u64,
    negatives: usize,
    patch_size: Option<u32>,
    max_cells: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 5,
            lr: 1e-3,
            seed: 0,
            negatives: 1,
            patch_size: None,
            max_cells: 10,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
struct BuildSettings {
    tile_size: Option<u32>,
    overlap: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    pipeline: PipelineConfig,
    build: BuildSettings,
    train: TrainSettings,
    synth: SynthConfig,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| GeolocError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = serde_json::from_str(&text)
        .map_err(|e| GeolocError::Config(format!("invalid config {}: {e}", path.display())))?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn build_db(args: BuildDbArgs, file: FileConfig) -> Result<()> {
    let text = std::fs::read_to_string(&args.georef)
        .with_context(|| format!("reading {}", args.georef.display()))
        .map_err(|e| GeolocError::Format(format!("{e:#}")))?;
    let georef: GeoRef = serde_json::from_str(&text)
        .map_err(|e| GeolocError::Format(format!("{}: {e}", args.georef.display())))?;
    let mut opts = BuildOptions::default();
    set(&mut opts.tile_size, file.build.tile_size);
    set(&mut opts.overlap, file.build.overlap);
    set(&mut opts.tile_size, args.tile_size);
    set(&mut opts.overlap, args.overlap);
    opts.descriptors_from = match (args.backend, args.descriptors_from) {
        (DenseBackendArg::External, None) => {
            return Err(GeolocError::Config("--backend external needs --descriptors-from".into()).into())
        }
        (_, dir) => dir,
    };
    let extractor = FallbackDenseExtractor::new(file.pipeline.dense);
    let db = build_database(&args.map, &georef, &opts, &extractor, &args.out)?;
    println!(
        "built {} tiles ({} px, overlap {}) into {}",
        db.tiles.len(),
        db.tile_size,
        db.overlap,
        args.out.display()
    );
    Ok(())
}

fn localize(args: LocalizeArgs, file: FileConfig) -> Result<()> {
    let mut cfg = file.pipeline;
    set(&mut cfg.k, args.k);
    set(&mut cfg.fine.sigma, args.sigma);
    set(&mut cfg.seed, args.seed);
    set(&mut cfg.coarse.center_neighborhood, args.center_neighborhood);
    set(&mut cfg.coarse.region_margin, args.region_margin);
    set(&mut cfg.coarse.score_threshold, args.score_threshold);
    set(&mut cfg.coarse.min_support, args.min_support);
    set(&mut cfg.fine.ransac_threshold, args.ransac_threshold);
    set(&mut cfg.fine.ransac_max_iters, args.ransac_max_iters);
    set(&mut cfg.fine.min_inliers, args.min_inliers);
    if let Some(dir) = args.consensus_weights {
        cfg.consensus_weights = Some(dir);
    }
    if let Some(dir) = args.neural_weights {
        cfg.fine_backend = FineBackendKind::Neural(dir);
    }
    if let Some(mode) = args.mode {
        cfg.mode = match mode {
            ModeArg::Full => MatchingMode::Full,
            ModeArg::RetrievalOnly => MatchingMode::RetrievalOnly,
        };
    }
    cfg.validate()?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let db = Database::open(&args.db)?;
    let models = Models::from_config(&cfg)?;
    let report = run_sequence(&manifest, &db, &models, &cfg)?;
    report.write(&args.out)?;
    print_summary(&report.summary());
    println!("results written to {}", args.out.display());
    Ok(())
}

fn print_summary(s: &MetricsSummary) {
    println!("frames {}", s.frames);
    println!("success_rate {:.3}", s.success_rate);
    match s.mle_m {
        Some(m) => println!("mle {m:.1}"),
        None => println!("mle n/a (all frames drifted)"),
    }
    println!("drift_frames {}", s.drift_frames);
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let file = std::fs::File::open(&args.results)
        .map_err(|e| GeolocError::Format(format!("{}: {e}", args.results.display())))?;
    let rows = read_trajectory_csv(file)?;
    let errors: Vec<f64> = rows
        .iter()
        .map(|r| if r.error_m.is_finite() { r.error_m } else { f64::MAX })
        .collect();
    let eval = evaluate_trajectory(&errors).map_err(|e| GeolocError::Format(e.to_string()))?;
    let summary = MetricsSummary::from(&eval);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        print_summary(&summary);
    }
    Ok(())
}

fn train(args: TrainArgs, file: FileConfig) -> Result<()> {
    let mut t = file.train;
    set(&mut t.epochs, args.epochs);
    set(&mut t.lr, args.lr);
    set(&mut t.seed, args.seed);
    set(&mut t.negatives, args.negatives);
    set(&mut t.max_cells, args.max_cells);
    if args.patch_size.is_some() {
        t.patch_size = args.patch_size;
    }
    if t.epochs == 0 || t.max_cells == 0 {
        return Err(GeolocError::Config("epochs and max_cells must be positive".into()).into());
    }
    let manifest = DatasetManifest::load(&args.manifest)?;
    let map_path = manifest
        .map
        .image
        .as_ref()
        .ok_or_else(|| GeolocError::Format("manifest map has no image".into()))?;
    let map = load_rgb(map_path)?;
    let extractor = FallbackDenseExtractor::new(file.pipeline.dense);
    let builder = PairBuilder {
        map: &map,
        extractor: &extractor,
        patch_size: t.patch_size.unwrap_or(manifest.map.tile_size),
        max_cells: t.max_cells,
    };
    let pairs = build_training_pairs(&manifest, &builder, t.negatives, t.seed)?;
    let mut model = Conv4dModel::random(t.seed);
    for epoch in 0..t.epochs {
        let (next, loss) = train_epoch(&pairs, &model, t.lr, t.seed.wrapping_add(epoch as u64))?;
        println!("epoch {} mean_loss {loss:.6}", epoch + 1);
        model = next;
    }
    model.save(&args.out_weights)?;
    println!("weights written to {}", args.out_weights.display());
    Ok(())
}

fn synth(args: SynthArgs, file: FileConfig) -> Result<()> {
    let mut cfg = file.synth;
    set(&mut cfg.seed, args.seed);
    set(&mut cfg.frames, args.frames);
    set(&mut cfg.map_size, args.map_size);
    set(&mut cfg.gsd, args.gsd);
    let data = synth_dataset(&cfg)?;
    let manifest = data.write(&args.out)?;
    println!(
        "wrote {} frames over a {}x{} map; manifest {}",
        data.frames.len(),
        cfg.map_size,
        cfg.map_size,
        manifest.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::BuildDb(a) => build_db(a, file),
        Command::Localize(a) => localize(a, file),
        Command::Evaluate(a) => evaluate(a),
        Command::TrainSascm(a) => train(a, file),
        Command::Synth(a) => synth(a, file),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<GeolocError>() {
        Some(GeolocError::Config(_)) => EXIT_CONFIG,
        Some(e) if e.is_data_format() => EXIT_DATA,
        Some(GeolocError::Io { .. }) => EXIT_DATA,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
