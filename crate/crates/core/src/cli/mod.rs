//! The `occ4d` command line: `gen`, `train`, `eval` and `render`.
//!
//! The command functions are public so they can be driven from code as well.
//! Exit codes: 0 ok, 2 config error, 3 IO or format error, 4 numeric
//! failure, 1 anything else. Failures print one JSON line to stderr.

mod config;

pub use config::{apply_overrides, EvalConfig, GeneratorConfig, RunConfig};

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{
    generate_sequence, random_scene, read_dataset, read_sequence, sequence_dir_name, write_dataset_manifest,
    write_points, write_sequence, SequenceRecord,
};
use crate::error::{Error, Result};
use crate::forecast::{forecast_from_clouds, load_forecaster};
use crate::metrics::{evaluate, MetricsReport};
use crate::render::{render_batch, FrameRay};
use crate::train::{prepare_sample, train_loop, SequenceSample, TrainOutcome};
use crate::voxel::{voxelize, write_grid, GridKind, OccupancyForecast, OccupancyGrid};

fn derive_seed(seed: u64, k: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15)).random()
}

/// Writes `n` sequences as `seq_0000`, `seq_0001`, … plus `dataset.json`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path, n: usize) -> Result<Vec<String>> {
    cfg.validate()?;
    let seq_cfg = cfg.sequence_config();
    let mut names = Vec::with_capacity(n);
    for i in 0..n {
        let scene = random_scene(&cfg.generator.scene, derive_seed(cfg.seed, 2 * i as u64))?;
        let record = generate_sequence(&scene, &seq_cfg, derive_seed(cfg.seed, 2 * i as u64 + 1))?;
        let name = sequence_dir_name(i);
        write_sequence(&record, &out.join(&name))?;
        names.push(name);
    }
    write_dataset_manifest(out, &names)?;
    Ok(names)
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_loop(data, &cfg.pipeline, &cfg.train, cfg.seed, out)
}

/// Where forecast grids come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ForecastSource {
    Checkpoint(PathBuf),
    /// Ground-truth voxelization of the future clouds.
    Oracle,
    /// All-empty grids; every ray renders the background depth.
    Empty,
}

/// Probability forecast for one sequence together with its aligned sample.
pub fn forecast_sequence(
    cfg: &RunConfig,
    source: &ForecastSource,
    record: &SequenceRecord,
) -> Result<(OccupancyForecast, SequenceSample)> {
    let p = &cfg.pipeline;
    if record.num_past != p.num_past || record.num_future != p.num_future {
        return Err(Error::Config(format!(
            "sequence has {} past / {} future frames, pipeline expects {} / {}",
            record.num_past, record.num_future, p.num_past, p.num_future
        )));
    }
    let sample = prepare_sample(record, &p.output_grid, None)?;
    let forecast = match source {
        ForecastSource::Checkpoint(dir) => {
            let params = load_forecaster(dir, p)?;
            forecast_from_clouds(&sample.observed, p, &params)?.to_probabilities()
        }
        ForecastSource::Oracle => OccupancyForecast::new(
            sample.future.iter().map(|c| voxelize(c, &p.output_grid).grid).collect(),
            p.frame_period,
        )?,
        ForecastSource::Empty => OccupancyForecast::new(
            (0..p.num_future).map(|_| OccupancyGrid::zeros(p.output_grid, GridKind::Probability)).collect(),
            p.frame_period,
        )?,
    };
    Ok((forecast, sample))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub overall: MetricsReport,
    pub sequences: Vec<(String, MetricsReport)>,
}

/// Evaluates every sequence of a dataset. L1 and AbsRel are averaged over
/// all rays; CD and NFCD over sequences.
pub fn cmd_eval(cfg: &RunConfig, source: &ForecastSource, data: &Path) -> Result<EvalSummary> {
    cfg.validate()?;
    let settings = cfg.eval.settings();
    let mut sequences = Vec::new();
    for dir in read_dataset(data)? {
        let record = read_sequence(&dir)?;
        let (forecast, sample) = forecast_sequence(cfg, source, &record)?;
        let report = evaluate(&forecast, &sample.rays, &settings)?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        sequences.push((name, report));
    }
    if sequences.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let rays: usize = sequences.iter().map(|(_, r)| r.ray_count).sum();
    let weighted = |f: fn(&MetricsReport) -> f64| {
        sequences.iter().map(|(_, r)| f(r) * r.ray_count as f64).sum::<f64>() / rays as f64
    };
    let mean = |f: fn(&MetricsReport) -> f64| sequences.iter().map(|(_, r)| f(r)).sum::<f64>() / sequences.len() as f64;
    let overall = MetricsReport {
        l1: weighted(|r| r.l1),
        absrel: weighted(|r| r.absrel),
        nfcd: mean(|r| r.nfcd),
        cd: mean(|r| r.cd),
        ray_count: rays,
        point_counts: sequences.iter().flat_map(|(_, r)| r.point_counts.clone()).collect(),
    };
    Ok(EvalSummary { overall, sequences })
}

/// Appends a report row, writing the header first when the file is new.
pub fn append_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(MetricsReport::CSV_HEADER);
        text.push('\n');
    }
    text.push_str(&report.csv_row());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSummary {
    /// Rays rendered per future frame; equals the points written per frame.
    pub rays_per_frame: Vec<usize>,
}

/// Per future frame `k`: `depth_<k>.csv` (`gt_depth,pred_depth` per ray),
/// `points_<k>.o4dp` (reconstructed points, current sensor frame) and
/// `grid_<k>.o4dg` (occupancy probabilities).
pub fn cmd_render(cfg: &RunConfig, source: &ForecastSource, sequence: &Path, out: &Path) -> Result<RenderSummary> {
    cfg.validate()?;
    let record = read_sequence(sequence)?;
    let (forecast, sample) = forecast_sequence(cfg, source, &record)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let settings = cfg.eval.settings().render;
    let mut counts = Vec::new();
    for (k, rays) in sample.rays.iter().enumerate() {
        let frame_rays: Vec<FrameRay> = rays.iter().map(|&ray| FrameRay { frame: k, ray }).collect();
        let depths = render_batch(&forecast, &frame_rays, &settings)?;
        let mut csv = String::from("gt_depth,pred_depth\n");
        for (r, d) in rays.iter().zip(&depths) {
            csv.push_str(&format!("{},{}\n", r.gt_depth, d));
        }
        let path = out.join(format!("depth_{k}.csv"));
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        let points: Vec<_> = rays.iter().zip(&depths).map(|(r, &d)| r.point_at(d)).collect();
        write_points(&out.join(format!("points_{k}.o4dp")), &points)?;
        write_grid(&out.join(format!("grid_{k}.o4dg")), &forecast.frames()[k])?;
        counts.push(points.len());
    }
    Ok(RenderSummary { rays_per_frame: counts })
}

// ---- argument parsing ----

#[derive(Debug, Parser)]
#[command(name = "occ4d", version, about = "Desk-scale 4D occupancy forecasting")]
pub struct Cli {
    /// Worker threads (default: OCC4D_THREADS, else all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration (default: built-in defaults, see `occ4d config`)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.schedule.lr_max=0.01 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Override the config seed (default: `seed` from the config, 0)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct SourceArgs {
    /// Forecaster checkpoint directory written by `train`
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Use the ground-truth voxelization of the future clouds
    #[arg(long)]
    pub oracle: bool,
    /// Use all-empty grids (background-depth baseline)
    #[arg(long)]
    pub empty: bool,
}

impl SourceArgs {
    fn source(&self) -> ForecastSource {
        match (&self.checkpoint, self.oracle) {
            (Some(c), _) => ForecastSource::Checkpoint(c.clone()),
            (None, true) => ForecastSource::Oracle,
            _ => ForecastSource::Empty,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic sequences and a dataset manifest
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of sequences (default: generator.num_sequences, 4)
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train a forecaster; writes loss.csv and checkpoint/
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory written by `gen`
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Score forecasts against future returns (L1, AbsRel, NFCD, CD)
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        source: SourceArgs,
        /// Dataset directory written by `gen`
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Write the report as JSON (default: stdout only)
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Append a CSV row (l1,absrel,nfcd,cd,ray_count) (default: none)
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
    /// Render depths, points and grids for each future frame of one sequence
    Render {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        source: SourceArgs,
        /// Sequence directory
        #[arg(long, value_name = "DIR")]
        sequence: PathBuf,
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Print the effective configuration as TOML
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("OCC4D_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| Error::Config(format!("OCC4D_THREADS={v:?} is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Gen { config, out, n } => {
            let cfg = load_config(&config)?;
            let names = cmd_gen(&cfg, &out, n.unwrap_or(cfg.generator.num_sequences))?;
            println!("wrote {} sequences to {}", names.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(&config)?;
            let outcome = cmd_train(&cfg, &data, &out)?;
            match (outcome.log.first(), outcome.log.last()) {
                (Some(a), Some(b)) => println!("trained {} steps: loss {:.4} -> {:.4}", outcome.log.len(), a.loss, b.loss),
                _ => println!("zero-step run: wrote initial parameters"),
            }
            println!("checkpoint: {}", out.join(crate::train::CHECKPOINT_DIR).display());
        }
        Command::Eval { config, source, data, out, csv } => {
            let cfg = load_config(&config)?;
            let summary = cmd_eval(&cfg, &source.source(), &data)?;
            for (name, r) in &summary.sequences {
                println!("{name}: l1 {:.4} absrel {:.4} nfcd {:.4} cd {:.4} rays {}", r.l1, r.absrel, r.nfcd, r.cd, r.ray_count);
            }
            let r = &summary.overall;
            println!("overall: l1 {:.4} absrel {:.4} nfcd {:.4} cd {:.4} rays {}", r.l1, r.absrel, r.nfcd, r.cd, r.ray_count);
            if let Some(path) = out {
                write_json(&path, &summary.overall)?;
            }
            if let Some(path) = csv {
                append_csv(&path, &summary.overall)?;
            }
        }
        Command::Render { config, source, sequence, out } => {
            let cfg = load_config(&config)?;
            let s = cmd_render(&cfg, &source.source(), &sequence, &out)?;
            println!("rendered {:?} rays per frame into {}", s.rays_per_frame, out.display());
        }
        Command::Config { config } => print!("{}", load_config(&config)?.to_toml()),
    }
    Ok(())
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Io { .. } => "io",
        Error::Format(_) => "format",
        Error::Numeric(_) => "numeric",
        Error::Contract(_) => "contract",
        Error::NoNearFieldPoints { .. } => "no_near_field_points",
        Error::Empty(_) => "empty",
    }
}

/// Entry point of the `occ4d` binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let line = serde_json::json!({ "error": error_kind(&e), "code": code, "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
