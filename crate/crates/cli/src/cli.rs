//! Argument parsing and subcommand dispatch for the `texid` binary.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use texid::eval::{self, Axis, FeatureCache, ReportFormat};
use texid::synth::{self, BenchmarkSpec, Occlusion, PerturbSpec, Regime, TextureSpec};
use texid::PipelineConfig;

use crate::config::{self, Overrides};
use crate::error::{ApiError, ErrorCode};
use crate::server::{self, AppState};
use crate::service;

#[derive(Debug, Parser)]
#[command(name = "texid", version, about = "Texture-based product identification")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Gallery store directory.
    #[arg(long, global = true, default_value = "gallery")]
    pub gallery: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Distance ratio threshold.
    #[arg(long, global = true)]
    pub drt: Option<f64>,
    /// Keypoint cap per image.
    #[arg(long, global = true)]
    pub keypoints: Option<usize>,
    /// Matched pair threshold on the normal path.
    #[arg(long, global = true)]
    pub mpt: Option<usize>,
}

impl Global {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            threads: self.threads,
            drt: self.drt,
            keypoints: self.keypoints,
            mpt: self.mpt,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enroll an image into the gallery.
    Enroll {
        image: PathBuf,
        /// Metadata as key=value; repeatable.
        #[arg(long = "meta", value_parser = parse_kv)]
        meta: Vec<(String, String)>,
    },
    /// Verify a query image against one gallery record.
    Verify {
        query: PathBuf,
        #[arg(long)]
        id: String,
        /// Use the multi-resolution boosted path.
        #[arg(long)]
        boost: bool,
    },
    /// Rank gallery records against a query image.
    Search {
        query: PathBuf,
        #[arg(short, default_value_t = crate::DEFAULT_K)]
        k: usize,
    },
    /// Print a record's metadata.
    Product { id: String },
    #[command(subcommand)]
    Synth(SynthCommand),
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the HTTP service on the gallery.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Generate one texture, optionally perturbed.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Texture seed; defaults to --seed.
        #[arg(long)]
        texture_seed: Option<u64>,
        #[arg(long)]
        viewpoint: Option<f64>,
        #[arg(long)]
        rotation: Option<f64>,
        #[arg(long)]
        gain: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        /// Keep a window covering this fraction of the image area.
        #[arg(long)]
        crop: Option<f64>,
        #[arg(long, default_value_t = 0)]
        perturb_seed: u64,
    },
    /// Generate a benchmark directory.
    Bench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        gallery_n: usize,
        #[arg(long, default_value_t = 1)]
        queries_per_item: usize,
        /// Steep tilt, low light and quarter crop.
        #[arg(long, conflicts_with = "occluded")]
        hard: bool,
        /// Default capture conditions plus a quarter crop.
        #[arg(long)]
        occluded: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Verification metrics over the benchmark's labelled pairs.
    Verify {
        #[arg(long)]
        bench: PathBuf,
    },
    /// Sweep one parameter and write a report.
    Sweep {
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
    },
    /// Top-1 search accuracy with and without edge exclusion.
    Search {
        #[arg(long)]
        bench: PathBuf,
        #[arg(long, default_value_t = 3)]
        timing_runs: usize,
    },
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected key=value, got {s:?}")),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String, ApiError> {
    serde_json::to_string(v).map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))
}

fn read_file(path: &Path) -> Result<Vec<u8>, ApiError> {
    std::fs::read(path).map_err(|e| ApiError::new(ErrorCode::BadImage, format!("{}: {e}", path.display())))
}

fn load_bench(dir: &Path) -> Result<synth::Benchmark, ApiError> {
    Ok(synth::Benchmark::load(dir)?)
}

/// Runs one parsed command and returns its stdout JSON line.
pub fn execute(cli: &Cli) -> Result<String, ApiError> {
    let cfg = config::resolve(cli.global.config.as_deref(), &cli.global.overrides())?;
    let dir = &cli.global.gallery;
    match &cli.command {
        Command::Enroll { image, meta } => {
            let bytes = read_file(image)?;
            let mut gallery = service::open_gallery(dir, &cfg)?;
            let metadata = service::parse_metadata(meta.iter().map(|(k, v)| (k.as_str(), v.as_str())));
            to_json(&service::enroll(&mut gallery, dir, &bytes, metadata, &cfg)?)
        }
        Command::Verify { query, id, boost } => {
            let bytes = read_file(query)?;
            let gallery = service::open_gallery(dir, &cfg)?;
            to_json(&service::verify(&gallery, &bytes, id, *boost, &cfg)?)
        }
        Command::Search { query, k } => {
            let bytes = read_file(query)?;
            let gallery = service::open_gallery(dir, &cfg)?;
            to_json(&service::search_gallery(&gallery, &bytes, *k, &cfg)?)
        }
        Command::Product { id } => to_json(&service::product(&service::open_gallery(dir, &cfg)?, id)?),
        Command::Synth(cmd) => synth_command(cmd, &cfg),
        Command::Eval(cmd) => eval_command(cmd, &cfg),
        Command::Serve { bind } => {
            let state = Arc::new(AppState::open(dir, cfg)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?;
            rt.block_on(server::serve(bind, state))
                .map_err(|e| ApiError::new(ErrorCode::Internal, format!("{bind}: {e}")))?;
            Ok(String::new())
        }
    }
}

fn synth_command(cmd: &SynthCommand, cfg: &PipelineConfig) -> Result<String, ApiError> {
    match cmd {
        SynthCommand::Gen {
            out,
            texture_seed,
            viewpoint,
            rotation,
            gain,
            noise,
            crop,
            perturb_seed,
        } => {
            let seed = texture_seed.unwrap_or(cfg.seed);
            let img = synth::generate_texture(&TextureSpec::with_seed(seed))?;
            let perturbed =
                viewpoint.is_some() || rotation.is_some() || gain.is_some() || noise.is_some() || crop.is_some();
            let (img, homography) = if perturbed {
                let id = PerturbSpec::identity();
                let spec = PerturbSpec {
                    seed: *perturb_seed,
                    viewpoint_deg: viewpoint.unwrap_or(id.viewpoint_deg),
                    rotation_deg: rotation.unwrap_or(id.rotation_deg),
                    brightness_gain: gain.unwrap_or(id.brightness_gain),
                    noise_sigma: noise.unwrap_or(id.noise_sigma),
                    occlusion: crop.map_or(Occlusion::None, |fraction| Occlusion::Crop { fraction }),
                };
                let (img, h) = synth::perturb(&img, &spec)?;
                (img, Some(h))
            } else {
                (img, None)
            };
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(texid::Error::from)?;
            }
            img.save_png(out)?;
            to_json(&json!({ "out": out, "seed": seed, "homography": homography }))
        }
        SynthCommand::Bench {
            out,
            gallery_n,
            queries_per_item,
            hard,
            occluded,
        } => {
            let mut spec = BenchmarkSpec::new(*gallery_n, *queries_per_item, *hard, cfg.seed);
            if *occluded {
                spec.regime = Regime::occluded();
            }
            let bench = synth::build_benchmark_with(&spec)?;
            bench.write(out)?;
            to_json(&json!({
                "out": out,
                "gallery": bench.manifest.gallery().count(),
                "queries": bench.manifest.queries().count(),
                "pairs": bench.manifest.pairs().count(),
            }))
        }
    }
}

fn eval_command(cmd: &EvalCommand, cfg: &PipelineConfig) -> Result<String, ApiError> {
    match cmd {
        EvalCommand::Verify { bench } => to_json(&eval::run_verification(&load_bench(bench)?, cfg)?.metrics),
        EvalCommand::Sweep {
            bench,
            axis,
            values,
            out,
            format,
        } => {
            let report = eval::sweep(*axis, values, &load_bench(bench)?, cfg)?;
            eval::emit_report(&report, *format, out)?;
            to_json(&report)
        }
        EvalCommand::Search { bench, timing_runs } => {
            let bench = load_bench(bench)?;
            let cache = FeatureCache::build(&bench, cfg.keypoint_cap, cfg)?;
            to_json(&eval::run_search_eval_modes(
                &bench,
                &cache,
                cfg,
                &[true, false],
                *timing_runs,
            )?)
        }
    }
}

/// Parses `args`, runs the command, prints its output or error, and returns
/// the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let message = e.render().to_string();
            let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("{}", ApiError::bad_request(message).to_json());
            return 2;
        }
    };
    match execute(&cli) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.code.exit_status()
        }
    }
}
