//! Command implementations behind the `eyas` binary.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use eyas_core::model::Laterality;
use eyas_core::pipeline::{self, Backends};
use eyas_core::segmenter::{Registry, SegmentationBackend};
use eyas_core::synthgen::{self, GenParams};
use eyas_core::{classifier, codec, Error};
use eyas_services::server::{self, Mode};
use eyas_services::{ServiceConfig, ServiceName};
use rayon::prelude::*;

#[derive(Debug, Parser)]
#[command(name = "eyas", version, about = "Fundus image analysis")]
pub struct Cli {
    /// Print errors to stderr as JSON.
    #[arg(long, global = true)]
    pub json_errors: bool,
    /// Images processed in parallel (default: available cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Configuration file (defaults to $EYAS_CONFIG, then built-in values).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with ground truth.
    Gen {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 8.0)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline on an image or a directory of images.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Backend `name@version`; used wherever it is registered.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long, default_value = "unknown")]
        laterality: Laterality,
    },
    /// Score a prediction directory against a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shape accuracy per classifier input format on the holdout split.
    CompareFormats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start the gateways and services.
    Serve {
        /// Run every service inside this process.
        #[arg(long)]
        single_process: bool,
        /// Run one service only (used for the child processes).
        #[arg(long, hide = true)]
        role: Option<String>,
    },
}

/// Exit status classes: 1 for analysis failures, 2 for usage and I/O.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Usage(String),
    Io(String),
    Analysis(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Analysis(_) => 1,
            CliError::Usage(_) | CliError::Io(_) => 2,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
            CliError::Analysis(_) => "analysis_failed",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Analysis(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Corpus(_) | Error::Decode(_) | Error::UnsupportedFormat(_) | Error::InvalidImage(_) => {
                CliError::Io(e.to_string())
            }
            Error::Config(_) | Error::InvalidBackend(_) | Error::UnknownBackend(_) | Error::BackendConflict(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Analysis(e.to_string()),
        }
    }
}

impl From<eyas_services::ServiceError> for CliError {
    fn from(e: eyas_services::ServiceError) -> Self {
        match e.code.as_str() {
            "config" | "invalid_backend" | "unknown_backend" | "backend_conflict" => CliError::Usage(e.message),
            "analysis_failed" => CliError::Analysis(e.message),
            _ => CliError::Io(e.message),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| CliError::Io(e.to_string()))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Builtin backends plus the remote backends named in the configuration.
pub fn registry(cfg: &ServiceConfig) -> CliResult<Registry> {
    let reg = Registry::with_builtins(&cfg.analysis.segmenter);
    for d in &cfg.backends {
        reg.register(eyas_services::stages::backend_for(d, &cfg.analysis)?)?;
    }
    Ok(reg)
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "ppm", "pnm"];

/// `(name, path)` of every image to analyze; a single file keeps an empty
/// name so its outputs land directly in the output directory.
pub fn collect_inputs(input: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    if input.is_file() {
        return Ok(vec![(String::new(), input.to_path_buf())]);
    }
    if !input.is_dir() {
        return Err(CliError::Io(format!("input '{}' does not exist", input.display())));
    }
    let mut out = Vec::new();
    let entries = std::fs::read_dir(input).map_err(|e| CliError::Io(format!("{}: {e}", input.display())))?;
    for entry in entries {
        let path = entry.map_err(|e| CliError::Io(e.to_string()))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::Io(format!("no PNG or PPM images in '{}'", input.display())));
    }
    Ok(out)
}

/// Outcome of one image: `Err` holds the reason nothing was reported.
pub type ImageOutcome = (String, Result<String, CliError>);

pub fn analyze(
    cfg: &ServiceConfig,
    input: &Path,
    out: &Path,
    backend: Option<&str>,
    laterality: Laterality,
) -> CliResult<Vec<ImageOutcome>> {
    let inputs = collect_inputs(input)?;
    let [onh, macula, vessels]: [Arc<dyn SegmentationBackend>; 3] = registry(cfg)?.resolve_each(backend)?;
    let backends = Backends {
        onh: onh.as_ref(),
        macula: macula.as_ref(),
        vessels: vessels.as_ref(),
    };
    let run = |(name, path): &(String, PathBuf)| -> ImageOutcome {
        let result = (|| {
            let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let img = codec::decode_image(&bytes, laterality)?;
            img.check_ingest_limits()?;
            let a = pipeline::analyze_image(&img, backends, &cfg.analysis);
            pipeline::write_outputs(&out.join(name), &a)?;
            a.report.map(|r| r.text).map_err(CliError::from)
        })();
        let label = if name.is_empty() { path.display().to_string() } else { name.clone() };
        (label, result)
    };
    Ok(inputs.par_iter().map(run).collect())
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let (cfg, cfg_path) = ServiceConfig::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::Gen { count, seed, noise, out } => {
            if !(noise >= 0.0) {
                return Err(CliError::Usage("--noise must be non-negative".into()));
            }
            let m = synthgen::gen_corpus(count, &GenParams::standard().with_noise(noise), seed, &out)?;
            println!("wrote {} images to {}", m.entries.len(), out.display());
            Ok(())
        }
        Command::Analyze { input, out, backend, laterality } => {
            let outcomes = analyze(&cfg, &input, &out, backend.as_deref(), laterality)?;
            let mut failed = Vec::new();
            for (name, r) in &outcomes {
                match r {
                    Ok(text) => println!("{name}: {text}"),
                    Err(e) => failed.push(format!("{name}: {}", e.message())),
                }
            }
            match failed.len() {
                0 => Ok(()),
                _ => {
                    let worst = outcomes
                        .iter()
                        .filter_map(|(_, r)| r.as_ref().err())
                        .map(CliError::exit_code)
                        .max()
                        .unwrap_or(1);
                    let msg = failed.join("\n");
                    Err(if worst == 2 { CliError::Io(msg) } else { CliError::Analysis(msg) })
                }
            }
        }
        Command::Eval { corpus, pred, out } => {
            if !pred.is_dir() {
                return Err(CliError::Io(format!("prediction directory '{}' does not exist", pred.display())));
            }
            let report = pipeline::evaluate(&corpus, &pred)?;
            write_json(&out, &report)
        }
        Command::CompareFormats { corpus, out } => {
            let report = classifier::compare_formats(&corpus, &cfg.analysis)?;
            write_json(&out, &report)
        }
        Command::Serve { single_process, role } => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
            rt.block_on(serve(cfg, cfg_path, single_process, role))
        }
    }
}

async fn serve(cfg: ServiceConfig, cfg_path: Option<PathBuf>, single_process: bool, role: Option<String>) -> CliResult<()> {
    if let Some(role) = role {
        let service: ServiceName = role.parse().map_err(|_| CliError::Usage(format!("unknown role '{role}'")))?;
        return Ok(server::run_service(cfg, service).await?);
    }
    let mode = if single_process {
        Mode::SingleProcess
    } else {
        let exe = std::env::current_exe().map_err(|e| CliError::Io(e.to_string()))?;
        Mode::MultiProcess { exe, config_path: cfg_path }
    };
    let running = server::start(cfg, mode).await?;
    println!("client gateway {}", running.client_url());
    println!("internal gateway {}", running.internal_url());
    for (s, url) in &running.service_urls {
        println!("{s} service {url}");
    }
    tokio::signal::ctrl_c().await.map_err(|e| CliError::Io(e.to_string()))?;
    running.stop().await;
    Ok(())
}

/// Renders an error for stderr.
pub fn format_error(e: &CliError, json: bool) -> String {
    if json {
        serde_json::json!({ "error": { "code": e.code(), "message": e.message() } }).to_string()
    } else {
        format!("eyas: {}", e.message())
    }
}
