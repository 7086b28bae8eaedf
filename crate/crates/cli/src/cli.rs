//! Argument parsing and command dispatch for the `stylecore` binary.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stylecore::dst::{CorrespondenceDocument, DstBase, DstConfig, Regime};
use stylecore::guidance::GuidanceDocument;
use stylecore::nnst::NnstConfig;
use stylecore::progress::{Observer, Progress};
use stylecore::strotss::StrotssConfig;
use stylecore::ImageBuffer;

use crate::config::{JobConfig, NnstJob};
use crate::jobs::{default_workers, JobManager};
use crate::run::{check_inputs, execute, JobInputs};
use crate::{emd_check, service};

#[derive(Debug, Parser)]
#[command(name = "stylecore", version, about = "Optimization-based neural style transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multi-scale relaxed-EMD style transfer.
    Strotss(StrotssArgs),
    /// Nearest-neighbor feature matching style transfer.
    Nnst(NnstArgs),
    /// Deformable style transfer on a STROTSS or Gram base.
    Dst(DstArgs),
    /// Relaxed versus exact EMD on sampled hypercolumns.
    EmdCheck(EmdCheckArgs),
    /// HTTP job service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct Io {
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the resolved job config as JSON and exit.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct StrotssArgs {
    #[command(flatten)]
    pub io: Io,
    #[arg(long, default_value_t = 16.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 4)]
    pub scales: usize,
    /// Optimizer steps per scale.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Guidance document; mask paths are relative to its directory.
    #[arg(long)]
    pub guidance: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NnstArgs {
    #[command(flatten)]
    pub io: Io,
    #[arg(long, default_value_t = 0.25)]
    pub alpha_blend: f64,
    #[arg(long)]
    pub no_color_post: bool,
    /// Long side of the finest scale; defaults to the content size.
    #[arg(long)]
    pub long_side: Option<usize>,
    /// Optimizer updates per pass.
    #[arg(long)]
    pub updates: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BaseArg {
    Strotss,
    Gram,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RegimeArg {
    Low,
    Med,
    High,
}

#[derive(Debug, Args)]
pub struct DstArgs {
    #[command(flatten)]
    pub io: Io,
    /// Correspondence document.
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long, value_enum)]
    pub base: BaseArg,
    #[arg(long, value_enum, default_value = "med")]
    pub regime: RegimeArg,
    /// Style weight; overrides the regime.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Deformation weight; overrides the regime.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Content weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Steps per scale (STROTSS base) or in total (Gram base).
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmdCheckArgs {
    #[arg(long, default_value_t = 1024)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Directory of images to sample from; built-in images when omitted.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Static UI directory.
    #[arg(long)]
    pub assets: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Prints progress to stderr every 25 steps and on the last step of a scale.
struct Stderr;

impl Observer for Stderr {
    fn on_step(&self, p: &Progress) {
        if p.step % 25 == 0 || p.step == p.steps {
            eprintln!("scale {}/{} step {}/{} loss {:.6}", p.scale + 1, p.scales, p.step, p.steps, p.loss);
        }
    }
}

type CliResult<T> = Result<T, String>;

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_image(path: &Path) -> CliResult<ImageBuffer> {
    ImageBuffer::load(path).map_err(|e| e.to_string())
}

fn load_guidance(path: &Path, content: &ImageBuffer, style: &ImageBuffer) -> CliResult<stylecore::guidance::GuidanceSpec> {
    let doc = GuidanceDocument::parse(&read_text(path)?).map_err(|e| format!("{}: {e}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let load = |name: &str| ImageBuffer::decode_mask(&std::fs::read(dir.join(name))?);
    doc.resolve(&load, (content.height(), content.width()), (style.height(), style.width()))
        .map_err(|e| format!("{}: {e}", path.display()))
}

fn strotss_config(a: &StrotssArgs) -> StrotssConfig {
    let d = StrotssConfig::default();
    StrotssConfig {
        alpha: a.alpha,
        scales: a.scales,
        steps: a.steps.unwrap_or(d.steps),
        seed: a.io.seed.unwrap_or(d.seed),
        ..d
    }
}

fn nnst_config(a: &NnstArgs) -> NnstJob {
    let d = NnstConfig::default();
    NnstJob {
        config: NnstConfig {
            alpha_blend: a.alpha_blend,
            long_side: a.long_side.or(d.long_side),
            updates: a.updates.unwrap_or(d.updates),
            seed: a.io.seed.unwrap_or(d.seed),
            ..d
        },
        color_post: !a.no_color_post,
    }
}

fn dst_config(a: &DstArgs) -> DstConfig {
    let d = DstConfig::default();
    let mut strotss = d.strotss.clone();
    let mut gram = d.gram.clone();
    if let Some(s) = a.steps {
        strotss.steps = s;
        gram.steps = s;
    }
    if let Some(seed) = a.io.seed {
        strotss.seed = seed;
    }
    DstConfig {
        base: match a.base {
            BaseArg::Strotss => DstBase::Strotss,
            BaseArg::Gram => DstBase::Gram,
        },
        regime: match a.regime {
            RegimeArg::Low => Regime::Low,
            RegimeArg::Med => Regime::Med,
            RegimeArg::High => Regime::High,
        },
        beta: a.beta,
        gamma: a.gamma,
        alpha: a.alpha,
        strotss,
        gram,
        ..d
    }
}

fn stylize(cfg: JobConfig, io: &Io, guidance: Option<&Path>, points: Option<&Path>) -> CliResult<()> {
    cfg.validate().map_err(|e| e.to_string())?;
    if io.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg.resolved()).expect("plain data serializes"));
        return Ok(());
    }
    let content = load_image(&io.content)?;
    let style = load_image(&io.style)?;
    let guidance = guidance.map(|p| load_guidance(p, &content, &style)).transpose()?;
    let points = points
        .map(|p| CorrespondenceDocument::parse(&read_text(p)?).map_err(|e| format!("{}: {e}", p.display())))
        .transpose()?;
    let inputs = JobInputs { content, style, guidance, points };
    check_inputs(&cfg, &inputs).map_err(|(f, m)| format!("{f}: {m}"))?;
    let observer: &dyn Observer = if io.quiet { &stylecore::progress::Silent } else { &Stderr };
    let out = execute(&cfg, &inputs, observer).map_err(|e| e.to_string())?;
    out.image.save(&io.out).map_err(|e| e.to_string())
}

fn emd_check(a: &EmdCheckArgs) -> CliResult<()> {
    let images = match &a.images {
        Some(dir) => emd_check::images_in(dir),
        None => emd_check::builtin_images(),
    }
    .map_err(|e| e.to_string())?;
    let report = emd_check::run(&images, a.n, a.trials, a.seed).map_err(|e| e.to_string())?;
    match &a.report {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
            report.write_csv(file).map_err(|e| e.to_string())?;
            let worst = report.trials.iter().map(|t| t.ratio).fold(0.0, f64::max);
            println!("{} trials, ratio mean {:.4} std {:.4} max {:.4}", report.trials.len(), report.mean, report.std, worst);
        }
        None => report.write_csv(std::io::stdout().lock()).map_err(|e| e.to_string())?,
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> CliResult<()> {
    let ip = a.host.parse().map_err(|_| format!("invalid host {:?}", a.host))?;
    if let Some(dir) = &a.assets {
        if !dir.is_dir() {
            return Err(format!("{}: not a directory", dir.display()));
        }
    }
    let state = service::AppState {
        jobs: JobManager::new(a.workers.unwrap_or_else(default_workers)),
        assets: a.assets.clone(),
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(service::serve(SocketAddr::new(ip, a.port), state)).map_err(|e| e.to_string())
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Strotss(a) => stylize(JobConfig::Strotss(strotss_config(&a)), &a.io, a.guidance.as_deref(), None),
        Command::Nnst(a) => stylize(JobConfig::Nnst(nnst_config(&a)), &a.io, None, None),
        Command::Dst(a) => stylize(JobConfig::Dst(dst_config(&a)), &a.io, None, Some(&a.points)),
        Command::EmdCheck(a) => emd_check(&a),
        Command::Serve(a) => serve(&a),
    }
}

/// Parses `args` and runs the command. Errors print one line to stderr.
pub fn main_with(args: impl IntoIterator<Item = String>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {}", msg.lines().next().unwrap_or("failed"));
            ExitCode::FAILURE
        }
    }
}
