use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "sot", version, about = "Image transfer by optimal transport between sparse patch dictionaries")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Worker threads (falls back to SOT_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// File of newline-separated `key=value` flag settings; explicit flags win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn both dictionaries and the plan, and save the model.
    Fit(FitArgs),
    /// Apply a saved model to an image.
    Transfer(TransferArgs),
    /// Compare two images.
    Eval(EvalArgs),
    /// Fit and transfer in one step.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub out_model: PathBuf,
    #[command(flatten)]
    pub params: FitParams,
    #[command(flatten)]
    pub logs: FitLogs,
}

#[derive(Debug, Args, Default)]
pub struct FitLogs {
    /// Write the per-iteration losses as CSV.
    #[arg(long, value_name = "PATH")]
    pub loss_csv: Option<PathBuf>,
    /// Write dictionary atlases `dict_x.png` and `dict_y.png` here.
    #[arg(long, value_name = "DIR")]
    pub atlas_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct FitParams {
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Patches sampled per image.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub dict_size: Option<usize>,
    /// Atom count for the reference side (defaults to --dict-size).
    #[arg(long)]
    pub dict_size_reference: Option<usize>,
    #[arg(long)]
    pub omp_tol: Option<f64>,
    /// Maximum atoms per patch.
    #[arg(long)]
    pub omp_k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub sinkhorn_iters: Option<usize>,
    #[arg(long)]
    pub outer_iters: Option<usize>,
    /// Relative loss change below which fitting stops.
    #[arg(long)]
    pub stop: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the exact transport solver.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub exact_ot: Option<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    #[default]
    Forward,
    Reverse,
}

#[derive(Debug, Args, Default)]
pub struct TransferParams {
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    /// Reconstruction grid stride in pixels.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Gradient refinement weight; 0 disables refinement.
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub params: TransferParams,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also keep the fitted model.
    #[arg(long)]
    pub out_model: Option<PathBuf>,
    #[command(flatten)]
    pub fit: FitParams,
    #[command(flatten)]
    pub logs: FitLogs,
    #[command(flatten)]
    pub transfer: TransferParams,
}

const SUBCOMMANDS: [&str; 4] = ["fit", "transfer", "eval", "run"];

/// Splices the settings of a `--config` file in right after the subcommand,
/// so flags given on the command line (which come later) take precedence.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut path = None;
    for (i, arg) in argv.iter().enumerate() {
        let Some(s) = arg.to_str() else { continue };
        if s == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(p.into());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = fs::read_to_string(&path).map_err(|e| format!("reading config {}: {e}", PathBuf::from(&path).display()))?;
    let injected = parse_config(&text)?;
    let Some(at) = argv.iter().position(|a| a.to_str().is_some_and(|s| SUBCOMMANDS.contains(&s))) else {
        return Ok(argv);
    };
    let mut out = argv[..=at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[at + 1..]);
    Ok(out)
}

fn parse_config(text: &str) -> Result<Vec<OsString>, String> {
    let mut args = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value", n + 1))?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(format!("config line {}: invalid key", n + 1));
        }
        args.push(format!("--{key}").into());
        args.push(value.trim().into());
    }
    Ok(args)
}
