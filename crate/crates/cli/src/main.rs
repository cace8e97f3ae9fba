//! `twsketch`: sketched two-way clustered inference from the command line.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical failure (the
//! JSON report then carries `{"error": {"code", "message"}}`).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use twoway_sketch::moments::VarianceMode;
use twoway_sketch::sketch::PRule;

#[derive(Debug, Parser)]
#[command(name = "twsketch", version, about = "Bernoulli-sketch inference for two-way clustered panels")]
pub struct Cli {
    /// Worker threads for the library (0 = all cores).
    #[arg(long, global = true, env = "TWSKETCH_THREADS", default_value_t = 0)]
    pub threads: usize,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Mean of one or more fields with a confidence interval.
    Mean(MeanArgs),
    /// Linear instrumental-variables GMM.
    Gmm(GmmArgs),
    /// Least-squares or logistic M-estimation.
    Mfit(MfitArgs),
    /// Choose the selection rate from a preliminary sketch.
    ChooseP(ChoosePArgs),
    /// Monte Carlo coverage experiment on a built-in design.
    Simulate(SimulateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Mean(_) => "mean",
            Command::Gmm(_) => "gmm",
            Command::Mfit(_) => "mfit",
            Command::ChooseP(_) => "choose-p",
            Command::Simulate(_) => "simulate",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SketchArgs {
    /// Selection rate in (0, 1].
    #[arg(long, conflicts_with_all = ["c_over_cbar", "full_sample"])]
    pub p: Option<f64>,

    /// Selection rate c / min(N, M) [default: 1].
    #[arg(long = "c-over-cbar", conflicts_with = "full_sample")]
    pub c_over_cbar: Option<f64>,

    /// Use every cell (p = 1).
    #[arg(long)]
    pub full_sample: bool,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SketchArgs {
    pub fn rule(&self) -> twoway_sketch::Result<PRule> {
        match (self.p, self.c_over_cbar, self.full_sample) {
            (Some(p), _, _) => format!("p{p}").parse(),
            (_, Some(c), _) => format!("c{c}").parse(),
            (_, _, true) => Ok(PRule::Full),
            _ => Ok(PRule::COverCbar(1.0)),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct MeanArgs {
    #[arg(long)]
    pub data: PathBuf,

    /// Field(s) to average, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub field: Vec<String>,

    #[command(flatten)]
    pub sketch: SketchArgs,

    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,

    /// Cells feeding the variance: `subsample` or `full`.
    #[arg(long, default_value = "subsample")]
    pub variance: VarianceMode,

    /// JSON report path (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GmmArgs {
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long)]
    pub y: String,

    /// Regressors, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub x: Vec<String>,

    /// Instruments, comma separated (at least as many as regressors).
    #[arg(long, value_delimiter = ',', required = true)]
    pub z: Vec<String>,

    #[command(flatten)]
    pub sketch: SketchArgs,

    /// Refit with the inverse moment covariance as weight.
    #[arg(long)]
    pub two_step: bool,

    /// Center moments at their mean before the variance sums.
    #[arg(long)]
    pub center_moments: bool,

    #[arg(long, default_value = "subsample")]
    pub variance: VarianceMode,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Ls,
    Logit,
}

#[derive(Debug, Args, Serialize)]
pub struct MfitArgs {
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long, value_enum)]
    pub loss: Loss,

    #[arg(long)]
    pub y: String,

    /// Regressors, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub x: Vec<String>,

    #[command(flatten)]
    pub sketch: SketchArgs,

    #[arg(long, default_value = "subsample")]
    pub variance: VarianceMode,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ChoosePArgs {
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long)]
    pub field: String,

    /// Preliminary sketch size c_pre (rate c_pre / min(N, M)).
    #[arg(long)]
    pub c_pre: f64,

    /// Target variance of the sketched mean.
    #[arg(long)]
    pub v_max: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Built-in design, 1 to 4.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub design: u8,

    /// Panel sizes N = M, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "20,40,80,160")]
    pub sizes: Vec<usize>,

    /// Rate rules: full, c<num> or p<num>.
    #[arg(long, value_delimiter = ',', default_value = "full,c1,c2")]
    pub rules: Vec<PRule>,

    #[arg(long, default_value_t = 2500)]
    pub reps: usize,

    #[arg(long, default_value = "full")]
    pub variance: VarianceMode,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Run replications on the calling thread only.
    #[arg(long)]
    pub serial: bool,

    /// Directory for table.txt, table.csv and report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return ExitCode::from(if err.use_stderr() { 1 } else { 0 });
        }
    };

    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    if cli.threads > 0 {
        if let Err(err) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("could not size thread pool: {err}");
        }
    }

    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error [{}]: {err}", err.code());
            if err.is_numerical() {
                commands::write_error_report(&cli, &err);
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
