//! `esabre` command-line interface.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use esabre::selection::{CriterionKind, CvMode};
use esabre::subposterior::PartitionUnit;
use esabre::Mode;

/// How a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or inputs: exit 2.
    Usage(String),
    /// Outputs were written but some fit did not converge: exit 3.
    NotConverged(String),
    /// Anything else: exit 1.
    Runtime(String),
}

impl From<esabre::Error> for Failure {
    fn from(e: esabre::Error) -> Self {
        use esabre::Error as E;
        match e {
            E::Parse { .. } | E::InvalidData(_) | E::Config(_) | E::Io { .. } | E::Json(_) | E::ImproperPower { .. } => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::NotConverged(_) => 3,
            Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::NotConverged(m) | Failure::Runtime(m) => m,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "esabre", version, about = "Spike-and-slab mixed-effects regression for paired measurements")]
struct Cli {
    /// Worker threads for chains, shards, folds and specs.
    #[arg(long, global = true, env = "ESABRE_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset with known truth.
    Simulate(SimulateArgs),
    /// Run the sampler on a dataset.
    Fit(RunArgs),
    /// Score every subset of random-effect factors.
    SelectRe(SelectArgs),
    /// Convergence and recovery report for stored chains.
    Diagnose(DiagnoseArgs),
    /// Fit shards of a dataset under corrected priors.
    ShardFit(ShardArgs),
    /// Combine shard fits into one posterior summary.
    Combine(CombineArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Scenario {
    Sd1,
    Sd2,
    Sd3,
    Selection,
    Fmdv,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "sd1")]
    pub scenario: Scenario,
    /// Full scenario JSON; replaces --scenario.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n_obs: Option<usize>,
    #[arg(long)]
    pub n_strains: Option<usize>,
    /// Noise variance (both levels for sd*, sigma_eps2 otherwise).
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Mean nonzero coefficient of the fmdv scenario.
    #[arg(long, allow_hyphen_values = true)]
    pub mu_w: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Existing directory to write into.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub n_chains: Option<usize>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Random-effect factors to keep (comma separated names).
    #[arg(long, value_delimiter = ',')]
    pub re_factors: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Esabre,
    SabreFlat,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Esabre => Mode::Esabre,
            ModeArg::SabreFlat => Mode::SabreFlat,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CriterionArg {
    Biwaic,
    Nwaic,
    Waic,
    Icv,
}

impl From<CriterionArg> for CriterionKind {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Biwaic => CriterionKind::Biwaic,
            CriterionArg::Nwaic => CriterionKind::Nwaic,
            CriterionArg::Waic => CriterionKind::Waic,
            CriterionArg::Icv => CriterionKind::Icv,
        }
    }
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub criterion: Option<Vec<CriterionArg>>,
    /// Number of CV folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Leave one group out instead of k-fold.
    #[arg(long)]
    pub logo: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RuleArg {
    Threshold,
    TopPi,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Directory with chain files.
    #[arg(long)]
    pub chains: PathBuf,
    /// Dataset directory; needed for PSRF and truth.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "threshold")]
    pub rule: RuleArg,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ShardArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub shards: Option<usize>,
    #[arg(long, value_enum)]
    pub unit: Option<UnitArg>,
    /// Run shards under the nominal priors, without correction.
    #[arg(long)]
    pub no_correct: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum UnitArg {
    Pairs,
    Observations,
}

impl From<UnitArg> for PartitionUnit {
    fn from(u: UnitArg) -> Self {
        match u {
            UnitArg::Pairs => PartitionUnit::Pairs,
            UnitArg::Observations => PartitionUnit::Observations,
        }
    }
}

#[derive(Args, Debug)]
pub struct CombineArgs {
    /// Output directory of `shard-fit`.
    #[arg(long)]
    pub shards: PathBuf,
    /// Chain directory of a full-data fit to compare against.
    #[arg(long)]
    pub full: Option<PathBuf>,
    /// Dataset directory whose truth scores the ROC curves.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cv_mode(logo: bool) -> CvMode {
    if logo {
        CvMode::Logo
    } else {
        CvMode::Kfold
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size job pool: {e}");
            return ExitCode::from(2);
        }
    }
    let out = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::SelectRe(a) => commands::select_re(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
        Command::ShardFit(a) => commands::shard_fit(&a),
        Command::Combine(a) => commands::combine(&a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
