//! Command-line surface. Every struct here is also the payload of the
//! `config.json` written next to a command's outputs, so a run can be
//! replayed with `fragavg rerun`.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fragavg::baselines::IcSample;
use fragavg::patterns::PatternOrder;
use fragavg::sim::BetaCase;
use fragavg::{ExponentialFamily, LambdaChoice};

#[derive(Debug, Parser)]
#[command(name = "fragavg", version, about = "Model averaging for GLMs on block-missing data")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GlobalArgs {
    /// Seed for every random choice (splits, CV folds, simulation draws).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// binomial, gaussian or poisson.
    #[arg(long, global = true, default_value = "binomial", value_parser = parsed::<ExponentialFamily>)]
    pub family: String,

    /// Marker for unavailable cells; empty cells are always unavailable.
    #[arg(long, global = true, default_value = "NA")]
    pub na_marker: String,

    /// Output directory (created if needed).
    #[arg(long, global = true, default_value = "fragavg-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Fit the averaged model and write model.json and report.txt.
    Fit(FitArgs),
    /// Predict query rows with a fitted model.
    Predict(PredictArgs),
    /// Train/test comparison of several methods.
    Compare(CompareArgs),
    /// Monte Carlo study on the three-block design.
    Simulate(SimulateArgs),
    /// Keep the columns most correlated with the response within each group.
    Screen(ScreenArgs),
    /// Replay a run from its config.json.
    #[serde(skip)]
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Predict(_) => "predict",
            Command::Compare(_) => "compare",
            Command::Simulate(_) => "simulate",
            Command::Screen(_) => "screen",
            Command::Rerun(_) => "rerun",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderArg {
    /// Larger patterns first, ties lexicographic.
    Size,
    /// Order of first appearance among subjects.
    First,
}

impl From<OrderArg> for PatternOrder {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::Size => PatternOrder::SizeDescending,
            OrderArg::First => PatternOrder::FirstAppearance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcSampleArg {
    /// Each candidate's log-likelihood on its own fitting sample.
    Own,
    /// Every candidate's log-likelihood on the complete cases.
    CompleteCases,
}

impl From<IcSampleArg> for IcSample {
    fn from(s: IcSampleArg) -> Self {
        match s {
            IcSampleArg::Own => IcSample::OwnSample,
            IcSampleArg::CompleteCases => IcSample::CompleteCases,
        }
    }
}

/// Options shared by every command that reads a training CSV and fits GLMs.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Name of the response column.
    #[arg(long)]
    pub response: String,

    /// Do not add an always-observed intercept column.
    #[arg(long)]
    pub no_intercept: bool,

    /// IRLS iteration cap per candidate.
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,

    /// IRLS stops when the max-norm of the score falls below this.
    #[arg(long, default_value_t = 1e-8)]
    pub grad_tol: f64,

    /// Ridge added to the information matrix when separation is detected.
    #[arg(long, default_value_t = 1e-8)]
    pub ridge: f64,

    #[arg(long, value_enum, default_value_t = OrderArg::Size)]
    pub pattern_order: OrderArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// Training CSV with a header row.
    pub input: PathBuf,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Penalty: 2, log-n1, or a non-negative number.
    #[arg(long, default_value = "2", value_parser = parsed::<LambdaChoice>)]
    pub lambda: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    /// model.json written by `fit`.
    #[arg(long)]
    pub model: PathBuf,

    /// Query CSV; columns are matched by name, missing columns are unavailable.
    pub query: PathBuf,

    /// Training CSV used for rows whose pattern misses a model covariate;
    /// the model is refitted on the data restricted to that pattern.
    #[arg(long)]
    pub train: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    /// Full dataset; split into train and test with --split.
    pub input: PathBuf,

    /// Separate test CSV; when given, `input` is used whole for training.
    #[arg(long)]
    pub test: Option<PathBuf>,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Comma-separated subset of opt1,opt2,cc,saic,sbic,imp1,imp2,glasso, or "all".
    #[arg(long, default_value = "all", value_parser = parsed_methods)]
    pub methods: String,

    /// JSON sidecar declaring column groups for the group lasso.
    #[arg(long)]
    pub groups: Option<PathBuf>,

    /// Training share of the subjects.
    #[arg(long, default_value_t = 0.75)]
    pub split: f64,

    /// Split within every availability pattern.
    #[arg(long)]
    pub stratify_pattern: bool,

    #[arg(long, value_enum, default_value_t = IcSampleArg::Own)]
    pub ic_sample: IcSampleArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Subjects per replication.
    #[arg(long, default_value_t = 400)]
    pub n: usize,

    /// Equicorrelation of the covariates.
    #[arg(long, default_value_t = 0.3)]
    pub rho: f64,

    /// decay, flat or rise.
    #[arg(long, default_value = "decay", value_parser = parsed::<BetaCase>)]
    pub beta_case: String,

    #[arg(long, default_value_t = 100)]
    pub reps: usize,

    #[arg(long, default_value = "all", value_parser = parsed_methods)]
    pub methods: String,

    #[arg(long, value_enum, default_value_t = IcSampleArg::Own)]
    pub ic_sample: IcSampleArg,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ScreenArgs {
    pub input: PathBuf,

    #[arg(long)]
    pub response: String,

    /// JSON sidecar declaring the column groups to screen.
    #[arg(long)]
    pub groups: PathBuf,

    /// Columns kept per group.
    #[arg(long, default_value_t = 10)]
    pub keep: usize,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    /// config.json from an earlier run.
    pub config: PathBuf,
}

/// What `config.json` holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: String,
    pub global: GlobalArgs,
    pub command: Command,
}

/// Validates with the library parser but keeps the text, so configs stay
/// readable and the value is parsed once more at execution.
fn parsed<T: FromStr>(s: &str) -> Result<String, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map(|_| s.to_string()).map_err(|e| e.to_string())
}

fn parsed_methods(s: &str) -> Result<String, String> {
    fragavg::baselines::parse_methods(s)
        .map(|_| s.to_string())
        .map_err(|e| e.to_string())
}
