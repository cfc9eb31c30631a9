// SPDX-License-Identifier: Apache-2.0

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pct_core::encoding::MixMode;
use pct_core::psi::Mode;

#[derive(Debug, Parser)]
#[command(
    name = "pct",
    version,
    about = "Trajectory-based private contact tracing toolkit"
)]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trajectory dataset as CSV.
    Gen(GenArgs),
    /// Encode an infected dataset into chunk files and a manifest.
    Build(BuildArgs),
    /// Run client queries through the simulated trusted region.
    Query(QueryArgs),
    /// Score a protocol against exact contact decisions.
    Eval(EvalArgs),
    /// Sweep chunk counts, client counts and parameters; emit phase timings.
    Bench(BenchArgs),
    /// Serve wire-format queries over TCP with batching.
    Serve(ServeArgs),
    /// Send queries to a running server, one connection per user.
    Client(ClientArgs),
}

/// Config file whose keys mirror the long flags.
#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct EncodingArgs {
    #[arg(long, default_value_t = 24)]
    pub theta_geo: u8,
    #[arg(long, default_value_t = 22)]
    pub theta_time: u8,
    /// Period start, unix seconds [default: first timestamp's UTC midnight].
    #[arg(long)]
    pub t_start: Option<i64>,
    /// Period end, unix seconds [default: start plus --period-days].
    #[arg(long)]
    pub t_end: Option<i64>,
    #[arg(long, default_value_t = 14)]
    pub period_days: i64,
    #[arg(long, default_value_t = MixMode::Interleave)]
    pub mix_mode: MixMode,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value_t = 100)]
    pub users: usize,
    #[arg(long, default_value_t = 14.0)]
    pub days: f64,
    /// Sampling interval, seconds.
    #[arg(long, default_value_t = 60)]
    pub interval: i64,
    #[arg(long, default_value_t = 1_601_856_000)]
    pub t_start: i64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 70)]
    pub hotspots: usize,
    #[arg(long, default_value_t = 0.98)]
    pub stickiness: f64,
    #[arg(long, default_value_t = 0)]
    pub first_user_id: u64,
    /// min_lat,max_lat,min_lng,max_lng [default: lower Manhattan]
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub bbox: Option<Vec<f64>>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Infected dataset CSV.
    #[arg(long, short)]
    pub input: PathBuf,
    #[command(flatten)]
    pub encoding: EncodingArgs,
    /// Fixed chunk count; otherwise planned from the memory budget.
    #[arg(long)]
    pub n_chunks: Option<usize>,
    #[arg(long, env = "PCT_BUDGET_BYTES")]
    pub budget_bytes: Option<u64>,
    /// Trusted memory kept free for query data.
    #[arg(long, default_value_t = 16 << 20)]
    pub reserved_bytes: u64,
    /// Minimum exposure duration stored in the manifest, seconds.
    #[arg(long, default_value_t = 0)]
    pub theta_doe: u64,
    #[arg(long, default_value_t = 60)]
    pub sampling_interval: u64,
    /// Output directory for chunks and manifest.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    #[arg(long, default_value_t = Mode::StPsi)]
    pub mode: Mode,
    /// Override the manifest's exposure threshold, seconds.
    #[arg(long)]
    pub theta_doe: Option<u64>,
    /// Stop probing a client after its first hit.
    #[arg(long)]
    pub no_constant_scan: bool,
    #[arg(long, env = "PCT_BUDGET_BYTES")]
    pub budget_bytes: Option<u64>,
    /// Seed for session keys; random when unset.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, short)]
    pub manifest: PathBuf,
    /// Client trajectories CSV.
    #[arg(long, short)]
    pub clients: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// Requests per batch.
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Per-client results CSV.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Take encoding parameters and rules from this manifest.
    #[arg(long, short)]
    pub manifest: Option<PathBuf>,
    /// Raw infected dataset CSV.
    #[arg(long, short)]
    pub server: PathBuf,
    #[arg(long, short)]
    pub clients: PathBuf,
    #[command(flatten)]
    pub encoding: EncodingArgs,
    #[arg(long, default_value_t = Mode::StPsi)]
    pub mode: Mode,
    #[arg(long, default_value_t = 1.0)]
    pub theta_geo_cells: f64,
    /// Temporal threshold, seconds [default: one time cell].
    #[arg(long)]
    pub theta_time_s: Option<f64>,
    #[arg(long)]
    pub theta_doe: Option<u64>,
    #[arg(long)]
    pub sampling_interval: Option<u64>,
    /// Write <PREFIX>_matrix.csv, <PREFIX>_false_cases.csv and <PREFIX>_histograms.csv.
    #[arg(long, value_name = "PREFIX")]
    pub report_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Infected dataset CSV [default: generated].
    #[arg(long)]
    pub server: Option<PathBuf>,
    /// Client dataset CSV [default: generated].
    #[arg(long)]
    pub clients: Option<PathBuf>,
    /// Users to generate for the server side.
    #[arg(long, default_value_t = 100)]
    pub server_users: usize,
    #[arg(long, default_value_t = 14.0)]
    pub days: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "1,5,20")]
    pub n_chunks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub client_counts: Vec<usize>,
    /// theta_geo:theta_time pairs.
    #[arg(long, value_delimiter = ',', default_value = "24:22")]
    pub params: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "stpsi")]
    pub modes: Vec<Mode>,
    #[arg(long, default_value_t = 0)]
    pub theta_doe: u64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = MixMode::Interleave)]
    pub mix_mode: MixMode,
    #[arg(long, env = "PCT_BUDGET_BYTES")]
    pub budget_bytes: Option<u64>,
    /// Timings CSV [default: stdout].
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, short)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub listen: SocketAddr,
    #[command(flatten)]
    pub run: RunArgs,
    /// Requests per batch (N_C).
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Run a partial batch after this long, milliseconds.
    #[arg(long, default_value_t = 2000)]
    pub batch_timeout_ms: u64,
    /// Requests accepted per client per UTC day.
    #[arg(long, default_value_t = 1)]
    pub rate_limit: u32,
    /// Exit after this many batches.
    #[arg(long)]
    pub max_batches: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ClientArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub server: SocketAddr,
    /// Client trajectories CSV.
    #[arg(long, short)]
    pub clients: PathBuf,
    /// Only query these user ids.
    #[arg(long, value_delimiter = ',')]
    pub users: Vec<u64>,
    /// Read timeout per request, milliseconds.
    #[arg(long, default_value_t = 60_000)]
    pub timeout_ms: u64,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}
