use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Plan, search and cost ReLU-budgeted cell networks for private inference.
///
/// Payloads (JSON, CSV, DOT) go to stdout; errors go to stderr as one JSON
/// record `{code, message, context}`. Exit status is 0 on success, 1 on a
/// domain error and 2 on a usage error.
#[derive(Debug, Parser)]
#[command(name = "reluplan", version, max_term_width = 100)]
pub struct Cli {
    /// JSON file with one object per subcommand name; flags override it
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for every random stream
    #[arg(long, global = true, env = "SPHYNX_SEED", hide_env_values = true, default_value_t = 0)]
    pub seed: u64,

    /// Directory for artifacts (created if missing)
    #[arg(long, global = true, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,

    /// Worker threads for parallel loops
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a genotype against the structural and op-set rules
    Validate(GenotypeArgs),
    /// ReLU, FLOP and parameter ledger for a network
    Count(CountArgs),
    /// Every (channels, depth) pair within tolerance of a ReLU budget
    Plan(PlanArgs),
    /// Stage list with per-stage shapes and ReLUs
    Skeleton(NetworkArgs),
    /// Gumbel-sampled search over reduce-cell placements
    PlaceSearch(SearchArgs),
    /// Train every placement branch and rank by validation loss
    PlaceGrid(SearchArgs),
    /// Turn relaxed edge logits into a genotype
    Discretize(DiscretizeArgs),
    /// Run the two-party inference protocol on a dense model
    Simulate(SimulateArgs),
    /// Fit latency = base + per-ReLU cost to measured runs
    LatencyFit(LatencyFitArgs),
    /// Predict latency from ReLU counts
    LatencyPredict(LatencyPredictArgs),
    /// Accuracy/latency Pareto frontier of measured runs
    Pareto(RecordsArgs),
    /// Graphviz DOT for a genotype
    Dot(GenotypeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::Count(_) => "count",
            Command::Plan(_) => "plan",
            Command::Skeleton(_) => "skeleton",
            Command::PlaceSearch(_) => "place-search",
            Command::PlaceGrid(_) => "place-grid",
            Command::Discretize(_) => "discretize",
            Command::Simulate(_) => "simulate",
            Command::LatencyFit(_) => "latency-fit",
            Command::LatencyPredict(_) => "latency-predict",
            Command::Pareto(_) => "pareto",
            Command::Dot(_) => "dot",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct GenotypeArgs {
    /// Genotype JSON; defaults to the built-in reference genotype
    #[arg(long, value_name = "FILE")]
    pub genotype: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct NetworkArgs {
    /// Cell input height [default: 32, or 28 with imagenet3]
    #[arg(long)]
    pub h0: Option<u64>,
    /// Cell input width [default: 32, or 28 with imagenet3]
    #[arg(long)]
    pub w0: Option<u64>,
    /// Base channel count C
    #[arg(long)]
    pub channels: Option<u64>,
    /// Number of cells D
    #[arg(long)]
    pub depth: Option<usize>,
    /// Reduce-cell indices as A,B [default: D/3,2D/3]
    #[arg(long, value_delimiter = ',', value_name = "A,B")]
    pub placement: Option<Vec<usize>>,
    /// Stem: direct or imagenet3 [default: direct]
    #[arg(long, value_parser = ["direct", "imagenet3"])]
    pub stem: Option<String>,
    /// Channel growth at reduces: relu (x4) or flop (x2) [default: relu]
    #[arg(long, value_parser = ["relu", "flop"])]
    pub balancing: Option<String>,
    /// Genotype JSON; defaults to the built-in reference genotype
    #[arg(long, value_name = "FILE")]
    pub genotype: Option<PathBuf>,
    /// Classifier outputs [default: 100]
    #[arg(long)]
    pub classes: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct CountArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub network: NetworkArgs,
    /// Share one ReLU among convs reading the same node (legacy genotypes)
    #[arg(long)]
    pub share_relus: bool,
    /// Count two ReLU layers per non-dilated separable conv (legacy genotypes)
    #[arg(long)]
    pub double_separable: bool,
    /// Count a layer-chain network from JSON instead of a cell network
    #[arg(long, value_name = "FILE")]
    pub chain: Option<PathBuf>,
    /// Payload format: json or csv [default: json]
    #[arg(long, value_parser = ["json", "csv"])]
    pub format: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct PlanArgs {
    /// Target ReLU count
    #[arg(long)]
    pub budget: Option<u64>,
    /// Allowed deviation as a fraction of the budget [default: 0.05]
    #[arg(long)]
    pub tol: Option<f64>,
    /// Input height [default: 32]
    #[arg(long)]
    pub h0: Option<u64>,
    /// Input width [default: 32]
    #[arg(long)]
    pub w0: Option<u64>,
    /// Smallest channel count [default: 1]
    #[arg(long)]
    pub c_min: Option<u64>,
    /// Largest channel count [default: 64]
    #[arg(long)]
    pub c_max: Option<u64>,
    /// Smallest depth [default: 1]
    #[arg(long)]
    pub d_min: Option<u64>,
    /// Largest depth [default: 30]
    #[arg(long)]
    pub d_max: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SearchArgs {
    /// Branch family: planted, uniform or surrogate [default: planted]
    #[arg(long, value_parser = ["planted", "uniform", "surrogate"])]
    pub evaluator: Option<String>,
    /// Number of branches for planted and uniform families [default: 6]
    #[arg(long)]
    pub branches: Option<usize>,
    /// Index of the planted best branch [default: 0]
    #[arg(long)]
    pub best: Option<usize>,
    /// Network depth for the surrogate family [default: 5]
    #[arg(long)]
    pub depth: Option<usize>,
    /// Base hidden width for the surrogate family [default: 8]
    #[arg(long)]
    pub width: Option<usize>,
    /// Training epochs [default: 40]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minibatches per epoch [default: 10]
    #[arg(long)]
    pub batches_per_epoch: Option<usize>,
    /// Minibatch size [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial Gumbel temperature [default: 1000]
    #[arg(long)]
    pub tau_start: Option<f64>,
    /// Final Gumbel temperature [default: 0.1]
    #[arg(long)]
    pub tau_end: Option<f64>,
    /// SGD learning rate for branch weights [default: 0.2]
    #[arg(long)]
    pub weight_lr: Option<f64>,
    /// Adam learning rate for placement logits [default: 0.01]
    #[arg(long)]
    pub beta_lr: Option<f64>,
    /// Validation batches averaged per grid row [default: 4]
    #[arg(long)]
    pub eval_batches: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct DiscretizeArgs {
    /// Edge logits JSON
    #[arg(long, value_name = "FILE", conflicts_with = "nodes")]
    pub theta: Option<PathBuf>,
    /// Draw random logits for a cell with this many nodes instead
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Op set for random logits: sphynx or legacy [default: sphynx]
    #[arg(long, value_parser = ["sphynx", "legacy"])]
    pub ops: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SimulateArgs {
    /// Dense model JSON
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Inputs as header-less CSV, one vector per row
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Transport between the parties: inproc or tcp [default: inproc]
    #[arg(long, value_parser = ["inproc", "tcp"])]
    pub transport: Option<String>,
    /// Also audit share uniformity over this many trials of the first row
    #[arg(long, value_name = "N")]
    pub audit_trials: Option<usize>,
    /// Family-wise significance level of the audit [default: 0.01]
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct RecordsArgs {
    /// Run records CSV (label,relus,latency_ms,accuracy_pct)
    #[arg(long, value_name = "FILE")]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct LatencyFitArgs {
    /// Run records CSV (label,relus,latency_ms,accuracy_pct)
    #[arg(long, value_name = "FILE")]
    pub records: Option<PathBuf>,
    /// Fit only these labels, comma separated
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct LatencyPredictArgs {
    /// Latency model JSON {per_relu_us, base_ms}
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// ReLU counts, comma separated
    #[arg(long, value_delimiter = ',', conflicts_with = "records")]
    pub relus: Option<Vec<u64>>,
    /// Predict for every row of a run records CSV instead
    #[arg(long, value_name = "FILE")]
    pub records: Option<PathBuf>,
}
