mod commands;
mod serve;

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "empathic", version, about = "Reward learning from implicit observer reactions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run gridworld episodes and write their logs.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, value_enum, default_value_t = PolicyArg::Behavior)]
        policy: PolicyArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic reaction dataset.
    SynthData {
        #[arg(long, default_value_t = 8)]
        subjects: usize,
        #[arg(long, default_value_t = 3)]
        episodes: usize,
        #[command(flatten)]
        profile: ProfileArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the reaction model on a saved dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training configuration as JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cross-validation folds to evaluate before the final fit.
        #[arg(long, default_value_t = 0)]
        folds: usize,
        /// Overrides the configuration's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Drop the three-class loss term, as `eval-robotic` expects.
        #[arg(long)]
        binary: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank reward hypotheses on the held-out episodes of a dataset.
    Rank {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Rank every episode, not only the held-out ones.
        #[arg(long)]
        all: bool,
        #[command(flatten)]
        rank: RankArgs,
    },
    /// Online learning sessions.
    Online {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        profile: ProfileArgs,
        /// Feature CSV streamed as live input to a single session.
        #[arg(long)]
        live: Option<PathBuf>,
        /// Number of sessions.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// First session seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        baseline_episodes: usize,
        #[command(flatten)]
        session: SessionArgs,
        #[arg(long)]
        report: PathBuf,
        /// Per-tick metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Score scripted trajectories and rank them against their returns.
    EvalRobotic {
        #[arg(long)]
        model: PathBuf,
        /// Trajectory set as JSON; the built-in set when omitted.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        subjects: usize,
        #[command(flatten)]
        profile: ProfileArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Serve a live session over a websocket.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8765")]
        bind: SocketAddr,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        profile: ProfileArgs,
        /// Reactions come only from the client; the session waits for start.
        #[arg(long)]
        live: bool,
        /// Milliseconds per tick; the step period when omitted.
        #[arg(long)]
        tick_ms: Option<u64>,
        #[command(flatten)]
        session: SessionArgs,
        /// Session recording written when an episode ends.
        #[arg(long)]
        record: Option<PathBuf>,
        #[arg(long)]
        exit_on_finish: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Behavior,
    Greedy,
    Random,
}

#[derive(Args, Clone)]
struct ProfileArgs {
    /// `clean`, `default`, or a profile JSON file.
    #[arg(long, default_value = "clean")]
    profile: String,
    /// Probability that a reaction takes another class's valence.
    #[arg(long)]
    confusion: Option<f64>,
}

#[derive(Args, Clone, Copy)]
struct RankArgs {
    #[arg(long, value_enum, default_value_t = SpaceArg::Permutations)]
    space: SpaceArg,
    #[arg(long, value_enum, default_value_t = PoolingArg::GeometricMean)]
    pooling: PoolingArg,
    #[arg(long, value_enum, default_value_t = LikelihoodArg::Predicted)]
    likelihood: LikelihoodArg,
}

#[derive(Args, Clone, Copy)]
struct SessionArgs {
    #[command(flatten)]
    rank: RankArgs,
    #[arg(long, value_enum, default_value_t = ReplanArg::BeliefUpdate)]
    replan: ReplanArg,
    #[arg(long, default_value_t = 0)]
    warmup_ticks: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Permutations,
    BehaviorMappings,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    GeometricMean,
    PerFrame,
}

#[derive(Clone, Copy, ValueEnum)]
enum LikelihoodArg {
    Predicted,
    PriorCorrected,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReplanArg {
    BeliefUpdate,
    Pickup,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { seed, episodes, policy, out } => commands::simulate(seed, episodes, policy, &out),
        Command::SynthData { subjects, episodes, profile, seed, out } => commands::synth_data(subjects, episodes, &profile, seed, &out),
        Command::Train { data, config, folds, seed, binary, out } => commands::train(&data, config.as_deref(), folds, seed, binary, &out),
        Command::Rank { model, data, report, all, rank } => commands::rank(&model, &data, &report, all, rank),
        Command::Online { model, profile, live, seeds, seed, baseline_episodes, session, report, metrics } => {
            commands::online(&model, &profile, live.as_deref(), seed, seeds, baseline_episodes, session, &report, metrics.as_deref())
        }
        Command::EvalRobotic { model, trajectories, subjects, profile, seed, report, csv } => {
            commands::eval_robotic(&model, trajectories.as_deref(), subjects, &profile, seed, &report, csv.as_deref())
        }
        Command::Serve { bind, model, seed, profile, live, tick_ms, session, record, exit_on_finish } => {
            commands::serve(bind, &model, seed, &profile, live, tick_ms, session, record, exit_on_finish)
        }
    }
}
