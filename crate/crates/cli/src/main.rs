use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedens_cli::config::{Channel, Preset};
use fedens_cli::experiment::Arm;
use fedens_cli::{cmd_compare, cmd_eval, cmd_gen, cmd_join, cmd_partition, cmd_serve, cmd_train, CliError, Overrides, Run};

#[derive(Parser)]
#[command(name = "fedens", version, about = "Federated ensemble training experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in experiment used when no --config is given.
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Override the master seed (and the compare seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    channel: Option<Channel>,
    #[arg(long, global = true)]
    clients: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Cabin,
    Trailer,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset in YOLO layout.
    Gen,
    /// Split and shard the data; print the distribution table.
    Partition,
    /// Train the centralized baseline.
    TrainCentral,
    /// Run federated rounds.
    TrainFed {
        /// Continue from a saved round checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use the unseen-combination test set.
        #[arg(long)]
        unseen: bool,
    },
    /// Train both arms for every seed and write a comparison report.
    Compare,
    /// Print the resolved config as TOML.
    ShowConfig,
    /// Serve federated rounds over TCP to `join` clients.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
    },
    /// Join a `serve` session as one client.
    Join {
        #[arg(long, default_value = "127.0.0.1:7878")]
        connect: String,
        #[arg(long)]
        client: usize,
    },
}

fn configure_threads() {
    if let Some(n) = std::env::var("FEDENS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let preset = cli.preset.map(|p| match p {
        PresetArg::Cabin => Preset::Cabin,
        PresetArg::Trailer => Preset::Trailer,
    });
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        channel: cli.channel,
        clients: cli.clients,
    };
    let run = Run::load(cli.config.as_deref(), preset, &overrides)?;
    match cli.command {
        Command::Gen => print!("{}", cmd_gen(&run)?),
        Command::Partition => print!("{}", cmd_partition(&run)?),
        Command::TrainCentral | Command::TrainFed { .. } => {
            let (arm, resume) = match &cli.command {
                Command::TrainFed { resume } => (Arm::Federated, resume.as_deref()),
                _ => (Arm::Centralized, None),
            };
            let r = cmd_train(&run, arm, resume)?;
            for (round, metric) in &r.history {
                println!("round {round}: seen mAP@0.5 {metric:.4}");
            }
            println!("final seen mAP@0.5 {:.4}", r.seen_map);
            if let Some(u) = r.unseen_map {
                println!("final unseen mAP@0.5 {u:.4}");
            }
        }
        Command::Eval { checkpoint, unseen } => {
            let report = cmd_eval(&run, &checkpoint, unseen)?;
            print!("{}", report.to_markdown(&[]));
        }
        Command::Compare => print!("{}", cmd_compare(&run)?.to_markdown()),
        Command::ShowConfig => print!("{}", run.config.to_toml()),
        Command::Serve { bind } => {
            let state = cmd_serve(&run, &bind)?;
            println!("finished after {} rounds: {:?}", state.round_index, state.status);
        }
        Command::Join { connect, client } => {
            let summary = cmd_join(&run, &connect, client)?;
            println!("client {} trained {} rounds ({})", summary.client_id, summary.rounds, summary.stop_reason);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    configure_threads();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
