mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mednns::{Config, Error, LossSet, ZooPolicy};

/// Supernet model zoo, meta-space training and retrieval.
#[derive(Debug, Parser)]
#[command(name = "mednns", version)]
struct Cli {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Emit tables as CSV instead of aligned text.
    #[arg(long, global = true)]
    csv: bool,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset family.
    GenData {
        /// Family spec (TOML, same keys as the `[family]` section).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one supernet on a dataset.
    TrainSupernet {
        #[arg(long)]
        dataset: PathBuf,
        /// Search space (TOML, same keys as the `[space]` section).
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract subnetworks from trained supernets into a zoo manifest.
    BuildZoo {
        /// Directory of supernet checkpoints (`<dataset-id>.mnw`).
        #[arg(long)]
        supernets: PathBuf,
        /// Directory of dataset files (`<dataset-id>.mnds`).
        #[arg(long)]
        data: PathBuf,
        /// `all`, `maximal` or `sample:<n>`.
        #[arg(long)]
        policy: Option<ZooPolicy>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Correlate inherited against scratch accuracy on a zoo subset.
    AuditRank {
        #[arg(long)]
        zoo: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        data: PathBuf,
        /// Also write the manifest with scratch accuracies filled in.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the meta-space on a zoo and write it with its model index.
    TrainMetaspace {
        #[arg(long)]
        zoo: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of perf, rank, fid, contrastive.
        #[arg(long)]
        losses: Option<LossSet>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank zoo models for a new dataset.
    Query {
        #[arg(long)]
        metaspace: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        /// Fine-tune the candidates and select by validation accuracy.
        #[arg(long)]
        finetune: bool,
    },
    /// Leave-one-dataset-out benchmark over the family.
    EvalLoo {
        /// Family spec (TOML, same keys as the `[family]` section).
        #[arg(long)]
        family: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Directory for every artifact and the report tables.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FID between two dataset files in the frozen feature space.
    Fid {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

fn run(cli: Cli) -> mednns::Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if cli.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let Some(command) = cli.command else {
        return Err(Error::InvalidConfig("no subcommand given (see --help)".into()));
    };
    let out = commands::Output { csv: cli.csv };
    match command {
        Command::GenData { spec, out: dir, seed } => commands::gen_data(&cfg, spec.as_deref(), &dir, seed, &out),
        Command::TrainSupernet {
            dataset,
            space,
            out: path,
            seed,
        } => commands::train_supernet(&cfg, &dataset, space.as_deref(), &path, seed, &out),
        Command::BuildZoo {
            supernets,
            data,
            policy,
            out: path,
            seed,
        } => commands::build_zoo(&cfg, &supernets, &data, policy, &path, seed, &out),
        Command::AuditRank {
            zoo,
            k,
            data,
            out: path,
            seed,
        } => commands::audit_rank(&cfg, &zoo, k, &data, path.as_deref(), seed, &out),
        Command::TrainMetaspace {
            zoo,
            data,
            losses,
            out: path,
            seed,
        } => commands::train_metaspace(&cfg, &zoo, &data, losses, &path, seed, &out),
        Command::Query {
            metaspace,
            dataset,
            topk,
            finetune,
        } => commands::query(&cfg, &metaspace, &dataset, topk, finetune, &out),
        Command::EvalLoo { family, seeds, out: dir } => commands::eval_loo(&cfg, family.as_deref(), seeds, dir.as_deref(), &out),
        Command::Fid { a, b } => commands::fid(&cfg, &a, &b),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("error: {first}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
