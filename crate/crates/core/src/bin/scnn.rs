use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use scnn::data::cifar::CifarVariant;
use scnn::harness::{
    exit_code, experiment_table, ExperimentConfig, Pipeline, Target, TrainOutcome, CONFIG_REFERENCE, DATA_ROOT_ENV,
    EXPERIMENT_CSV, EXPERIMENT_TABLE,
};
use scnn::synthetic::{write_cifar_fixture, write_stl10_fixture, StlFixture};
use scnn::{Error, Result};

const CONFIG_HELP: &str = concat!(
    "Configuration keys and their defaults:\n\n",
    include_str!("../harness/config_reference.toml")
);

#[derive(Parser, Debug)]
#[command(name = "scnn", version, about = "Surrogate-class CNN feature learning pipeline", after_long_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file; see `scnn --help` for every key.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (1 = bitwise reproducible, 0 = all cores). Overrides the config.
    #[arg(long)]
    threads: Option<usize>,
    /// Master seed. Overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Selective search over the unlabeled images.
    Proposals(Common),
    /// Crops the top-C images' proposals into the surrogate dataset.
    Surrogate(Common),
    /// Trains the network on the surrogate dataset, resuming if interrupted.
    Train {
        #[command(flatten)]
        common: Common,
        /// Stop after this many epochs; a later run continues from the checkpoint.
        #[arg(long)]
        epoch_budget: Option<usize>,
    },
    /// Extracts pooled features for the STL-10 train and test splits.
    Extract(Common),
    /// Evaluates a linear SVM with the STL-10 fold protocol and writes the report.
    Svm(Common),
    /// Runs every stage for each C and architecture in [experiment].
    Experiment(Common),
    /// Linear SVM on frozen features of CIFAR-10 or CIFAR-100.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        target: TargetArg,
    },
    /// Prints every config key with its default.
    Config,
    /// Writes synthetic datasets in the STL-10 and CIFAR binary layouts.
    Fixture {
        /// Destination root; defaults to $SCNN_DATA_ROOT.
        #[arg(long, env = DATA_ROOT_ENV)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        unlabeled: usize,
        #[arg(long, default_value_t = 1000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TargetArg {
    Cifar10,
    Cifar100,
}

fn pipeline(c: &Common) -> Result<Pipeline> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Pipeline::new(cfg)
}

fn cached(flag: bool) -> &'static str {
    if flag {
        " (cached)"
    } else {
        ""
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Proposals(c) => {
            let out = pipeline(&c)?.proposals()?;
            println!("proposals{}: {}", cached(out.cached), out.stats.summary());
        }
        Command::Surrogate(c) => {
            let p = pipeline(&c)?;
            let out = p.surrogate(p.config().surrogate.classes)?;
            println!(
                "surrogate{}: {} classes, {} examples{}",
                cached(out.cached),
                out.classes,
                out.examples,
                if out.truncated { " (fewer images than requested classes)" } else { "" }
            );
        }
        Command::Train { common, epoch_budget } => {
            let p = pipeline(&common)?;
            let cfg = p.config();
            match p.train(cfg.surrogate.classes, &cfg.network.preset, epoch_budget)? {
                TrainOutcome::Cached => println!("train (cached)"),
                TrainOutcome::Paused { epoch } => println!("train: paused after epoch {epoch}; rerun to continue"),
                TrainOutcome::Finished { log, resumed_from } => {
                    if let Some(e) = resumed_from {
                        println!("train: resumed at epoch {e}");
                    }
                    if let Some(last) = log.epochs.last() {
                        println!("train: {} epochs, final mean loss {:.4}", log.epochs.len(), last.mean_loss);
                    }
                }
            }
        }
        Command::Extract(c) => {
            let p = pipeline(&c)?;
            let cfg = p.config();
            let out = p.extract(cfg.surrogate.classes, &cfg.network.preset)?;
            println!(
                "extract{}: {} train rows, {} test rows, feature dim {}",
                cached(out.cached),
                out.train_rows,
                out.test_rows,
                out.feature_dim
            );
        }
        Command::Svm(c) => {
            let p = pipeline(&c)?;
            let cfg = p.config();
            let out = p.svm(cfg.surrogate.classes, &cfg.network.preset)?;
            print!("{}", out.report.to_text());
        }
        Command::Experiment(c) => {
            let p = pipeline(&c)?;
            let rows = p.experiment()?;
            print!("{}", experiment_table(&rows));
            println!(
                "written to {} and {}",
                p.path(EXPERIMENT_TABLE).display(),
                p.path(EXPERIMENT_CSV).display()
            );
        }
        Command::Transfer { common, target } => {
            let target = match target {
                TargetArg::Cifar10 => Target::Cifar10,
                TargetArg::Cifar100 => Target::Cifar100,
            };
            let out = pipeline(&common)?.transfer(target)?;
            print!("{}", out.report.to_text());
        }
        Command::Config => print!("{CONFIG_REFERENCE}"),
        Command::Fixture {
            out,
            unlabeled,
            train,
            test,
            seed,
        } => {
            let stl = StlFixture {
                unlabeled,
                train,
                test,
                seed,
                fold_size: (train / 5).max(1),
                ..StlFixture::default()
            };
            write_stl10_fixture(&out.join("stl10_binary"), &stl)?;
            write_cifar_fixture(&out.join("cifar-10-batches-bin"), CifarVariant::Cifar10, train, test, seed)?;
            write_cifar_fixture(&out.join("cifar-100-binary"), CifarVariant::Cifar100, train, test, seed)?;
            println!("synthetic datasets written under {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Stale { .. } = e {
                eprintln!("rerun the upstream stage to rebuild it");
            }
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
