//! `gmconv` command-line front end.
//!
//! Exit codes: 0 success, 1 training divergence, 2 usage or configuration
//! error, 3 data, file or checkpoint error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use gmconv_core::checkpoint::Checkpoint;
use gmconv_core::data::{load_dataset, DatasetId, DatasetSource, Split};
use gmconv_core::erf::{dump_layer_masks, erf_radius, estimate_erf, ErfInput};
use gmconv_core::mask::{GaussianMask, MaskParams};
use gmconv_core::train::{evaluate, TrainConfig, Trainer};
use gmconv_core::Error;

#[derive(Parser)]
#[command(name = "gmconv", version, about = "Gaussian-mask convolution toolkit")]
struct Cli {
    /// Seed for every random draw the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Cifar10Bin,
    MnistIdx,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report accuracy of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root directory.
        #[arg(long)]
        data: PathBuf,
        /// Dataset format; defaults to the one in the checkpoint's config.
        #[arg(long, value_enum)]
        dataset: Option<DataKind>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        top5: bool,
    },
    /// Bake static Gaussian masks into plain convolution weights.
    Fold {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the effective receptive field of one layer.
    Erf {
        #[arg(long)]
        ckpt: PathBuf,
        /// Top-level layer index.
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Side of the square noise probe.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write every GMConv layer's mask as CSV and PGM plus a manifest.
    MaskDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one mask; the extension of --out picks CSV or PGM.
    MaskGen {
        #[arg(long)]
        sigma: f64,
        /// Vertical sigma; makes the mask elliptic.
        #[arg(long)]
        sigma2: Option<f64>,
        #[arg(long)]
        k: usize,
        /// Output file; CSV on stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged(_) => 1,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) | Error::Unsupported(_) | Error::Json(_) => 2,
        Error::Parse { .. } | Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => 3,
    }
}

fn load_config(path: &Path) -> Result<TrainConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    TrainConfig::from_json(&text)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, resume, out } => {
            let mut config = load_config(&config)?;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            if out.is_some() {
                config.output = out;
            }
            let mut trainer = match resume {
                Some(path) => Trainer::resume(config, Checkpoint::load(&path)?)?,
                None => Trainer::new(config)?,
            };
            trainer.run()?;
            if let Some(last) = trainer.history().last() {
                println!(
                    "epoch {} train_loss {} train_acc {} test_acc {}",
                    last.epoch, last.train_loss, last.train_acc, last.test_acc
                );
            }
        }
        Command::Eval { ckpt, data, dataset, split, top5 } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mut src = match (&ck.config, dataset) {
                (Some(c), None) => c.dataset.clone(),
                (_, kind) => {
                    let id = match kind.unwrap_or(DataKind::Cifar10Bin) {
                        DataKind::Cifar10Bin => DatasetId::Cifar10Bin,
                        DataKind::MnistIdx => DatasetId::MnistIdx,
                        DataKind::Synthetic => DatasetId::Synthetic,
                    };
                    DatasetSource { id, ..DatasetSource::cifar10(&data) }
                }
            };
            src.root = data;
            if let Some(seed) = cli.seed {
                src.synthetic.seed = seed;
            }
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let ds = load_dataset(&src, split)?;
            let acc = evaluate(&ck.model, &ds, top5)?;
            match acc.top5 {
                Some(t5) => println!("top1 {} top5 {} n {}", acc.top1, t5, acc.total),
                None => println!("top1 {} n {}", acc.top1, acc.total),
            }
        }
        Command::Fold { ckpt, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let folded = ck.model.fold()?;
            info!("folded {} -> {} parameters", ck.model.num_params(), folded.num_params());
            // optimizer state no longer matches the folded parameter list
            Checkpoint { model: folded, velocity: Vec::new(), ..ck }.save(&out)?;
        }
        Command::Erf { ckpt, layer, samples, size, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let source = ErfInput::Noise { height: size, width: size, seed: cli.seed.unwrap_or(0) };
            let map = estimate_erf(&ck.model, layer, samples, &source)?;
            map.write_dir(&out)?;
            println!("radius {}", erf_radius(&map)?);
        }
        Command::MaskDump { ckpt, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let manifest = dump_layer_masks(&ck.model, &out)?;
            println!("{} masks written to {}", manifest.layers.len(), out.display());
        }
        Command::MaskGen { sigma, sigma2, k, out } => {
            let params = match sigma2 {
                Some(s2) => MaskParams::elliptic(sigma, s2, k),
                None => MaskParams::circular(sigma, k),
            };
            let mask = GaussianMask::new(params)?;
            match out {
                Some(path) => mask.write(&path)?,
                None => print!("{}", mask.to_csv()),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
