use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use innae::checkpoint;
use innae::data::{load_split, Split};
use innae::experiment::{self, ExperimentConfig, MetricsRow};
use innae::gradcheck;
use innae::models::DatasetKind;

#[derive(Parser)]
#[command(name = "innae", version, about = "Train and evaluate INN and classical autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics.csv, config.txt and a checkpoint.
    Train(RunFlags),
    /// Train one model per bottleneck size (`--bottleneck 4,8,12`).
    Sweep(RunFlags),
    /// Mean test L1 of a checkpoint over the full test split.
    Eval(CheckpointFlags),
    /// Write input, reconstruction and difference grids for test images.
    DumpGrids {
        #[command(flatten)]
        flags: CheckpointFlags,
        /// Number of test images.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Seed choosing the images.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "grids")]
        out: PathBuf,
    },
    /// Finite-difference check of every autodiff op and the INN loss.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

/// Flags mirroring the config file keys. Unset flags fall back to the
/// config file, then to the reference hyperparameters.
#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    bottleneck: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated 0-based epochs, or `none`.
    #[arg(long)]
    milestones: Option<String>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Soft clamp magnitude, or `off`.
    #[arg(long)]
    clamp: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training images to use; 0 keeps the full split.
    #[arg(long)]
    subset: Option<usize>,
    /// Test images to use; 0 keeps the full split.
    #[arg(long)]
    test_subset: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointFlags {
    /// Directory written by `train` (its `checkpoint` subdirectory).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl RunFlags {
    fn overrides(&self, bottleneck: Option<&str>) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_owned(), v));
            }
        };
        push("dataset", self.dataset.clone());
        push("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string()));
        push("model", self.model.clone());
        push("bottleneck", bottleneck.map(str::to_owned));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("milestones", self.milestones.clone());
        push("weight_decay", self.weight_decay.map(|v| v.to_string()));
        push("clamp", self.clamp.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("subset", self.subset.map(|v| v.to_string()));
        push("test_subset", self.test_subset.map(|v| v.to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        out
    }

    fn config(&self, bottleneck: Option<&str>) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), &self.overrides(bottleneck))?;
        if cfg.data_dir.is_none() {
            cfg.data_dir = env_data_dir(cfg.dataset);
        }
        Ok(cfg)
    }
}

/// `INNAE_MNIST_DIR` or `INNAE_CIFAR_DIR`.
fn env_data_dir(dataset: DatasetKind) -> Option<PathBuf> {
    let var = match dataset {
        DatasetKind::Mnist => "INNAE_MNIST_DIR",
        DatasetKind::Cifar10 => "INNAE_CIFAR_DIR",
    };
    std::env::var_os(var).map(PathBuf::from)
}

fn print_row(r: &MetricsRow) {
    let mmd = r.mmd.map_or(String::new(), |m| format!(" mmd {m:.5}"));
    println!(
        "{} {} k={} epoch {} lr {:.0e}: train_l1 {:.5} test_l1 {:.5} zero_pad_l2 {:.5}{mmd} ({:.1}s)",
        r.dataset, r.model, r.k, r.epoch, r.lr, r.train_l1, r.test_l1, r.zero_pad_l2, r.wall_seconds
    );
}

fn parse_ks(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|k| k.trim().parse().with_context(|| format!("invalid bottleneck {k:?}")))
        .collect()
}

fn load_test(checkpoint_dir: &Path, data_dir: Option<&Path>) -> Result<innae::data::Dataset> {
    let manifest = checkpoint_dir.join(checkpoint::MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let spec = checkpoint::spec_from_manifest(&checkpoint::parse_key_values(&text, &manifest)?)?;
    let dir = match data_dir.map(Path::to_path_buf).or_else(|| env_data_dir(spec.dataset)) {
        Some(d) => d,
        None => bail!("no data directory: pass --data-dir"),
    };
    Ok(load_split(spec.dataset, &dir, Split::Test)?)
}

/// Accepts either a run directory or its checkpoint subdirectory.
fn checkpoint_dir(p: &Path) -> PathBuf {
    let nested = p.join(experiment::CHECKPOINT_DIR);
    if nested.join(checkpoint::MANIFEST_FILE).exists() {
        nested
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(flags) => {
            let cfg = flags.config(flags.bottleneck.as_deref())?;
            let (train, test) = experiment::load_data(&cfg)?;
            let run = experiment::train_to(&cfg, &train, &test, &cfg.out)?;
            for r in &run.rows {
                print_row(r);
            }
            println!("wrote {}", cfg.out.display());
        }
        Command::Sweep(flags) => {
            let ks = match &flags.bottleneck {
                Some(list) => parse_ks(list)?,
                None => Vec::new(),
            };
            let base = flags.config(ks.first().map(|k| k.to_string()).as_deref())?;
            let ks = if ks.is_empty() { base.dataset.default_bottlenecks().to_vec() } else { ks };
            let result = experiment::sweep(&base, &ks)?;
            for r in &result.rows {
                print_row(r);
            }
            for f in &result.fairness {
                if !f.holds {
                    eprintln!(
                        "warning: k={}: {} has {} parameters, fewer than the INN's {}",
                        f.k, f.classical_model, f.classical_params, f.inn_params
                    );
                }
            }
            for (k, e) in &result.failures {
                eprintln!("k={k} failed: {e}");
            }
            println!("wrote {}", base.out.join(experiment::SWEEP_FILE).display());
            return Ok(result.failures.is_empty());
        }
        Command::Eval(flags) => {
            let dir = checkpoint_dir(&flags.checkpoint);
            let test = load_test(&dir, flags.data_dir.as_deref())?;
            let l1 = experiment::eval_checkpoint(&dir, &test, 500)?;
            println!("test_l1 {l1}");
        }
        Command::DumpGrids { flags, n, seed, out } => {
            let dir = checkpoint_dir(&flags.checkpoint);
            let test = load_test(&dir, flags.data_dir.as_deref())?;
            let (_, model) = checkpoint::load::<f32>(&dir)?;
            for p in experiment::dump_grids(&model, &test, n, seed, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Gradcheck { tolerance } => {
            let mut ok = true;
            for r in gradcheck::suite()? {
                let pass = r.max_rel_error < tolerance;
                ok &= pass;
                println!("{:<22} {:.3e} {}", r.name, r.max_rel_error, if pass { "ok" } else { "FAIL" });
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
