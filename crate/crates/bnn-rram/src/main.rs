use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use bnn_rram::bench::bench_kernels;
use bnn_rram::config::{KeyValues, MaskPolicy};
use bnn_rram::harness::{self, SweepResult};
use bnn_rram::model_io::{load_model, save_model};
use bnn_rram::report::{rram_report, AccuracyFloor};
use bnn_rram::Result;

#[derive(Parser)]
#[command(
    name = "bnn-rram",
    version,
    about = "Binarized networks on error-prone RRAM weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn key_values(&self) -> Result<KeyValues> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::load(p)?,
            None => KeyValues::default(),
        };
        if let Some(d) = &self.data_dir {
            kv.set("data_dir", &d.to_string_lossy())?;
        }
        if let Some(s) = self.seed {
            kv.set("seed", &s.to_string())?;
        }
        for a in &self.set {
            kv.set_assignment(a)?;
        }
        Ok(kv)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it to a file.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        p_train: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output model file.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Test accuracy of a model under weight bit errors.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        p_test: f64,
    },
    /// Train and evaluate over a grid of bit error rates; writes CSV.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output CSV (overrides `output`).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Fraction of first hidden layer neurons with constant output.
    DeadNeurons {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        p_test: f64,
    },
    /// Cheapest RRAM programming condition meeting an accuracy floor.
    RramReport {
        /// Sweep CSV.
        #[arg(long)]
        csv: PathBuf,
        /// Absolute accuracy floor in percent.
        #[arg(long, required_unless_present = "drop", conflicts_with = "drop")]
        floor: Option<f64>,
        /// Floor in percentage points below each model's clean accuracy.
        #[arg(long)]
        drop: Option<f64>,
    },
    /// Packed kernel versus integer reference throughput.
    BenchKernels {
        #[arg(long, default_value_t = 256)]
        rows: usize,
        #[arg(long, default_value_t = 4096)]
        cols: usize,
        /// Minimum milliseconds per timing round.
        #[arg(long, default_value_t = 300)]
        millis: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            cfg,
            p_train,
            epochs,
            out,
        } => {
            let mut kv = cfg.key_values()?;
            if let Some(p) = p_train {
                kv.set("p_train", &p.to_string())?;
            }
            if let Some(e) = epochs {
                kv.set("epochs", &e.to_string())?;
            }
            let tc = kv.train_config()?;
            let data = kv.data_config()?;
            let (train, test) = harness::load_data(&data, true)?;
            let bits = train.expect("requested").binarized(tc.input_threshold)?;
            let cache = kv.get("cache_dir").map(PathBuf::from);
            let model = harness::train_cached(&bits, &tc, cache.as_deref(), |r| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  train acc {:.2}%  lr {:.2e}",
                    r.epoch + 1,
                    r.mean_loss,
                    100.0 * r.train_accuracy,
                    r.learning_rate
                );
            })?;
            save_model(&model, &out)?;
            let acc = harness::evaluate(&model, &test, 0.0, tc.seed)?;
            println!(
                "test accuracy {:.2}% ({} images), model written to {}",
                100.0 * acc,
                test.len(),
                out.display()
            );
        }
        Command::Eval { cfg, model, p_test } => {
            let kv = cfg.key_values()?;
            let data = kv.data_config()?;
            let policy: MaskPolicy = kv.sweep_config()?.mask_policy;
            let m = load_model(&model)?;
            let (_, test) = harness::load_data(&data, false)?;
            let bits = test.binarized(m.input_threshold())?;
            let e = harness::evaluate_bits(&m, &bits, p_test, data.seed, policy)?;
            println!(
                "accuracy {:.4} at p_test {p_test} ({} images)",
                e.accuracy,
                test.len()
            );
        }
        Command::Sweep { cfg, out } => {
            let mut kv = cfg.key_values()?;
            if let Some(o) = out {
                kv.set("output", &o.to_string_lossy())?;
            }
            let sc = kv.sweep_config()?;
            let result = harness::run_sweep(&sc, |line| eprintln!("{line}"))?;
            for f in &result.failures {
                eprintln!("p_train={} produced no model: {}", f.p_train, f.reason);
            }
            println!(
                "{} rows written to {}",
                result.rows.len(),
                sc.output.display()
            );
        }
        Command::DeadNeurons { cfg, model, p_test } => {
            let data = cfg.key_values()?.data_config()?;
            let m = load_model(&model)?;
            let (_, test) = harness::load_data(&data, false)?;
            let f = harness::dead_neuron_fraction(&m, &test, p_test, data.seed)?;
            println!(
                "dead first-layer neurons: {:.2}% at p_test {p_test}",
                100.0 * f
            );
        }
        Command::RramReport { csv, floor, drop } => {
            let sweep = SweepResult::read_csv(&csv)?;
            let floor = match (floor, drop) {
                (Some(f), _) => AccuracyFloor::Absolute(f / 100.0),
                (None, d) => {
                    AccuracyFloor::BelowClean(d.expect("clap requires --floor or --drop") / 100.0)
                }
            };
            println!("{}", rram_report(&sweep, floor)?);
        }
        Command::BenchKernels { rows, cols, millis } => {
            let b = bench_kernels(rows, cols, Duration::from_millis(millis), 1)?;
            println!("matrix {}x{}", b.rows, b.cols);
            println!("binary_matvec  {:>10.3} GMAC/s", b.packed_macs_per_s / 1e9);
            println!(
                "reference_dot  {:>10.3} GMAC/s",
                b.reference_macs_per_s / 1e9
            );
            println!("speedup        {:>10.1}x", b.speedup());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
