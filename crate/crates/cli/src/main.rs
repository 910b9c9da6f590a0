use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crformer::checkpoint::Checkpoint;
use crformer::config::{Config, GenDataSpec, Precision};
use crformer::data::{gen_dataset, load_dataset, save_dataset, write_pgm, SampleRecord};
use crformer::harness::{ablate, gradcheck, Axis};
use crformer::metrics::{binarize, MetricReport};
use crformer::train::{evaluate, train_model, LogRecord, Splits, TrainOutcome};
use crformer::{Error, Model, Scalar};

const CHECKPOINT_FILE: &str = "model.crfk";
const LOG_FILE: &str = "log.jsonl";
const REPORT_FILE: &str = "report.json";
const CONFIG_FILE: &str = "config.json";

#[derive(Parser)]
#[command(name = "crformer", about = "Referring segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint, the run log and a final report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on an exported dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train every cell of one ablation axis and write a CSV table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// One of nq, layers, omega_re, components.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
        /// Runs per cell, with init seeds counting up from the configured one.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Finite-difference check of the full loss gradient.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write predicted binary masks for every sample of a dataset.
    ExportMasks {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_usage() {
        2
    } else if e.is_numeric() {
        3
    } else {
        1
    }
}

/// Unreadable or malformed inputs named on the command line are usage errors.
fn usage(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(_) | Error::Json(_) => Error::Usage(format!("{}: {e}", path.display())),
        other => other,
    }
}

fn load_config(path: &Path) -> crformer::Result<Config> {
    Config::load(path).map_err(|e| usage(path, e))
}

fn load_checkpoint(path: &Path) -> crformer::Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(_) => usage(path, e),
        other => other,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> crformer::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run(command: Command) -> crformer::Result<()> {
    match command {
        Command::GenData { spec, out } => {
            let s = GenDataSpec::load(&spec).map_err(|e| usage(&spec, e))?;
            let samples = gen_dataset(s.seed, s.count, &s.data)?;
            save_dataset(&out, &samples)?;
            eprintln!("wrote {} samples to {}", samples.len(), out.display());
            Ok(())
        }
        Command::Train { config, out } => {
            let c = load_config(&config)?;
            match c.precision {
                Precision::F32 => train_cmd::<f32>(&c, &out),
                Precision::F64 => train_cmd::<f64>(&c, &out),
            }
        }
        Command::Eval { ckpt, data, report } => {
            let ck = load_checkpoint(&ckpt)?;
            let samples = load_dataset(&data, ck.config.data.max_len).map_err(|e| usage(&data, e))?;
            let r = match ck.config.precision {
                Precision::F32 => eval_cmd::<f32>(&ck, &samples)?,
                Precision::F64 => eval_cmd::<f64>(&ck, &samples)?,
            };
            write_json(&report, &r)?;
            println!("miou {:.4}", r.miou);
            Ok(())
        }
        Command::Ablate { config, axis, out, seeds } => {
            let c = load_config(&config)?;
            let axis: Axis = axis.parse()?;
            if seeds == 0 {
                return Err(Error::Usage("--seeds must be at least 1".into()));
            }
            let seed_list: Vec<u64> = (0..seeds).map(|i| c.train.init_seed.wrapping_add(i)).collect();
            let table = ablate(&c, axis, &seed_list, |row| {
                eprintln!("{} seed {} miou {:.4}", row.labels.join(" "), row.seed, row.report.miou);
            })?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, table.to_csv())?;
            Ok(())
        }
        Command::Gradcheck { config } => {
            let c = load_config(&config)?;
            let r = gradcheck(&c)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            if r.pass {
                Ok(())
            } else {
                Err(Error::NonFinite(format!(
                    "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
                    r.max_rel_error, r.tolerance
                )))
            }
        }
        Command::ExportMasks { ckpt, data, out } => {
            let ck = load_checkpoint(&ckpt)?;
            let samples = load_dataset(&data, ck.config.data.max_len).map_err(|e| usage(&data, e))?;
            match ck.config.precision {
                Precision::F32 => export_cmd::<f32>(&ck, &samples, &out),
                Precision::F64 => export_cmd::<f64>(&ck, &samples, &out),
            }
        }
    }
}

fn train_cmd<T: Scalar>(config: &Config, out: &Path) -> crformer::Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), config.to_json())?;
    let model = Model::<T>::new(config)?;
    let splits = Splits::generate(config)?;
    let mut log = fs::File::create(out.join(LOG_FILE))?;
    let mut io_err = None;
    let outcome: TrainOutcome<T> = train_model(model, &splits, |r| {
        if let LogRecord::Eval { epoch, train, val, .. } = r {
            eprintln!(
                "epoch {epoch} train miou {:.4}{}",
                train.miou,
                val.as_ref().map(|v| format!(" val miou {:.4}", v.miou)).unwrap_or_default()
            );
        }
        let line = serde_json::to_string(r).expect("log record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    Checkpoint::capture(&outcome.model, &outcome.optimizer).save(&out.join(CHECKPOINT_FILE))?;
    if let Some((train, val)) = outcome.log.last_eval() {
        let report = serde_json::json!({ "train": train, "val": val });
        write_json(&out.join(REPORT_FILE), &report)?;
    }
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn eval_cmd<T: Scalar>(ck: &Checkpoint, samples: &[SampleRecord]) -> crformer::Result<MetricReport> {
    let (model, _) = ck.restore::<T>()?;
    evaluate(&model, samples)
}

fn export_cmd<T: Scalar>(ck: &Checkpoint, samples: &[SampleRecord], out: &Path) -> crformer::Result<()> {
    let (model, _) = ck.restore::<T>()?;
    fs::create_dir_all(out)?;
    for (id, s) in samples.iter().enumerate() {
        let logits = model.predict(&s.image, &s.tokens)?;
        write_pgm(&out.join(format!("{id:03}.pgm")), &binarize(&logits))?;
    }
    eprintln!("wrote {} masks to {}", samples.len(), out.display());
    Ok(())
}
