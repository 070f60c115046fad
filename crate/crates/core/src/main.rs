use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deqdet::decoder::{load_checkpoint, save_checkpoint, Decoder};
use deqdet::grad::EstimatorKind;
use deqdet::synth::{generate_dataset, load_dataset, save_dataset};
use deqdet::trainer::{
    bench_grad, eval_spec, evaluate, parse_estimator, train_spec, TrainConfig, TrainError, Trainer, CSV_HEADER,
};

#[derive(Parser)]
#[command(name = "deqdet", version, about = "Deep-equilibrium query decoder on synthetic detection scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// ffn, rnn or deq.
    #[arg(long)]
    mode: Option<String>,
    /// exact, jfb or neumann:k.
    #[arg(long)]
    estimator: Option<String>,
    /// Further overrides as `--key=value`.
    #[arg(allow_hyphen_values = true, trailing_var_arg = true, value_name = "--key=value")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.csv, config.txt and checkpoint.bin to --out.
    Train {
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Training dataset file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the held-out set or a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare gradient estimators against the exact implicit gradient.
    BenchGrad {
        /// Checkpoint to benchmark; a fresh decoder otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        /// Neumann unroll depths, comma separated.
        #[arg(long, default_value = "1,2,4,8")]
        ks: String,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a dataset file.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        /// Write the held-out split instead of the training split.
        #[arg(long)]
        eval: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn build_config(base: Option<&str>, common: &Common) -> Result<TrainConfig, Box<dyn std::error::Error>> {
    let mut cfg = TrainConfig::default();
    if let Some(text) = base {
        cfg.apply_text(text)?;
    }
    if let Some(path) = &common.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    for o in &common.overrides {
        let kv = o.strip_prefix("--").ok_or_else(|| format!("expected --key=value, got `{o}`"))?;
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected --key=value, got `{o}`"))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &common.mode {
        cfg.set("mode", mode)?;
    }
    if let Some(e) = &common.estimator {
        cfg.set("estimator", e)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Train { out, data, common } => {
            let cfg = build_config(None, &common)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            let mut trainer = match data {
                Some(path) => {
                    let train = load_dataset(&path)?;
                    let decoder = Decoder::new(cfg.decoder_config(), cfg.seed)?;
                    let eval = generate_dataset(&eval_spec(&cfg))?;
                    Trainer::with_parts(cfg.clone(), decoder, train, eval)?
                }
                None => Trainer::new(cfg.clone())?,
            };
            let mut csv = BufWriter::new(File::create(out.join("metrics.csv"))?);
            writeln!(csv, "{CSV_HEADER}")?;
            let mut io_err = None;
            let summary = trainer.run(|r| {
                if let Err(e) = writeln!(csv, "{}", r.csv_row()) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(TrainError::Io(e).into());
            }
            csv.flush()?;
            save_checkpoint(&out.join("checkpoint.bin"), &trainer.decoder, &cfg.to_text())?;
            eprintln!("{} steps, final loss {:.4}", summary.steps, summary.records.last().map_or(f64::NAN, |r| r.loss));
            println!("AP50={:.4} AP={:.4}", summary.eval.ap.ap50, summary.eval.ap.ap);
        }
        Command::Eval { checkpoint, data, common } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = build_config(Some(&ck.config), &common)?;
            let mut decoder = Decoder::new(cfg.decoder_config(), cfg.seed)?;
            decoder.load_tensors(&ck.tensors)?;
            let dataset = match data {
                Some(path) => load_dataset(&path)?,
                None => generate_dataset(&eval_spec(&cfg))?,
            };
            let e = evaluate(&decoder, &cfg, &dataset)?;
            eprintln!("mean residual {:.3e}", e.residual);
            println!("AP50={:.4} AP={:.4}", e.ap.ap50, e.ap.ap);
        }
        Command::BenchGrad { checkpoint, scenes, ks, common } => {
            let base = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let cfg = build_config(base.as_ref().map(|c| c.config.as_str()), &common)?;
            let mut decoder = Decoder::new(cfg.decoder_config(), cfg.seed)?;
            if let Some(ck) = &base {
                decoder.load_tensors(&ck.tensors)?;
            }
            let mut estimators = vec![EstimatorKind::Jfb];
            for k in ks.split(',').filter(|s| !s.trim().is_empty()) {
                estimators.push(parse_estimator(&format!("neumann:{}", k.trim()))?);
            }
            let mut spec = eval_spec(&cfg);
            spec.num_scenes = scenes;
            let dataset = generate_dataset(&spec)?;
            let rows = bench_grad(&decoder, &cfg, &dataset, &estimators)?;
            println!("{:<12} {:>10} {:>10} {:>12} {:>12}", "estimator", "cosine", "rel_error", "norm", "us/scene");
            for r in rows {
                println!("{:<12} {:>10.6} {:>10.3e} {:>12.6e} {:>12.1}", r.estimator, r.cosine, r.rel_error, r.norm, r.micros);
            }
        }
        Command::MakeData { out, eval, common } => {
            let cfg = build_config(None, &common)?;
            let spec = if eval { eval_spec(&cfg) } else { train_spec(&cfg) };
            let dataset = generate_dataset(&spec)?;
            save_dataset(&dataset, &out)?;
            let objects: usize = dataset.scenes.iter().map(|s| s.objects.len()).sum();
            println!("wrote {} scenes, {objects} objects to {}", dataset.scenes.len(), out.display());
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
