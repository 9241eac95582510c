use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use win_denoise::commands;
use win_denoise::config::{KeyValues, RunConfig};
use win_denoise::metrics::format_db;
use win_denoise::Error;

#[derive(Parser)]
#[command(name = "win", version, about = "Train and run WIN5-family denoisers")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file (flat `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus per-epoch log.
    Train,
    /// Denoise images with a checkpoint.
    Denoise,
    /// Corrupt clean images, denoise them and report PSNR/SSIM.
    Eval,
    /// Train one model per depth/width/kernel combination.
    Sweep,
    /// Compare models trained on a frozen vs fresh noise realization.
    DiagnoseSeed,
    /// Compare pixel histograms of noisy images across noise levels.
    Histogram,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let (mut kv, base) = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            let base = path.parent().map(PathBuf::from).unwrap_or_default();
            (KeyValues::parse(&text)?, base)
        }
        None => (KeyValues::default(), PathBuf::from(".")),
    };
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        kv.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        kv.set("seed", seed.to_string())?;
    }
    let mut cfg = RunConfig::from_key_values(&kv, &base)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Train => {
            let r = commands::cmd_train(&cfg)?;
            if let Some(last) = r.records.last() {
                println!("final train loss {:.6e}, val PSNR {} dB", last.train_loss, format_db(last.val_psnr));
            }
            println!("checkpoint: {}\nlog: {}", r.checkpoint.display(), r.log.display());
        }
        Command::Denoise => {
            let r = commands::cmd_denoise(&cfg)?;
            for p in &r.outputs {
                println!("{}", p.display());
            }
            if let Some(q) = r.quality {
                print!("{}", q.table());
            }
        }
        Command::Eval => print!("{}", commands::cmd_eval(&cfg)?.table()),
        Command::Sweep => {
            let r = commands::cmd_sweep(&cfg)?;
            print!("{}", std::fs::read_to_string(&r.summary).map_err(|e| Error::Io { path: r.summary.clone(), source: e })?);
        }
        Command::DiagnoseSeed => print!("{}", commands::cmd_diagnose_seed_flaw(&cfg)?.text),
        Command::Histogram => {
            let r = commands::cmd_histogram(&cfg)?;
            let report = cfg.out_dir.join("histogram_report.txt");
            print!("{}", std::fs::read_to_string(&report).map_err(|e| Error::Io { path: report, source: e })?);
            let _ = r;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
