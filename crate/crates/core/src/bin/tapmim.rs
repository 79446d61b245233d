use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tapmim::cli;
use tapmim::config::RunConfig;
use tapmim::Error;

#[derive(Parser)]
#[command(name = "tapmim", version, about = "Deeply supervised masked image modeling on small ViTs")]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Tap blocks, e.g. `2,3`, or `none`.
    #[arg(long, global = true)]
    taps: Option<String>,
    /// `progressive`, `none`, or one ratio per decoder.
    #[arg(long, global = true)]
    alpha_schedule: Option<String>,
    #[arg(long, global = true)]
    mask_ratio: Option<f32>,
    #[arg(long, global = true)]
    freeze_first_k: Option<usize>,
    #[arg(long, global = true)]
    reinit_last_k: Option<usize>,
    /// One decoder shared by every tap and the final block.
    #[arg(long, global = true)]
    shared_decoder: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as PPM files plus labels.tsv.
    GenData,
    /// Pre-train (or resume) and write checkpoint.dmim and log.csv.
    Pretrain,
    /// Fine-tune a classifier on the final tokens.
    Finetune,
    /// Linear probes at `probe_layers`.
    Probe,
    /// CKA profile, head similarity and validation loss.
    Analyze,
    /// Write masked inputs and their reconstructions as PPM images.
    Reconstruct,
}

fn load(args: &Args) -> Result<RunConfig, Error> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("missing --config".into()))?;
    let mut ov: Vec<(&str, String)> = Vec::new();
    if let Some(s) = args.seed {
        ov.push(("seed", s.to_string()));
    }
    if let Some(o) = &args.out {
        let abs = std::env::current_dir().map_err(|e| Error::io(".", e))?.join(o);
        ov.push(("out_dir", abs.display().to_string()));
    }
    if let Some(t) = &args.taps {
        ov.push(("taps", t.clone()));
    }
    if let Some(a) = &args.alpha_schedule {
        ov.push(("alpha_schedule", a.clone()));
    }
    if let Some(m) = args.mask_ratio {
        ov.push(("mask_ratio", m.to_string()));
    }
    if let Some(k) = args.freeze_first_k {
        ov.push(("freeze_first_k", k.to_string()));
    }
    if let Some(k) = args.reinit_last_k {
        ov.push(("reinit_last_k", k.to_string()));
    }
    if args.shared_decoder {
        ov.push(("shared_decoder", "true".into()));
    }
    RunConfig::from_file_with(path, &ov)
}

fn run(args: &Args) -> Result<(), Error> {
    let cfg = load(args)?;
    let written = match args.command {
        Command::GenData => cli::cmd_gen_data(&cfg)?,
        Command::Pretrain => cli::cmd_pretrain(&cfg)?,
        Command::Finetune => {
            let (acc, w) = cli::cmd_finetune(&cfg)?;
            println!("accuracy {acc:.4}");
            w
        }
        Command::Probe => {
            let (rows, w) = cli::cmd_probe(&cfg)?;
            for (layer, acc) in rows {
                println!("layer {layer} accuracy {acc:.4}");
            }
            w
        }
        Command::Analyze => cli::cmd_analyze(&cfg)?.1,
        Command::Reconstruct => cli::cmd_reconstruct(&cfg)?,
    };
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
