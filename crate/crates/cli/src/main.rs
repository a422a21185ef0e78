//! Command-line front end: data generation, training, evaluation and diagnostics.
//!
//! Exit codes: 0 on success, 1 for invalid arguments, configuration or I/O
//! problems, 2 for numeric failures (non-finite values, failed gradient checks).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mbmamba::checkpoint::Checkpoint;
use mbmamba::config::load_config;
use mbmamba::data::{generate_dataset, DatasetManifest, GenConfig, Split, MANIFEST_FILE};
use mbmamba::diagnostics::{channel_activation_report, gradcheck, Component, DEAD_CHANNEL_THRESHOLD};
use mbmamba::train::{evaluate, load_model, train, TrainConfig};
use mbmamba::{Error, Result};

#[derive(Parser)]
#[command(name = "mbmamba", version, about = "Image deblurring with memory-augmented state space decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blurred/sharp dataset with a manifest.
    GenData {
        /// Output directory (receives train/, val/ and manifest.jsonl).
        #[arg(long)]
        out: PathBuf,
        /// TOML file with generation settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a setting, e.g. `--set train=16` (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train a model; writes the run log and checkpoints to `out_dir`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Dataset manifest (overrides `manifest` in the config).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory (overrides `out_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from `out_dir/latest.ckpt` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Report PSNR/SSIM of a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val", value_parser = parse_split)]
        split: Split,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// losses, fcam, memvssm, decoder_block, end_to_end or all.
        #[arg(long, default_value = "all")]
        component: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-channel ReLU + average-pooled activations of a decoder block's MemVSSM output.
    ChannelReport {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Probe images are the blurred inputs of this manifest's split.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val", value_parser = parse_split)]
        split: Split,
        /// Decoder block index in execution order (coarsest stage first).
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long, default_value_t = DEAD_CHANNEL_THRESHOLD)]
        threshold: f64,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(format!("unknown split {s:?} (expected train or val)")),
    }
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData { out, config, overrides } => {
            let cfg: GenConfig = load_config(config.as_deref(), &overrides)?;
            let m = generate_dataset(&cfg, &out)?;
            println!(
                "wrote {} pairs and {}",
                m.records.len(),
                out.join(MANIFEST_FILE).display()
            );
        }
        Command::Train {
            config,
            overrides,
            manifest,
            out,
            resume,
        } => {
            let mut cfg: TrainConfig = load_config(config.as_deref(), &overrides)?;
            if let Some(m) = manifest {
                cfg.manifest = Some(m);
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let manifest_path = cfg
                .manifest
                .clone()
                .ok_or_else(|| Error::Config("no dataset manifest given (--manifest or `manifest`)".into()))?;
            let manifest = DatasetManifest::load(&manifest_path)?;
            let train_pairs = manifest.load_pairs(Split::Train)?;
            let val_pairs = manifest.load_pairs(Split::Val)?;
            let outcome = train(&cfg, &train_pairs, &val_pairs, resume)?;
            println!("{}", json(&serde_json::json!({
                "step": outcome.final_step,
                "train": outcome.train,
                "val": outcome.val,
                "out_dir": cfg.out_dir,
            })));
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
        } => {
            let (model, store) = load_model(&Checkpoint::load(&checkpoint)?)?;
            let pairs = load_split(&manifest, split)?;
            println!("{}", json(&evaluate(&model, &store, &pairs)?));
        }
        Command::Gradcheck { component, seed } => {
            let components = if component == "all" {
                Component::ALL.to_vec()
            } else {
                vec![component.parse()?]
            };
            let mut ok = true;
            for c in components {
                let report = gradcheck(c, seed)?;
                ok &= report.passed();
                println!("{}", json(&report));
                eprintln!(
                    "{c}: {} (max relative error {:.3e}, tolerance {:.0e})",
                    if report.passed() { "pass" } else { "FAIL" },
                    report.worst(),
                    report.tolerance
                );
            }
            if !ok {
                return Ok(ExitCode::from(2));
            }
        }
        Command::ChannelReport {
            checkpoint,
            manifest,
            split,
            block,
            threshold,
            out,
        } => {
            let (model, store) = load_model(&Checkpoint::load(&checkpoint)?)?;
            let probes: Vec<_> = load_split(&manifest, split)?.into_iter().map(|p| p.blurred).collect();
            let report = channel_activation_report(&model, &store, block, &probes, threshold)?;
            std::fs::write(&out, report.to_csv()).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            println!(
                "{}: {} channels, {} below {:e}; wrote {}",
                report.block_name,
                report.activations.len(),
                report.dead_channels,
                threshold,
                out.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_split(manifest: &Path, split: Split) -> Result<Vec<mbmamba::data::ImagePair>> {
    let pairs = DatasetManifest::load(manifest)?.load_pairs(split)?;
    if pairs.is_empty() {
        return Err(Error::Config(format!("{} has no {split} pairs", manifest.display())));
    }
    Ok(pairs)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
