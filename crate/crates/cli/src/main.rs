//! `dapnet` command-line entry point.
//!
//! Any option spelled as a dotted config key (`--train.epochs 3` or
//! `--tam.enabled=false`) is shorthand for `--set train.epochs=3`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dapnet::config::RunConfig;
use dapnet::eval::Protocol;
use dapnet::par::Parallelism;
use dapnet::pipeline;
use dapnet::{Error, ErrorKind, Result};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "dapnet", version, about = "Radar point-cloud action recognition toolkit")]
struct Cli {
    /// Run every computation on the calling thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ConfigArgs {
    /// TOML configuration file; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, `KEY=VALUE`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Ablation {
    /// Plain backbone: no Doppler split, no recalibration, no text head.
    Baseline,
    /// Doppler-guided reparameterization only.
    DgrOnly,
    /// Reparameterization plus motion-aware recalibration, no text head.
    MfrOnly,
    /// Every module on.
    Full,
}

impl Ablation {
    fn switches(self) -> [(&'static str, &'static str); 3] {
        let (d2r, mfr, tam) = match self {
            Ablation::Baseline => ("false", "false", "false"),
            Ablation::DgrOnly => ("true", "false", "false"),
            Ablation::MfrOnly => ("true", "true", "false"),
            Ablation::Full => ("true", "true", "true"),
        };
        [("d2r.enabled", d2r), ("mfr.enabled", mfr), ("tam.enabled", tam)]
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert one real source directory into clip archives and a manifest.
    Prep {
        /// Source name: radhar, mri or mmfi.
        #[arg(long)]
        source: String,
        /// Directory holding index.csv, the point files and, for segmented
        /// sources, segments.csv.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic multi-source benchmark.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for `--set synth.seed=N`.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Split a manifest, train, and write checkpoint, log and test report.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// random, c_sub, c_set or strict_cross_source.
        #[arg(long, default_value = "c_sub")]
        protocol: String,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for `--set train.epochs=N`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Seeds weights, densification and batch order at once.
        #[arg(long)]
        seed: Option<u64>,
        /// Module switches applied before `--set` overrides.
        #[arg(long, value_enum)]
        ablation: Option<Ablation>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on the test split of a protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "c_sub")]
        protocol: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write a bar chart of the report as SVG.
        #[arg(long)]
        plots: bool,
        /// Override `eval.*` keys of the stored configuration.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare two metric reports.
    Report {
        #[arg(long)]
        ours: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        /// Write the comparison here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the configuration key reference as markdown.
    Keys,
}

/// Rewrite `--a.b value` and `--a.b=value` into `--set a.b=value`.
fn expand_dotted(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let dotted = arg
            .strip_prefix("--")
            .filter(|name| name.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(name) if name.contains('=') => {
                out.push("--set".into());
                out.push(name.to_string());
            }
            Some(name) => {
                let value = it.next().unwrap_or_default();
                out.push("--set".into());
                out.push(format!("{name}={value}"));
            }
            None => out.push(arg),
        }
    }
    out
}

fn split_override(raw: &str) -> Result<(&str, &str)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not KEY=VALUE")))
}

fn load_config(args: &ConfigArgs, presets: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for (k, v) in presets {
        cfg.apply_override(k, v)?;
    }
    for raw in &args.overrides {
        let (k, v) = split_override(raw)?;
        cfg.apply_override(k, v)?;
    }
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mode = if cli.deterministic {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    match cli.command {
        Command::Prep { source, input, out } => {
            let (_, summary) = pipeline::prep(&input, &source, &out, mode)?;
            println!(
                "{source}: {} sequences, {} frames, {} clips -> {}",
                summary.files,
                summary.frames,
                summary.clips,
                out.join(pipeline::MANIFEST_FILE).display()
            );
        }
        Command::Synth { out, seed, config } => {
            let presets: Vec<_> = seed.map(|s| ("synth.seed".to_string(), s.to_string())).into_iter().collect();
            let cfg = load_config(&config, &presets)?;
            let manifest = pipeline::synth(&cfg, &out, mode)?;
            println!(
                "{} clips from {} sources and {} classes -> {}",
                manifest.len(),
                cfg.synth.sources.len(),
                cfg.synth.classes.len(),
                out.join(pipeline::MANIFEST_FILE).display()
            );
        }
        Command::Train {
            manifest,
            protocol,
            out,
            epochs,
            seed,
            ablation,
            config,
        } => {
            let protocol: Protocol = protocol.parse()?;
            let mut presets: Vec<(String, String)> = Vec::new();
            if let Some(a) = ablation {
                presets.extend(a.switches().iter().map(|(k, v)| (k.to_string(), v.to_string())));
            }
            if let Some(s) = seed {
                for key in ["model.seed", "d2r.seed", "train.seed"] {
                    presets.push((key.into(), s.to_string()));
                }
            }
            if let Some(n) = epochs {
                presets.push(("train.epochs".into(), n.to_string()));
            }
            let cfg = load_config(&config, &presets)?;
            let total = cfg.train.epochs;
            let outcome = pipeline::train_run(&cfg, &manifest, protocol, &out, mode, |e| {
                println!("epoch {}/{total} loss {:.4} acc {:.4} q {:.4}", e.epoch, e.loss, e.acc, e.q);
            })?;
            println!(
                "test {protocol}: micro {:.4} macro {:.4} -> {}",
                outcome.report.micro_acc,
                outcome.report.macro_acc,
                outcome.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            protocol,
            out,
            plots,
            overrides,
        } => {
            let protocol: Protocol = protocol.parse()?;
            let report = pipeline::eval_run(&checkpoint, &manifest, protocol, &out, plots, mode, |cfg| {
                for raw in &overrides {
                    let (k, v) = split_override(raw)?;
                    if !k.starts_with("eval.") {
                        return Err(Error::Config(format!(
                            "config key `{k}` is fixed by the checkpoint; only eval.* keys may change"
                        )));
                    }
                    cfg.apply_override(k, v)?;
                }
                Ok(())
            })?;
            println!(
                "{protocol}: {} samples, micro {:.4} macro {:.4} -> {}",
                report.samples,
                report.micro_acc,
                report.macro_acc,
                out.join(pipeline::REPORT_FILE).display()
            );
        }
        Command::Report { ours, baseline, out } => {
            write_or_print(out.as_deref(), &pipeline::report(&ours, &baseline)?)?;
        }
        Command::Keys => print!("{}", RunConfig::key_reference()),
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Runtime => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(expand_dotted(std::env::args())) {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
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
