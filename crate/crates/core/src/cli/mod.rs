//! Command-line interface.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage, configuration,
//! validation or I/O error.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::GradcheckArgs;
pub use config::{parse_override, RunConfig};

use crate::error::{GtlError, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gtl", version, about = "Generative transfer learning for cross-modal few-shot classification")]
pub struct Cli {
    /// TOML run configuration layered over the built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed for data generation, training and episode sampling.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,

    /// Output directory; also where inputs are looked up by default.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Override any configuration key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct InputArgs {
    /// Base feature file (default `<out>/base.gtlf`).
    #[arg(long, value_name = "PATH")]
    pub base: Option<PathBuf>,
    /// Novel feature file (default `<out>/novel.gtlf`).
    #[arg(long, value_name = "PATH")]
    pub novel: Option<PathBuf>,
    /// Phase-1 checkpoint (default `<out>/phase1.ckpt`).
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// full, gtl_t, gtl_ft, no_z or no_zm.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, clap::Args)]
pub struct EpisodeArgs {
    /// `all-way` or `N-way`.
    #[arg(long)]
    pub protocol: Option<String>,
    /// Support shots per class, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub shots: Option<Vec<usize>>,
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic base/novel feature files and ground-truth latents.
    Synth,
    /// Phase 1: train on the base features.
    TrainBase {
        #[command(flatten)]
        input: InputArgs,
    },
    /// Phase 2 on one sampled episode; writes the adapted checkpoint.
    Adapt {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        episode: EpisodeArgs,
        /// Also write posterior-mean and disturbance latents of the novel set.
        #[arg(long)]
        dump_latents: bool,
    },
    /// Phase 2 and top-1 accuracy over many sampled episodes.
    Eval {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        episode: EpisodeArgs,
        #[arg(long)]
        dump_latents: bool,
    },
    /// Repeat Phase 1 and evaluation across latent-domain counts.
    SweepD {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        episode: EpisodeArgs,
        /// Domain counts, comma separated (default from the config).
        #[arg(long, value_delimiter = ',')]
        domains: Option<Vec<usize>>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long)]
        freeze_generator: bool,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, hide = true, value_name = "TENSOR")]
        corrupt_grad: Option<String>,
    },
}

fn path_value(p: &std::path::Path) -> toml::Value {
    toml::Value::String(p.to_string_lossy().into_owned())
}

impl InputArgs {
    fn overrides(&self, out: &mut Vec<(String, toml::Value)>) {
        for (key, v) in [
            ("paths.base", &self.base),
            ("paths.novel", &self.novel),
            ("paths.checkpoint", &self.checkpoint),
        ] {
            if let Some(p) = v {
                out.push((key.into(), path_value(p)));
            }
        }
        if let Some(m) = &self.mode {
            out.push(("train.mode".into(), toml::Value::String(m.clone())));
        }
    }
}

impl EpisodeArgs {
    fn overrides(&self, out: &mut Vec<(String, toml::Value)>) {
        if let Some(p) = &self.protocol {
            out.push(("eval.protocol".into(), toml::Value::String(p.clone())));
        }
        if let Some(s) = &self.shots {
            let arr = s.iter().map(|&k| toml::Value::Integer(k as i64)).collect();
            out.push(("eval.shots".into(), toml::Value::Array(arr)));
        }
        if let Some(e) = self.episodes {
            out.push(("eval.episodes".into(), toml::Value::Integer(e as i64)));
        }
    }
}

impl Cli {
    /// Defaults, then `--config`, then `--set` and subcommand flags, then
    /// `--seed`.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut overrides = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        match &self.command {
            Command::Synth => {}
            Command::TrainBase { input } => input.overrides(&mut overrides),
            Command::Adapt { input, episode, .. }
            | Command::Eval { input, episode, .. }
            | Command::SweepD { input, episode, .. } => {
                input.overrides(&mut overrides);
                episode.overrides(&mut overrides);
            }
            Command::Gradcheck { mode, .. } => {
                if let Some(m) = mode {
                    overrides.push(("train.mode".into(), toml::Value::String(m.clone())));
                }
            }
        }
        let mut cfg = RunConfig::layered(self.config.as_deref(), &overrides)?;
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    /// Runs the command and returns the process exit code.
    pub fn execute(&self) -> Result<i32> {
        let cfg = self.run_config()?;
        let out = &self.out;
        match &self.command {
            Command::Synth => {
                let (base, novel) = commands::cmd_synth(&cfg, out)?;
                println!("synth: {base} base records, {novel} novel records in {}", out.display());
            }
            Command::TrainBase { .. } => {
                let (_, rep) = commands::cmd_train_base(&cfg, out)?;
                println!(
                    "train-base: {} epochs, final loss {:.4}, checksum {:016x}",
                    rep.representation.len(),
                    rep.representation.last().map_or(f64::NAN, |r| r.loss_total),
                    rep.checksum
                );
            }
            Command::Adapt { dump_latents, .. } => {
                let (adapted, r) = commands::cmd_adapt(&cfg, out, *dump_latents)?;
                println!(
                    "adapt: query accuracy {:.4} over {} records, generator checksum {:016x}",
                    r.acc_mixed,
                    r.counts.total,
                    adapted.generator.checksum()
                );
            }
            Command::Eval { dump_latents, .. } => {
                let (_, csv) = commands::cmd_eval(&cfg, out, *dump_latents)?;
                print!("{csv}");
            }
            Command::SweepD { domains, .. } => {
                let d = domains.clone().unwrap_or_else(|| cfg.sweep.domains.clone());
                print!("{}", commands::cmd_sweep_d(&cfg, out, &d)?);
            }
            Command::Gradcheck {
                batch,
                freeze_generator,
                corrupt_grad,
                ..
            } => {
                let args = GradcheckArgs {
                    batch: *batch,
                    freeze_generator: *freeze_generator,
                    corrupt: corrupt_grad.clone(),
                };
                let report = commands::cmd_gradcheck(&cfg, &args)?;
                println!("gradcheck: {report}");
                if !report.passed() {
                    let name = report.worst.as_ref().map_or("?", |w| w.param.as_str());
                    eprintln!("gradcheck FAILED: {name} exceeds tolerance {:.1e}", report.tol);
                    return Ok(EXIT_CHECK_FAILED);
                }
            }
        }
        Ok(EXIT_OK)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match cli.execute() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(_e: &GtlError) -> i32 {
    EXIT_USAGE
}
