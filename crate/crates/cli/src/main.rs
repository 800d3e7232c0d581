use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use harmoniad_cli::commands::{cmd_eval, cmd_gen, cmd_infer, cmd_split, cmd_train, read_checkpoint_config};
use harmoniad_cli::{CliError, CliResult, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "harmoniad",
    version,
    about = "Frequency-guided dual-branch anomaly detection"
)]
struct Cli {
    /// Base config file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra override, repeatable: --set key=value.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// soft | hard:<t>
    #[arg(long, global = true)]
    gate: Option<String>,
    #[arg(long, global = true)]
    no_fsam: bool,
    #[arg(long, global = true)]
    no_gscm: bool,
    #[arg(long, global = true)]
    no_f2s: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write synthetic train/val/test containers.
    Gen,
    /// Train on the synthetic benchmark.
    Train,
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset container from `gen`; defaults to the configured test split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Patch- and pixel-level heatmaps for a feature-map container.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Split feature maps into low and high frequency components.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Cli {
    fn overrides(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(s) = self.seed {
            v.push(format!("seed={s}"));
        }
        if let Some(s) = self.steps {
            v.push(format!("train.steps={s}"));
        }
        if let Some(o) = &self.out {
            v.push(format!("out={}", o.display()));
        }
        if let Some(g) = &self.gate {
            v.push(format!("gate.mode={g}"));
        }
        for (on, key) in [
            (self.no_fsam, "no_fsam"),
            (self.no_gscm, "no_gscm"),
            (self.no_f2s, "no_f2s"),
        ] {
            if on {
                v.push(format!("ablation.{key}=true"));
            }
        }
        v.extend(self.set.iter().cloned());
        v
    }

    /// Config file if given, else the checkpoint's embedded config, else
    /// defaults; command-line overrides apply last.
    fn resolve(&self) -> CliResult<RunConfig> {
        let checkpoint = match &self.cmd {
            Cmd::Eval { checkpoint, .. } | Cmd::Infer { checkpoint, .. } => Some(checkpoint),
            Cmd::Split { checkpoint, .. } => checkpoint.as_ref(),
            Cmd::Gen | Cmd::Train => None,
        };
        let mut cfg = match (&self.config, checkpoint) {
            (Some(p), _) => RunConfig::parse_text(
                &std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
            )?,
            (None, Some(ck)) => RunConfig::parse_text(&read_checkpoint_config(ck)?)?,
            (None, None) => RunConfig::default(),
        };
        for kv in self.overrides() {
            cfg.apply_override(&kv)?;
        }
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = cli.resolve()?;
    let mut out = io::stdout().lock();
    match &cli.cmd {
        Cmd::Gen => {
            for (path, n) in cmd_gen(&cfg)?.files {
                println!("{n:>6} samples -> {}", path.display());
            }
        }
        Cmd::Train => {
            cmd_train(&cfg, &mut out)?;
        }
        Cmd::Eval { checkpoint, data } => {
            cmd_eval(&cfg, checkpoint, data.as_deref(), &mut out)?;
        }
        Cmd::Infer { checkpoint, input } => {
            for p in cmd_infer(&cfg, checkpoint, input)? {
                println!("{}", p.display());
            }
        }
        Cmd::Split { input, checkpoint } => {
            cmd_split(&cfg, input, checkpoint.as_deref(), &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("harmoniad: {e}");
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &CliError) -> u8 {
    e.exit_code() as u8
}
