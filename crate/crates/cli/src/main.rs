use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emomod_cli::commands::{self, write_json};
use emomod_cli::config::RunConfig;
use emomod_cli::{CliError, EXIT_GRADCHECK};
use emomod_core::tape::Faults;
use serde::Serialize;

/// Emotion-aware geometry and appearance modulation for parametric heads.
#[derive(Parser)]
#[command(name = "emomod", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON). `seed` is required.
    #[arg(long)]
    config: PathBuf,
    /// Override a scalar config field, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(&self.config, &self.set)
    }
}

#[derive(Args)]
struct Target {
    /// Identity id in the dataset.
    #[arg(long)]
    identity: usize,
    /// Anchor (performance) id in the dataset.
    #[arg(long)]
    anchor: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic emotion-synchronized corpus.
    Forge {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the geometry modulator and emotion table.
    TrainGeo {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the appearance branch against a frozen geometry checkpoint.
    TrainApp {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Geometry checkpoint directory.
        #[arg(long)]
        geo: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train both branches in the configured mode (staged or joint).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare the full, geometry-less and appearance-less variants.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Where to write the JSON report (stdout only when omitted).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Metric report per split and per emotion pair.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Retarget one performance to another emotion and render it.
    Transfer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        src: String,
        #[arg(long)]
        tgt: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the emotion code between two (or three, with --via) labels.
    Interpolate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long)]
        via: Option<String>,
        #[arg(long, default_value_t = 11)]
        steps: usize,
        /// Frame rendered at every grid point.
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one frame to a PPM image.
    Render {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        emotion: String,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Render the modulated performance instead of the corpus target.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every analytic gradient against central differences.
    Gradcheck {
        /// Corrupt the tanh adjoint to demonstrate a failing row.
        #[arg(long, hide = true)]
        inject_tanh_fault: bool,
    },
}

/// Writes to stdout, ignoring a closed pipe (e.g. output piped into `head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn print<T: Serialize>(value: &T) -> Result<(), CliError> {
    out!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn or<'a>(flag: &'a Option<PathBuf>, fallback: &'a Path) -> &'a Path {
    flag.as_deref().unwrap_or(fallback)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Forge { cfg, out } => {
            let cfg = cfg.load()?;
            let s = commands::forge(&cfg, or(&out, &cfg.paths.dataset))?;
            out!(
                "records: {} ({} anchors x {} emotions x {} identities: {} train + {} held-out)",
                s.records, s.anchors, s.emotions, s.identities, s.train_identities, s.held_out_identities
            );
            out!(
                "sync check: {} (max recovery error {:.3e})",
                if s.sync_pass { "PASS" } else { "FAIL" },
                s.sync_max_error
            );
            match s.identical_to_existing {
                Some(true) => out!("identical to existing dataset (sha256 {})", s.hash),
                Some(false) => out!("replaced existing dataset (sha256 {})", s.hash),
                None => out!("sha256 {}", s.hash),
            }
            if !s.sync_pass {
                return Err(CliError::new(1, "synchronization check failed"));
            }
        }
        Command::TrainGeo { cfg, dataset, out } => {
            let cfg = cfg.load()?;
            print(&commands::train_geo(&cfg, or(&dataset, &cfg.paths.dataset), or(&out, &cfg.paths.checkpoint))?)?;
        }
        Command::TrainApp { cfg, dataset, geo, out } => {
            let cfg = cfg.load()?;
            let s = commands::train_app(&cfg, or(&dataset, &cfg.paths.dataset), &geo, or(&out, &cfg.paths.checkpoint))?;
            print(&s)?;
        }
        Command::Train { cfg, dataset, out } => {
            let cfg = cfg.load()?;
            print(&commands::train_all(&cfg, or(&dataset, &cfg.paths.dataset), or(&out, &cfg.paths.checkpoint))?)?;
        }
        Command::Ablate { cfg, dataset, report } => {
            let cfg = cfg.load()?;
            let r = commands::ablate(&cfg, or(&dataset, &cfg.paths.dataset))?;
            if let Some(p) = report {
                write_json(&p, &r)?;
            }
            print(&r)?;
        }
        Command::Eval {
            cfg,
            checkpoint,
            dataset,
            report,
        } => {
            let cfg = cfg.load()?;
            let r = commands::eval(&cfg, or(&checkpoint, &cfg.paths.checkpoint), or(&dataset, &cfg.paths.dataset))?;
            if let Some(p) = report {
                write_json(&p, &r)?;
            }
            print(&r)?;
        }
        Command::Transfer {
            cfg,
            target,
            src,
            tgt,
            checkpoint,
            dataset,
            out,
        } => {
            let cfg = cfg.load()?;
            let (src, tgt) = (commands::parse_emotion(&src)?, commands::parse_emotion(&tgt)?);
            let r = commands::transfer(
                &cfg,
                or(&checkpoint, &cfg.paths.checkpoint),
                or(&dataset, &cfg.paths.dataset),
                target.identity,
                target.anchor,
                src,
                tgt,
                or(&out, &cfg.paths.out),
            )?;
            print(&r)?;
        }
        Command::Interpolate {
            cfg,
            target,
            from,
            to,
            via,
            steps,
            frame,
            checkpoint,
            dataset,
            out,
        } => {
            let cfg = cfg.load()?;
            let from = commands::parse_emotion(&from)?;
            let to = commands::parse_emotion(&to)?;
            let via = via.as_deref().map(commands::parse_emotion).transpose()?;
            let r = commands::interpolate(
                &cfg,
                or(&checkpoint, &cfg.paths.checkpoint),
                or(&dataset, &cfg.paths.dataset),
                target.identity,
                target.anchor,
                from,
                via,
                to,
                steps,
                frame,
                or(&out, &cfg.paths.out),
            )?;
            print(&r.report)?;
        }
        Command::Render {
            cfg,
            target,
            emotion,
            frame,
            checkpoint,
            dataset,
            out,
        } => {
            let cfg = cfg.load()?;
            let emotion = commands::parse_emotion(&emotion)?;
            let r = commands::render_frame(
                &cfg,
                or(&dataset, &cfg.paths.dataset),
                checkpoint.as_deref(),
                target.identity,
                target.anchor,
                emotion,
                frame,
                &out,
            )?;
            print(&r)?;
        }
        Command::Gradcheck { inject_tanh_fault } => {
            let table = commands::gradcheck(Faults {
                tanh_adjoint: inject_tanh_fault,
            })?;
            out!("{}", table.render().trim_end());
            if !table.pass {
                return Err(CliError::new(EXIT_GRADCHECK, "gradient check failed"));
            }
            out!("all checks PASS");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { emomod_cli::EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
