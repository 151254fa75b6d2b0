use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dba_core::config::{parse_metric, parse_optimizer};
use dba_core::harness::{self, resolve_data_dir, MnistSource, RunSummary};
use dba_core::{preset, preset_names, ConfigFile, RunConfig};

#[derive(Parser)]
#[command(name = "dba", version, about = "Train MNIST MLPs with dynamic batch adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single seed.
    Run(RunArgs),
    /// Train every configured seed and summarize.
    Sweep(RunArgs),
    /// Rebuild summary.json from existing output directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Grad,
    Var,
}

#[derive(Clone, Copy, ValueEnum)]
enum Opt {
    Sgd,
    Adam,
}

#[derive(Args)]
struct RunArgs {
    /// Flat TOML run file; applied on top of --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Seed for `run`; comma-separated list for `sweep`.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// MNIST directory (falls back to the config file, then $MNIST_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Defaults to runs/<config name>.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long, value_enum)]
    dba: Option<Switch>,
    #[arg(long, value_enum)]
    metric: Option<Metric>,
    #[arg(long, value_enum)]
    optimizer: Option<Opt>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.preset {
            Some(p) => preset(p)?,
            None => RunConfig::default(),
        };
        let mut out_dir_set = false;
        if let Some(path) = &self.config {
            let file = ConfigFile::load(path)?;
            if let (Some(a), Some(b)) = (&self.preset, &file.preset) {
                if a != b {
                    bail!("--preset {a} conflicts with preset `{b}` in {}", path.display());
                }
            }
            if self.preset.is_none() {
                if let Some(p) = &file.preset {
                    cfg = preset(p)?;
                }
            }
            out_dir_set = file.out_dir.is_some();
            cfg = file.apply(cfg)?;
        }
        if !self.seed.is_empty() {
            cfg.seeds = self.seed.clone();
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        if let Some(e) = self.max_epochs {
            cfg.max_epochs = e;
        }
        if let Some(s) = self.dba {
            cfg.dba_enabled = matches!(s, Switch::On);
        }
        if let Some(m) = self.metric {
            cfg.dba.metric = parse_metric(match m {
                Metric::Grad => "grad",
                Metric::Var => "var",
            })
            .expect("known metric");
        }
        if let Some(o) = self.optimizer {
            cfg.optimizer = parse_optimizer(match o {
                Opt::Sgd => "sgd",
                Opt::Adam => "adam",
            })
            .expect("known optimizer");
        }
        match &self.out_dir {
            Some(o) => cfg.out_dir = o.clone(),
            None if !out_dir_set => cfg.out_dir = Path::new("runs").join(&cfg.name),
            None => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_source(cfg: &RunConfig) -> Result<MnistSource> {
    let dir = resolve_data_dir(cfg.data_dir.as_deref())?;
    MnistSource::load(&dir).with_context(|| format!("loading MNIST from {}", dir.display()))
}

fn print_summary(s: &RunSummary) {
    for seed in &s.per_seed {
        println!(
            "{}  seed {:>3}  max test acc {:.3}% (epoch {})",
            s.name,
            seed.seed,
            100.0 * seed.max_test_acc,
            seed.best_epoch
        );
    }
    println!(
        "{}  mean {:.3}% ± {:.3} over {} seed(s)",
        s.name,
        100.0 * s.mean,
        100.0 * s.std,
        s.per_seed.len()
    );
}

fn run(args: &RunArgs) -> Result<()> {
    let mut cfg = args.resolve()?;
    if cfg.seeds.len() > 1 && !args.seed.is_empty() {
        bail!("`run` trains one seed; use `sweep` for several");
    }
    cfg.seeds.truncate(1);
    let source = load_source(&cfg)?;
    let summary = harness::sweep(&cfg, &source)?;
    print_summary(&summary);
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

fn sweep(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let source = load_source(&cfg)?;
    let summary = harness::sweep(&cfg, &source)?;
    if summary.per_seed.len() < cfg.seeds.len() {
        log::warn!(
            "{} of {} seeds completed",
            summary.per_seed.len(),
            cfg.seeds.len()
        );
    }
    print_summary(&summary);
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Report { dirs } => dirs.iter().try_for_each(|d| {
            let s = harness::report(d).with_context(|| format!("reporting {}", d.display()))?;
            print_summary(&s);
            Ok(())
        }),
        Command::Presets => {
            preset_names().iter().for_each(|n| println!("{n}"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
