//! `selfdebias`: run and inspect debiasing experiments on the surrogate generator.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 config error,
//! 3 dependency or staleness error, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selfdebias::harness::{self, ExperimentConfig, SweepParam, CONFIG_FILE};
use selfdebias::{Error, Result};

#[derive(Parser)]
#[command(name = "selfdebias", version, about = "Unsupervised test-time debiasing experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults to `<out>/config.json` when present, else built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default config with every field spelled out.
    Init,
    /// Sample the training corpus and the unguided reference set.
    Generate,
    /// Train the projector on the corpus.
    Train,
    /// Discover modes and build the cluster tree.
    Discover,
    /// Run guided sampling.
    Debias,
    /// Score the guided run against the unguided reference and write report.json.
    Evaluate,
    /// Run all stages in order.
    Pipeline {
        /// Rerun every stage even when its artifacts are up to date.
        #[arg(long)]
        force: bool,
    },
    /// Run the pipeline once per value of one parameter.
    Sweep {
        /// One of alpha, d_max, inner_steps, gamma.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Write summary.txt and plot-ready CSVs for a run directory.
    Report {
        /// Run directory; defaults to the configured output directory.
        dir: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = match (&common.config, &common.out) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(out)) if out.join(CONFIG_FILE).is_file() => Some(out.join(CONFIG_FILE)),
        _ => None,
    };
    let mut config = match path {
        Some(p) => ExperimentConfig::load(&p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn print_report_line(report: &harness::DebiasReport, dir: &Path) {
    println!(
        "fd {:.4} -> {:.4}, frechet {:.5}; report at {}",
        report.pre.fd,
        report.post.fd,
        report.post.frechet,
        dir.join(harness::REPORT_FILE).display()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init => {
            let out = cli.common.out.clone().unwrap_or_else(|| ExperimentConfig::default().output_dir);
            let path = cli.common.config.clone().unwrap_or_else(|| out.join(CONFIG_FILE));
            let mut config = harness::cmd_init(&path, &out)?;
            if let Some(seed) = cli.common.seed {
                config.seed = seed;
                config.save(&path)?;
            }
            println!("wrote {}", path.display());
        }
        Command::Report { dir } => {
            let dir = match dir {
                Some(d) => d,
                None => load_config(&cli.common)?.output_dir,
            };
            let outcome = harness::cmd_report(&dir)?;
            print!("{}", outcome.summary);
            if !outcome.missing.is_empty() {
                eprintln!("warning: partial report, missing: {}", outcome.missing.join("; "));
            }
        }
        Command::Sweep { param, values } => {
            let param: SweepParam = param.parse()?;
            let config = load_config(&cli.common)?;
            let rows = harness::cmd_sweep(&config, param, &values)?;
            println!("value,fd,frechet,kl_final");
            for r in &rows {
                let kl = r.kl_final.map_or_else(String::new, |k| format!("{k:.3e}"));
                println!("{},{:.4},{:.5},{}", r.value, r.fd, r.frechet, kl);
            }
            println!("wrote {}", harness::sweep_csv_path(&config, param).display());
        }
        command => {
            let config = load_config(&cli.common)?;
            let dir = config.output_dir.clone();
            match command {
                Command::Generate => harness::cmd_generate(&config)?,
                Command::Train => harness::cmd_train(&config)?,
                Command::Discover => harness::cmd_discover(&config)?,
                Command::Debias => harness::cmd_debias(&config)?,
                Command::Evaluate => print_report_line(&harness::cmd_evaluate(&config)?, &dir),
                Command::Pipeline { force } => {
                    print_report_line(&harness::cmd_pipeline(&config, !force)?, &dir)
                }
                Command::Init | Command::Report { .. } | Command::Sweep { .. } => unreachable!(),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
