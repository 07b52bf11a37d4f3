use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slabfv_cli::config::parse_override;
use slabfv_cli::{CliError, Outcome, RunConfig};

/// Upwind finite volume solver for a heat-conducting compressible gas in a
/// periodic slab, with verification and refinement studies.
#[derive(Parser)]
#[command(name = "slabfv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; every key has a default.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set numerics.alpha=0.3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (`output.dir`).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Random seed (`seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Advance one scenario and write snapshots and a diagnostics table.
    Run {
        #[command(flatten)]
        common: Common,
        /// Number of steps (`time.n_steps`).
        #[arg(long)]
        steps: Option<usize>,
        /// Mesh width (`grid.h`).
        #[arg(long)]
        h: Option<f64>,
    },
    /// Check the discrete calculus identities on random fields.
    VerifyOperators {
        #[command(flatten)]
        common: Common,
        /// Trials per grid size (`verify.trials`).
        #[arg(long)]
        trials: Option<usize>,
        /// Grid sizes as `dim:n`, comma separated (`verify.sizes`).
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<String>,
        /// Use even velocity ghosts in the Korn check; the suite must then fail.
        #[arg(long)]
        inject_wrong_ghost: bool,
    },
    /// Fit convergence orders of the consistency and compatibility functionals.
    ConsistencyStudy {
        #[command(flatten)]
        common: Common,
        /// Cells across the slab per level, comma separated (`study.levels`).
        #[arg(long, value_delimiter = ',')]
        levels: Vec<usize>,
    },
    /// Cauchy differences of the final states between consecutive levels.
    RefineStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        levels: Vec<usize>,
    },
}

fn resolve(common: &Common, mut extra: Vec<String>) -> Result<RunConfig, CliError> {
    if let Some(o) = &common.output {
        extra.push(format!("output.dir={:?}", o.display().to_string()));
    }
    if let Some(s) = common.seed {
        extra.push(format!("seed={s}"));
    }
    let overrides = common
        .overrides
        .iter()
        .chain(extra.iter())
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn threads(common: &Common) -> Result<(), CliError> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config {
                key: "--threads".into(),
                message: e.to_string(),
            })?;
    }
    Ok(())
}

fn list(values: &[impl ToString]) -> String {
    format!(
        "[{}]",
        values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    )
}

fn execute(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Run { common, steps, h } => {
            threads(&common)?;
            let mut extra = Vec::new();
            if let Some(n) = steps {
                extra.push(format!("time.n_steps={n}"));
            }
            if let Some(h) = h {
                extra.push(format!("grid.h={h:?}"));
            }
            slabfv_cli::run(&resolve(&common, extra)?)
        }
        Command::VerifyOperators {
            common,
            trials,
            sizes,
            inject_wrong_ghost,
        } => {
            threads(&common)?;
            let mut extra = Vec::new();
            if let Some(t) = trials {
                extra.push(format!("verify.trials={t}"));
            }
            if !sizes.is_empty() {
                let pairs = sizes
                    .iter()
                    .map(|s| {
                        let (d, n) = s.split_once(':').ok_or_else(|| CliError::Config {
                            key: "--sizes".into(),
                            message: format!("expected dim:n, got `{s}`"),
                        })?;
                        Ok(format!("[{},{}]", d.trim(), n.trim()))
                    })
                    .collect::<Result<Vec<_>, CliError>>()?;
                extra.push(format!("verify.sizes=[{}]", pairs.join(",")));
            }
            slabfv_cli::verify_operators(&resolve(&common, extra)?, inject_wrong_ghost)
        }
        Command::ConsistencyStudy { common, levels } => {
            threads(&common)?;
            let extra = if levels.is_empty() {
                vec![]
            } else {
                vec![format!("study.levels={}", list(&levels))]
            };
            slabfv_cli::consistency_study(&resolve(&common, extra)?).map(|(o, _)| o)
        }
        Command::RefineStudy { common, levels } => {
            threads(&common)?;
            let extra = if levels.is_empty() {
                vec![]
            } else {
                vec![format!("study.levels={}", list(&levels))]
            };
            slabfv_cli::refine_study(&resolve(&common, extra)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            match outcome.failure {
                Some(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code())
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
