use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chemotaxis_ap::cli_io::{compare_runs, load_config, run_experiment, run_table, ExperimentConfig};
use chemotaxis_ap::Error;

/// Kinetic chemotaxis solvers: run experiments and compare their outputs.
///
/// Exit status is 0 on success, 1 for invalid input and 2 when a run fails.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Root directory for outputs; a config's `output` is resolved against it.
    #[arg(long, global = true, env = "CHEMOTAXIS_AP_OUT")]
    out: Option<PathBuf>,

    /// Override the configuration's random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write its profiles.
    Run { config: PathBuf },
    /// Compute the mesh-pair convergence table of a configuration.
    Table { config: PathBuf },
    /// Compare the density profiles of two run directories.
    Compare { dir_a: PathBuf, dir_b: PathBuf },
}

fn output_dir(root: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    match root {
        Some(root) => root.join(&cfg.output),
        None => cfg.output.clone(),
    }
}

fn load(path: &Path, seed: Option<u64>) -> chemotaxis_ap::Result<ExperimentConfig> {
    let mut cfg = load_config(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> chemotaxis_ap::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config {
                field: "--threads".into(),
                message: "must be positive".into(),
            });
        }
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let root = cli.out.as_deref();
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(config, cli.seed)?;
            let dir = output_dir(root, &cfg);
            let summary = run_experiment(&cfg, &dir)?;
            for f in &summary.files {
                println!("{}", f.display());
            }
            if summary.steady_converged == Some(false) {
                eprintln!("warning: the steady-state rule was not met; see steady.csv");
            }
        }
        Command::Table { config } => {
            let cfg = load(config, cli.seed)?;
            let dir = output_dir(root, &cfg);
            let report = run_table(&cfg, &dir)?;
            print!("{}", report.to_csv());
        }
        Command::Compare { dir_a, dir_b } => {
            let dir = root.map_or_else(|| dir_a.clone(), Path::to_path_buf);
            println!("profile,linf_rel_err");
            for row in compare_runs(dir_a, dir_b, &dir)? {
                println!("{},{:.16e}", row.profile, row.linf_rel_err);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are invalid input; --help and --version are not errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
