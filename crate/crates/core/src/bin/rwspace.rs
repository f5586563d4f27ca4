use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rwspace::conditioned::Mode;
use rwspace::runner::{run, CollisionChoice, Command, EnvRef, ExperimentConfig, MuChoice};
use rwspace::Error;

#[derive(Parser)]
#[command(name = "rwspace", version, about = "Random walk in a space-time i.i.d. environment")]
struct Cli {
    #[command(subcommand)]
    command: Option<Cmd>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory for the report, CSV sections and side outputs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Experiment config file; runs it when no subcommand is given.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WalkMode {
    Averaged,
    Quenched,
}

impl From<WalkMode> for Mode {
    fn from(m: WalkMode) -> Mode {
        match m {
            WalkMode::Averaged => Mode::Averaged,
            WalkMode::Quenched => Mode::Quenched,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MuMethodArg {
    Exact,
    Htransform,
}

#[derive(Clone, Copy, ValueEnum)]
enum CollisionArg {
    Exact,
    MonteCarlo,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve for the tilt dual to a velocity and report the rate.
    Rate {
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        xi: Vec<f64>,
    },
    /// Rate function along one axis, as CSV.
    RateCurve {
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        axis: usize,
        #[arg(long, default_value_t = 101)]
        samples: usize,
    },
    /// Simulate walks and write them as JSON lines.
    Simulate {
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: WalkMode,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        replicas: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the harmonic field on a cone and write it in binary form.
    Htransform {
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        theta: Vec<f64>,
        #[arg(long = "N")]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        r0: i64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the transformed walk from a stored field.
    TiltedSim {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        replicas: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test the collision criterion on a radial grid of tilts, as CSV.
    Intersection {
        #[arg(long)]
        env: Option<PathBuf>,
        /// `start:stop:step` or comma-separated radii.
        #[arg(long)]
        theta_grid: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        direction: Option<Vec<f64>>,
        #[arg(long = "kmax", default_value_t = rwspace::intersection::DEFAULT_K_MAX)]
        k_max: usize,
        #[arg(long, value_enum, default_value = "exact")]
        method: CollisionArg,
        #[arg(long, default_value_t = 100_000)]
        replicas: usize,
    },
    /// Integral of a cylinder function under the stationary environment-and-steps law.
    Mu {
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        xi: Vec<f64>,
        #[arg(long)]
        f: String,
        #[arg(long = "NMK", value_delimiter = ',', num_args = 1)]
        nmk: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value = "exact")]
        method: MuMethodArg,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 2000)]
        environments: usize,
        #[arg(long)]
        checks: bool,
    },
    /// Deviation probabilities of empirical averages given the velocity event.
    Condition {
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: WalkMode,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        xi: Vec<f64>,
        #[arg(long, default_value = "builtin:step-indicator:+e1")]
        f: String,
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        n_grid: Vec<usize>,
        #[arg(long)]
        replicas: usize,
        #[arg(long)]
        env_seed: Option<u64>,
        #[arg(long, default_value_t = 16)]
        horizon_extra: usize,
        #[arg(long, default_value_t = 2000)]
        mu_environments: usize,
    },
    /// Print one tabular section of a stored report as CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        selector: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn env_ref(p: Option<PathBuf>) -> Option<EnvRef> {
    p.map(EnvRef::File)
}

fn into_command(cmd: Cmd) -> Result<(Option<EnvRef>, Command), Error> {
    Ok(match cmd {
        Cmd::Rate { env, xi } => (env_ref(env), Command::Rate { xi }),
        Cmd::RateCurve { env, axis, samples } => (env_ref(env), Command::RateCurve { axis, samples }),
        Cmd::Simulate {
            env,
            mode,
            n,
            replicas,
            out,
        } => (
            env_ref(env),
            Command::Simulate {
                mode: mode.into(),
                n,
                replicas,
                out,
            },
        ),
        Cmd::Htransform {
            env,
            theta,
            horizon,
            r0,
            out,
        } => (env_ref(env), Command::Htransform { theta, horizon, r0, out }),
        Cmd::TiltedSim { field, n, replicas, out } => (None, Command::TiltedSim { field, n, replicas, out }),
        Cmd::Intersection {
            env,
            theta_grid,
            direction,
            k_max,
            method,
            replicas,
        } => (
            env_ref(env),
            Command::Intersection {
                theta_grid,
                direction,
                k_max,
                method: match method {
                    CollisionArg::Exact => CollisionChoice::Exact,
                    CollisionArg::MonteCarlo => CollisionChoice::MonteCarlo,
                },
                replicas,
            },
        ),
        Cmd::Mu {
            env,
            xi,
            f,
            nmk,
            method,
            horizon,
            environments,
            checks,
        } => {
            let nmk = match nmk.as_deref() {
                None => None,
                Some(&[n, m, k]) => Some([n, m, k]),
                Some(_) => return Err(Error::Config("--NMK takes three integers N,M,K".into())),
            };
            (
                env_ref(env),
                Command::Mu {
                    xi,
                    f,
                    nmk,
                    method: match method {
                        MuMethodArg::Exact => MuChoice::Exact,
                        MuMethodArg::Htransform => MuChoice::Htransform,
                    },
                    horizon,
                    environments,
                    checks,
                },
            )
        }
        Cmd::Condition {
            env,
            mode,
            xi,
            f,
            eps,
            delta,
            n_grid,
            replicas,
            env_seed,
            horizon_extra,
            mu_environments,
        } => (
            env_ref(env),
            Command::Condition {
                mode: mode.into(),
                xi,
                f,
                eps,
                delta,
                n_grid,
                replicas,
                env_seed,
                horizon_extra,
                mu_environments,
            },
        ),
        Cmd::Report { input, selector, out } => (None, Command::Report { input, selector, out }),
    })
}

fn build_config(cli: Cli) -> Result<ExperimentConfig, Error> {
    let mut config = match (cli.config, cli.command) {
        (Some(_), Some(_)) => return Err(Error::Config("give either --config or a subcommand, not both".into())),
        (Some(path), None) => ExperimentConfig::load(&path)?,
        (None, Some(cmd)) => {
            let (env, command) = into_command(cmd)?;
            ExperimentConfig::new(0, env, command)
        }
        (None, None) => return Err(Error::Config("no subcommand given; see --help".into())),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if cli.workers.is_some() {
        config.workers = cli.workers;
    }
    if cli.out_dir.is_some() {
        config.out_dir = cli.out_dir;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = build_config(cli).and_then(|config| {
        let out = run(&config)?;
        let stdout = std::io::stdout();
        let mut lock = stdout.lock();
        match config.command.primary_section() {
            Some(section) => out.report.emit_plot_data(section, &mut lock)?,
            None => {
                serde_json::to_writer_pretty(&mut lock, &out.report.result)?;
                writeln!(lock)?;
            }
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rwspace: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
