use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use jacmatch_cli::config::ExperimentConfig;
use jacmatch_cli::grid::{self, AblationAxis, Table};
use jacmatch_cli::report::{aggregate, load_results, write_summary_csv};
use jacmatch_cli::train::{train_all, TrainOptions};
use jacmatch_cli::verify::{self, NoiseFamily};
use jacmatch_cli::{CliError, CliResult};

/// Jacobian-matching knowledge transfer experiments.
#[derive(Parser)]
#[command(name = "jacmatch", version)]
struct Cli {
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Concurrent training jobs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config for each of its seeds.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the last saved epoch.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs, keeping the checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Distillation accuracy by method and per-class subset size.
    DistillGrid {
        #[arg(long)]
        config: PathBuf,
        /// Per-class subset sizes; `full` uses the whole training set.
        #[arg(long, value_delimiter = ',', default_value = "5,20,full")]
        subsets: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "ce,ce+act,ce+jac,ce+act+jac,act-only,act+jac")]
        methods: Vec<String>,
        #[arg(long)]
        resume: bool,
    },
    /// Accuracy under test-time noise by Jacobian-norm penalty weight.
    RobustnessGrid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2")]
        sigmas: Vec<f64>,
        #[arg(long)]
        resume: bool,
    },
    /// Two-headed transfer methods.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        /// Source-task checkpoint of the student architecture for the
        /// oracle row.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "ce,oracle,ce+act,ce+act+jac,ce+act+att,ce+act+att+jac")]
        methods: Vec<String>,
        #[arg(long)]
        resume: bool,
    },
    /// Full transfer method swept over tap depth or pool window.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Tap pairs `teacher:student` for the tap-depth axis.
        #[arg(long, value_delimiter = ',', default_value = "0:0,1:1,2:1")]
        taps: Vec<String>,
        /// Windows for the pool-window axis: full, none, s/N or pixels.
        #[arg(long, value_delimiter = ',', default_value = "full,s/3,s/5,s/7,none")]
        windows: Vec<String>,
        #[arg(long)]
        resume: bool,
    },
    /// Numerical checks; exits with 4 when one fails.
    Verify {
        #[command(subcommand)]
        check: Check,
    },
    /// Mean ± std over run results of one config.
    Report {
        /// `result.json` files or directories containing them.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    TapDepth,
    PoolWindow,
}

#[derive(Subcommand)]
enum Check {
    /// Residual slope of the noisy-loss expansion over smooth net pairs.
    NoiseEquiv {
        #[arg(long, default_value = "squared")]
        family: String,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.1,0.05,0.025")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        pairs: usize,
        #[arg(long, default_value_t = 3)]
        max_dim: usize,
    },
    /// Exact expansion for a ReLU pair, failure for a sigmoid control.
    Exactness {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// Transfer bound and superset monotonicity over seeded trials.
    Bound {
        #[arg(long, default_value_t = 100)]
        seeds: usize,
    },
}

fn load_config(path: &Path, cli: &Cli) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    let out = cli
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    Ok((cfg, out))
}

fn opts(resume: bool) -> TrainOptions {
    TrainOptions {
        resume,
        stop_after: None,
    }
}

fn print_table(table: &Table, out: &Path) {
    for (r, row) in table.rows.iter().enumerate() {
        let cells: Vec<String> = table
            .columns
            .iter()
            .zip(&table.values[r])
            .map(|(c, v)| match v {
                Some(s) => format!("{c}: {}", s.display()),
                None => format!("{c}: -"),
            })
            .collect();
        println!("{row} | {}", cells.join(" | "));
    }
    println!("table written to {}", out.join("table.csv").display());
}

fn write_report<T: serde::Serialize>(out: &Path, name: &str, value: &T) -> CliResult<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(name), serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train {
            config,
            resume,
            stop_after,
        } => {
            let (cfg, out) = load_config(config, cli)?;
            let o = TrainOptions {
                resume: *resume,
                stop_after: *stop_after,
            };
            let results = train_all(&cfg, &out, cli.jobs, o)?;
            for r in &results {
                println!("seed {}: test accuracy {:.2}%", r.seed, r.test_accuracy);
            }
            if results.len() > 1 {
                println!("mean {}", aggregate(&results)?.accuracy.display());
            }
        }
        Command::DistillGrid {
            config,
            subsets,
            methods,
            resume,
        } => {
            let (cfg, out) = load_config(config, cli)?;
            let subsets = subsets
                .iter()
                .map(|s| match s.as_str() {
                    "full" => Ok(None),
                    n => n
                        .parse()
                        .map(Some)
                        .map_err(|_| CliError::Config(format!("bad subset size {n}"))),
                })
                .collect::<CliResult<Vec<_>>>()?;
            let methods: Vec<&str> = methods.iter().map(String::as_str).collect();
            let (table, _) = grid::distill_grid(&cfg, &subsets, &methods, &out, cli.jobs, opts(*resume))?;
            print_table(&table, &out);
        }
        Command::RobustnessGrid {
            config,
            lambdas,
            sigmas,
            resume,
        } => {
            let (cfg, out) = load_config(config, cli)?;
            let (table, _) = grid::robustness_grid(&cfg, lambdas, sigmas, &out, cli.jobs, opts(*resume))?;
            print_table(&table, &out);
        }
        Command::Transfer {
            config,
            oracle,
            methods,
            resume,
        } => {
            let (cfg, out) = load_config(config, cli)?;
            let methods: Vec<&str> = methods.iter().map(String::as_str).collect();
            let (table, _) = grid::transfer_grid(&cfg, &methods, oracle.as_deref(), &out, cli.jobs, opts(*resume))?;
            print_table(&table, &out);
        }
        Command::Ablate {
            config,
            axis,
            taps,
            windows,
            resume,
        } => {
            let (cfg, out) = load_config(config, cli)?;
            let axis = match axis {
                Axis::TapDepth => {
                    AblationAxis::TapDepth(taps.iter().map(|t| grid::parse_tap_pair(t)).collect::<CliResult<_>>()?)
                }
                Axis::PoolWindow => {
                    AblationAxis::PoolWindow(windows.iter().map(|w| grid::parse_window(w)).collect::<CliResult<_>>()?)
                }
            };
            let (table, _) = grid::ablate(&cfg, &axis, &out, cli.jobs, opts(*resume))?;
            print_table(&table, &out);
        }
        Command::Verify { check } => {
            let out = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/verify"));
            let seed = cli.seed.unwrap_or(0);
            let pass = match check {
                Check::NoiseEquiv {
                    family,
                    sigmas,
                    pairs,
                    max_dim,
                } => {
                    let family: NoiseFamily = family.parse()?;
                    let r = verify::noise_equiv(family, sigmas, *pairs, *max_dim, seed)?;
                    for p in &r.pairs {
                        let slope = p.report.slope.map_or("none".to_string(), |s| format!("{s:.3}"));
                        println!(
                            "seed {} dim {}: slope {slope} {}",
                            p.seed,
                            p.dim,
                            if p.pass { "ok" } else { "FAIL" }
                        );
                    }
                    println!(
                        "{}/{} pairs with slope in [{}, {}]",
                        r.passed,
                        r.pairs.len(),
                        verify::SLOPE_RANGE.0,
                        verify::SLOPE_RANGE.1
                    );
                    write_report(&out, "noise-equiv.json", &r)?;
                    r.pass
                }
                Check::Exactness { samples } => {
                    let r = verify::exactness(*samples, seed)?;
                    println!(
                        "relu: residual {:.3e}, 3 stderr {:.3e}, exact {}",
                        r.relu.residual,
                        3.0 * r.relu.stderr,
                        r.relu.exact
                    );
                    println!(
                        "sigmoid control: residual {:.3e}, 3 stderr {:.3e}, exact {}",
                        r.sigmoid.residual,
                        3.0 * r.sigmoid.stderr,
                        r.sigmoid.exact
                    );
                    write_report(&out, "exactness.json", &r)?;
                    r.pass
                }
                Check::Bound { seeds } => {
                    let r = verify::bound(*seeds, seed)?;
                    println!("bound holds on {}/{} trials", r.holds, r.trials);
                    println!("superset never increases the distance on {}/{} trials", r.superset_holds, r.superset_trials);
                    write_report(&out, "bound.json", &r)?;
                    r.pass
                }
            };
            if !pass {
                return Err(CliError::Invariant("verification failed; see the report".into()));
            }
        }
        Command::Report { paths } => {
            let results = load_results(paths)?;
            let s = aggregate(&results)?;
            println!("{} ({} seeds, config {})", s.name, s.seeds.len(), &s.config_hash[..12]);
            println!("test accuracy {}", s.accuracy.display());
            for (sigma, st) in &s.robustness {
                println!("sigma {sigma}: {}", st.display());
            }
            for j in &s.jacobian_reduction {
                println!(
                    "jacobian loss reduction at taps ({},{}): {}%",
                    j.teacher_tap,
                    j.student_tap,
                    j.percent.display()
                );
            }
            if let Some(out) = &cli.out_dir {
                std::fs::create_dir_all(out)?;
                write_summary_csv(&out.join("summary.csv"), std::slice::from_ref(&s))?;
                write_report(out, "summary.json", &s)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
