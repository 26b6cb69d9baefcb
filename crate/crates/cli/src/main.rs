//! `dab-tps`: dataset generation, surrogate training, swarm optimization,
//! fuzzy fitting, closed-loop runs and comparisons from one config file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dab_tps::closed_loop::{simulate, LoopScenario};
use dab_tps::compare::{compare_sweep, write_comparison};
use dab_tps::fis::{LutBaseline, TsFis};
use dab_tps::pipeline::{self, PipelineConfig, StageOutcome, ValidationReport};
use dab_tps::pso::OptimalSurface;
use dab_tps::Error;

#[derive(Debug, Parser)]
#[command(name = "dab-tps", version, about = "Current-stress-optimal TPS modulation for DAB converters")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(short, long, global = true, default_value = "dab-tps.toml")]
    config: PathBuf,
    /// Override `master_seed`.
    #[arg(long, global = true)]
    master_seed: Option<u64>,
    /// Override `output_dir`.
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the operating grid exactly and write the dataset.
    GenData {
        #[arg(long)]
        n_p: Option<usize>,
        #[arg(long)]
        n_v2: Option<usize>,
        #[arg(long)]
        n_d1: Option<usize>,
        #[arg(long)]
        n_d2: Option<usize>,
    },
    /// Train the current-stress surrogate.
    TrainNn {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Run the swarm over the surface grid.
    Optimize {
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Fit the fuzzy modulator to the optimal surface.
    FitFis,
    /// Simulate closed-loop scenarios with the fitted modulator.
    RunLoop {
        /// Scenario files; defaults to the scenarios in the config.
        #[arg(long = "scenario")]
        scenarios: Vec<PathBuf>,
    },
    /// Compare single phase shift, lookup table and fuzzy modulation.
    Compare {
        /// Power points in watts, comma separated.
        #[arg(long, value_delimiter = ',')]
        powers: Vec<f64>,
        /// Output voltages in volts, comma separated.
        #[arg(long, value_delimiter = ',')]
        voltages: Vec<f64>,
        /// Output CSV; defaults to comparison.csv in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every acceptance metric and write the validation report.
    Validate {
        #[arg(long)]
        emit_plots_data: bool,
    },
    /// All stages in order.
    Pipeline {
        #[arg(long)]
        emit_plots_data: bool,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
    Validation,
}

fn is_usage(e: &Error) -> bool {
    match e {
        Error::Stage { source, .. } => is_usage(source),
        Error::Parse { .. } | Error::InvalidConfig(_) | Error::InvalidParams(_) | Error::InductorSizing { .. } => true,
        _ => false,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if is_usage(&e) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e)
        }
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig::load(&common.config).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(seed) = common.master_seed {
        cfg.master_seed = seed;
    }
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn report_stage(stage: &str, outcome: StageOutcome) {
    match outcome {
        StageOutcome::Ran => println!("{stage}: done"),
        StageOutcome::UpToDate => println!("{stage}: up to date"),
    }
}

fn print_report(report: &ValidationReport, path: &Path) {
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("note: {}", report.note);
    println!("report: {}", path.display());
}

fn finish_validation(cfg: &PipelineConfig) -> Result<(), Failure> {
    let path = cfg.artifacts().validation();
    let report = ValidationReport::load(&path)?;
    print_report(&report, &path);
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Validation)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData { n_p, n_v2, n_d1, n_d2 } => {
            set(&mut cfg.grid.n_p, n_p);
            set(&mut cfg.grid.n_v2, n_v2);
            set(&mut cfg.grid.n_d1, n_d1);
            set(&mut cfg.grid.n_d2, n_d2);
            report_stage("gen-data", pipeline::gen_data(&cfg)?);
        }
        Command::TrainNn { epochs, batch_size, learning_rate, patience } => {
            set(&mut cfg.train.max_epochs, epochs);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.learning_rate, learning_rate);
            set(&mut cfg.train.early_stop_patience, patience);
            report_stage("train-nn", pipeline::train_nn(&cfg)?);
        }
        Command::Optimize { particles, iterations } => {
            set(&mut cfg.pso.n_particles, particles);
            set(&mut cfg.pso.max_iterations, iterations);
            report_stage("optimize", pipeline::optimize(&cfg)?);
        }
        Command::FitFis => report_stage("fit-fis", pipeline::fit(&cfg)?),
        Command::RunLoop { scenarios } => {
            cfg.validate()?;
            let scenarios = if scenarios.is_empty() {
                cfg.scenarios.iter().map(|e| e.scenario.clone()).collect()
            } else {
                scenarios.iter().map(|p| LoopScenario::load(p)).collect::<Result<Vec<_>, _>>()?
            };
            let art = cfg.artifacts();
            let fis = TsFis::load(&art.fis()).map_err(|e| e.in_stage("run-loop"))?;
            let mut failed = false;
            for s in &scenarios {
                let (trace, err) = simulate(s, &fis, &cfg.converter);
                let path = art.trace(&s.name);
                trace.save(&path)?;
                let rep = pipeline::scenario_report(s, &trace, err.as_ref());
                println!("{}: {} periods -> {}", s.name, trace.rows.len(), path.display());
                for seg in &rep.segments {
                    println!(
                        "  [{:.3}, {:.3}] s  v2_ref {} V  load {} ohm  power {:.1} W (expected {:.1} W)  settling {}",
                        seg.start,
                        seg.end,
                        seg.v2_ref,
                        seg.r_load,
                        seg.measured_power,
                        seg.expected_power,
                        seg.settling_time.map_or("never".to_owned(), |t| format!("{:.1} ms", 1e3 * t))
                    );
                }
                if let Some(e) = err {
                    eprintln!("{}: {e}", s.name);
                    failed = true;
                }
            }
            if failed {
                return Err(Failure::Validation);
            }
        }
        Command::Compare { powers, voltages, out } => {
            cfg.validate()?;
            let art = cfg.artifacts();
            let load = || -> dab_tps::Result<(TsFis, LutBaseline)> {
                let fis = TsFis::load(&art.fis())?;
                let lut = LutBaseline::new(OptimalSurface::load(&art.surface())?, cfg.fis_ranges())?;
                Ok((fis, lut))
            };
            let (fis, lut) = load().map_err(|e| e.in_stage("compare"))?;
            let powers = if powers.is_empty() { cfg.validation.test_powers.clone() } else { powers };
            let voltages = if voltages.is_empty() { cfg.validation.test_voltages.clone() } else { voltages };
            let points: Vec<(f64, f64)> = voltages.iter().flat_map(|&v| powers.iter().map(move |&p| (p, v))).collect();
            let rows = compare_sweep(&cfg.converter, &fis, &lut, &points);
            let out = out.unwrap_or_else(|| art.comparison());
            write_comparison(&rows, &out)?;
            for r in &rows {
                println!("{:>6.1} W {:>6.1} V {:<9} i_pk {:.4} A", r.p, r.v2, r.strategy.label(), r.i_pk);
            }
            println!("{}", pipeline::EFFICIENCY_NOTE);
            println!("written: {}", out.display());
        }
        Command::Validate { emit_plots_data } => {
            report_stage("validate", pipeline::validate(&cfg, emit_plots_data)?);
            finish_validation(&cfg)?;
        }
        Command::Pipeline { emit_plots_data } => {
            for (stage, outcome) in pipeline::run_pipeline(&cfg, emit_plots_data)? {
                report_stage(stage, outcome);
            }
            finish_validation(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation) => ExitCode::from(1),
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
