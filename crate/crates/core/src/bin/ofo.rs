use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use ofo_core::estimator::{NoiseModel, SensitivityEstimate, DEFAULT_SIGMA0};
use ofo_core::export::{
    matrix_rows, read_trace_csv, write_checkpoints, write_report_csv, write_trace_csv,
};
use ofo_core::plant::{linearize, zero_injection_point, AcPlant};
use ofo_core::scenario::{load_scenario, Scenario, StepSize};
use ofo_core::sim::{
    compare_variants, prepare, replay_increments, tune, RunOptions, SimulationTrace, VariantSpec,
    VariantSummary,
};
use ofo_core::{OfoError, Result};

#[derive(Parser)]
#[command(
    name = "ofo",
    version,
    about = "Online feedback optimization with online sensitivity estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one variant of a scenario.
    Run {
        scenario: PathBuf,
        /// Override the scenario's variant.
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate several variants against the same oracle series.
    Compare {
        scenario: PathBuf,
        /// Comma-separated, e.g. `true_h,estimated_h,constant_h0@0.1`.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "true_h,estimated_h,constant_h0"
        )]
        variants: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Write the scenario's synthetic profiles to CSV.
    MakeProfiles {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample monotonicity / Lipschitz constants and suggest a step size.
    Tune {
        scenario: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replay the (Δu, Δy) stream of a recorded trace through the estimator.
    EstimateOffline {
        trace: PathBuf,
        /// Take the initial estimate (H0) and noise settings from a scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Directory for CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_oracle: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma_u: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// Excitation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Record the controller's sensitivity every N steps as JSON.
    #[arg(long, value_name = "N")]
    dump_estimates: Option<usize>,
    /// Record ‖H_used − H_true‖ each step.
    #[arg(long)]
    h_error: bool,
}

impl Common {
    fn apply(&self, sc: &mut Scenario) -> Result<()> {
        if let Some(a) = self.alpha {
            sc.step_size = StepSize::Fixed(a);
            sc.controller.alpha = a;
        }
        if let Some(s) = self.sigma_u {
            sc.controller.sigma_u = s;
        }
        if let Some(r) = self.rho {
            sc.controller.rho = r;
        }
        if let Some(seed) = self.seed {
            sc.seeds.excitation = seed;
        }
        sc.controller.validate()
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            no_oracle: self.no_oracle,
            record_sensitivity_error: self.h_error,
            checkpoint_every: self.dump_estimates,
        }
    }
}

fn print_summary(s: &VariantSummary) {
    println!(
        "{:<20} alpha={:<12.4e} track={:<12.4e} track_final={:<12.4e} rel_err_final={:<12.4e} violations={:<7} diverged={} nonconverged={}",
        s.label,
        s.alpha,
        s.mean_tracking_error,
        s.final_third_tracking_error,
        s.final_third_rel_error,
        s.total_violations,
        s.diverged,
        s.nonconverged
    );
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| OfoError::io(dir, e))
}

fn write_trace_outputs(trace: &SimulationTrace, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_trace_csv(trace, dir.join(format!("trace_{}.csv", trace.label)))?;
    write_checkpoints(trace, dir, &format!("estimate_{}", trace.label))
}

fn trace_status(traces: &[SimulationTrace]) -> Status {
    if traces.iter().any(|t| t.nonconvergence_at.is_some()) {
        Status::NonConvergence
    } else if traces.iter().any(SimulationTrace::diverged) {
        Status::Diverged
    } else {
        Status::Ok
    }
}

enum Status {
    Ok,
    Diverged,
    NonConvergence,
}

fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Run {
            scenario,
            variant,
            common,
        } => {
            let mut sc = load_scenario(&scenario)?;
            common.apply(&mut sc)?;
            let spec = match variant {
                Some(v) => VariantSpec::parse(&v)?,
                None => VariantSpec::new(sc.variant),
            };
            let prepared = prepare(&sc, &common.options())?;
            let trace = prepared.simulate(&spec)?;
            print_summary(&VariantSummary::from_trace(&trace, sc.horizon));
            if let Some(t) = trace.nonconvergence_at {
                eprintln!("power flow failed to converge at step {t}; trace truncated");
            }
            if let Some(t) = trace.diverged_at {
                eprintln!("divergence flagged from step {t}");
            }
            if let Some(dir) = &common.out {
                write_trace_outputs(&trace, dir)?;
            }
            Ok(trace_status(std::slice::from_ref(&trace)))
        }
        Command::Compare {
            scenario,
            variants,
            common,
        } => {
            let mut sc = load_scenario(&scenario)?;
            common.apply(&mut sc)?;
            let specs = variants
                .iter()
                .map(|v| VariantSpec::parse(v))
                .collect::<Result<Vec<_>>>()?;
            let report = compare_variants(&sc, &specs, &common.options())?;
            println!(
                "scenario {} (alpha = {:.4e})",
                report.scenario, report.alpha
            );
            for s in &report.summaries {
                print_summary(s);
            }
            if let Some(dir) = &common.out {
                ensure_dir(dir)?;
                write_report_csv(&report, dir.join("report.csv"))?;
                for t in &report.traces {
                    write_trace_outputs(t, dir)?;
                }
            }
            Ok(trace_status(&report.traces))
        }
        Command::MakeProfiles {
            scenario,
            seed,
            horizon,
            out,
        } => {
            let sc = load_scenario(&scenario)?;
            let table = sc.synthetic_table(seed, horizon)?;
            table.write_csv(&sc.feeder, &out)?;
            println!("wrote {} rows to {}", table.len(), out.display());
            Ok(Status::Ok)
        }
        Command::Tune {
            scenario,
            samples,
            seed,
        } => {
            let mut sc = load_scenario(&scenario)?;
            if let Some(n) = samples {
                sc.tune_samples = n;
            }
            if let Some(s) = seed {
                sc.tune_seed = s;
            }
            let plant = AcPlant::new(sc.feeder.clone())?;
            let est = tune(&sc, &plant)?;
            let fraction = match sc.step_size {
                StepSize::Auto { fraction } => fraction,
                StepSize::Fixed(_) => 0.3,
            };
            println!("eta_hat   = {:.6e}", est.eta_hat);
            println!("l_hat     = {:.6e}", est.l_hat);
            println!("alpha_max = {:.6e}", est.alpha_max);
            println!(
                "alpha     = {:.6e} ({} x alpha_max)",
                fraction * est.alpha_max,
                fraction
            );
            println!(
                "epsilon   = {:.6}",
                est.epsilon_at(fraction * est.alpha_max)
            );
            Ok(Status::Ok)
        }
        Command::EstimateOffline {
            trace,
            scenario,
            out,
        } => {
            let (n_u, n_y, steps) = read_trace_csv(&trace)?;
            let mut estimate = match &scenario {
                Some(path) => {
                    let sc = load_scenario(path)?;
                    let plant = AcPlant::new(sc.feeder.clone())?;
                    let (u_op, d_op) = zero_injection_point(&sc.feeder, sc.slack_ref);
                    let lin = linearize(&plant, &u_op, &d_op)?;
                    if lin.h0.shape() != (n_y, n_u) {
                        return Err(OfoError::DimensionMismatch {
                            what: "trace width vs scenario feeder",
                            expected: lin.h0.len(),
                            got: n_u * n_y,
                        });
                    }
                    SensitivityEstimate::new(
                        &lin.h0,
                        sc.estimator.sigma0,
                        sc.estimator.noise,
                        sc.estimator.backend,
                    )?
                }
                None => SensitivityEstimate::new(
                    &DMatrix::zeros(n_y, n_u),
                    DEFAULT_SIGMA0,
                    NoiseModel::default(),
                    Default::default(),
                )?,
            };
            let inputs: Vec<DVector<f64>> = steps.iter().map(|s| s.u.clone()).collect();
            let outputs: Vec<DVector<f64>> = steps.iter().map(|s| s.y.clone()).collect();
            let errors = replay_increments(&mut estimate, &inputs, &outputs)?;
            let finite: Vec<f64> = errors.iter().copied().filter(|e| e.is_finite()).collect();
            let tail = &finite[finite.len() * 2 / 3..];
            println!("replayed {} increments", errors.len());
            if !tail.is_empty() {
                println!(
                    "mean relative prediction error, final third: {:.4e}",
                    tail.iter().sum::<f64>() / tail.len() as f64
                );
            }
            println!("covariance trace: {:.4e}", estimate.covariance_trace());
            if let Some(dir) = out {
                ensure_dir(&dir)?;
                let path = dir.join("offline_errors.csv");
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(["t", "rel_error"])?;
                for (k, e) in errors.iter().enumerate() {
                    w.write_record([steps[k + 1].t.to_string(), e.to_string()])?;
                }
                w.flush().map_err(|e| OfoError::io(&path, e))?;
                let path = dir.join("offline_estimate.json");
                let text = serde_json::to_string_pretty(&matrix_rows(&estimate.matrix()))?;
                std::fs::write(&path, text).map_err(|e| OfoError::io(&path, e))?;
            }
            Ok(Status::Ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Diverged) => ExitCode::from(3),
        Ok(Status::NonConvergence) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                OfoError::NonConvergence { .. } | OfoError::MaxIterations { .. } => {
                    ExitCode::from(4)
                }
                e if e.is_validation() || matches!(e, OfoError::Io { .. }) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
