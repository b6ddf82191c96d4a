//! Command-line interface to the numerical laboratory.
//!
//! Every subcommand builds a [`RunConfig`], runs it, and exits 0 exactly
//! when all of the run's checks pass. The `evolve` subcommand picks the
//! matching named experiment from its initial datum: the soliton without
//! noise at mass ratio 1 is the exact-rotation study, the self-similar
//! datum is the blow-up study (deterministic) or the modulation tracker
//! (with noise), and anything else is a generic trajectory run.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rnls::lab::{self, Experiment, InitKind, RunConfig, RunSummary};

#[derive(Parser)]
#[command(
    name = "rnls",
    version,
    about = "Numerical laboratory for the stochastic focusing mass-critical Schrodinger equation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every experiment subcommand.
#[derive(Args)]
struct CommonOpts {
    /// Spatial dimension (1 or 2).
    #[arg(long)]
    dim: Option<usize>,
    /// Grid points per axis (power of two).
    #[arg(long)]
    n: Option<usize>,
    /// Half-length of the periodic box.
    #[arg(long = "L")]
    l: Option<f64>,
    /// Seed for every random draw in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to runs/<experiment>).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonOpts {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.dim {
            cfg.dim = v;
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.l {
            cfg.l = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the soliton profile and report its invariants.
    GroundState {
        #[command(flatten)]
        common: CommonOpts,
        /// Profile-solver tolerance.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Integrate one trajectory; writes diagnostics.csv, snapshots, summary.json.
    Evolve {
        #[command(flatten)]
        common: CommonOpts,
        /// Time horizon.
        #[arg(long = "T")]
        t_end: Option<f64>,
        /// Base time step.
        #[arg(long)]
        dt0: Option<f64>,
        /// Step with a fixed dt0 instead of adapting to the gradient norm.
        #[arg(long)]
        fixed_dt: bool,
        /// Number of spatial noise modes.
        #[arg(long)]
        noise_modes: Option<usize>,
        /// Amplitude of the leading noise mode (0 = deterministic).
        #[arg(long)]
        noise_amp: Option<f64>,
        /// Initial datum: gaussian, ground, or ST.
        #[arg(long)]
        init: Option<String>,
        /// Initial mass over the soliton mass.
        #[arg(long)]
        mass_ratio: Option<f64>,
        /// Singular time of the ST datum.
        #[arg(long)]
        blowup_time: Option<f64>,
        /// Comma-separated times at which to store field snapshots.
        #[arg(long)]
        snapshots: Option<String>,
    },
    /// Fit soliton parameters to one snapshot or to a directory of them.
    Modfit {
        /// A snap_t*.rnls file, or a directory containing such snapshots.
        #[arg(long)]
        input: PathBuf,
        /// Initial guess "lambda,alpha..,beta..,gamma,theta" (2*dim+3 values).
        #[arg(long)]
        pinit: String,
        /// Report path (file mode) or output directory (directory mode).
        #[arg(long)]
        out: PathBuf,
    },
    /// Driver integration identities, Riemann rates, and the weak-form residual.
    RoughCheck {
        #[command(flatten)]
        common: CommonOpts,
        /// Driver mesh cells (power of two).
        #[arg(long)]
        cells: Option<usize>,
        /// Number of spatial noise modes.
        #[arg(long)]
        noise_modes: Option<usize>,
        /// Amplitude of the leading noise mode (0 keeps the weak form silent).
        #[arg(long)]
        noise_amp: Option<f64>,
    },
    /// Mass sweep below the soliton mass plus the critical-mass control row.
    ThresholdSweep {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated mass ratios to sweep.
        #[arg(long)]
        ratios: Option<String>,
        /// Time horizon of each sweep row.
        #[arg(long = "T")]
        t_end: Option<f64>,
        /// Number of spatial noise modes.
        #[arg(long)]
        noise_modes: Option<usize>,
        /// Amplitude of the leading noise mode.
        #[arg(long)]
        noise_amp: Option<f64>,
    },
    /// Run any experiment from a flat key = value config file.
    Run {
        /// Path of the configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_times(text: &str) -> Result<Vec<f64>, String> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| format!("unparseable time '{p}'"))
        })
        .collect()
}

/// The named experiment matching an `evolve` invocation.
fn evolve_experiment(init: InitKind, noise_amp: f64, mass_ratio: f64) -> Experiment {
    match init {
        InitKind::St if mass_ratio == 1.0 && noise_amp == 0.0 => Experiment::Pseudoconformal,
        InitKind::St if mass_ratio == 1.0 => Experiment::ModulationTrack,
        InitKind::Ground if mass_ratio == 1.0 && noise_amp == 0.0 => Experiment::ExactSoliton,
        _ => Experiment::Evolve,
    }
}

fn report(summary: &RunSummary, out: &std::path::Path) -> ExitCode {
    for c in &summary.checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        match (c.observed, c.threshold) {
            (Some(o), Some(t)) => {
                println!("[{verdict}] {}: {} (observed {o:.6e}, bound {t:.6e})", c.name, c.detail)
            }
            _ => println!("[{verdict}] {}: {}", c.name, c.detail),
        }
    }
    if let Some(status) = &summary.status {
        println!("status: {status}");
    }
    if let Some(tau) = summary.tau_star_estimate {
        println!("tau_star_estimate: {tau:.6}");
    }
    println!(
        "{}: {} -> {}",
        summary.experiment,
        if summary.passed { "PASS" } else { "FAIL" },
        out.join("summary.json").display()
    );
    if summary.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn execute(cfg: RunConfig) -> ExitCode {
    match lab::run(&cfg) {
        Ok(summary) => report(&summary, &cfg.out),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::GroundState { common, tol } => {
            let mut cfg = RunConfig::defaults(Experiment::GroundState);
            common.apply(&mut cfg);
            if let Some(v) = tol {
                cfg.tol = v;
            }
            execute(cfg)
        }
        Command::Evolve {
            common,
            t_end,
            dt0,
            fixed_dt,
            noise_modes,
            noise_amp,
            init,
            mass_ratio,
            blowup_time,
            snapshots,
        } => {
            let init = match init.as_deref().map(InitKind::parse).transpose() {
                Ok(v) => v.unwrap_or(InitKind::Gaussian),
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let ratio = mass_ratio.unwrap_or(if init == InitKind::Gaussian { 0.9 } else { 1.0 });
            let amp = noise_amp.unwrap_or(0.0);
            let mut cfg = RunConfig::defaults(evolve_experiment(init, amp, ratio));
            cfg.init = init;
            cfg.mass_ratio = ratio;
            cfg.noise_amp = amp;
            common.apply(&mut cfg);
            if let Some(v) = t_end {
                cfg.t_end = v;
            }
            if let Some(v) = dt0 {
                cfg.dt0 = v;
            }
            if fixed_dt {
                cfg.adaptive = false;
            }
            if let Some(v) = noise_modes {
                cfg.noise_modes = v;
            }
            if let Some(v) = blowup_time {
                cfg.blowup_time = v;
            }
            if let Some(text) = snapshots {
                match parse_times(&text) {
                    Ok(times) => cfg.snapshots = times,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(2);
                    }
                }
            }
            execute(cfg)
        }
        Command::Modfit { input, pinit, out } => {
            if input.is_dir() {
                match lab::modfit_dir(&input, &pinit, &out) {
                    Ok(rows) => {
                        println!(
                            "fitted {} snapshots -> {}",
                            rows.len(),
                            out.join("mod_track.csv").display()
                        );
                        ExitCode::SUCCESS
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        ExitCode::from(1)
                    }
                }
            } else {
                match lab::modfit_file(&input, &pinit, &out) {
                    Ok(rep) => {
                        println!(
                            "lambda {:.6e}  gamma {:.6e}  theta {:.6e}  |eps| {:.6e}  ({} iterations)",
                            rep.lambda, rep.gamma, rep.theta, rep.eps_l2, rep.newton_iters
                        );
                        println!("report -> {}", out.display());
                        ExitCode::SUCCESS
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        ExitCode::from(1)
                    }
                }
            }
        }
        Command::RoughCheck {
            common,
            cells,
            noise_modes,
            noise_amp,
        } => {
            let mut cfg = RunConfig::defaults(Experiment::RoughCheck);
            common.apply(&mut cfg);
            if let Some(v) = cells {
                cfg.cells = v;
            }
            if let Some(v) = noise_modes {
                cfg.noise_modes = v;
            }
            if let Some(v) = noise_amp {
                cfg.noise_amp = v;
            }
            execute(cfg)
        }
        Command::ThresholdSweep {
            common,
            ratios,
            t_end,
            noise_modes,
            noise_amp,
        } => {
            let mut cfg = RunConfig::defaults(Experiment::ThresholdSweep);
            common.apply(&mut cfg);
            if let Some(text) = ratios {
                match parse_times(&text) {
                    Ok(r) => cfg.ratios = r,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(2);
                    }
                }
            }
            if let Some(v) = t_end {
                cfg.t_end = v;
            }
            if let Some(v) = noise_modes {
                cfg.noise_modes = v;
            }
            if let Some(v) = noise_amp {
                cfg.noise_amp = v;
            }
            execute(cfg)
        }
        Command::Run { config, out } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", config.display());
                    return ExitCode::from(2);
                }
            };
            match RunConfig::parse(&text) {
                Ok(mut cfg) => {
                    if let Some(v) = out {
                        cfg.out = v;
                    }
                    execute(cfg)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
