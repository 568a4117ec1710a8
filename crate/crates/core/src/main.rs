use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use ccspds::report::{emit_report, execute, ModeSelection};
use ccspds::scenario::{load_scenario, Overrides};
use ccspds::solver::Mode;
use ccspds::Result;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CliMode {
    Ccspds,
    Spds,
    Both,
}

/// Chance-constrained valley filling for EV fleets on a radial feeder.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    mode: CliMode,
    /// Output directory for CSV files and the manifest.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Baseline demand standard deviation per house (W).
    #[arg(long)]
    sigma_p: Option<f64>,
    /// Lower voltage bound (pu).
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Shrinking factor for both primal and dual updates.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    d_lambda: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    chance_scale: Option<f64>,
    #[arg(long)]
    mvn_tol: Option<f64>,
}

fn run(args: &Args) -> Result<()> {
    let overrides = Overrides {
        sigma_p_w: args.sigma_p,
        nu_lower: args.nu,
        iters: args.iters,
        seed: args.seed,
        mc_samples: args.mc_samples,
        delta: args.delta,
        alpha: args.alpha,
        beta: args.beta,
        tau: args.tau,
        d_lambda: args.d_lambda,
        rho: args.rho,
        chance_scale: args.chance_scale,
        mvn_tol: args.mvn_tol,
    };
    let scenario = load_scenario(&args.scenario, &overrides)?;
    let selection = match args.mode {
        CliMode::Ccspds => ModeSelection::ChanceConstrained,
        CliMode::Spds => ModeSelection::Deterministic,
        CliMode::Both => ModeSelection::Both,
    };
    let p = &scenario.problem;
    eprintln!(
        "{}: {} nodes, {} EVs, {} slots",
        scenario.settings.name,
        p.node_count(),
        p.ev_count(),
        p.horizon()
    );
    let report = execute(&scenario, selection)?;
    let base = &report.baseline_total_w;
    for r in &report.results {
        let name = match r.mode {
            Mode::ChanceConstrained => "ccspds",
            Mode::Deterministic => "spds",
        };
        eprintln!(
            "{name}: {} iterations in {:.2} s, load std {:.1} kW (baseline {:.1} kW), \
             {:.2} violating node-slots per sample, {:.1}% of slots with <= 1 violating node",
            r.history.len(),
            r.solve_s,
            std_dev(r.total_load_w()) / 1e3,
            std_dev(base) / 1e3,
            r.mc.mean_node_slot_violations(),
            100.0 * r.mc.fraction_at_most(1),
        );
    }
    let files = emit_report(&report, &args.out)?;
    eprintln!("wrote {} files to {}", files.len(), args.out.display());
    Ok(())
}

fn std_dev(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
