use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use cvtopt::experiment::{run_experiment, ExperimentConfig};
use cvtopt::penalties::{GradientVariant, MeritKind};
use cvtopt::Error;

/// Bounded Voronoi diagrams in a square and optimization of the generator
/// positions: CVT energy with optional geometric penalty terms.
#[derive(Parser, Debug)]
#[command(name = "cvtopt", version, about)]
struct Args {
    /// Number of sites; the domain is [0, sqrt(kappa0)]^2. Ignored when
    /// --sites is given.
    #[arg(long, default_value_t = 100)]
    kappa0: usize,

    /// Objective: g (energy only), f1 (+ equal areas), f2 (+ no small
    /// edges), f3 (+ density-prescribed areas).
    #[arg(long, default_value = "g", value_parser = parse_merit)]
    merit: MeritKind,

    /// Penalty weight (f1/f2: omega*G + J; f3: G + omega*J).
    #[arg(long, default_value_t = 0.01)]
    omega: f64,

    /// Minimum edge-length fraction of the cell mean (f2 only).
    #[arg(long)]
    c2: Option<f64>,

    /// Density profile 1-3 (f3 only).
    #[arg(long)]
    psi: Option<u8>,

    /// Energy gradient formula.
    #[arg(long, default_value = "integral", value_parser = parse_grad)]
    grad: GradientVariant,

    /// Seed of the uniform starting configuration.
    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Projected-gradient stopping tolerance.
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,

    /// Iteration cap (default: 50 * kappa0).
    #[arg(long)]
    max_iter: Option<usize>,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Also write diagram.svg.
    #[arg(long)]
    svg: bool,

    /// Draw site dots in the SVG.
    #[arg(long)]
    sites_dots: bool,

    /// Proceed even if the starting configuration is flagged as degenerate.
    #[arg(long)]
    allow_degenerate: bool,

    /// Parallel per-cell work (fixed-order sums keep values deterministic).
    #[arg(long)]
    parallel: bool,

    /// Start from this sites CSV (header i,x,y) instead of sampling.
    #[arg(long)]
    sites: Option<PathBuf>,
}

fn parse_merit(s: &str) -> Result<MeritKind, String> {
    match s {
        "g" => Ok(MeritKind::EnergyOnly),
        "f1" => Ok(MeritKind::EqualArea),
        "f2" => Ok(MeritKind::MinEdge),
        "f3" => Ok(MeritKind::Density),
        other => Err(format!("unknown merit '{other}' (use g, f1, f2 or f3)")),
    }
}

fn parse_grad(s: &str) -> Result<GradientVariant, String> {
    match s {
        "integral" => Ok(GradientVariant::Integral),
        "explicit" => Ok(GradientVariant::Explicit),
        other => Err(format!("unknown gradient variant '{other}' (use integral or explicit)")),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = ExperimentConfig {
        kappa0: args.kappa0,
        merit: args.merit,
        omega: args.omega,
        c2: args.c2,
        psi: args.psi,
        gradient_variant: args.grad,
        seed: args.seed,
        eps_opt: args.eps,
        max_iter: args.max_iter,
        out_dir: args.out,
        render_svg: args.svg,
        show_sites: args.sites_dots,
        allow_degenerate: args.allow_degenerate,
        parallel: args.parallel,
        sites_in: args.sites,
    };

    match run_experiment(&cfg) {
        Ok(bundle) => {
            for stage in &bundle.stages {
                let r = &stage.report;
                println!(
                    "{:<3} f {:.5e}  pg {:.1e}  G {:.5e}  J {:.5e}  it {:>5}  fcnt {:>5}  {:.3}s  [{}]",
                    stage.label,
                    r.f_star,
                    r.pg_norm,
                    r.energy,
                    r.penalty,
                    r.iterations,
                    r.fevals,
                    r.wall_time_s,
                    r.termination
                );
            }
            println!("outputs in {}", bundle.report_csv.parent().unwrap().display());
            if bundle.all_stages_ok() {
                ExitCode::SUCCESS
            } else {
                eprintln!("error: optimizer did not reach a certificate");
                ExitCode::from(3)
            }
        }
        Err(err @ (Error::Config(_) | Error::Parse { .. })) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
        Err(err @ (Error::DegenerateInput(_) | Error::DegenerateVertex(_))) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(3)
        }
    }
}
