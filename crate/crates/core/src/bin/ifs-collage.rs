use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ifs_collage::arch::Routing;
use ifs_collage::cli::{self, ArchKind, CliError, Globals, TrainOverrides};
use ifs_collage::config::RunConfig;

#[derive(Parser)]
#[command(name = "ifs-collage", version, about = "Stochastic IFS experiments and collage-error training")]
struct Args {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write SVG plots.
    #[arg(long, global = true)]
    plot: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Moe,
    Resnet,
    Transformer,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoutingArg {
    Sampled,
    Dense,
}

#[derive(clap::Args, Clone, Default)]
struct TrainFlags {
    /// Lipschitz cap of every branch.
    #[arg(long)]
    cap: Option<f64>,
    #[arg(long, value_enum)]
    routing: Option<RoutingArg>,
    /// Gaussian noise added after each step.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Hutchinson iterates and chaos game of the Sierpinski gasket.
    Sierpinski {
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Train on two moons by minimising the collage error.
    TwoMoonsTrain {
        #[arg(long, value_enum)]
        arch: Option<Arch>,
        /// Transformer embedding width.
        #[arg(long)]
        embed: Option<usize>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Generalisation bound against the contraction cap.
    BoundSweep {
        #[arg(long, value_delimiter = ',')]
        caps: Option<Vec<f64>>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Lyapunov-average contraction without average contraction.
    AppendixC {
        #[arg(long, value_delimiter = ',')]
        p: Option<Vec<f64>>,
    },
    /// Sample the attractor of a trained checkpoint.
    Attractor {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
    },
}

fn overrides(flags: &TrainFlags, arch: Option<Arch>, embed: Option<usize>) -> TrainOverrides {
    TrainOverrides {
        arch: arch.map(|a| match a {
            Arch::Moe => ArchKind::Moe,
            Arch::Resnet => ArchKind::Resnet,
            Arch::Transformer => ArchKind::Transformer,
        }),
        cap: flags.cap,
        routing: flags.routing.map(|r| match r {
            RoutingArg::Sampled => Routing::Sampled,
            RoutingArg::Dense => Routing::Dense,
        }),
        sigma: flags.sigma,
        embed,
        epochs: flags.epochs,
    }
}

fn run(args: Args) -> Result<(), CliError> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    let config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out = args
        .out
        .clone()
        .or_else(|| config.output.as_ref().and_then(|o| o.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    let g = Globals::new(out, args.seed, args.plot, config);
    match args.cmd {
        Cmd::Sierpinski { iters } => {
            let s = cli::cmd_sierpinski(&g, iters)?;
            println!("wrote {} files to {}", s.files.len(), g.out.display());
            if s.hausdorff.is_finite() {
                println!("hausdorff(T_last, chaos) = {:.5}", s.hausdorff);
                println!("box-counting dimension = {:.4}", s.box_dimension);
            }
        }
        Cmd::TwoMoonsTrain { arch, embed, flags } => {
            let s = cli::cmd_two_moons_train(&g, &overrides(&flags, arch, embed))?;
            println!("loss {:.5} -> {:.5}", s.first_loss, s.final_loss);
            println!("spread: data {:.4}, attractor {:.4}", s.data_spread, s.attractor_spread);
            println!("wrote {} files to {}", s.files.len(), g.out.display());
        }
        Cmd::BoundSweep { caps, flags } => {
            let s = cli::cmd_bound_sweep(&g, caps, &overrides(&flags, None, None))?;
            let mut first_err = None;
            for e in &s.entries {
                match &e.report {
                    Ok(r) => println!(
                        "cap {}: gen {:.4} <= bound {:.4} (eps {:.4}, stat {:.4}, se {:.4})",
                        e.cap,
                        r.generalization_estimate,
                        r.bound_value,
                        r.epsilon_n_theta,
                        r.statistical_term,
                        r.mc_se()
                    ),
                    Err(err) => {
                        eprintln!("cap {}: {err}", e.cap);
                        first_err.get_or_insert_with(|| CliError::from(err));
                    }
                }
            }
            if let Some(e) = first_err {
                return Err(e);
            }
        }
        Cmd::AppendixC { p } => {
            let (_, rows) = cli::cmd_appendix_c(&g, p)?;
            for r in rows {
                println!(
                    "p={}: lyapunov {:.4} (exact {:.4}), mean-map slope {:.4}, x_T stochastic {:.3e}, mean map {:.3e}",
                    r.p,
                    r.lyapunov,
                    r.lyapunov_exact,
                    r.slope,
                    r.stochastic.last().unwrap(),
                    r.deterministic.last().unwrap()
                );
            }
        }
        Cmd::Attractor { checkpoint, count, burn_in } => {
            let (files, att) = cli::cmd_attractor(&g, checkpoint, count, burn_in)?;
            println!("{} points, wrote {}", att.len(), files[0].display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
