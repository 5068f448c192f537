use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deepconv::cli;
use deepconv::config::RunConfig;
use deepconv::fields::Quantity;
use deepconv::Result;

#[derive(Parser)]
#[command(
    name = "deepconv",
    version,
    about = "Differentiable PIMPLE solver with a learned convection scheme"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; DEEPCONV_<SECTION>__<KEY> variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parameter file to resume from or evaluate.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batch-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Fine-mesh reference rollout written as snapshots.
    Generate,
    /// Solver-in-the-loop training on the projected rollout.
    Train,
    /// Baseline and learned scheme against the projected truth.
    Evaluate,
    /// Wall time per step.
    Benchmark,
    /// Tape gradients against finite differences.
    Gradcheck,
}

fn run(args: &Args) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let ckpt = args.checkpoint.as_deref();
    match args.command {
        Command::Generate => {
            let m = cli::cmd_generate(&cfg, args.verbose)?;
            println!(
                "wrote {} snapshots to {}",
                m.files.len(),
                cfg.fine_dir().display()
            );
        }
        Command::Train => {
            let out = cli::cmd_train(&cfg, ckpt)?;
            println!(
                "best loss {:.4} after {} epochs (baseline psi_x {:.3}, psi_y {:.3})",
                out.best_loss,
                out.history.len(),
                out.baseline.0,
                out.baseline.1
            );
        }
        Command::Evaluate => {
            let s = cli::cmd_evaluate(&cfg, ckpt)?;
            for (mi, m) in s.models.iter().enumerate() {
                let parts: Vec<String> = Quantity::ALL
                    .iter()
                    .map(|&q| format!("{}={:.3}", q.name(), s.psi[mi][q as usize]))
                    .collect();
                println!("{m}: {}", parts.join(" "));
            }
        }
        Command::Benchmark => {
            let rows = cli::cmd_benchmark(&cfg, ckpt)?;
            for r in &rows {
                println!(
                    "{:<28} {:>9} cells  {:.4e} s/step  cv {:.3}",
                    r.model,
                    r.cells,
                    r.mean(),
                    r.cv()
                );
            }
            if let [fine, base, dc] = rows.as_slice() {
                println!(
                    "learned/coarse {:.2}x  fine/learned {:.1}x",
                    dc.mean() / base.mean(),
                    fine.mean() / dc.mean()
                );
            }
        }
        Command::Gradcheck => {
            let s = cli::cmd_gradcheck(&cfg)?;
            println!(
                "reduced network: {} parameters, max rel error {:.3e}",
                s.reduced_params,
                s.reduced.max_rel_error()
            );
            if let Some(f) = &s.full {
                println!(
                    "full network: {} sampled, max rel error {:.3e}",
                    f.checks.len(),
                    f.max_rel_error()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = if args.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::error!("thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
