use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcssl::Exec;
use mcssl_cli::plan::Plan;
use mcssl_cli::table::Kind;
use mcssl_cli::{render_table, run_plan, run_sweeps, verify};

#[derive(Parser)]
#[command(name = "mcssl", version, about = "Run and summarize partial-observation SSL experiments")]
struct Cli {
    /// Output root holding one directory per run.
    #[arg(long, global = true, env = "MCSSL_OUT", default_value = "runs")]
    out: PathBuf,
    /// Concurrent runs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Added to every seed in the plan.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate every cell of a plan, skipping completed runs.
    Run {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Grid-search the loss weights for each sweep in a plan.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Print an aggregated table: main, sensitivity, bias, calibration or theory.
    Table {
        table: String,
        /// Restrict to this plan and show its missing cells.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Run the property battery.
    Verify {
        /// Skip the checks that train a model.
        #[arg(long)]
        quick: bool,
        #[arg(long, hide = true)]
        canary: bool,
    },
}

fn workers(w: Option<usize>) -> usize {
    w.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { plan } => Plan::load(&plan)
            .and_then(|p| run_plan(&p, &cli.out, workers(cli.workers), cli.seed_offset))
            .map(|r| {
                print!("{}", r.summary());
                r.failed() == 0
            }),
        Cmd::Sweep { plan } => Plan::load(&plan)
            .and_then(|p| run_sweeps(&p, &cli.out, workers(cli.workers), cli.seed_offset))
            .map(|dirs| {
                for (d, fresh) in dirs {
                    println!("{} {}", if fresh { "wrote" } else { "exists" }, d.display());
                }
                true
            }),
        Cmd::Table { table, plan } => match Kind::parse(&table) {
            None => {
                eprintln!("unknown table {table:?}; expected main, sensitivity, bias, calibration or theory");
                return ExitCode::from(2);
            }
            Some(kind) => plan
                .as_deref()
                .map(Plan::load)
                .transpose()
                .and_then(|p| render_table(kind, &cli.out, p.as_ref(), cli.seed_offset, Exec::Parallel))
                .map(|t| {
                    print!("{t}");
                    true
                }),
        },
        Cmd::Verify { quick, canary } => {
            let checks = if canary {
                verify::run_checks_with(verify::sign_flipped, !quick, Exec::Parallel)
            } else {
                verify::run_checks(!quick, Exec::Parallel)
            };
            print!("{}", verify::report(&checks));
            Ok(checks.iter().all(|c| c.pass))
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
