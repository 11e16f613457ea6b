//! Experiment driver: plans, run directories, tables and the verify battery.

pub mod plan;
pub mod store;
pub mod table;
pub mod verify;

use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mcssl::train::{run_grid, RunConfig};
use mcssl::{Error, Exec, Result};
use sha2::{Digest, Sha256};

use crate::plan::Plan;
use crate::store::Outcome;

/// Per-run outcomes of one `run` invocation, in plan order.
#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub cells: Vec<(String, Outcome)>,
}

impl RunReport {
    pub fn count(&self, f: impl Fn(&Outcome) -> bool) -> usize {
        self.cells.iter().filter(|(_, o)| f(o)).count()
    }

    pub fn failed(&self) -> usize {
        self.count(|o| matches!(o, Outcome::Failed(_)))
    }

    pub fn steps_trained(&self) -> u64 {
        self.cells
            .iter()
            .map(|(_, o)| match o {
                Outcome::Completed { steps } => *steps,
                _ => 0,
            })
            .sum()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (hash, o) in &self.cells {
            let status = match o {
                Outcome::Skipped => "skipped".to_string(),
                Outcome::Completed { steps } => format!("completed ({steps} steps)"),
                Outcome::Failed(e) => format!("failed: {e}"),
            };
            let _ = writeln!(s, "{} {status}", &hash[..12]);
        }
        let _ = writeln!(
            s,
            "{} runs: {} completed, {} skipped, {} failed",
            self.cells.len(),
            self.count(|o| matches!(o, Outcome::Completed { .. })),
            self.count(|o| *o == Outcome::Skipped),
            self.failed()
        );
        s
    }
}

/// Applies `f` to every item on `workers` threads, results in input order.
fn pool<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                *slots[i].lock().unwrap() = Some(f(item));
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect()
}

/// A single run uses the data-parallel kernels only when it has the machine
/// to itself.
fn exec_for(workers: usize) -> Exec {
    if workers > 1 {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

/// Runs every config not already completed under `out`.
pub fn run_configs(configs: &[RunConfig], out: &Path, workers: usize) -> Result<RunReport> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let exec = exec_for(workers);
    let results = pool(configs, workers, |cfg| -> Result<(String, Outcome)> {
        Ok((cfg.hash()?, store::execute(cfg, out, exec)?))
    });
    Ok(RunReport {
        cells: results.into_iter().collect::<Result<_>>()?,
    })
}

pub fn run_plan(plan: &Plan, out: &Path, workers: usize, seed_offset: u64) -> Result<RunReport> {
    run_configs(&plan.configs(seed_offset)?, out, workers)
}

fn sweep_dir(out: &Path, template: &RunConfig, imp: &[f64], mart: &[f64]) -> Result<PathBuf> {
    let key = format!("{}\nlambda_imp = {imp:?}\nlambda_mart = {mart:?}\n", template.to_toml()?);
    let hash = hex::encode(Sha256::digest(key.as_bytes()));
    Ok(out.join("sweeps").join(hash))
}

/// Runs each sweep of `plan` not already present, writing `grid.csv` (one
/// row per cell) and `best.toml` under `<out>/sweeps/<hash>/`.
pub fn run_sweeps(plan: &Plan, out: &Path, workers: usize, seed_offset: u64) -> Result<Vec<(PathBuf, bool)>> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| Error::Io { path: p, source: e }
    };
    let mut done = Vec::new();
    for (template, imp, mart) in plan.sweep_templates(seed_offset)? {
        let dir = sweep_dir(out, &template, &imp, &mart)?;
        if dir.join("best.toml").exists() {
            done.push((dir, false));
            continue;
        }
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        fs::write(dir.join("template.toml"), template.to_toml()?).map_err(io(&dir))?;
        let g = run_grid(&template, &imp, &mart, if workers > 1 { Exec::Parallel } else { Exec::Sequential })?;
        let mut csv = String::from("lambda_imp,lambda_mart,validation_accuracy\n");
        for (i, a) in g.imp_grid.iter().enumerate() {
            for (j, b) in g.mart_grid.iter().enumerate() {
                let _ = writeln!(csv, "{a},{b},{}", g.scores[i][j]);
            }
        }
        fs::write(dir.join("grid.csv"), csv).map_err(io(&dir))?;
        let best = format!(
            "lambda_imp = {}\nlambda_mart = {}\nvalidation_accuracy = {}\n",
            g.best.0, g.best.1, g.best_score
        );
        fs::write(dir.join("best.toml"), best).map_err(io(&dir))?;
        done.push((dir, true));
    }
    Ok(done)
}

/// Table text for `kind` over the runs in `out`, restricted to `plan` when
/// given so that missing cells show up as gaps.
pub fn render_table(kind: table::Kind, out: &Path, plan: Option<&Plan>, seed_offset: u64, exec: Exec) -> Result<String> {
    use table::Kind;
    if kind == Kind::Theory {
        return Ok(verify::theory_table(&verify::run_checks(false, exec)));
    }
    let runs = store::scan(out)?;
    let planned = match plan {
        Some(p) => p.configs(seed_offset)?,
        None => Vec::new(),
    };
    let groups = table::groups(&runs, &planned);
    Ok(match kind {
        Kind::Main => table::metric_table(&groups, &["accuracy"], true),
        Kind::Sensitivity => table::metric_table(&groups, &["accuracy", "v_pred", "v_lat"], false),
        Kind::Calibration => table::metric_table(&groups, &["regret", "ece", "nll"], false),
        Kind::Bias => table::bias_table(&groups, exec)?,
        Kind::Theory => unreachable!(),
    })
}
