//! Run directories: `<out>/<config hash>/` holding `config.toml`,
//! `steps.csv`, `metrics.csv`, `checkpoint.bin` and `summary.toml`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mcssl::train::{run_training, MetricRow, RunConfig, RunRecord};
use mcssl::{Error, Exec, ParamSet, Result};
use serde::{Deserialize, Serialize};

pub const SUMMARY_SCHEMA: &str = "mcssl.summary.v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub status: Status,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub param_count: usize,
    #[serde(default)]
    pub step_count: u64,
    #[serde(default)]
    pub wall_seconds: f64,
    /// Mean of each metric over the completeness grid.
    #[serde(default)]
    pub grid_mean: BTreeMap<String, f64>,
}

/// What happened to one planned run.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Skipped,
    Completed { steps: u64 },
    Failed(String),
}

/// A completed run read back from disk.
#[derive(Clone, Debug)]
pub struct Stored {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub metrics: Vec<MetricRow>,
    pub summary: Summary,
}

impl Stored {
    pub fn grid_mean(&self, metric: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .metrics
            .iter()
            .filter(|m| m.metric == metric && m.c < 1.0)
            .map(|m| m.value)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io(path))
}

pub fn run_dir(out: &Path, hash: &str) -> PathBuf {
    out.join(hash)
}

pub fn read_summary(dir: &Path) -> Option<Summary> {
    let text = fs::read_to_string(dir.join("summary.toml")).ok()?;
    toml::from_str(&text).ok()
}

pub fn is_complete(dir: &Path) -> bool {
    read_summary(dir).is_some_and(|s| s.status == Status::Completed)
}

fn summary_of(rec: &RunRecord) -> Summary {
    let mut grid_mean = BTreeMap::new();
    for m in &rec.metrics {
        grid_mean.entry(m.metric.clone()).or_insert_with(|| rec.grid_mean(&m.metric));
    }
    Summary {
        schema: SUMMARY_SCHEMA.into(),
        status: Status::Completed,
        config_hash: rec.config_hash.clone(),
        error: None,
        param_count: rec.param_count,
        step_count: rec.step_count,
        wall_seconds: rec.wall_seconds,
        grid_mean,
    }
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Config(format!("cannot serialize: {e}")))
}

/// Trains and persists `cfg` unless a completed run with the same hash is
/// already under `out`. Files are written to a scratch directory and moved
/// into place at the end, so a crash never leaves a half-written run that
/// looks complete.
pub fn execute(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<Outcome> {
    let hash = cfg.hash()?;
    let dir = run_dir(out, &hash);
    if is_complete(&dir) {
        return Ok(Outcome::Skipped);
    }
    let scratch = out.join(format!(".{hash}.partial"));
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(io(&scratch))?;
    }
    fs::create_dir_all(&scratch).map_err(io(&scratch))?;
    write(&scratch.join("config.toml"), &cfg.to_toml()?)?;
    let outcome = match run_training(cfg, exec) {
        Ok(rec) => {
            write(&scratch.join("steps.csv"), &rec.steps_csv())?;
            write(&scratch.join("metrics.csv"), &rec.metrics_csv())?;
            rec.bundle.params.save(&scratch.join("checkpoint.bin"), &hash)?;
            write(&scratch.join("summary.toml"), &to_toml(&summary_of(&rec))?)?;
            Outcome::Completed { steps: rec.step_count }
        }
        Err(e) => {
            let summary = Summary {
                schema: SUMMARY_SCHEMA.into(),
                status: Status::Failed,
                config_hash: hash.clone(),
                error: Some(e.to_string()),
                param_count: 0,
                step_count: 0,
                wall_seconds: 0.0,
                grid_mean: BTreeMap::new(),
            };
            write(&scratch.join("summary.toml"), &to_toml(&summary)?)?;
            Outcome::Failed(e.to_string())
        }
    };
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io(&dir))?;
    }
    fs::rename(&scratch, &dir).map_err(io(&dir))?;
    Ok(outcome)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                location: format!("{}:{}", path.display(), i + 2),
                message: e.to_string(),
            })
        })
        .collect()
}

/// The completed run in `dir`, if any.
pub fn load(dir: &Path) -> Result<Option<Stored>> {
    let Some(summary) = read_summary(dir) else {
        return Ok(None);
    };
    if summary.status != Status::Completed {
        return Ok(None);
    }
    let path = dir.join("config.toml");
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let config = RunConfig::from_toml(&text, &path.display().to_string())?;
    let metrics = read_metrics(&dir.join("metrics.csv"))?;
    Ok(Some(Stored {
        dir: dir.to_path_buf(),
        config,
        metrics,
        summary,
    }))
}

/// Every completed run directly under `out`, ordered by hash.
pub fn scan(out: &Path) -> Result<Vec<Stored>> {
    let mut dirs: Vec<PathBuf> = match fs::read_dir(out) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io(out)(e)),
    };
    dirs.sort();
    let mut out_runs = Vec::new();
    for d in dirs {
        if let Some(s) = load(&d)? {
            out_runs.push(s);
        }
    }
    Ok(out_runs)
}

/// Online weights saved with a run.
pub fn load_checkpoint(dir: &Path) -> Result<ParamSet> {
    let (params, _) = ParamSet::load(&dir.join("checkpoint.bin"))?;
    Ok(params)
}
