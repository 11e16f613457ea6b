//! Experiment plans: which configurations to run, for which seeds.
//!
//! ```toml
//! schema = "mcssl.plan.v1"
//!
//! [defaults]
//! steps = 500
//!
//! [[cells]]
//! dataset = { kind = "ssim" }
//! mode = "semi"
//! variants = ["base", "mart_latent"]
//! seeds = [0, 1, 2, 3, 4]
//! lambda_mart = 10.0
//!
//! [[sweeps]]
//! dataset = { kind = "ssim" }
//! mode = "semi"
//! variant = "mart_pred"
//! seed = 0
//! lambda_imp = [0.1, 1.0, 10.0]
//! lambda_mart = [0.01, 1.0, 100.0]
//! ```

use std::path::Path;

use mcssl::objectives::{Mode, Pretext, Variant};
use mcssl::train::{DatasetSpec, RunConfig};
use mcssl::{Error, Result};
use serde::{Deserialize, Serialize};

pub const PLAN_SCHEMA: &str = "mcssl.plan.v1";

/// Settings applied to every cell unless the cell overrides them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub steps: Option<u64>,
    pub batch_size: Option<usize>,
    pub lambda_imp: Option<f64>,
    pub lambda_mart: Option<f64>,
    pub noise_scale: Option<f64>,
    pub pretext: Option<Pretext>,
}

impl Overrides {
    fn or(&self, fallback: &Overrides) -> Overrides {
        Overrides {
            steps: self.steps.or(fallback.steps),
            batch_size: self.batch_size.or(fallback.batch_size),
            lambda_imp: self.lambda_imp.or(fallback.lambda_imp),
            lambda_mart: self.lambda_mart.or(fallback.lambda_mart),
            noise_scale: self.noise_scale.or(fallback.noise_scale),
            pretext: self.pretext.or(fallback.pretext),
        }
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lambda_imp {
            cfg.weights.lambda_imp = v;
        }
        if let Some(v) = self.lambda_mart {
            cfg.weights.lambda_mart = v;
        }
        if let Some(v) = self.noise_scale {
            cfg.noise_scale = v;
        }
        if let Some(v) = self.pretext {
            cfg.pretext = v;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub dataset: DatasetSpec,
    pub mode: Mode,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub lambda_imp: Option<f64>,
    #[serde(default)]
    pub lambda_mart: Option<f64>,
    #[serde(default)]
    pub noise_scale: Option<f64>,
    #[serde(default)]
    pub pretext: Option<Pretext>,
}

impl Cell {
    fn overrides(&self) -> Overrides {
        Overrides {
            steps: self.steps,
            batch_size: self.batch_size,
            lambda_imp: self.lambda_imp,
            lambda_mart: self.lambda_mart,
            noise_scale: self.noise_scale,
            pretext: self.pretext,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub dataset: DatasetSpec,
    pub mode: Mode,
    pub variant: Variant,
    pub seed: u64,
    pub lambda_imp: Vec<f64>,
    pub lambda_mart: Vec<f64>,
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    pub schema: String,
    #[serde(default)]
    pub defaults: Overrides,
    #[serde(default)]
    pub cells: Vec<Cell>,
    #[serde(default)]
    pub sweeps: Vec<Sweep>,
}

impl Plan {
    pub fn parse(text: &str, location: &str) -> Result<Plan> {
        let plan: Plan = toml::from_str(text).map_err(|e| Error::Parse {
            location: location.to_string(),
            message: e.to_string(),
        })?;
        if plan.schema != PLAN_SCHEMA {
            return Err(Error::Parse {
                location: location.to_string(),
                message: format!("unsupported plan schema {:?}, expected {PLAN_SCHEMA:?}", plan.schema),
            });
        }
        for (i, cell) in plan.cells.iter().enumerate() {
            if cell.seeds.is_empty() || cell.variants.is_empty() {
                return Err(Error::Parse {
                    location: format!("{location}: cells[{i}]"),
                    message: "seeds and variants must be listed explicitly".into(),
                });
            }
        }
        for (i, sweep) in plan.sweeps.iter().enumerate() {
            if sweep.lambda_imp.is_empty() || sweep.lambda_mart.is_empty() {
                return Err(Error::Parse {
                    location: format!("{location}: sweeps[{i}]"),
                    message: "both lambda grids must be nonempty".into(),
                });
            }
        }
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Plan> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Plan::parse(&text, &path.display().to_string())
    }

    /// One validated config per (cell, variant, seed), seeds shifted by
    /// `seed_offset`.
    pub fn configs(&self, seed_offset: u64) -> Result<Vec<RunConfig>> {
        let mut out = Vec::new();
        for cell in &self.cells {
            let o = cell.overrides().or(&self.defaults);
            for &variant in &cell.variants {
                for &seed in &cell.seeds {
                    let mut cfg = RunConfig::new(cell.dataset.kind, cell.mode, variant, seed + seed_offset);
                    cfg.dataset = cell.dataset.clone();
                    o.apply(&mut cfg);
                    cfg.validate()?;
                    out.push(cfg);
                }
            }
        }
        Ok(out)
    }

    /// Template config and grids for every sweep.
    pub fn sweep_templates(&self, seed_offset: u64) -> Result<Vec<(RunConfig, Vec<f64>, Vec<f64>)>> {
        self.sweeps
            .iter()
            .map(|s| {
                let mut cfg = RunConfig::new(s.dataset.kind, s.mode, s.variant, s.seed + seed_offset);
                cfg.dataset = s.dataset.clone();
                let o = Overrides {
                    steps: s.steps,
                    batch_size: s.batch_size,
                    ..Overrides::default()
                };
                o.or(&self.defaults).apply(&mut cfg);
                cfg.validate()?;
                Ok((cfg, s.lambda_imp.clone(), s.lambda_mart.clone()))
            })
            .collect()
    }
}
