//! Aggregated tables over persisted runs: mean ± SEM across seeds.

use std::cmp::Ordering;
use std::fmt::Write;

use mcssl::eval::{eval_masks, estimator_bias_diag, RefineSource};
use mcssl::model::ModelBundle;
use mcssl::objectives::{Mode, Pretext, Variant};
use mcssl::train::{prepare, RunConfig};
use mcssl::{Exec, Result, Rng};

use crate::store::{load_checkpoint, Stored};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Main,
    Sensitivity,
    Bias,
    Calibration,
    Theory,
}

impl Kind {
    pub fn parse(s: &str) -> Option<Kind> {
        Some(match s {
            "main" => Kind::Main,
            "sensitivity" => Kind::Sensitivity,
            "bias" => Kind::Bias,
            "calibration" => Kind::Calibration,
            "theory" => Kind::Theory,
            _ => return None,
        })
    }
}

/// Sample mean and standard error of the mean; one value gives SEM 0.
pub fn mean_sem(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `(other − base) / base`
pub fn relative_gain(base: f64, other: f64) -> f64 {
    (other - base) / base
}

pub fn fmt_gain(g: f64) -> String {
    format!("{:+.1}%", 100.0 * g)
}

/// Runs sharing every setting except the seed.
#[derive(Clone, Debug)]
pub struct Group<'a> {
    pub config: RunConfig,
    pub key: String,
    pub expected: usize,
    pub runs: Vec<&'a Stored>,
}

impl Group<'_> {
    fn block(&self) -> (String, Mode, Pretext) {
        (self.config.dataset.kind.name().to_string(), self.config.mode, self.config.pretext)
    }

    fn label(&self) -> String {
        let c = &self.config;
        format!(
            "{},{},{},{},{},{}",
            c.dataset.kind.name(),
            c.mode.name(),
            c.variant.name(),
            c.pretext.name(),
            c.weights.lambda_imp,
            c.weights.lambda_mart
        )
    }

    fn seeds(&self) -> String {
        if self.expected > 0 {
            format!("{}/{}", self.runs.len(), self.expected)
        } else {
            self.runs.len().to_string()
        }
    }

    fn values(&self, metric: &str) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.grid_mean(metric)).collect()
    }
}

fn group_key(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.seed = 0;
    c.to_toml().unwrap_or_default()
}

fn order(a: &RunConfig, b: &RunConfig) -> Ordering {
    a.dataset
        .kind
        .name()
        .cmp(b.dataset.kind.name())
        .then(a.mode.cmp(&b.mode))
        .then(a.pretext.name().cmp(b.pretext.name()))
        .then(a.variant.cmp(&b.variant))
        .then(a.weights.lambda_imp.total_cmp(&b.weights.lambda_imp))
        .then(a.weights.lambda_mart.total_cmp(&b.weights.lambda_mart))
}

/// Groups `runs` by everything but the seed. Configs in `planned` that have
/// no completed run still get a (gap) group.
pub fn groups<'a>(runs: &'a [Stored], planned: &[RunConfig]) -> Vec<Group<'a>> {
    let mut out: Vec<Group<'a>> = Vec::new();
    let find_or_add = |cfg: &RunConfig, out: &mut Vec<Group<'a>>| -> usize {
        let key = group_key(cfg);
        match out.iter().position(|g| g.key == key) {
            Some(i) => i,
            None => {
                out.push(Group {
                    config: cfg.clone(),
                    key,
                    expected: 0,
                    runs: Vec::new(),
                });
                out.len() - 1
            }
        }
    };
    for cfg in planned {
        let i = find_or_add(cfg, &mut out);
        out[i].expected += 1;
    }
    let wanted: Vec<String> = planned.iter().filter_map(|c| c.hash().ok()).collect();
    for r in runs {
        if planned.is_empty() || r.config.hash().is_ok_and(|h| wanted.contains(&h)) {
            let i = find_or_add(&r.config, &mut out);
            out[i].runs.push(r);
        }
    }
    out.sort_by(|a, b| order(&a.config, &b.config).then(a.key.cmp(&b.key)));
    out
}

const HEAD: &str = "dataset,mode,variant,pretext,lambda_imp,lambda_mart,seeds";

fn stat_cells(s: &mut String, values: &[f64]) {
    if values.is_empty() {
        s.push_str(",missing,missing");
    } else {
        let (m, e) = mean_sem(values);
        let _ = write!(s, ",{m:.4},{e:.4}");
    }
}

/// Mean ± SEM of grid-averaged `metrics` per group, plus relative-gain
/// columns and rows when `with_gain` is set.
pub fn metric_table(groups: &[Group], metrics: &[&str], with_gain: bool) -> String {
    let mut s = String::from(HEAD);
    for m in metrics {
        let _ = write!(s, ",{m}_mean,{m}_sem");
    }
    if with_gain {
        s.push_str(",rel_gain_vs_base");
    }
    s.push('\n');
    let mut blocks: Vec<(String, Mode, Pretext)> = Vec::new();
    for g in groups {
        if !blocks.contains(&g.block()) {
            blocks.push(g.block());
        }
    }
    for block in blocks {
        let members: Vec<&Group> = groups.iter().filter(|g| g.block() == block).collect();
        let mean = |g: &Group| {
            let v = g.values(metrics[0]);
            (!v.is_empty()).then(|| mean_sem(&v).0)
        };
        let base = members.iter().find(|g| g.config.variant == Variant::Base).and_then(|g| mean(g));
        for g in &members {
            s.push_str(&g.label());
            let _ = write!(s, ",{}", g.seeds());
            for m in metrics {
                stat_cells(&mut s, &g.values(m));
            }
            if with_gain {
                match (base, mean(g)) {
                    (Some(b), Some(v)) => {
                        let _ = write!(s, ",{}", fmt_gain(relative_gain(b, v)));
                    }
                    _ => s.push_str(",n/a"),
                }
            }
            s.push('\n');
        }
        if with_gain {
            let best = members
                .iter()
                .filter(|g| g.config.variant != Variant::Base)
                .filter_map(|g| mean(g).map(|v| (g, v)))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            let _ = write!(s, "{},{},best,{},,,", block.0, block.1.name(), block.2.name());
            for _ in metrics {
                s.push_str(",,");
            }
            match (base, best) {
                (Some(b), Some((g, v))) => {
                    let _ = writeln!(s, ",{} ({})", fmt_gain(relative_gain(b, v)), g.config.variant.name());
                }
                _ => s.push_str(",n/a\n"),
            }
        }
    }
    s
}

/// Rows scored on the estimator-bias diagnostic.
const BIAS_ROWS: usize = 256;
const BIAS_K: usize = 128;

/// Per group, completeness and refinement source: mean ± SEM across seeds of
/// the single- and two-sample discrepancies from the `K = 128` reference.
pub fn bias_table(groups: &[Group], exec: Exec) -> Result<String> {
    let mut s = format!("{HEAD},c,source,single_abs_mean,single_abs_sem,two_abs_mean,two_abs_sem,reference_mean\n");
    for g in groups {
        let synthetic = g.config.dataset.kind != mcssl::data::DatasetKind::External;
        let sources: &[&str] = if synthetic { &["imputer", "oracle"] } else { &["imputer"] };
        let grid = g.config.eval.grid.clone();
        // [c][source] -> per-seed (single, two, reference)
        let mut acc = vec![vec![Vec::<(f64, f64, f64)>::new(); sources.len()]; grid.len()];
        for run in &g.runs {
            let cfg = &run.config;
            let p = prepare(cfg)?;
            let test = p.splits.test.subset(&(0..BIAS_ROWS.min(p.splits.test.len())).collect::<Vec<_>>());
            let (t, d) = (test.timesteps(), test.features());
            let bundle = ModelBundle {
                spec: cfg.model_spec(t, d, p.splits.train.num_classes),
                params: load_checkpoint(&run.dir)?,
                shadow: None,
            };
            let masks = eval_masks(&p.process, test.len(), t, d, &grid, p.data_seed)?;
            let root = Rng::new(cfg.seed).split("bias-table");
            for (ci, (_, mask)) in masks.iter().take(grid.len()).enumerate() {
                for (si, name) in sources.iter().enumerate() {
                    let src = match *name {
                        "imputer" => RefineSource::Imputer {
                            noise_scale: cfg.noise_scale,
                        },
                        _ => RefineSource::Oracle { data: &test },
                    };
                    let r = root.split_index(ci as u64).split(name);
                    let diag = estimator_bias_diag(&bundle, &test.x, mask, cfg.mode.head(), src, BIAS_K, &r, exec)?;
                    acc[ci][si].push((diag.single_abs, diag.two_abs, diag.reference));
                }
            }
        }
        for (ci, c) in grid.iter().enumerate() {
            for (si, name) in sources.iter().enumerate() {
                let _ = write!(s, "{},{},{c},{name}", g.label(), g.seeds());
                let rows = &acc[ci][si];
                let single: Vec<f64> = rows.iter().map(|r| r.0).collect();
                let two: Vec<f64> = rows.iter().map(|r| r.1).collect();
                stat_cells(&mut s, &single);
                stat_cells(&mut s, &two);
                if rows.is_empty() {
                    s.push_str(",missing\n");
                } else {
                    let reference: Vec<f64> = rows.iter().map(|r| r.2).collect();
                    let _ = writeln!(s, ",{:.4e}", mean_sem(&reference).0);
                }
            }
        }
    }
    Ok(s)
}
