//! Run configuration, the deterministic training loop and the λ grid.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, gen_ssim, gen_tsim, gen_tsim_rc, ingest_table, DatasetKind, SplitSpec, Splits, TableSchema};
use crate::error::{ensure, Error, Result};
use crate::eval::{self, EvalConfig, RefineSource};
use crate::graph::Graph;
use crate::mask::{fit_prior_for, sample_training_mask, MaskProcess, TrainMasks};
use crate::model::{Extras, ModelBundle, ModelSpec, DEFAULT_EMA_DECAY, DEFAULT_NOISE_SCALE};
use crate::objectives::{total_loss, Batch, Breakdown, LossWeights, Mode, Objective, Pretext, Variant, BYOL_DECAY};
use crate::optim::{AdamW, AdamWConfig};
use crate::par::Exec;
use crate::rng::Rng;

pub const RUN_SCHEMA: &str = "mcssl.run.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Generator seed; the run seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    /// Samples to generate when `split` is given as fractions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<TableSchema>,
}

impl DatasetSpec {
    pub fn synthetic(kind: DatasetKind) -> Self {
        DatasetSpec {
            kind,
            seed: None,
            split: None,
            size: None,
            path: None,
            table: None,
        }
    }

    /// Generates or reads the data and partitions it.
    pub fn load(&self, run_seed: u64) -> Result<Splits> {
        let seed = self.seed.unwrap_or(run_seed);
        if self.kind == DatasetKind::External {
            let path = self
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("external dataset needs a path".into()))?;
            let schema = self
                .table
                .as_ref()
                .ok_or_else(|| Error::Config("external dataset needs a table schema".into()))?;
            let ds = ingest_table(path, schema)?;
            return data::split(&ds, &schema.split, schema.split_seed);
        }
        let spec = self.split.unwrap_or_else(|| SplitSpec::for_kind(self.kind));
        let n = match (spec, self.size) {
            (_, Some(n)) => n,
            (SplitSpec::Counts { train, priorfit, test }, None) => train + priorfit + test,
            (SplitSpec::Fractions { .. }, None) => {
                return Err(Error::Config("fractional split needs dataset.size".into()))
            }
        };
        let ds = match self.kind {
            DatasetKind::TsimRc => gen_tsim_rc(n, seed)?,
            DatasetKind::Tsim => gen_tsim(n, seed)?,
            DatasetKind::Ssim => gen_ssim(n, seed)?,
            DatasetKind::External => unreachable!(),
        };
        data::split(&ds, &spec, seed)
    }
}

/// Everything that determines a run. Its TOML form is hashed to name the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub mode: Mode,
    pub variant: Variant,
    #[serde(default)]
    pub pretext: Pretext,
    pub weights: LossWeights,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub ema_decay: f64,
    pub byol_decay: f64,
    pub noise_scale: f64,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn new(kind: DatasetKind, mode: Mode, variant: Variant, seed: u64) -> Self {
        RunConfig {
            schema: RUN_SCHEMA.to_string(),
            seed,
            dataset: DatasetSpec::synthetic(kind),
            mode,
            variant,
            pretext: Pretext::Standard,
            weights: LossWeights::default(),
            steps: 500,
            batch_size: 256,
            optimizer: AdamWConfig::default(),
            ema_decay: DEFAULT_EMA_DECAY,
            byol_decay: BYOL_DECAY,
            noise_scale: DEFAULT_NOISE_SCALE,
            eval: EvalConfig::default(),
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            mode: self.mode,
            variant: self.variant,
            pretext: self.pretext,
            weights: self.weights,
            noise_scale: self.noise_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema == RUN_SCHEMA,
            Config,
            "unsupported run schema {:?}, expected {RUN_SCHEMA:?}",
            self.schema
        );
        ensure!(self.batch_size > 0, Config, "batch_size must be positive");
        ensure!(
            (0.0..1.0).contains(&self.ema_decay) && (0.0..1.0).contains(&self.byol_decay),
            Config,
            "EMA decays must lie in [0,1)"
        );
        ensure!(
            self.eval.grid.iter().all(|c| *c > 0.0 && *c < 1.0),
            Config,
            "evaluation completeness levels must lie in (0,1)"
        );
        self.objective().validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize run config: {e}")))
    }

    pub fn from_toml(text: &str, location: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            location: location.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the serialized config.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn model_spec(&self, t: usize, d: usize, k: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(t, d, k);
        spec.extras = match self.pretext {
            Pretext::Standard => Extras::None,
            Pretext::SimClr => Extras::Projection,
            Pretext::Byol => Extras::ProjectionPredictor,
        };
        spec
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    #[serde(flatten)]
    pub loss: Breakdown,
}

/// One long-format evaluation value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub c: f64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config_hash: String,
    pub steps: Vec<StepRow>,
    pub metrics: Vec<MetricRow>,
    pub bundle: ModelBundle,
    pub param_count: usize,
    pub step_count: u64,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,pred,imp,mart,gamma,total\n");
        for r in &self.steps {
            let b = &r.loss;
            let _ = writeln!(s, "{},{},{},{},{},{}", r.step, b.pred, b.imp, b.mart, b.gamma, b.total);
        }
        s
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    pub fn metric(&self, name: &str, c: f64) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.metric == name && m.c == c)
            .map(|m| m.value)
    }

    /// Mean of `name` over the levels below 1.
    pub fn grid_mean(&self, name: &str) -> f64 {
        let v: Vec<f64> = self
            .metrics
            .iter()
            .filter(|m| m.metric == name && m.c < 1.0)
            .map(|m| m.value)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("c,metric,value\n");
    for m in rows {
        let _ = writeln!(s, "{},{},{}", m.c, m.metric, m.value);
    }
    s
}

/// Data, evaluation process and training-mask source of a run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub splits: Splits,
    pub process: MaskProcess,
    pub masks: TrainMasks,
    pub data_seed: u64,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let data_seed = cfg.dataset.seed.unwrap_or(cfg.seed);
    let splits = cfg.dataset.load(cfg.seed)?;
    let process = MaskProcess::for_dataset(&splits.train, data_seed)?;
    let masks = match &process {
        MaskProcess::RightCensor => TrainMasks::RightCensor,
        MaskProcess::Logistic(_) => {
            let pf = splits.priorfit.as_ref().ok_or_else(|| {
                Error::Config("a fitted mask prior needs a nonempty priorfit partition".into())
            })?;
            let mut r = Rng::new(data_seed).split("mask-prior");
            TrainMasks::Prior(fit_prior_for(pf, &process, &mut r)?)
        }
    };
    Ok(Prepared {
        splits,
        process,
        masks,
        data_seed,
    })
}

fn run_root(cfg: &RunConfig) -> Rng {
    Rng::new(cfg.seed).split("run")
}

/// Freshly initialized bundle with the shadow the objective needs.
pub fn init_bundle(cfg: &RunConfig, p: &Prepared) -> Result<ModelBundle> {
    let tr = &p.splits.train;
    let spec = cfg.model_spec(tr.timesteps(), tr.features(), tr.num_classes);
    let bundle = ModelBundle::init(spec, &mut run_root(cfg).split("init"));
    if cfg.pretext == Pretext::Byol {
        bundle.with_shadow(&["enc.", "proj."], cfg.byol_decay)
    } else if cfg.variant.is_ema() {
        let prefixes = cfg.variant.shadow_prefixes(cfg.mode);
        bundle.with_shadow(&prefixes, cfg.ema_decay)
    } else {
        Ok(bundle)
    }
}

/// Trains for `cfg.steps` steps. Aborts with [`Error::NonFinite`] on the
/// first non-finite loss.
pub fn train(cfg: &RunConfig, p: &Prepared) -> Result<(ModelBundle, Vec<StepRow>)> {
    let mut bundle = init_bundle(cfg, p)?;
    let mut opt = AdamW::new(cfg.optimizer, &bundle.params);
    let obj = cfg.objective();
    let tr = &p.splits.train;
    let (t, d) = (tr.timesteps(), tr.features());
    let steps_root = run_root(cfg).split("step");
    let mut rows = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let mut r = steps_root.split_index(step);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| r.below(tr.len())).collect();
        let x = tr.x.select_rows(&idx);
        let y = idx.iter().map(|&i| tr.y[i]).collect();
        let mask = sample_training_mask(&p.masks, cfg.batch_size, t, d, &mut r)?;
        let views = if cfg.pretext == Pretext::Standard {
            None
        } else {
            Some([
                sample_training_mask(&p.masks, cfg.batch_size, t, d, &mut r)?,
                sample_training_mask(&p.masks, cfg.batch_size, t, d, &mut r)?,
            ])
        };
        let batch = Batch { x, y, mask, views };
        let mut g = Graph::training();
        let net = bundle.bind(&mut g);
        let target = if obj.needs_target() {
            Some(bundle.bind_target(&mut g)?)
        } else {
            None
        };
        let (loss, breakdown) = total_loss(&mut g, &net, target.as_ref(), &obj, &batch, step, &mut r)?;
        if !breakdown.is_finite() {
            return Err(Error::NonFinite {
                step: step as usize,
                breakdown: format!("{breakdown:?}"),
            });
        }
        g.backward(loss)?;
        let grads = net.grads(&g);
        drop(g);
        opt.step(&mut bundle.params, &grads);
        bundle.ema_update()?;
        rows.push(StepRow { step, loss: breakdown });
    }
    Ok((bundle, rows))
}

/// Probe, calibration and violation metrics of a trained bundle.
pub fn evaluate(cfg: &RunConfig, bundle: &ModelBundle, p: &Prepared, exec: Exec) -> Result<Vec<MetricRow>> {
    let (train, test) = (&p.splits.train, &p.splits.test);
    let (t, d) = (test.timesteps(), test.features());
    let masks = eval::eval_masks(&p.process, test.len(), t, d, &cfg.eval.grid, p.data_seed)?;
    let root = run_root(cfg);
    let probe = eval::probe_eval(bundle, train, test, &masks, &cfg.eval, &mut root.split("probe"))?;
    let mut out = Vec::new();
    for r in &probe.rows {
        for (name, v) in [("accuracy", r.accuracy), ("regret", r.regret), ("ece", r.ece), ("nll", r.nll)] {
            out.push(MetricRow {
                c: r.c,
                metric: name.into(),
                value: v,
            });
        }
    }
    let nv = cfg.eval.violation_samples.min(test.len());
    if nv > 0 {
        let idx: Vec<usize> = (0..nv).collect();
        let x = test.x.select_rows(&idx);
        let vroot = root.split("violation");
        for (i, (c, m)) in masks.iter().enumerate().filter(|(_, (c, _))| *c < 1.0) {
            let m = m.select(&idx);
            let r = vroot.split_index(i as u64);
            let source = RefineSource::Imputer {
                noise_scale: cfg.noise_scale,
            };
            let vp = eval::violation_pred(bundle, &x, &m, cfg.mode.head(), source, cfg.eval.violation_k, &r.split("pred"), exec)?;
            let vl = eval::violation_lat(bundle, &x, &m, cfg.noise_scale, &r.split("lat"))?;
            out.push(MetricRow {
                c: *c,
                metric: "v_pred".into(),
                value: vp,
            });
            out.push(MetricRow {
                c: *c,
                metric: "v_lat".into(),
                value: vl,
            });
        }
    }
    Ok(out)
}

/// Prepare, train and evaluate one configuration.
pub fn run_training(cfg: &RunConfig, exec: Exec) -> Result<RunRecord> {
    let start = Instant::now();
    let p = prepare(cfg)?;
    let (bundle, steps) = train(cfg, &p)?;
    let metrics = evaluate(cfg, &bundle, &p, exec)?;
    Ok(RunRecord {
        config_hash: cfg.hash()?,
        step_count: steps.len() as u64,
        steps,
        metrics,
        param_count: bundle.param_count(),
        bundle,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean probe accuracy over the grid on a held-out 20% of the training
/// split, with the probe fitted on the other 80%.
pub fn validation_score(cfg: &RunConfig, bundle: &ModelBundle, p: &Prepared) -> Result<f64> {
    let train = &p.splits.train;
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let root = run_root(cfg).split("validation");
    root.split("shuffle").shuffle(&mut idx);
    let cut = train.len() * 4 / 5;
    let (fit, val) = (train.subset(&idx[..cut]), train.subset(&idx[cut..]));
    let (t, d) = (val.timesteps(), val.features());
    let masks = eval::eval_masks(&p.process, val.len(), t, d, &cfg.eval.grid, p.data_seed ^ 0x5eed)?;
    let res = eval::probe_eval(bundle, &fit, &val, &masks, &cfg.eval, &mut root.split("probe"))?;
    Ok(res.mean_accuracy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub imp_grid: Vec<f64>,
    pub mart_grid: Vec<f64>,
    /// `scores[i][j]` for `(imp_grid[i], mart_grid[j])`.
    pub scores: Vec<Vec<f64>>,
    pub best: (f64, f64),
    pub best_score: f64,
}

/// Highest score; ties go to the lexicographically smallest `(λ_imp, λ_mart)`.
pub fn select_best(imp: &[f64], mart: &[f64], scores: &[Vec<f64>]) -> ((f64, f64), f64) {
    let mut cells: Vec<(f64, f64, f64)> = Vec::new();
    for (i, &a) in imp.iter().enumerate() {
        for (j, &b) in mart.iter().enumerate() {
            cells.push((a, b, scores[i][j]));
        }
    }
    cells.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let mut best = cells[0];
    for &c in &cells[1..] {
        if c.2 > best.2 {
            best = c;
        }
    }
    ((best.0, best.1), best.2)
}

/// Trains every `(λ_imp, λ_mart)` cell and scores it on validation data.
pub fn run_grid(template: &RunConfig, imp: &[f64], mart: &[f64], exec: Exec) -> Result<GridResult> {
    ensure!(!imp.is_empty() && !mart.is_empty(), Config, "grids must be nonempty");
    let p = prepare(template)?;
    let cells: Vec<(f64, f64)> = imp.iter().flat_map(|&a| mart.iter().map(move |&b| (a, b))).collect();
    let scores = exec.map(&cells, |&(a, b)| {
        let mut cfg = template.clone();
        cfg.weights.lambda_imp = a;
        cfg.weights.lambda_mart = b;
        let (bundle, _) = train(&cfg, &p)?;
        validation_score(&cfg, &bundle, &p)
    });
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    let matrix: Vec<Vec<f64>> = scores.chunks(mart.len()).map(<[f64]>::to_vec).collect();
    let (best, best_score) = select_best(imp, mart, &matrix);
    Ok(GridResult {
        imp_grid: imp.to_vec(),
        mart_grid: mart.to_vec(),
        scores: matrix,
        best,
        best_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_toml_roundtrip_and_hash() {
        let cfg = RunConfig::new(DatasetKind::Ssim, Mode::Fully, Variant::MartLatentEma, 3);
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("schema = \"mcssl.run.v1\""));
        let back = RunConfig::from_toml(&text, "inline").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        let mut other = cfg.clone();
        other.seed = 4;
        assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn unknown_field_is_parse_error() {
        let cfg = RunConfig::new(DatasetKind::Ssim, Mode::Semi, Variant::Base, 0);
        let text = format!("{}\nbogus = 1\n", cfg.to_toml().unwrap());
        assert!(matches!(RunConfig::from_toml(&text, "x.toml"), Err(Error::Parse { .. })));
    }

    #[test]
    fn selection_breaks_ties_lexicographically() {
        let imp = [1.0, 0.1];
        let mart = [10.0, 1.0];
        let scores = vec![vec![0.5, 0.7], vec![0.7, 0.2]];
        assert_eq!(select_best(&imp, &mart, &scores), ((0.1, 10.0), 0.7));
    }
}
