//! Linear probing under evaluation-time masking, calibration, martingale
//! violation metrics and the estimator-bias diagnostic.

use serde::{Deserialize, Serialize};

use crate::data::{oracle_conditional_sample, Dataset};
use crate::error::{ensure, Error, Result};
use crate::graph::Graph;
use crate::mask::{MaskBatch, MaskProcess};
use crate::model::{Head, ModelBundle, Weights, REPR_DIM};
use crate::optim::{AdamW, AdamWConfig};
use crate::par::Exec;
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const EVAL_GRID: [f64; 5] = [0.05, 0.2, 0.4, 0.6, 0.8];
const CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 10,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            batch_size: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub grid: Vec<f64>,
    pub probe: ProbeConfig,
    /// Test samples used for the violation metrics.
    pub violation_samples: usize,
    pub violation_k: usize,
    pub ece_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            grid: EVAL_GRID.to_vec(),
            probe: ProbeConfig::default(),
            violation_samples: 256,
            violation_k: 128,
            ece_bins: 10,
        }
    }
}

/// Linear classifier on pooled representations.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub w: Tensor,
    pub b: Tensor,
}

impl Probe {
    pub fn logits(&self, emb: &Tensor) -> Result<Tensor> {
        let mut out = emb.matmul(&self.w)?;
        let k = self.b.numel();
        for row in out.data_mut().chunks_mut(k) {
            row.iter_mut().zip(self.b.data()).for_each(|(v, b)| *v += b);
        }
        Ok(out)
    }

    pub fn probs(&self, emb: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(&self.logits(emb)?))
    }
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Fits a probe with AdamW on shuffled mini-batches.
pub fn train_probe(emb: &Tensor, y: &[usize], classes: usize, cfg: &ProbeConfig, rng: &mut Rng) -> Result<Probe> {
    ensure!(
        emb.ndim() == 2 && emb.shape()[0] == y.len(),
        Dimension,
        "{} labels for embeddings {:?}",
        y.len(),
        emb.shape()
    );
    ensure!(cfg.batch_size > 0, Config, "probe batch size must be positive");
    let h = emb.shape()[1];
    let bound = 1.0 / (h as f64).sqrt();
    let mut params = ParamSet::new();
    params.insert("w", Tensor::from_fn(&[h, classes], |_| rng.uniform_range(-bound, bound)));
    params.insert("b", Tensor::zeros(&[classes]));
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &params,
    );
    let mut order: Vec<usize> = (0..y.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for idx in order.chunks(cfg.batch_size) {
            let xb = emb.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let mut g = Graph::training();
            let bound = params.bind(&mut g, true);
            let x = g.constant(xb);
            let (w, b) = (bound.vars()[0], bound.vars()[1]);
            let logits = g.linear(x, w, b)?;
            let loss = g.softmax_cross_entropy(logits, &yb)?;
            g.backward(loss)?;
            let grads = bound.grads(&g);
            opt.step(&mut params, &grads);
        }
    }
    Ok(Probe {
        w: params.get("w").cloned().unwrap(),
        b: params.get("b").cloned().unwrap(),
    })
}

pub fn accuracy(probs: &Tensor, y: &[usize]) -> f64 {
    let hits = probs
        .rows()
        .zip(y)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    hits as f64 / y.len() as f64
}

/// Mean negative log probability of the true label.
pub fn nll(probs: &Tensor, y: &[usize]) -> f64 {
    let s: f64 = probs
        .rows()
        .zip(y)
        .map(|(row, &label)| -row[label].max(f64::MIN_POSITIVE).ln())
        .sum();
    s / y.len() as f64
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece(probs: &Tensor, y: &[usize], bins: usize) -> f64 {
    let mut conf = vec![0.0; bins];
    let mut hit = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (row, &label) in probs.rows().zip(y) {
        let j = argmax(row);
        let p = row[j];
        let bin = ((p * bins as f64) as usize).min(bins - 1);
        conf[bin] += p;
        hit[bin] += f64::from(j == label);
        count[bin] += 1;
    }
    let n = y.len() as f64;
    (0..bins)
        .filter(|&i| count[i] > 0)
        .map(|i| (hit[i] - conf[i]).abs() / n)
        .sum()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluation masks for each grid level plus `c = 1`, from independent
/// streams keyed by level index.
pub fn eval_masks(process: &MaskProcess, n: usize, t: usize, d: usize, grid: &[f64], seed: u64) -> Result<Vec<(f64, MaskBatch)>> {
    let root = Rng::new(seed).split("eval-mask");
    let mut out = Vec::with_capacity(grid.len() + 1);
    for (i, &c) in grid.iter().enumerate() {
        let mut r = root.split_index(i as u64);
        out.push((c, process.sample(n, t, d, c, &mut r)?));
    }
    out.push((1.0, MaskBatch::ones(n, t, d)));
    Ok(out)
}

/// Per-completeness probe diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub c: f64,
    pub accuracy: f64,
    pub regret: f64,
    pub ece: f64,
    pub nll: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub grid: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub full_accuracy: f64,
    pub rows: Vec<CalibrationRow>,
    pub probe: Probe,
}

/// Accuracy, anytime regret, ECE and NLL of `probe` at every mask level.
/// `masks` must contain a `c = 1` entry.
pub fn calibration_metrics(
    bundle: &ModelBundle,
    probe: &Probe,
    test: &Dataset,
    masks: &[(f64, MaskBatch)],
    bins: usize,
) -> Result<Vec<CalibrationRow>> {
    let mut rows = Vec::with_capacity(masks.len());
    for (c, m) in masks {
        let emb = bundle.embed(&test.x, Some(m), CHUNK)?;
        let p = probe.probs(&emb)?;
        rows.push(CalibrationRow {
            c: *c,
            accuracy: accuracy(&p, &test.y),
            regret: 0.0,
            ece: ece(&p, &test.y, bins),
            nll: nll(&p, &test.y),
        });
    }
    let full = rows
        .iter()
        .find(|r| r.c == 1.0)
        .map(|r| r.accuracy)
        .ok_or_else(|| Error::Contract("calibration needs a c = 1 mask".into()))?;
    for r in &mut rows {
        r.regret = full - r.accuracy;
    }
    Ok(rows)
}

/// Probe trained on full-observation training embeddings, tested on the
/// masked test set at every level.
pub fn probe_eval(
    bundle: &ModelBundle,
    train: &Dataset,
    test: &Dataset,
    masks: &[(f64, MaskBatch)],
    cfg: &EvalConfig,
    rng: &mut Rng,
) -> Result<ProbeResult> {
    let emb = bundle.embed(&train.x, None, CHUNK)?;
    let probe = train_probe(&emb, &train.y, train.num_classes, &cfg.probe, rng)?;
    let rows = calibration_metrics(bundle, &probe, test, masks, cfg.ece_bins)?;
    let graded: Vec<&CalibrationRow> = rows.iter().filter(|r| r.c < 1.0).collect();
    let accuracy: Vec<f64> = graded.iter().map(|r| r.accuracy).collect();
    Ok(ProbeResult {
        grid: graded.iter().map(|r| r.c).collect(),
        mean_accuracy: accuracy.iter().sum::<f64>() / accuracy.len().max(1) as f64,
        accuracy,
        full_accuracy: rows.iter().find(|r| r.c == 1.0).map_or(f64::NAN, |r| r.accuracy),
        rows,
        probe,
    })
}

/// Where refined views come from.
#[derive(Clone, Copy, Debug)]
pub enum RefineSource<'a> {
    Imputer { noise_scale: f64 },
    /// Exact or importance-sampled draws from the generating process of `data`.
    Oracle { data: &'a Dataset },
}

/// Evaluation-mode encoder outputs `(pooled [N,32], unpooled [N,T,32])` on
/// an already merged input.
pub fn encode_eval(bundle: &ModelBundle, x: &Tensor, obs: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, t) = (x.shape()[0], x.shape()[1]);
    let mut pooled = Vec::with_capacity(n * REPR_DIM);
    let mut unpooled = Vec::with_capacity(n * t * REPR_DIM);
    let mut dummy = Rng::new(0);
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let mut g = Graph::evaluation();
        let net = bundle.bind_frozen(&mut g);
        let xv = g.constant(x.select_rows(&idx));
        let enc = net.encode(&mut g, xv, &obs.select_rows(&idx), &mut dummy)?;
        pooled.extend_from_slice(g.value(enc.pooled).data());
        unpooled.extend_from_slice(g.value(enc.unpooled).data());
    }
    Ok((
        Tensor::new(&[n, REPR_DIM], pooled)?,
        Tensor::new(&[n, t, REPR_DIM], unpooled)?,
    ))
}

/// Head outputs flattened to `[N, d_g]`.
pub fn head_eval(bundle: &ModelBundle, pooled: &Tensor, unpooled: &Tensor, head: Head) -> Result<Tensor> {
    match head {
        Head::Cls => bundle.predict(pooled, Head::Cls, Weights::Online),
        Head::Rec => {
            let r = bundle.predict(unpooled, Head::Rec, Weights::Online)?;
            let n = r.shape()[0];
            let w = r.numel() / n;
            r.into_reshape(&[n, w])
        }
    }
}

/// One imputer completion `x⊙M + q(f(x⊙M + ξ⊙(1−M)))⊙(1−M)`.
pub fn impute_eval(bundle: &ModelBundle, x: &Tensor, mask: &MaskBatch, noise_scale: f64, rng: &mut Rng) -> Result<Tensor> {
    let observed = x.mul(&mask.m)?;
    let missing = mask.missing();
    let noised = Tensor::from_fn(x.shape(), |i| {
        observed.data()[i] + missing.data()[i] * noise_scale * rng.normal()
    });
    let ones = Tensor::ones(&[x.shape()[0], x.shape()[1]]);
    let (_, un) = encode_eval(bundle, &noised, &ones)?;
    let mut g = Graph::evaluation();
    let net = bundle.bind_frozen(&mut g);
    let uv = g.constant(un);
    let q = net.imp(&mut g, uv)?;
    observed.add(&g.value(q).mul(&missing)?)
}

/// `k` completions of the coarse batch from independent streams.
pub fn completions(
    bundle: &ModelBundle,
    x: &Tensor,
    mask: &MaskBatch,
    source: RefineSource<'_>,
    k: usize,
    rng: &Rng,
    exec: Exec,
) -> Result<Vec<Tensor>> {
    match source {
        RefineSource::Imputer { noise_scale } => exec
            .map_range(k, |j| {
                let mut r = rng.split("imputer").split_index(j as u64);
                impute_eval(bundle, x, mask, noise_scale, &mut r)
            })
            .into_iter()
            .collect(),
        RefineSource::Oracle { data } => {
            let coarse = x.mul(&mask.m)?;
            let per_sample = oracle_conditional_sample(data, &coarse, mask, k, &rng.split("oracle"), exec)?;
            let row = x.numel() / x.shape()[0];
            Ok((0..k)
                .map(|j| {
                    let mut v = Vec::with_capacity(x.numel());
                    for s in &per_sample {
                        v.extend_from_slice(&s.draws.data()[j * row..(j + 1) * row]);
                    }
                    Tensor::from_parts(x.shape().to_vec(), v)
                })
                .collect())
        }
    }
}

/// Coarse head outputs `u [N,d_g]` and refined head outputs for each completion.
pub fn refined_predictions(
    bundle: &ModelBundle,
    x: &Tensor,
    mask: &MaskBatch,
    head: Head,
    source: RefineSource<'_>,
    k: usize,
    rng: &Rng,
    exec: Exec,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (zp, zu) = encode_eval(bundle, &x.mul(&mask.m)?, &mask.timestep_observed())?;
    let u = head_eval(bundle, &zp, &zu, head)?;
    let ones = Tensor::ones(&[x.shape()[0], x.shape()[1]]);
    let vs = completions(bundle, x, mask, source, k, rng, exec)?
        .iter()
        .map(|xh| {
            let (p, un) = encode_eval(bundle, xh, &ones)?;
            head_eval(bundle, &p, &un, head)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((u, vs))
}

fn mean_of(vs: &[Tensor]) -> Tensor {
    let mut acc = vs[0].clone();
    for v in &vs[1..] {
        acc.data_mut().iter_mut().zip(v.data()).for_each(|(a, b)| *a += b);
    }
    acc.scale(1.0 / vs.len() as f64)
}

/// `(1/(N d_g)) Σ_i ‖u_i − (1/K) Σ_k v_i^(k)‖²`.
pub fn violation_pred_from(u: &Tensor, vs: &[Tensor]) -> Result<f64> {
    ensure!(vs.len() >= 2, Domain, "violation needs K ≥ 2 refinements");
    let mu = mean_of(vs);
    Ok(u.sub(&mu)?.norm_sq() / u.numel() as f64)
}

#[allow(clippy::too_many_arguments)]
pub fn violation_pred(
    bundle: &ModelBundle,
    x: &Tensor,
    mask: &MaskBatch,
    head: Head,
    source: RefineSource<'_>,
    k: usize,
    rng: &Rng,
    exec: Exec,
) -> Result<f64> {
    ensure!(k >= 2, Domain, "violation needs K ≥ 2 refinements, got {k}");
    let (u, vs) = refined_predictions(bundle, x, mask, head, source, k, rng, exec)?;
    violation_pred_from(&u, &vs)
}

/// `(1/(N d_z)) Σ_i (z_i − z_i^a)ᵀ(z_i − z_i^b)` with two imputer completions.
pub fn violation_lat(bundle: &ModelBundle, x: &Tensor, mask: &MaskBatch, noise_scale: f64, rng: &Rng) -> Result<f64> {
    let (z, _) = encode_eval(bundle, &x.mul(&mask.m)?, &mask.timestep_observed())?;
    let ones = Tensor::ones(&[x.shape()[0], x.shape()[1]]);
    let mut zs = Vec::with_capacity(2);
    for name in ["a", "b"] {
        let xh = impute_eval(bundle, x, mask, noise_scale, &mut rng.split(name))?;
        zs.push(encode_eval(bundle, &xh, &ones)?.0);
    }
    let v = crate::objectives::two_sample_values(&z, &zs[0], &zs[1])?;
    Ok(v.iter().sum::<f64>() / z.numel() as f64)
}

/// Discrepancies of the single- and two-sample estimators from the
/// `K`-draw reference `‖u − μ̂_K‖²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasDiag {
    /// Batch mean of `|L̂_single − L_ref|`.
    pub single_abs: f64,
    /// Batch mean of `|L̂_two − L_ref|`.
    pub two_abs: f64,
    /// `|mean(L̂_single) − mean(L_ref)|`.
    pub single_bias: f64,
    /// `|mean(L̂_two) − mean(L_ref)|`.
    pub two_bias: f64,
    pub reference: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn estimator_bias_diag(
    bundle: &ModelBundle,
    x: &Tensor,
    mask: &MaskBatch,
    head: Head,
    source: RefineSource<'_>,
    k: usize,
    rng: &Rng,
    exec: Exec,
) -> Result<BiasDiag> {
    let (u, mut vs) = refined_predictions(bundle, x, mask, head, source, k + 2, rng, exec)?;
    let vb = vs.pop().unwrap();
    let va = vs.pop().unwrap();
    let mu = mean_of(&vs);
    let n = u.shape()[0];
    let mut d = BiasDiag {
        single_abs: 0.0,
        two_abs: 0.0,
        single_bias: 0.0,
        two_bias: 0.0,
        reference: 0.0,
    };
    let two = crate::objectives::two_sample_values(&u, &va, &vb)?;
    for i in 0..n {
        let (ui, mi, ai) = (u.row(i), mu.row(i), va.row(i));
        let reference: f64 = ui.iter().zip(mi).map(|(a, b)| (a - b) * (a - b)).sum();
        let single: f64 = ui.iter().zip(ai).map(|(a, b)| (a - b) * (a - b)).sum();
        d.single_abs += (single - reference).abs();
        d.two_abs += (two[i] - reference).abs();
        d.single_bias += single - reference;
        d.two_bias += two[i] - reference;
        d.reference += reference;
    }
    let nf = n as f64;
    d.single_abs /= nf;
    d.two_abs /= nf;
    d.single_bias = (d.single_bias / nf).abs();
    d.two_bias = (d.two_bias / nf).abs();
    d.reference /= nf;
    Ok(d)
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            out[p] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman association between accuracy and log-violation after removing
/// per-level rank means. `accuracy[level][cell]`, `violation[level][cell]`.
/// Ranks are invariant to the log, so raw violations are ranked. `None` when
/// the pooled ranks are constant.
pub fn adjusted_spearman(accuracy: &[Vec<f64>], violation: &[Vec<f64>]) -> Result<Option<f64>> {
    ensure!(
        accuracy.len() == violation.len() && accuracy.len() >= 3,
        Contract,
        "need at least 3 completeness levels"
    );
    let mut ra = Vec::new();
    let mut rv = Vec::new();
    for (a, v) in accuracy.iter().zip(violation) {
        ensure!(
            a.len() == v.len() && a.len() >= 2,
            Contract,
            "each level needs at least 2 matched cells"
        );
        for (r, out) in [(ranks(a), &mut ra), (ranks(v), &mut rv)] {
            let m = r.iter().sum::<f64>() / r.len() as f64;
            out.extend(r.iter().map(|x| x - m));
        }
    }
    Ok(pearson(&ra, &rv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn uniform_predictor_metrics() {
        let probs = Tensor::full(&[10, 5], 0.2);
        let y: Vec<usize> = (0..10).map(|i| i % 5).collect();
        assert!((nll(&probs, &y) - 5f64.ln()).abs() < 1e-12);
        let acc = accuracy(&probs, &y);
        assert!((ece(&probs, &y, 10) - (0.2 - acc).abs()).abs() < 1e-12);
    }

    #[test]
    fn perfectly_calibrated_bins() {
        // Confidence 0.75 in one bin with 3 of 4 correct.
        let probs = Tensor::new(&[4, 2], vec![0.75, 0.25, 0.75, 0.25, 0.75, 0.25, 0.75, 0.25]).unwrap();
        assert!(ece(&probs, &[0, 0, 0, 1], 10).abs() < 1e-12);
    }

    #[test]
    fn spearman_perfect_anticoncordance() {
        let acc: Vec<Vec<f64>> = (0..3).map(|l| vec![0.1 * l as f64, 0.5, 0.9]).collect();
        let vio: Vec<Vec<f64>> = (0..3).map(|l| vec![3.0, 2.0, 1.0].into_iter().map(|v| v * (l + 1) as f64).collect()).collect();
        let rho = adjusted_spearman(&acc, &vio).unwrap().unwrap();
        assert!((rho + 1.0).abs() < 1e-12);
        let mut shifted = vio.clone();
        shifted[1].iter_mut().for_each(|v| *v *= 1e3);
        assert_eq!(adjusted_spearman(&acc, &shifted).unwrap(), Some(rho));
        let flat = vec![vec![1.0, 1.0]; 3];
        assert_eq!(adjusted_spearman(&flat, &flat).unwrap(), None);
    }
}
