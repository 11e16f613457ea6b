//! Partial-observation processes, completeness calibration and mask priors.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetKind, Generator, TSIM_LABEL_FRAMES};
use crate::error::{ensure, Error, Result};
use crate::graph::sigmoid;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Lower bound of the per-batch training completeness.
pub const TRAIN_C_MIN: f64 = 0.05;
/// Latent draws used to estimate the expected observed fraction.
pub const CALIBRATION_DRAWS: usize = 4096;
const DELTA_BRACKET: f64 = 30.0;
const PRIOR_LOGIT_CLIP: f64 = 6.0;

/// Binary observation indicators `[B,T,D]` with the completeness they target.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBatch {
    pub m: Tensor,
    pub target_c: f64,
}

impl MaskBatch {
    pub fn new(m: Tensor, target_c: f64) -> Result<Self> {
        ensure!(m.ndim() == 3, Dimension, "mask must be [B,T,D], got {:?}", m.shape());
        ensure!(
            m.data().iter().all(|&v| v == 0.0 || v == 1.0),
            Domain,
            "mask entries must be 0 or 1"
        );
        Ok(MaskBatch { m, target_c })
    }

    pub fn ones(b: usize, t: usize, d: usize) -> Self {
        MaskBatch {
            m: Tensor::ones(&[b, t, d]),
            target_c: 1.0,
        }
    }

    pub fn zeros(b: usize, t: usize, d: usize) -> Self {
        MaskBatch {
            m: Tensor::zeros(&[b, t, d]),
            target_c: 0.0,
        }
    }

    pub fn realized_c(&self) -> f64 {
        self.m.mean()
    }

    pub fn batch(&self) -> usize {
        self.m.shape()[0]
    }

    pub fn timesteps(&self) -> usize {
        self.m.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.m.shape()[2]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.m.row(i)
    }

    /// `[B,T]` indicator of timesteps with at least one observed feature.
    pub fn timestep_observed(&self) -> Tensor {
        let (b, t, d) = (self.batch(), self.timesteps(), self.features());
        let data = self
            .m
            .data()
            .chunks(d)
            .map(|f| if f.iter().any(|&v| v == 1.0) { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_parts(vec![b, t], data)
    }

    /// `1 − M`.
    pub fn missing(&self) -> Tensor {
        self.m.map(|v| 1.0 - v)
    }

    pub fn select(&self, index: &[usize]) -> MaskBatch {
        MaskBatch {
            m: self.m.select_rows(index),
            target_c: self.target_c,
        }
    }
}

/// Coordinates a per-sample mask is drawn over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One indicator per timestep, shared by its features.
    Timesteps,
    /// One indicator per feature, shared across timesteps.
    Features,
}

impl Layout {
    pub fn for_shape(t: usize) -> Layout {
        if t == 1 {
            Layout::Features
        } else {
            Layout::Timesteps
        }
    }

    pub fn coords(self, t: usize, d: usize) -> usize {
        match self {
            Layout::Timesteps => t,
            Layout::Features => d,
        }
    }

    /// Writes the `[T*D]` cell mask for one sample's coordinate indicators.
    pub fn expand(self, coords: &[f64], t: usize, d: usize, out: &mut [f64]) {
        for s in 0..t {
            for j in 0..d {
                out[s * d + j] = match self {
                    Layout::Timesteps => coords[s],
                    Layout::Features => coords[j],
                };
            }
        }
    }

    /// Per-coordinate observation frequency of a mask batch.
    pub fn frequencies(self, masks: &MaskBatch) -> Vec<f64> {
        let (b, t, d) = (masks.batch(), masks.timesteps(), masks.features());
        let mut f = vec![0.0; self.coords(t, d)];
        for (k, &v) in masks.m.data().iter().enumerate() {
            let (s, j) = ((k / d) % t, k % d);
            match self {
                Layout::Timesteps => f[s] += v,
                Layout::Features => f[j] += v,
            }
        }
        let per = (b * t * d / f.len()) as f64;
        f.iter_mut().for_each(|v| *v /= per);
        f
    }
}

fn check_unit(c: f64) -> Result<()> {
    ensure!((0.0..=1.0).contains(&c), Domain, "completeness {c} outside [0,1]");
    Ok(())
}

/// Observed prefix of every sequence. The prefix length is `c·T` rounded
/// stochastically (floor plus a Bernoulli draw on the fraction), so the
/// expected observed fraction is exactly `c` for every `c`.
pub fn right_censor_mask(b: usize, t: usize, d: usize, c: f64, rng: &mut Rng) -> Result<MaskBatch> {
    check_unit(c)?;
    let ct = c * t as f64;
    let base = ct.floor();
    let frac = ct - base;
    let mut m = vec![0.0; b * t * d];
    for row in m.chunks_mut(t * d) {
        let extra = if frac > 0.0 && rng.bernoulli(frac) { 1 } else { 0 };
        let len = (base as usize + extra).min(t);
        row[..len * d].iter_mut().for_each(|v| *v = 1.0);
    }
    Ok(MaskBatch {
        m: Tensor::from_parts(vec![b, t, d], m),
        target_c: c,
    })
}

/// Low-rank logistic missingness coupled to an importance profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticMaskParams {
    pub layout: Layout,
    pub timesteps: usize,
    pub features: usize,
    pub b: Vec<f64>,
    /// Row-major `[coords, rank]`.
    pub loadings: Vec<f64>,
    pub q: Vec<f64>,
    pub beta: f64,
    pub tau: f64,
    pub rank: usize,
    pub calibration_seed: u64,
}

impl LogisticMaskParams {
    pub const BASE_SCALE: f64 = 0.04;
    pub const LOADING_SCALE: f64 = 0.05;

    pub fn new(layout: Layout, t: usize, d: usize, q: Vec<f64>, rng: &mut Rng) -> Result<Self> {
        let n = layout.coords(t, d);
        ensure!(
            q.len() == n,
            Dimension,
            "importance profile has {} entries for {n} coordinates",
            q.len()
        );
        let rank = 3;
        Ok(LogisticMaskParams {
            layout,
            timesteps: t,
            features: d,
            b: rng.normals(n, Self::BASE_SCALE),
            loadings: rng.normals(n * rank, Self::LOADING_SCALE),
            q,
            beta: 5.0,
            tau: 0.12,
            rank,
            calibration_seed: rng.split("calibration").id().key,
        })
    }

    pub fn coords(&self) -> usize {
        self.q.len()
    }

    /// Logits without the shift, for one sample's latents.
    fn logits_into(&self, z: &[f64], s: f64, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let l = &self.loadings[j * self.rank..(j + 1) * self.rank];
            let zl: f64 = z.iter().zip(l).map(|(a, b)| a * b).sum();
            *o = self.b[j] + s + zl - self.beta * self.q[j];
        }
    }

    fn draw_logits(&self, rng: &mut Rng, out: &mut [f64]) {
        let z = rng.normals(self.rank, 1.0);
        let s = self.tau * rng.normal();
        self.logits_into(&z, s, out);
    }
}

/// Shift `δ` such that the expected observed fraction is `c`, by bisection
/// over `[−30, 30]` against a fixed set of latent draws.
pub fn calibrate_delta(params: &LogisticMaskParams, c: f64, tol: f64) -> Result<f64> {
    ensure!(c > 0.0 && c < 1.0, Domain, "completeness {c} outside (0,1)");
    let n = params.coords();
    let mut r = Rng::new(params.calibration_seed);
    let mut logits = vec![0.0; CALIBRATION_DRAWS * n];
    for row in logits.chunks_mut(n) {
        params.draw_logits(&mut r, row);
    }
    let expected =
        |delta: f64| logits.iter().map(|&l| sigmoid(l + delta)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-DELTA_BRACKET, DELTA_BRACKET);
    if expected(lo) > c || expected(hi) < c {
        return Err(Error::Calibration(format!(
            "completeness {c} not reachable with shifts in [{lo}, {hi}]"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let e = expected(mid);
        if (e - c).abs() < tol || hi - lo < 1e-12 {
            return Ok(mid);
        }
        if e < c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Masks from the logistic process at completeness `c`.
pub fn logistic_mask(params: &LogisticMaskParams, b: usize, c: f64, rng: &mut Rng) -> Result<MaskBatch> {
    let delta = calibrate_delta(params, c, 1e-3)?;
    Ok(logistic_mask_shifted(params, b, c, delta, rng))
}

/// Masks at an already calibrated shift.
pub fn logistic_mask_shifted(
    params: &LogisticMaskParams,
    b: usize,
    c: f64,
    delta: f64,
    rng: &mut Rng,
) -> MaskBatch {
    let (t, d) = (params.timesteps, params.features);
    let n = params.coords();
    let mut logits = vec![0.0; n];
    let mut coords = vec![0.0; n];
    let mut m = vec![0.0; b * t * d];
    for row in m.chunks_mut(t * d) {
        params.draw_logits(rng, &mut logits);
        for (o, &l) in coords.iter_mut().zip(&logits) {
            *o = if rng.bernoulli(sigmoid(l + delta)) { 1.0 } else { 0.0 };
        }
        params.layout.expand(&coords, t, d, row);
    }
    MaskBatch {
        m: Tensor::from_parts(vec![b, t, d], m),
        target_c: c,
    }
}

/// Evaluation-time partial-observation process of a benchmark.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskProcess {
    RightCensor,
    Logistic(LogisticMaskParams),
}

impl MaskProcess {
    /// The benchmark's process: right-censoring for T-SIM-RC, otherwise the
    /// logistic process with importance estimated on `train`.
    pub fn for_dataset(train: &Dataset, seed: u64) -> Result<MaskProcess> {
        if train.kind == DatasetKind::TsimRc {
            return Ok(MaskProcess::RightCensor);
        }
        let (t, d) = (train.timesteps(), train.features());
        let q = estimate_importance(train);
        let mut r = Rng::new(seed).split("mask-process");
        Ok(MaskProcess::Logistic(LogisticMaskParams::new(
            Layout::for_shape(t),
            t,
            d,
            q,
            &mut r,
        )?))
    }

    pub fn sample(&self, b: usize, t: usize, d: usize, c: f64, rng: &mut Rng) -> Result<MaskBatch> {
        check_unit(c)?;
        if c == 1.0 {
            return Ok(MaskBatch::ones(b, t, d));
        }
        if c == 0.0 {
            return Ok(MaskBatch::zeros(b, t, d));
        }
        match self {
            MaskProcess::RightCensor => right_censor_mask(b, t, d, c, rng),
            MaskProcess::Logistic(p) => {
                ensure!(
                    p.timesteps == t && p.features == d,
                    Dimension,
                    "mask process is for [{},{}], batch is [{t},{d}]",
                    p.timesteps,
                    p.features
                );
                logistic_mask(p, b, c, rng)
            }
        }
    }
}

/// Mean realized completeness of fresh masks at each target in `grid`. A
/// cell here is one Bernoulli indicator of the layout (a whole timestep for
/// sequences), and at least `min_cells` are drawn per target.
pub fn realized_completeness(
    process: &MaskProcess,
    t: usize,
    d: usize,
    grid: &[f64],
    min_cells: usize,
    rng: &mut Rng,
) -> Result<Vec<(f64, f64)>> {
    let b = min_cells.div_ceil(Layout::for_shape(t).coords(t, d)).max(1);
    grid.iter()
        .map(|&c| Ok((c, process.sample(b, t, d, c, rng)?.realized_c())))
        .collect()
}

/// Importance profile over the dataset's mask coordinates, max-normalized.
pub fn estimate_importance(train: &Dataset) -> Vec<f64> {
    let (t, d) = (train.timesteps(), train.features());
    let layout = Layout::for_shape(t);
    let indicator = |on: &mut dyn Iterator<Item = usize>| {
        let mut q = vec![0.0; layout.coords(t, d)];
        on.for_each(|i| q[i] = 1.0);
        q
    };
    match train.generator.as_deref() {
        Some(Generator::TsimRc(g)) => indicator(&mut (t - g.config.window..t)),
        Some(Generator::Tsim(_)) => indicator(&mut TSIM_LABEL_FRAMES.iter().cloned()),
        Some(Generator::Ssim(g)) => indicator(&mut g.s.iter().cloned()),
        None => correlation_importance(train, layout),
    }
}

/// max over classes of |corr(x_j, 1{y=k})|, averaged over features per
/// timestep for sequence layouts.
fn correlation_importance(train: &Dataset, layout: Layout) -> Vec<f64> {
    let (n, t, d) = (train.len(), train.timesteps(), train.features());
    let k = train.num_classes;
    let mut cell = vec![0.0; t * d];
    for (c, out) in cell.iter_mut().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| train.x.data()[i * t * d + c]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        if var <= 1e-12 {
            continue;
        }
        for class in 0..k {
            let ind: Vec<f64> = train.y.iter().map(|&y| (y == class) as u8 as f64).collect();
            let im = ind.iter().sum::<f64>() / n as f64;
            let iv = ind.iter().map(|v| (v - im).powi(2)).sum::<f64>();
            if iv <= 0.0 {
                continue;
            }
            let cov: f64 = col.iter().zip(&ind).map(|(a, b)| (a - mean) * (b - im)).sum();
            *out = f64::max(*out, (cov / (var * iv).sqrt()).abs());
        }
    }
    let mut q = vec![0.0; layout.coords(t, d)];
    for (c, v) in cell.iter().enumerate() {
        match layout {
            Layout::Timesteps => q[c / d] += v / d as f64,
            Layout::Features => q[c % d] += v / t as f64,
        }
    }
    let max = q.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        q.iter_mut().for_each(|v| *v /= max);
    }
    q
}

/// Independent-Bernoulli model over mask coordinates, shiftable to any
/// target completeness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPrior {
    pub layout: Layout,
    pub timesteps: usize,
    pub features: usize,
    pub logits: Vec<f64>,
}

pub fn fit_mask_prior(calibration: &[MaskBatch], layout: Layout) -> Result<MaskPrior> {
    ensure!(!calibration.is_empty(), Contract, "no calibration masks");
    let (t, d) = (calibration[0].timesteps(), calibration[0].features());
    let n = layout.coords(t, d);
    let mut freq = vec![0.0; n];
    let mut total = 0.0;
    for mb in calibration {
        ensure!(
            mb.timesteps() == t && mb.features() == d,
            Dimension,
            "calibration batches disagree on [T,D]"
        );
        let w = mb.batch() as f64;
        for (f, v) in freq.iter_mut().zip(layout.frequencies(mb)) {
            *f += w * v;
        }
        total += w;
    }
    let logits = freq
        .iter()
        .map(|&p| {
            let p = p / total;
            let l = if p <= 0.0 {
                -PRIOR_LOGIT_CLIP
            } else if p >= 1.0 {
                PRIOR_LOGIT_CLIP
            } else {
                (p / (1.0 - p)).ln()
            };
            l.clamp(-PRIOR_LOGIT_CLIP, PRIOR_LOGIT_CLIP)
        })
        .collect();
    Ok(MaskPrior {
        layout,
        timesteps: t,
        features: d,
        logits,
    })
}

impl MaskPrior {
    pub fn marginals(&self, shift: f64) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l + shift)).collect()
    }

    /// Shift whose expected observed fraction is `c` (infinite at `c = 1`).
    pub fn shift_for(&self, c: f64) -> Result<f64> {
        check_unit(c)?;
        if c >= 1.0 {
            return Ok(f64::INFINITY);
        }
        if c <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        let mean = |s: f64| self.marginals(s).iter().sum::<f64>() / self.logits.len() as f64;
        let (mut lo, mut hi) = (-DELTA_BRACKET, DELTA_BRACKET);
        if mean(lo) > c || mean(hi) < c {
            return Err(Error::Calibration(format!("prior cannot reach completeness {c}")));
        }
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            if mean(mid) < c {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    pub fn sample(&self, b: usize, c: f64, rng: &mut Rng) -> Result<MaskBatch> {
        let (t, d) = (self.timesteps, self.features);
        let p = self.marginals(self.shift_for(c)?);
        let mut coords = vec![0.0; p.len()];
        let mut m = vec![0.0; b * t * d];
        for row in m.chunks_mut(t * d) {
            for (o, &pj) in coords.iter_mut().zip(&p) {
                *o = if rng.bernoulli(pj) { 1.0 } else { 0.0 };
            }
            self.layout.expand(&coords, t, d, row);
        }
        Ok(MaskBatch {
            m: Tensor::from_parts(vec![b, t, d], m),
            target_c: c,
        })
    }
}

/// Source of training-time coarse views.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainMasks {
    /// Right-censoring prefixes drawn directly from the masking family.
    RightCensor,
    /// Samples from a fitted mask prior.
    Prior(MaskPrior),
}

/// Draws `c ~ U[0.05, 1]` for the batch, then a mask at that completeness.
pub fn sample_training_mask(
    source: &TrainMasks,
    b: usize,
    t: usize,
    d: usize,
    rng: &mut Rng,
) -> Result<MaskBatch> {
    let c = rng.uniform_range(TRAIN_C_MIN, 1.0);
    sample_training_mask_at(source, b, t, d, c, rng)
}

pub fn sample_training_mask_at(
    source: &TrainMasks,
    b: usize,
    t: usize,
    d: usize,
    c: f64,
    rng: &mut Rng,
) -> Result<MaskBatch> {
    match source {
        TrainMasks::RightCensor => right_censor_mask(b, t, d, c, rng),
        TrainMasks::Prior(p) => p.sample(b, c, rng),
    }
}

/// Calibration masks at completeness 0.5 on the prior-fitting split, and the
/// product prior fitted to them.
pub fn fit_prior_for(priorfit: &Dataset, process: &MaskProcess, rng: &mut Rng) -> Result<MaskPrior> {
    let (b, t, d) = (priorfit.len(), priorfit.timesteps(), priorfit.features());
    let masks = process.sample(b, t, d, 0.5, rng)?;
    fit_mask_prior(&[masks], Layout::for_shape(t))
}
