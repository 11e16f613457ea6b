//! Synthetic data-generating processes.
//!
//! Every generator draws its structural constants from `seed.split("structure")`
//! and sample `i` from `seed.split("samples").split_index(i)`, so a dataset is
//! a pure function of `(config, seed, n)` and any prefix of it can be
//! regenerated independently.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Frames whose average defines the T-SIM label (0-based).
pub const TSIM_LABEL_FRAMES: [usize; 4] = [8, 9, 10, 15];

/// Bounded nonlinearity `a + alpha * tanh(a)`.
pub fn phi(a: f64, alpha: f64) -> f64 {
    a + alpha * a.tanh()
}

/// Inverse of [`phi`]; the map is strictly increasing with slope in `[1, 1+alpha]`.
pub fn phi_inv(x: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return x;
    }
    let mut a = x / (1.0 + alpha);
    for _ in 0..60 {
        let t = a.tanh();
        let step = (a + alpha * t - x) / (1.0 + alpha * (1.0 - t * t));
        a -= step;
        if step.abs() <= 1e-15 * a.abs().max(1.0) {
            break;
        }
    }
    a
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn matvec(m: &[f64], rows: usize, x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for r in 0..rows {
        out[r] = m[r * cols..(r + 1) * cols]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum();
    }
}

/// Solves `S = A S Aᵀ + q I` through the Kronecker form `(I − A⊗A) vec S = q vec I`.
pub fn lyapunov(a: &[f64], d: usize, q: f64) -> Result<Vec<f64>> {
    let am = DMatrix::from_row_slice(d, d, a);
    let kron = am.kronecker(&am);
    let lhs = DMatrix::<f64>::identity(d * d, d * d) - kron;
    let rhs = nalgebra::DVector::from_fn(d * d, |i, _| if i / d == i % d { q } else { 0.0 });
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("Lyapunov system is singular".into()))?;
    // vec here is row-major flattening, which is consistent with kron(A, A)
    let mut s = sol.as_slice().to_vec();
    for i in 0..d {
        for j in 0..i {
            let m = 0.5 * (s[i * d + j] + s[j * d + i]);
            s[i * d + j] = m;
            s[j * d + i] = m;
        }
    }
    Ok(s)
}

/// Label map `[K,dim]` that whitens the summary's second moment (estimated
/// from `pilot`, one summary per row) and then projects onto a randomly
/// rotated regular simplex, so classes are close to equiprobable.
fn balanced_map(pilot: &[Vec<f64>], k: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let dim = pilot[0].len();
    let mut m = DMatrix::<f64>::zeros(dim, dim);
    for u in pilot {
        let v = nalgebra::DVector::from_column_slice(u);
        m += &v * v.transpose();
    }
    m /= pilot.len() as f64;
    let eig = m.symmetric_eigen();
    if eig.eigenvalues.min() <= 1e-12 {
        return Err(Error::Numerical("label summary is degenerate".into()));
    }
    let inv_sqrt = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * eig.eigenvectors.transpose();
    if dim < k {
        return Err(Error::Config(format!("{k} classes need a summary of at least {k} dims")));
    }
    let rot = DMatrix::from_fn(dim, k, |_, _| rng.normal()).qr().q();
    let simplex = DMatrix::from_fn(k, k, |i, j| (i == j) as u8 as f64 - 1.0 / k as f64);
    let w = simplex * rot.transpose() * inv_sqrt;
    Ok((0..k * dim).map(|i| w[(i / dim, i % dim)]).collect())
}

const PILOT: usize = 4096;

/// Pilot summaries from a stream disjoint from the sample stream.
fn pilot(seed: u64, len: usize, sample: impl Fn(&mut Rng, &mut [f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    let root = Rng::new(seed).split("pilot");
    let mut x = vec![0.0; len];
    (0..PILOT)
        .map(|i| sample(&mut root.split_index(i as u64), &mut x))
        .collect()
}

/// Embeds a `[K,|S|]` map into `[K,D]`, zero outside `s`.
fn embed(map: &[f64], s: &[usize], d: usize) -> Vec<f64> {
    let k = map.len() / s.len();
    let mut w = vec![0.0; k * d];
    for c in 0..k {
        for (j, &col) in s.iter().enumerate() {
            w[c * d + col] = map[c * s.len() + j];
        }
    }
    w
}

fn cholesky(s: &[f64], d: usize) -> Result<Vec<f64>> {
    let ch = DMatrix::from_row_slice(d, d, s)
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
    let l = ch.l();
    Ok((0..d * d).map(|i| l[(i / d, i % d)]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsimRcConfig {
    pub timesteps: usize,
    pub features: usize,
    pub classes: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub window: usize,
}

impl Default for TsimRcConfig {
    fn default() -> Self {
        TsimRcConfig {
            timesteps: 16,
            features: 16,
            classes: 5,
            sigma: 0.2,
            alpha: 0.2,
            window: 5,
        }
    }
}

/// Right-censoring benchmark: a stable lower-triangular linear system with a
/// bounded nonlinearity, labelled from the last `window` frames.
#[derive(Clone, Debug)]
pub struct TsimRc {
    pub config: TsimRcConfig,
    pub seed: u64,
    /// Transition matrix, row-major `[D,D]`.
    pub a: Vec<f64>,
    /// Stationary covariance of the linear part, row-major `[D,D]`.
    pub sigma0: Vec<f64>,
    chol0: Vec<f64>,
    /// Label map `[K,D]`.
    pub w_rc: Vec<f64>,
    /// Weights over the final `window` frames, increasing and summing to 1.
    pub window_weights: Vec<f64>,
}

impl TsimRc {
    pub fn new(config: TsimRcConfig, seed: u64) -> Result<Self> {
        let d = config.features;
        let mut r = Rng::new(seed).split("structure");
        let mut a = vec![0.0; d * d];
        let off = 0.5 / (d as f64).sqrt();
        for i in 0..d {
            a[i * d + i] = r.uniform_range(0.5, 0.9);
            for j in 0..i {
                a[i * d + j] = off * r.normal();
            }
        }
        let sigma0 = lyapunov(&a, d, config.sigma * config.sigma)?;
        let chol0 = cholesky(&sigma0, d)?;
        let total = (config.window * (config.window + 1) / 2) as f64;
        let window_weights = (1..=config.window).map(|w| w as f64 / total).collect();
        let mut g = TsimRc {
            w_rc: Vec::new(),
            config,
            seed,
            a,
            sigma0,
            chol0,
            window_weights,
        };
        let len = g.config.timesteps * d;
        let summaries = pilot(seed, len, |r, x| {
            g.sample_into(r, x);
            g.summary(x)
        });
        g.w_rc = balanced_map(&summaries, g.config.classes, &mut r)?;
        Ok(g)
    }

    /// Weighted combination of the final `window` frames.
    pub fn summary(&self, x: &[f64]) -> Vec<f64> {
        let (t, d, w) = (
            self.config.timesteps,
            self.config.features,
            self.config.window,
        );
        let mut u = vec![0.0; d];
        for (k, &wk) in self.window_weights.iter().enumerate() {
            let frame = &x[(t - w + k) * d..(t - w + k + 1) * d];
            u.iter_mut().zip(frame).for_each(|(a, b)| *a += wk * b);
        }
        u
    }

    /// Draw from `N(0, Σ0)`.
    pub fn initial_state(&self, r: &mut Rng, out: &mut [f64]) {
        let d = self.config.features;
        let e = r.normals(d, 1.0);
        matvec(&self.chol0, d, &e, out);
    }

    /// Pre-activation mean `A x` of the next frame.
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        matvec(&self.a, self.config.features, x, out);
    }

    /// One transition from `prev`; writes the new frame into `out`.
    pub fn step(&self, prev: &[f64], r: &mut Rng, out: &mut [f64]) {
        self.drift(prev, out);
        let (s, al) = (self.config.sigma, self.config.alpha);
        for v in out.iter_mut() {
            *v = phi(*v + s * r.normal(), al);
        }
    }

    fn sample_into(&self, r: &mut Rng, out: &mut [f64]) {
        let d = self.config.features;
        let mut prev = vec![0.0; d];
        self.initial_state(r, &mut prev);
        for frame in out.chunks_mut(d) {
            self.step(&prev, r, frame);
            prev.copy_from_slice(frame);
        }
    }

    pub fn label(&self, x: &[f64]) -> usize {
        let mut logits = vec![0.0; self.config.classes];
        matvec(&self.w_rc, self.config.classes, &self.summary(x), &mut logits);
        argmax(&logits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsimConfig {
    pub timesteps: usize,
    pub features: usize,
    pub latent: usize,
    pub classes: usize,
    pub relevant: usize,
    pub sigma: f64,
    pub alpha: f64,
}

impl Default for TsimConfig {
    fn default() -> Self {
        TsimConfig {
            timesteps: 16,
            features: 32,
            latent: 8,
            classes: 5,
            relevant: 5,
            sigma: 0.2,
            alpha: 0.2,
        }
    }
}

/// Structured temporal benchmark with independent per-frame latent factors.
#[derive(Clone, Debug)]
pub struct Tsim {
    pub config: TsimConfig,
    pub seed: u64,
    /// Per-frame projections, each row-major `[D,k]`.
    pub b: Vec<Vec<f64>>,
    /// Label-relevant feature coordinates, sorted.
    pub s: Vec<usize>,
    /// Label map `[K,D]`.
    pub w_st: Vec<f64>,
}

impl Tsim {
    pub fn new(config: TsimConfig, seed: u64) -> Result<Self> {
        let (t, d, k) = (config.timesteps, config.features, config.latent);
        let mut r = Rng::new(seed).split("structure");
        let scale = 1.0 / (k as f64).sqrt();
        let b = (0..t).map(|_| r.normals(d * k, scale)).collect();
        let mut s = r.choose_distinct(d, config.relevant);
        s.sort_unstable();
        let mut g = Tsim {
            config,
            seed,
            b,
            s,
            w_st: Vec::new(),
        };
        let summaries = pilot(seed, t * d, |r, x| {
            g.sample_into(r, x);
            let full = g.summary(x);
            g.s.iter().map(|&j| full[j]).collect()
        });
        let map = balanced_map(&summaries, g.config.classes, &mut r)?;
        g.w_st = embed(&map, &g.s, d);
        Ok(g)
    }

    /// Linear part `B_t z` of frame `t`.
    pub fn project(&self, t: usize, z: &[f64], out: &mut [f64]) {
        matvec(&self.b[t], self.config.features, z, out);
    }

    pub fn sample_frame(&self, t: usize, r: &mut Rng, out: &mut [f64]) {
        let z = r.normals(self.config.latent, 1.0);
        self.project(t, &z, out);
        let (s, al) = (self.config.sigma, self.config.alpha);
        for v in out.iter_mut() {
            *v = phi(*v + s * r.normal(), al);
        }
    }

    fn sample_into(&self, r: &mut Rng, out: &mut [f64]) {
        let d = self.config.features;
        for (t, frame) in out.chunks_mut(d).enumerate() {
            self.sample_frame(t, r, frame);
        }
    }

    /// Masked, squashed summary of the label frames.
    pub fn summary(&self, x: &[f64]) -> Vec<f64> {
        let d = self.config.features;
        let mut m = vec![0.0; d];
        for &t in &TSIM_LABEL_FRAMES {
            m.iter_mut()
                .zip(&x[t * d..(t + 1) * d])
                .for_each(|(a, b)| *a += b / TSIM_LABEL_FRAMES.len() as f64);
        }
        let mut out = vec![0.0; d];
        for &j in &self.s {
            out[j] = m[j].tanh();
        }
        out
    }

    pub fn label(&self, x: &[f64]) -> usize {
        let mut logits = vec![0.0; self.config.classes];
        matvec(&self.w_st, self.config.classes, &self.summary(x), &mut logits);
        argmax(&logits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub features: usize,
    pub classes: usize,
    pub relevant: usize,
    pub proxies: usize,
    /// Intrinsic noise sd of factor-loaded coordinates.
    pub loading_noise: f64,
    pub sigma: f64,
    pub alpha: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            features: 16,
            classes: 5,
            relevant: 5,
            proxies: 5,
            loading_noise: 0.5,
            sigma: 0.2,
            alpha: 0.2,
        }
    }
}

/// Pre-activation law of one S-SIM coordinate:
/// `g_load·g + f_load·f_{factor} + sd·e`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coord {
    pub g_load: f64,
    pub factor: Option<usize>,
    pub f_load: f64,
    pub sd: f64,
}

impl Coord {
    pub fn mean(&self, latents: &[f64]) -> f64 {
        let f = self.factor.map_or(0.0, |j| self.f_load * latents[1 + j]);
        self.g_load * latents[0] + f
    }
}

/// Static benchmark: one shared factor `g` and per-pair factors `f_j`.
#[derive(Clone, Debug)]
pub struct Ssim {
    pub config: SsimConfig,
    pub seed: u64,
    pub coords: Vec<Coord>,
    /// Predictive coordinates, sorted; `s[j]` loads on `f_j`.
    pub s: Vec<usize>,
    /// Proxy coordinates; `proxies[j]` loads on `f_j`.
    pub proxies: Vec<usize>,
    /// Label map `[K,D]`, zero outside `s`.
    pub w: Vec<f64>,
}

impl Ssim {
    pub fn new(config: SsimConfig, seed: u64) -> Result<Self> {
        let d = config.features;
        let mut r = Rng::new(seed).split("structure");
        let picked = r.choose_distinct(d, config.relevant + config.proxies);
        let mut s = picked[..config.relevant].to_vec();
        s.sort_unstable();
        let proxies = picked[config.relevant..].to_vec();
        let noise = Coord {
            g_load: 0.0,
            factor: None,
            f_load: 0.0,
            sd: 1.0,
        };
        let mut coords = vec![noise; d];
        let loading = |r: &mut Rng| {
            let sign = if r.bernoulli(0.5) { 1.0 } else { -1.0 };
            sign * r.uniform_range(0.5, 1.0)
        };
        for (j, &c) in s.iter().enumerate() {
            coords[c] = Coord {
                g_load: loading(&mut r),
                factor: Some(j),
                f_load: loading(&mut r),
                sd: config.loading_noise,
            };
        }
        for (j, &c) in proxies.iter().enumerate() {
            let partner = coords[s[j % config.relevant]];
            coords[c] = Coord {
                g_load: partner.g_load.signum() * loading(&mut r).abs(),
                factor: Some(j % config.relevant),
                f_load: partner.f_load.signum() * loading(&mut r).abs(),
                sd: config.loading_noise,
            };
        }
        let mut g = Ssim {
            config,
            seed,
            coords,
            s,
            proxies,
            w: Vec::new(),
        };
        let summaries = pilot(seed, d, |r, x| {
            g.sample_into(r, x);
            g.s.iter().map(|&j| x[j]).collect()
        });
        let map = balanced_map(&summaries, g.config.classes, &mut r)?;
        g.w = embed(&map, &g.s, d);
        Ok(g)
    }

    /// Number of latent factors `(g, f_1..f_|S|)`.
    pub fn latent_dim(&self) -> usize {
        1 + self.config.relevant
    }

    fn sample_into(&self, r: &mut Rng, out: &mut [f64]) {
        let lat = r.normals(self.latent_dim(), 1.0);
        let (s, al) = (self.config.sigma, self.config.alpha);
        for (o, c) in out.iter_mut().zip(&self.coords) {
            let pre = c.mean(&lat) + c.sd * r.normal() + s * r.normal();
            *o = phi(pre, al);
        }
    }

    pub fn label(&self, x: &[f64]) -> usize {
        let mut logits = vec![0.0; self.config.classes];
        matvec(&self.w, self.config.classes, x, &mut logits);
        argmax(&logits)
    }
}

/// Any synthetic generator; the record stored on a [`Dataset`].
#[derive(Clone, Debug)]
pub enum Generator {
    TsimRc(TsimRc),
    Tsim(Tsim),
    Ssim(Ssim),
}

impl Generator {
    pub fn kind(&self) -> DatasetKind {
        match self {
            Generator::TsimRc(_) => DatasetKind::TsimRc,
            Generator::Tsim(_) => DatasetKind::Tsim,
            Generator::Ssim(_) => DatasetKind::Ssim,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Generator::TsimRc(g) => g.seed,
            Generator::Tsim(g) => g.seed,
            Generator::Ssim(g) => g.seed,
        }
    }

    /// `(T, D, K)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            Generator::TsimRc(g) => (g.config.timesteps, g.config.features, g.config.classes),
            Generator::Tsim(g) => (g.config.timesteps, g.config.features, g.config.classes),
            Generator::Ssim(g) => (1, g.config.features, g.config.classes),
        }
    }

    pub fn sigma_alpha(&self) -> (f64, f64) {
        match self {
            Generator::TsimRc(g) => (g.config.sigma, g.config.alpha),
            Generator::Tsim(g) => (g.config.sigma, g.config.alpha),
            Generator::Ssim(g) => (g.config.sigma, g.config.alpha),
        }
    }

    pub fn label(&self, x: &[f64]) -> usize {
        match self {
            Generator::TsimRc(g) => g.label(x),
            Generator::Tsim(g) => g.label(x),
            Generator::Ssim(g) => g.label(x),
        }
    }

    /// One unconditional sample `[T*D]`.
    pub fn sample_into(&self, r: &mut Rng, out: &mut [f64]) {
        match self {
            Generator::TsimRc(g) => g.sample_into(r, out),
            Generator::Tsim(g) => g.sample_into(r, out),
            Generator::Ssim(g) => g.sample_into(r, out),
        }
    }

    /// The first `n` samples of this generator's stream.
    pub fn generate(self, n: usize) -> Result<Dataset> {
        let (t, d, k) = self.dims();
        let root = Rng::new(self.seed()).split("samples");
        let mut x = vec![0.0; n * t * d];
        let mut y = Vec::with_capacity(n);
        for (i, row) in x.chunks_mut(t * d).enumerate() {
            self.sample_into(&mut root.split_index(i as u64), row);
            y.push(self.label(row));
        }
        let kind = self.kind();
        let mut ds = Dataset::new(Tensor::new(&[n, t, d], x)?, y, k, kind)?;
        ds.generator = Some(Arc::new(self));
        Ok(ds)
    }
}

pub fn gen_tsim_rc(n: usize, seed: u64) -> Result<Dataset> {
    Generator::TsimRc(TsimRc::new(TsimRcConfig::default(), seed)?).generate(n)
}

pub fn gen_tsim(n: usize, seed: u64) -> Result<Dataset> {
    Generator::Tsim(Tsim::new(TsimConfig::default(), seed)?).generate(n)
}

pub fn gen_ssim(n: usize, seed: u64) -> Result<Dataset> {
    Generator::Ssim(Ssim::new(SsimConfig::default(), seed)?).generate(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_inverse_roundtrip() {
        for &x in &[-5.0, -1.2, -0.01, 0.0, 0.3, 2.0, 40.0] {
            assert!((phi(phi_inv(x, 0.2), 0.2) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn lyapunov_matches_fixed_point() {
        let cfg = TsimRcConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let g = TsimRc::new(cfg, 3).unwrap();
        let d = 16;
        let a = DMatrix::from_row_slice(d, d, &g.a);
        let q = DMatrix::<f64>::identity(d, d) * 0.04;
        let mut s = DMatrix::<f64>::zeros(d, d);
        for _ in 0..3000 {
            s = &a * &s * a.transpose() + &q;
        }
        let got = DMatrix::from_row_slice(d, d, &g.sigma0);
        assert!((&got - &s).amax() < 1e-10);
        let resid = &a * &got * a.transpose() + &q - &got;
        assert!(resid.amax() < 1e-8);
    }

    #[test]
    fn transition_is_stable() {
        let g = TsimRc::new(TsimRcConfig::default(), 9).unwrap();
        let d = 16;
        for i in 0..d {
            assert!((0.5..0.9).contains(&g.a[i * d + i]));
            for j in i + 1..d {
                assert_eq!(g.a[i * d + j], 0.0);
            }
        }
        let w: f64 = g.window_weights.iter().sum();
        assert!((w - 1.0).abs() < 1e-15);
        assert!(g.window_weights.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_tsim_rc(20, 5).unwrap();
        let b = gen_tsim_rc(20, 5).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.x.shape(), &[20, 16, 16]);
        let c = gen_tsim_rc(20, 6).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn shapes() {
        assert_eq!(gen_tsim(3, 0).unwrap().x.shape(), &[3, 16, 32]);
        assert_eq!(gen_ssim(3, 0).unwrap().x.shape(), &[3, 1, 16]);
    }

    #[test]
    fn prefix_of_larger_draw_matches() {
        let a = gen_ssim(10, 2).unwrap();
        let b = gen_ssim(25, 2).unwrap();
        assert_eq!(a.x.data(), &b.x.data()[..160]);
    }

    #[test]
    fn ssim_label_ignores_non_s() {
        let ds = gen_ssim(500, 1).unwrap();
        let Some(Generator::Ssim(g)) = ds.generator.as_deref() else {
            panic!()
        };
        for i in 0..ds.len() {
            let mut x = ds.sample(i).to_vec();
            for (j, v) in x.iter_mut().enumerate() {
                if !g.s.contains(&j) {
                    *v = 0.0;
                }
            }
            assert_eq!(g.label(&x), ds.y[i]);
        }
    }

    #[test]
    fn tsim_summary_has_five_live_coordinates() {
        let ds = gen_tsim(50, 4).unwrap();
        let Some(Generator::Tsim(g)) = ds.generator.as_deref() else {
            panic!()
        };
        for i in 0..ds.len() {
            let s = g.summary(ds.sample(i));
            assert_eq!(s.iter().filter(|v| **v != 0.0).count(), 5);
        }
    }
}
