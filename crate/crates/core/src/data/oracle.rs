//! Conditional sampling from the known synthetic processes.
//!
//! Observed cells are inverted through the monotone nonlinearity, which turns
//! each observation into a Gaussian measurement of its pre-activation. Draws
//! are then obtained by prior-proposal importance resampling, or exactly
//! where the structure allows it (fully observed, unobserved, or an observed
//! prefix of the Markov process).

use super::synth::{phi, phi_inv, Generator, Ssim, Tsim, TsimRc};
use super::Dataset;
use crate::error::{ensure, Error, Result};
use crate::mask::MaskBatch;
use crate::par::Exec;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Proposals per conditional sample.
pub const ORACLE_POOL: usize = 4096;
/// Effective sample sizes below this are flagged.
pub const ESS_FLOOR: f64 = 50.0;

/// Completions of one sample, `[n_draws, T, D]`.
#[derive(Clone, Debug)]
pub struct OracleDraws {
    pub draws: Tensor,
    /// Effective sample size of the importance weights (the pool size when
    /// draws are exact).
    pub ess: f64,
    pub flagged: bool,
}

/// Completions for every sample of a coarse batch. Sample `i` uses
/// `rng.split_index(i)`, so the result does not depend on `exec`.
pub fn oracle_conditional_sample(
    ds: &Dataset,
    x_coarse: &Tensor,
    mask: &MaskBatch,
    n_draws: usize,
    rng: &Rng,
    exec: Exec,
) -> Result<Vec<OracleDraws>> {
    let gen = ds.generator.as_deref().ok_or_else(|| {
        Error::Unsupported("oracle sampling needs a synthetic dataset".into())
    })?;
    ensure!(n_draws > 0, Domain, "n_draws must be positive");
    ensure!(
        x_coarse.shape() == mask.m.shape(),
        Dimension,
        "coarse batch {:?} and mask {:?} differ",
        x_coarse.shape(),
        mask.m.shape()
    );
    let (_, t, d) = (mask.batch(), mask.timesteps(), mask.features());
    let (gt, gd, _) = gen.dims();
    ensure!(
        (t, d) == (gt, gd),
        Dimension,
        "batch is [{t},{d}] but the generator produces [{gt},{gd}]"
    );
    Ok(exec.map_range(mask.batch(), |i| {
        oracle_sample_one(
            gen,
            x_coarse.row(i),
            mask.row(i),
            n_draws,
            &mut rng.split_index(i as u64),
        )
    }))
}

/// Completions of a single sample `x` with cell mask `m`, both `[T*D]`.
pub fn oracle_sample_one(gen: &Generator, x: &[f64], m: &[f64], n: usize, rng: &mut Rng) -> OracleDraws {
    let (t, d, _) = gen.dims();
    let mut out = vec![0.0; n * t * d];
    let ess = if m.iter().all(|&v| v == 1.0) {
        for row in out.chunks_mut(t * d) {
            row.copy_from_slice(x);
        }
        ORACLE_POOL as f64
    } else {
        match gen {
            Generator::TsimRc(g) => tsim_rc(g, x, m, &mut out, rng),
            Generator::Tsim(g) => tsim(g, x, m, &mut out, rng),
            Generator::Ssim(g) => ssim(g, x, m, &mut out, rng),
        }
    };
    OracleDraws {
        draws: Tensor::from_parts(vec![n, t, d], out),
        ess,
        flagged: ess < ESS_FLOOR,
    }
}

/// Normalized weights from log-weights, and their effective sample size.
fn normalize(logw: &[f64]) -> (Vec<f64>, f64) {
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    let w: Vec<f64> = w.iter().map(|v| v / s).collect();
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    (w, ess)
}

/// Multinomial resampling of `n` indices.
fn resample(w: &[f64], n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut cum = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for &v in w {
        acc += v;
        cum.push(acc);
    }
    (0..n)
        .map(|_| {
            let u = rng.uniform() * acc;
            cum.partition_point(|&c| c <= u).min(w.len() - 1)
        })
        .collect()
}

fn tsim_rc(g: &TsimRc, x: &[f64], m: &[f64], out: &mut [f64], rng: &mut Rng) -> f64 {
    let (t, d) = (g.config.timesteps, g.config.features);
    let (sigma, alpha) = (g.config.sigma, g.config.alpha);
    let frame_obs: Vec<Option<bool>> = m
        .chunks(d)
        .map(|f| {
            if f.iter().all(|&v| v == 1.0) {
                Some(true)
            } else if f.iter().all(|&v| v == 0.0) {
                Some(false)
            } else {
                None
            }
        })
        .collect();
    let prefix = frame_obs.iter().take_while(|o| **o == Some(true)).count();
    let exact = frame_obs[prefix..].iter().all(|o| *o == Some(false));
    if exact {
        for row in out.chunks_mut(t * d) {
            row[..prefix * d].copy_from_slice(&x[..prefix * d]);
            let mut prev = vec![0.0; d];
            if prefix == 0 {
                g.initial_state(rng, &mut prev);
            } else {
                prev.copy_from_slice(&x[(prefix - 1) * d..prefix * d]);
            }
            for s in prefix..t {
                g.step(&prev, rng, &mut row[s * d..(s + 1) * d]);
                prev.copy_from_slice(&row[s * d..(s + 1) * d]);
            }
        }
        return ORACLE_POOL as f64;
    }
    // sequential importance sampling with observed cells plugged in
    let pre_obs: Vec<f64> = x
        .iter()
        .zip(m)
        .map(|(&v, &o)| if o == 1.0 { phi_inv(v, alpha) } else { 0.0 })
        .collect();
    let mut pool = vec![0.0; ORACLE_POOL * t * d];
    let mut logw = vec![0.0; ORACLE_POOL];
    let mut prev = vec![0.0; d];
    let mut drift = vec![0.0; d];
    for (traj, lw) in pool.chunks_mut(t * d).zip(logw.iter_mut()) {
        g.initial_state(rng, &mut prev);
        for s in 0..t {
            g.drift(&prev, &mut drift);
            for j in 0..d {
                let c = s * d + j;
                if m[c] == 1.0 {
                    let e = pre_obs[c] - drift[j];
                    *lw -= e * e / (2.0 * sigma * sigma);
                    traj[c] = x[c];
                } else {
                    traj[c] = phi(drift[j] + sigma * rng.normal(), alpha);
                }
            }
            prev.copy_from_slice(&traj[s * d..(s + 1) * d]);
        }
    }
    let (w, ess) = normalize(&logw);
    let n = out.len() / (t * d);
    for (row, k) in out.chunks_mut(t * d).zip(resample(&w, n, rng)) {
        row.copy_from_slice(&pool[k * t * d..(k + 1) * t * d]);
    }
    ess
}

fn tsim(g: &Tsim, x: &[f64], m: &[f64], out: &mut [f64], rng: &mut Rng) -> f64 {
    let (t, d, k) = (g.config.timesteps, g.config.features, g.config.latent);
    let (sigma, alpha) = (g.config.sigma, g.config.alpha);
    let n = out.len() / (t * d);
    let mut min_ess = ORACLE_POOL as f64;
    let mut proj = vec![0.0; d];
    for s in 0..t {
        let ms = &m[s * d..(s + 1) * d];
        let xs = &x[s * d..(s + 1) * d];
        if ms.iter().all(|&v| v == 1.0) {
            for row in out.chunks_mut(t * d) {
                row[s * d..(s + 1) * d].copy_from_slice(xs);
            }
            continue;
        }
        if ms.iter().all(|&v| v == 0.0) {
            for row in out.chunks_mut(t * d) {
                g.sample_frame(s, rng, &mut row[s * d..(s + 1) * d]);
            }
            continue;
        }
        let pre_obs: Vec<f64> = xs.iter().map(|&v| phi_inv(v, alpha)).collect();
        let mut zs = vec![0.0; ORACLE_POOL * k];
        let mut logw = vec![0.0; ORACLE_POOL];
        for (z, lw) in zs.chunks_mut(k).zip(logw.iter_mut()) {
            z.iter_mut().for_each(|v| *v = rng.normal());
            g.project(s, z, &mut proj);
            for j in 0..d {
                if ms[j] == 1.0 {
                    let e = pre_obs[j] - proj[j];
                    *lw -= e * e / (2.0 * sigma * sigma);
                }
            }
        }
        let (w, ess) = normalize(&logw);
        min_ess = min_ess.min(ess);
        for (row, idx) in out.chunks_mut(t * d).zip(resample(&w, n, rng)) {
            g.project(s, &zs[idx * k..(idx + 1) * k], &mut proj);
            for j in 0..d {
                row[s * d + j] = if ms[j] == 1.0 {
                    xs[j]
                } else {
                    phi(proj[j] + sigma * rng.normal(), alpha)
                };
            }
        }
    }
    min_ess
}

fn ssim(g: &Ssim, x: &[f64], m: &[f64], out: &mut [f64], rng: &mut Rng) -> f64 {
    let d = g.config.features;
    let (sigma, alpha) = (g.config.sigma, g.config.alpha);
    let r = g.latent_dim();
    let n = out.len() / d;
    let observed: Vec<usize> = (0..d).filter(|&j| m[j] == 1.0).collect();
    let fill = |row: &mut [f64], lat: &[f64], rng: &mut Rng| {
        for (j, c) in g.coords.iter().enumerate() {
            row[j] = if m[j] == 1.0 {
                x[j]
            } else {
                phi(c.mean(lat) + c.sd * rng.normal() + sigma * rng.normal(), alpha)
            };
        }
    };
    if observed.is_empty() {
        for row in out.chunks_mut(d) {
            let lat = rng.normals(r, 1.0);
            fill(row, &lat, rng);
        }
        return ORACLE_POOL as f64;
    }
    let pre_obs: Vec<f64> = observed.iter().map(|&j| phi_inv(x[j], alpha)).collect();
    let mut lats = vec![0.0; ORACLE_POOL * r];
    let mut logw = vec![0.0; ORACLE_POOL];
    for (lat, lw) in lats.chunks_mut(r).zip(logw.iter_mut()) {
        lat.iter_mut().for_each(|v| *v = rng.normal());
        for (&j, &a) in observed.iter().zip(&pre_obs) {
            let c = &g.coords[j];
            let var = c.sd * c.sd + sigma * sigma;
            let e = a - c.mean(lat);
            *lw -= e * e / (2.0 * var);
        }
    }
    let (w, ess) = normalize(&logw);
    for (row, idx) in out.chunks_mut(d).zip(resample(&w, n, rng)) {
        fill(row, &lats[idx * r..(idx + 1) * r], rng);
    }
    ess
}
