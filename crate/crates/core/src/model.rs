//! Per-timestep MLP encoder, linear heads, imputer, refinements and EMA shadows.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::MaskBatch;
use crate::params::{Bound, ParamSet};
use crate::rng::{Rng, StreamId};
use crate::tensor::Tensor;

pub const REPR_DIM: usize = 32;
pub const DEFAULT_NOISE_SCALE: f64 = 0.25;
pub const DEFAULT_EMA_DECAY: f64 = 0.97;

/// Extra trainable modules for the contrastive pretexts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extras {
    #[default]
    None,
    /// Projection 32→128→64.
    Projection,
    /// Projection plus predictor 64→256→64.
    ProjectionPredictor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub timesteps: usize,
    pub features: usize,
    pub classes: usize,
    pub widths: [usize; 3],
    pub dropout: f64,
    pub extras: Extras,
}

impl ModelSpec {
    pub fn new(timesteps: usize, features: usize, classes: usize) -> Self {
        ModelSpec {
            timesteps,
            features,
            classes,
            widths: [128, 64, REPR_DIM],
            dropout: 0.1,
            extras: Extras::None,
        }
    }

    /// `(name, in, out)` for every affine layer, in parameter order.
    pub fn layers(&self) -> Vec<(String, usize, usize)> {
        let [h1, h2, h3] = self.widths;
        let mut v = vec![
            ("enc.0".to_string(), self.features, h1),
            ("enc.1".to_string(), h1, h2),
            ("enc.2".to_string(), h2, h3),
            ("cls".to_string(), h3, self.classes),
            ("rec".to_string(), h3, self.features),
            ("imp".to_string(), h3, self.features),
        ];
        if self.extras != Extras::None {
            v.push(("proj.0".into(), h3, 128));
            v.push(("proj.1".into(), 128, 64));
        }
        if self.extras == Extras::ProjectionPredictor {
            v.push(("pred.0".into(), 64, 256));
            v.push(("pred.1".into(), 256, 64));
        }
        v
    }

    /// Analytic parameter count: sum of `in·out + out` over layers.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, i, o)| i * o + o).sum()
    }
}

/// Which prediction head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Cls,
    Rec,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Cls => "cls.",
            Head::Rec => "rec.",
        }
    }
}

/// Which weights a prediction uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weights {
    Online,
    Ema,
}

/// Slowly updated copy of some of the online parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Shadow {
    pub params: ParamSet,
    pub decay: f64,
}

impl Shadow {
    /// Copies every online parameter whose name starts with one of `prefixes`.
    pub fn new(online: &ParamSet, prefixes: &[&str], decay: f64) -> Result<Shadow> {
        ensure!((0.0..1.0).contains(&decay), Domain, "EMA decay {decay} outside [0,1)");
        let mut params = ParamSet::new();
        for (n, t) in online.iter() {
            if prefixes.iter().any(|p| n.starts_with(p)) {
                params.insert(n, t.clone());
            }
        }
        Ok(Shadow { params, decay })
    }
}

/// `shadow ← τ·shadow + (1−τ)·online`, parameter by parameter.
pub fn ema_update(shadow: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<()> {
    ensure!((0.0..1.0).contains(&tau), Domain, "EMA decay {tau} outside [0,1)");
    for i in 0..shadow.len() {
        let name = shadow.names()[i].clone();
        let src = online
            .get(&name)
            .ok_or_else(|| Error::Contract(format!("shadow parameter {name} has no source")))?;
        let dst = &mut shadow.tensors_mut()[i];
        ensure!(dst.shape() == src.shape(), Dimension, "shadow {name} shape drifted");
        for (s, &p) in dst.data_mut().iter_mut().zip(src.data()) {
            *s = tau * *s + (1.0 - tau) * p;
        }
    }
    Ok(())
}

/// Online parameters plus an optional EMA shadow.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub shadow: Option<Shadow>,
}

impl ModelBundle {
    /// Weights and biases drawn from `U(±1/sqrt(in))`.
    pub fn init(spec: ModelSpec, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        for (name, i, o) in spec.layers() {
            let bound = 1.0 / (i as f64).sqrt();
            let w = Tensor::from_fn(&[i, o], |_| rng.uniform_range(-bound, bound));
            let b = Tensor::from_fn(&[o], |_| rng.uniform_range(-bound, bound));
            params.insert(format!("{name}.w"), w);
            params.insert(format!("{name}.b"), b);
        }
        ModelBundle {
            spec,
            params,
            shadow: None,
        }
    }

    pub fn with_shadow(mut self, prefixes: &[&str], decay: f64) -> Result<Self> {
        self.shadow = Some(Shadow::new(&self.params, prefixes, decay)?);
        Ok(self)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Trainable handles for every online parameter.
    pub fn bind(&self, g: &mut Graph) -> Net {
        self.net(self.params.bind(g, true))
    }

    /// Constant handles for the online parameters.
    pub fn bind_frozen(&self, g: &mut Graph) -> Net {
        self.net(self.params.bind(g, false))
    }

    /// Constant handles with shadowed parameters replaced by their EMA copy.
    pub fn bind_target(&self, g: &mut Graph) -> Result<Net> {
        let shadow = self
            .shadow
            .as_ref()
            .ok_or_else(|| Error::Config("EMA weights requested but no shadow exists".into()))?;
        let mut merged = self.params.clone();
        for (n, t) in shadow.params.iter() {
            merged.insert(n, t.clone());
        }
        Ok(self.net(merged.bind(g, false)))
    }

    fn net(&self, vars: Bound) -> Net {
        Net {
            vars,
            spec: self.spec.clone(),
        }
    }

    pub fn ema_update(&mut self) -> Result<()> {
        if let Some(s) = &mut self.shadow {
            ema_update(&mut s.params, &self.params, s.decay)?;
        }
        Ok(())
    }

    /// Evaluation-mode embedding of `x` under `mask` (all observed when
    /// `None`), in chunks of `chunk` samples. Returns pooled `[N,32]`.
    pub fn embed(&self, x: &Tensor, mask: Option<&MaskBatch>, chunk: usize) -> Result<Tensor> {
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n * REPR_DIM);
        let mut dummy = Rng::new(0);
        for start in (0..n).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let xb = x.select_rows(&idx);
            let mb = match mask {
                Some(m) => m.select(&idx),
                None => MaskBatch::ones(idx.len(), xb.shape()[1], xb.shape()[2]),
            };
            let mut g = Graph::evaluation();
            let net = self.bind_frozen(&mut g);
            let enc = net.encode_masked(&mut g, &xb, &mb, &mut dummy)?;
            out.extend_from_slice(g.value(enc.pooled).data());
        }
        Tensor::new(&[n, REPR_DIM], out)
    }

    /// Head outputs for representations `z` (`[B,32]` for `Cls`,
    /// `[B,T,32]` for `Rec`).
    pub fn predict(&self, z: &Tensor, head: Head, which: Weights) -> Result<Tensor> {
        let mut g = Graph::evaluation();
        let net = match which {
            Weights::Online => self.bind_frozen(&mut g),
            Weights::Ema => self.bind_target(&mut g)?,
        };
        let zv = g.constant(z.clone());
        let out = match head {
            Head::Cls => net.cls(&mut g, zv)?,
            Head::Rec => net.rec(&mut g, zv)?,
        };
        Ok(g.value(out).clone())
    }
}

/// Pooled and per-timestep encoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub pooled: Var,
    pub unpooled: Var,
}

/// A bundle's parameters bound on a graph.
#[derive(Clone, Debug)]
pub struct Net {
    pub vars: Bound,
    pub spec: ModelSpec,
}

impl Net {
    fn wb(&self, layer: &str) -> Result<(Var, Var)> {
        let get = |s: &str| {
            self.vars
                .var(&format!("{layer}.{s}"))
                .ok_or_else(|| Error::Config(format!("model has no layer {layer}")))
        };
        Ok((get("w")?, get("b")?))
    }

    fn affine(&self, g: &mut Graph, x: Var, layer: &str) -> Result<Var> {
        let (w, b) = self.wb(layer)?;
        g.linear(x, w, b)
    }

    /// Affine layer applied to the last axis of a `[B,T,H]` input.
    fn affine3(&self, g: &mut Graph, x: Var, layer: &str) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
        let y = self.affine(g, flat, layer)?;
        let o = g.shape(y)[1];
        g.reshape(y, &[s[0], s[1], o])
    }

    /// Encoder on an already masked input `[B,T,D]`, pooled over timesteps
    /// with `obs [B,T] == 1`.
    pub fn encode(&self, g: &mut Graph, x: Var, obs: &Tensor, rng: &mut Rng) -> Result<Encoded> {
        let s = g.shape(x).to_vec();
        ensure!(
            s.len() == 3 && s[2] == self.spec.features,
            Dimension,
            "encoder expects [B,T,{}], got {s:?}",
            self.spec.features
        );
        let p = self.spec.dropout;
        let mut h = g.reshape(x, &[s[0] * s[1], s[2]])?;
        for (i, layer) in ["enc.0", "enc.1", "enc.2"].iter().enumerate() {
            h = self.affine(g, h, layer)?;
            if i < 2 {
                h = g.gelu(h);
                h = g.dropout(h, p, rng)?;
            }
        }
        let unpooled = g.reshape(h, &[s[0], s[1], self.spec.widths[2]])?;
        let pooled = g.masked_mean_pool(unpooled, obs)?;
        Ok(Encoded { pooled, unpooled })
    }

    /// Encoder on `x ⊙ M` with timestep observedness from `mask`.
    pub fn encode_masked(&self, g: &mut Graph, x: &Tensor, mask: &MaskBatch, rng: &mut Rng) -> Result<Encoded> {
        let xm = g.constant(x.mul(&mask.m)?);
        self.encode(g, xm, &mask.timestep_observed(), rng)
    }

    /// Encoder on a fully observed input.
    pub fn encode_full(&self, g: &mut Graph, x: Var, rng: &mut Rng) -> Result<Encoded> {
        let s = g.shape(x).to_vec();
        self.encode(g, x, &Tensor::ones(&[s[0], s[1]]), rng)
    }

    pub fn cls(&self, g: &mut Graph, pooled: Var) -> Result<Var> {
        self.affine(g, pooled, "cls")
    }

    pub fn rec(&self, g: &mut Graph, unpooled: Var) -> Result<Var> {
        self.affine3(g, unpooled, "rec")
    }

    pub fn imp(&self, g: &mut Graph, unpooled: Var) -> Result<Var> {
        self.affine3(g, unpooled, "imp")
    }

    /// Head output as a `[B, d_g]` matrix.
    pub fn head_flat(&self, g: &mut Graph, head: Head, enc: Encoded) -> Result<Var> {
        match head {
            Head::Cls => self.cls(g, enc.pooled),
            Head::Rec => {
                let r = self.rec(g, enc.unpooled)?;
                let s = g.shape(r).to_vec();
                g.reshape(r, &[s[0], s[1] * s[2]])
            }
        }
    }

    /// Projection MLP 32→128→64.
    pub fn project(&self, g: &mut Graph, pooled: Var) -> Result<Var> {
        let h = self.affine(g, pooled, "proj.0")?;
        let h = g.gelu(h);
        self.affine(g, h, "proj.1")
    }

    /// Predictor MLP 64→256→64.
    pub fn predictor(&self, g: &mut Graph, p: Var) -> Result<Var> {
        let h = self.affine(g, p, "pred.0")?;
        let h = g.gelu(h);
        self.affine(g, h, "pred.1")
    }

    /// Gradients for every bound parameter, in bundle order.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.vars.grads(g)
    }
}

/// Coarse view, two stochastic completions and their encodings.
#[derive(Clone, Debug)]
pub struct RefinedPair {
    pub x_hat_a: Var,
    pub x_hat_b: Var,
    pub z: Encoded,
    pub z_a: Encoded,
    pub z_b: Encoded,
    pub noise_scale: f64,
    pub streams: [StreamId; 2],
}

/// Builds `x̃_r = x⊙M + ξ_r⊙(1−M)`, `x̂_r = x⊙M + q(f(x̃_r))⊙(1−M)` for two
/// independent noise streams and encodes the coarse view and both
/// completions. With `target`, completions are detached and encoded by the
/// target parameters.
pub fn sample_refinements(
    g: &mut Graph,
    net: &Net,
    target: Option<&Net>,
    x: &Tensor,
    mask: &MaskBatch,
    noise_scale: f64,
    rng: &mut Rng,
) -> Result<RefinedPair> {
    ensure!(noise_scale >= 0.0, Domain, "noise scale {noise_scale} is negative");
    ensure!(
        x.shape() == mask.m.shape(),
        Dimension,
        "input {:?} and mask {:?} differ",
        x.shape(),
        mask.m.shape()
    );
    let observed = x.mul(&mask.m)?;
    let missing = mask.missing();
    let x_obs = g.constant(observed.clone());
    let z = net.encode(g, x_obs, &mask.timestep_observed(), rng)?;
    let full_obs = Tensor::ones(&[mask.batch(), mask.timesteps()]);
    let mut hats = Vec::with_capacity(2);
    let mut encs = Vec::with_capacity(2);
    let mut streams = [StreamId { key: 0, stream: 0 }; 2];
    for (r, name) in ["refine-a", "refine-b"].iter().enumerate() {
        let mut noise = rng.split(name);
        streams[r] = noise.id();
        let noised = Tensor::from_fn(x.shape(), |i| {
            observed.data()[i] + missing.data()[i] * noise_scale * noise.normal()
        });
        let xt = g.constant(noised);
        let zt = net.encode(g, xt, &full_obs, rng)?;
        let q = net.imp(g, zt.unpooled)?;
        let fill = g.mul_const(q, &missing)?;
        let mut hat = g.add(x_obs, fill)?;
        let enc = match target {
            Some(t) => {
                hat = g.detach(hat);
                t.encode(g, hat, &full_obs, rng)?
            }
            None => net.encode(g, hat, &full_obs, rng)?,
        };
        hats.push(hat);
        encs.push(enc);
    }
    Ok(RefinedPair {
        x_hat_a: hats[0],
        x_hat_b: hats[1],
        z,
        z_a: encs[0],
        z_b: encs[1],
        noise_scale,
        streams,
    })
}
