//! Loss terms, the martingale estimators, the warmup-ramp schedule and the
//! contrastive pretexts.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::MaskBatch;
use crate::model::{sample_refinements, Encoded, Head, Net, RefinedPair};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMP_EPS: f64 = 1e-8;
pub const SIMCLR_TEMPERATURE: f64 = 0.1;
pub const BYOL_DECAY: f64 = 0.99;

/// Predictive target: labels or reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Semi,
    Fully,
}

impl Mode {
    pub fn head(self) -> Head {
        match self {
            Mode::Semi => Head::Cls,
            Mode::Fully => Head::Rec,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Semi => "semi",
            Mode::Fully => "fully",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Pred,
    Latent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    BaseImp,
    MartPred,
    MartPredEma,
    MartLatent,
    MartLatentEma,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Base,
        Variant::BaseImp,
        Variant::MartPred,
        Variant::MartPredEma,
        Variant::MartLatent,
        Variant::MartLatentEma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BaseImp => "base_imp",
            Variant::MartPred => "mart_pred",
            Variant::MartPredEma => "mart_pred_ema",
            Variant::MartLatent => "mart_latent",
            Variant::MartLatentEma => "mart_latent_ema",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn uses_imp(self) -> bool {
        self != Variant::Base
    }

    pub fn space(self) -> Option<Space> {
        match self {
            Variant::Base | Variant::BaseImp => None,
            Variant::MartPred | Variant::MartPredEma => Some(Space::Pred),
            Variant::MartLatent | Variant::MartLatentEma => Some(Space::Latent),
        }
    }

    pub fn is_ema(self) -> bool {
        matches!(self, Variant::MartPredEma | Variant::MartLatentEma)
    }

    /// Parameter prefixes copied into the EMA shadow.
    pub fn shadow_prefixes(self, mode: Mode) -> Vec<&'static str> {
        match self {
            Variant::MartPredEma => vec![mode.head().prefix()],
            Variant::MartLatentEma => vec!["enc.", mode.head().prefix()],
            _ => vec![],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pretext {
    #[default]
    Standard,
    SimClr,
    Byol,
}

impl Pretext {
    pub fn name(self) -> &'static str {
        match self {
            Pretext::Standard => "standard",
            Pretext::SimClr => "simclr",
            Pretext::Byol => "byol",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_imp: f64,
    pub lambda_mart: f64,
    pub warmup_steps: u64,
    pub ramp_steps: u64,
    pub mart_clip: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_imp: 1.0,
            lambda_mart: 1.0,
            warmup_steps: 100,
            ramp_steps: 400,
            mart_clip: None,
        }
    }
}

impl LossWeights {
    /// Schedule factor for 1-based step `s`: 0 through the warmup, linear
    /// over the ramp, 1 afterwards.
    pub fn gamma(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return 0.0;
        }
        if self.ramp_steps == 0 {
            return 1.0;
        }
        ((step - self.warmup_steps) as f64 / self.ramp_steps as f64).min(1.0)
    }

    pub fn effective_mart(&self, step: u64) -> f64 {
        self.gamma(step) * self.lambda_mart
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda_imp >= 0.0 && self.lambda_mart >= 0.0,
            Config,
            "loss weights must be nonnegative"
        );
        if let Some(c) = self.mart_clip {
            ensure!(c > 0.0, Config, "mart_clip must be positive, got {c}");
        }
        Ok(())
    }
}

/// Cross-entropy of the class head on the fully observed input.
pub fn loss_pred_cls(g: &mut Graph, net: &Net, x: &Tensor, y: &[usize], rng: &mut Rng) -> Result<Var> {
    let xv = g.constant(x.clone());
    let enc = net.encode_full(g, xv, rng)?;
    let logits = net.cls(g, enc.pooled)?;
    g.softmax_cross_entropy(logits, y)
}

/// Mean squared reconstruction error over all `B·T·D` coordinates.
pub fn loss_pred_rec(g: &mut Graph, net: &Net, x: &Tensor, rng: &mut Rng) -> Result<Var> {
    let xv = g.constant(x.clone());
    let enc = net.encode_full(g, xv, rng)?;
    let r = net.rec(g, enc.unpooled)?;
    let target = g.constant(x.clone());
    let d = g.sub(r, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Squared imputation error on missing cells over `Σ(1−M) + ε`.
pub fn imputation_error(g: &mut Graph, imputed: Var, x: &Tensor, mask: &MaskBatch) -> Result<Var> {
    let missing = mask.missing();
    let target = g.constant(x.clone());
    let d = g.sub(imputed, target)?;
    let dm = g.mul_const(d, &missing)?;
    let sq = g.square(dm);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (missing.sum() + IMP_EPS)))
}

/// Imputer applied to the coarse representation, scored on missing cells.
pub fn loss_imp(g: &mut Graph, net: &Net, x: &Tensor, mask: &MaskBatch, rng: &mut Rng) -> Result<Var> {
    let enc = net.encode_masked(g, x, mask, rng)?;
    loss_imp_from(g, net, enc, x, mask)
}

fn loss_imp_from(g: &mut Graph, net: &Net, coarse: Encoded, x: &Tensor, mask: &MaskBatch) -> Result<Var> {
    let q = net.imp(g, coarse.unpooled)?;
    imputation_error(g, q, x, mask)
}

fn check_triple(u: &[usize], a: &[usize], b: &[usize]) -> Result<()> {
    ensure!(
        u == a && u == b && u.len() == 2,
        Dimension,
        "estimator inputs must share a [B,d] shape, got {u:?}, {a:?}, {b:?}"
    );
    Ok(())
}

/// Batch mean of `(u − v_a)ᵀ(u − v_b)`, optionally clipped to `±clip`.
pub fn mart_two_sample(g: &mut Graph, u: Var, va: Var, vb: Var, clip: Option<f64>) -> Result<Var> {
    check_triple(g.shape(u), g.shape(va), g.shape(vb))?;
    let b = g.shape(u)[0];
    let da = g.sub(u, va)?;
    let db = g.sub(u, vb)?;
    let p = g.mul(da, db)?;
    let s = g.sum(p);
    let out = g.scale(s, 1.0 / b as f64);
    Ok(match clip {
        Some(c) if g.value(out).item().abs() > c => {
            let v = g.value(out).item().clamp(-c, c);
            g.constant(Tensor::scalar(v))
        }
        _ => out,
    })
}

/// Per-sample `(u − v_a)ᵀ(u − v_b)` on plain tensors `[B,d]`.
pub fn two_sample_values(u: &Tensor, va: &Tensor, vb: &Tensor) -> Result<Vec<f64>> {
    check_triple(u.shape(), va.shape(), vb.shape())?;
    Ok(u
        .rows()
        .zip(va.rows())
        .zip(vb.rows())
        .map(|((u, a), b)| u.iter().zip(a).zip(b).map(|((u, a), b)| (u - a) * (u - b)).sum())
        .collect())
}

/// Cross estimator for two overlapping views refined from their
/// intersection: with `d_r = u1_r − u2_r`, the per-sample value `d_aᵀ d_b`
/// is unbiased for `‖E[g(x_F1)|F∩] − E[g(x_F2)|F∩]‖²`. Returns the batch mean.
pub fn mart_nonnested(u1_a: &Tensor, u2_a: &Tensor, u1_b: &Tensor, u2_b: &Tensor) -> Result<f64> {
    check_triple(u1_a.shape(), u2_a.shape(), u1_b.shape())?;
    check_triple(u1_a.shape(), u2_b.shape(), u2_b.shape())?;
    let da = u1_a.sub(u2_a)?;
    let db = u1_b.sub(u2_b)?;
    Ok(da.mul(&db)?.sum() / u1_a.shape()[0] as f64)
}

/// Martingale penalty on a fresh refinement pair. `target` selects the
/// refined-branch weights (EMA variants); `head` the prediction head used in
/// prediction space.
#[allow(clippy::too_many_arguments)]
pub fn mart_loss(
    g: &mut Graph,
    net: &Net,
    target: Option<&Net>,
    x: &Tensor,
    mask: &MaskBatch,
    space: Space,
    head: Head,
    noise_scale: f64,
    clip: Option<f64>,
    rng: &mut Rng,
) -> Result<(Var, RefinedPair)> {
    let pair = sample_refinements(g, net, target, x, mask, noise_scale, rng)?;
    let refined = target.unwrap_or(net);
    let (u, va, vb) = match space {
        Space::Latent => (pair.z.pooled, pair.z_a.pooled, pair.z_b.pooled),
        Space::Pred => (
            net.head_flat(g, head, pair.z)?,
            refined.head_flat(g, head, pair.z_a)?,
            refined.head_flat(g, head, pair.z_b)?,
        ),
    };
    let loss = mart_two_sample(g, u, va, vb, clip)?;
    Ok((loss, pair))
}

/// NT-Xent over `2B` views: row `i` of `p1` and row `i` of `p2` are
/// positives, every other view is a negative.
pub fn nt_xent(g: &mut Graph, p1: Var, p2: Var, temperature: f64) -> Result<Var> {
    ensure!(
        g.shape(p1) == g.shape(p2),
        Dimension,
        "view projections differ: {:?} vs {:?}",
        g.shape(p1),
        g.shape(p2)
    );
    let b = g.shape(p1)[0];
    ensure!(b >= 2, Contract, "contrastive loss needs at least 2 samples, got {b}");
    ensure!(temperature > 0.0, Domain, "temperature must be positive");
    let all = g.concat(&[p1, p2])?;
    let n = g.normalize_rows(all)?;
    let nt = g.transpose(n)?;
    let sim = g.matmul(n, nt)?;
    let logits = g.scale(sim, 1.0 / temperature);
    let diag = Tensor::from_fn(&[2 * b, 2 * b], |k| if k / (2 * b) == k % (2 * b) { -1e9 } else { 0.0 });
    let diag = g.constant(diag);
    let logits = g.add(logits, diag)?;
    let labels: Vec<usize> = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();
    g.softmax_cross_entropy(logits, &labels)
}

/// Batch mean of `‖a/‖a‖ − b/‖b‖‖²`.
pub fn normalized_mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let rows = g.shape(a)[0];
    let na = g.normalize_rows(a)?;
    let nb = g.normalize_rows(b)?;
    let d = g.sub(na, nb)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / rows as f64))
}

fn view_pooled(g: &mut Graph, net: &Net, x: &Tensor, view: &MaskBatch, rng: &mut Rng) -> Result<Var> {
    Ok(net.encode_masked(g, x, view, rng)?.pooled)
}

/// SimCLR on two masked views of the batch.
pub fn loss_simclr(g: &mut Graph, net: &Net, x: &Tensor, views: [&MaskBatch; 2], rng: &mut Rng) -> Result<Var> {
    let h1 = view_pooled(g, net, x, views[0], rng)?;
    let h2 = view_pooled(g, net, x, views[1], rng)?;
    let p1 = net.project(g, h1)?;
    let p2 = net.project(g, h2)?;
    nt_xent(g, p1, p2, SIMCLR_TEMPERATURE)
}

/// Symmetric BYOL loss `½(L₁₂ + L₂₁)`; `target` must be a constant binding.
pub fn loss_byol(
    g: &mut Graph,
    net: &Net,
    target: &Net,
    x: &Tensor,
    views: [&MaskBatch; 2],
    rng: &mut Rng,
) -> Result<Var> {
    let mut sides = Vec::with_capacity(2);
    for (a, b) in [(0, 1), (1, 0)] {
        let h = view_pooled(g, net, x, views[a], rng)?;
        let p = net.project(g, h)?;
        let q = net.predictor(g, p)?;
        let ht = view_pooled(g, target, x, views[b], rng)?;
        let t = target.project(g, ht)?;
        let t = g.detach(t);
        sides.push(normalized_mse(g, q, t)?);
    }
    let s = g.add(sides[0], sides[1])?;
    Ok(g.scale(s, 0.5))
}

/// Everything that fixes the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub mode: Mode,
    pub variant: Variant,
    pub pretext: Pretext,
    pub weights: LossWeights,
    pub noise_scale: f64,
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        ensure!(self.noise_scale >= 0.0, Config, "noise scale must be nonnegative");
        if self.pretext != Pretext::Standard {
            ensure!(
                self.mode == Mode::Fully,
                Config,
                "{} is a label-free pretext; use mode = fully",
                self.pretext.name()
            );
            ensure!(
                matches!(self.variant, Variant::Base | Variant::BaseImp | Variant::MartLatent),
                Config,
                "{} combines only with base, base_imp or mart_latent",
                self.pretext.name()
            );
        }
        Ok(())
    }

    /// Whether the objective needs a target binding (EMA or BYOL).
    pub fn needs_target(&self) -> bool {
        self.variant.is_ema() || self.pretext == Pretext::Byol
    }
}

/// One training batch: complete inputs, labels, coarse mask and, for the
/// contrastive pretexts, two view masks.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub mask: MaskBatch,
    pub views: Option<[MaskBatch; 2]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub pred: f64,
    pub imp: f64,
    pub mart: f64,
    pub gamma: f64,
    pub total: f64,
}

impl Breakdown {
    pub fn is_finite(&self) -> bool {
        [self.pred, self.imp, self.mart, self.total].iter().all(|v| v.is_finite())
    }
}

/// `L_pred + λ_imp·L_imp + γ(step)·λ_mart·L_mart` with terms gated by the
/// variant. Terms with zero weight are not built.
pub fn total_loss(
    g: &mut Graph,
    net: &Net,
    target: Option<&Net>,
    obj: &Objective,
    batch: &Batch,
    step: u64,
    rng: &mut Rng,
) -> Result<(Var, Breakdown)> {
    let w = &obj.weights;
    let pred = match obj.pretext {
        Pretext::Standard => match obj.mode {
            Mode::Semi => loss_pred_cls(g, net, &batch.x, &batch.y, rng)?,
            Mode::Fully => loss_pred_rec(g, net, &batch.x, rng)?,
        },
        Pretext::SimClr | Pretext::Byol => {
            let [v1, v2] = batch
                .views
                .as_ref()
                .ok_or_else(|| Error::Contract("contrastive pretext needs two view masks".into()))?;
            if obj.pretext == Pretext::SimClr {
                loss_simclr(g, net, &batch.x, [v1, v2], rng)?
            } else {
                let t = target.ok_or_else(|| Error::Config("BYOL needs a target network".into()))?;
                loss_byol(g, net, t, &batch.x, [v1, v2], rng)?
            }
        }
    };
    let mut out = Breakdown {
        pred: g.value(pred).item(),
        gamma: w.gamma(step),
        ..Default::default()
    };
    let mut total = pred;
    let lambda_mart = w.effective_mart(step);
    let mart_target = if obj.variant.is_ema() {
        Some(target.ok_or_else(|| Error::Config("EMA variant needs shadow weights".into()))?)
    } else {
        None
    };
    let mut coarse = None;
    if let Some(space) = obj.variant.space() {
        if lambda_mart > 0.0 {
            let (m, pair) = mart_loss(
                g,
                net,
                mart_target,
                &batch.x,
                &batch.mask,
                space,
                obj.mode.head(),
                obj.noise_scale,
                w.mart_clip,
                rng,
            )?;
            out.mart = g.value(m).item();
            let term = g.scale(m, lambda_mart);
            total = g.add(total, term)?;
            coarse = Some(pair.z);
        }
    }
    if obj.variant.uses_imp() && w.lambda_imp > 0.0 {
        let enc = match coarse {
            Some(z) => z,
            None => net.encode_masked(g, &batch.x, &batch.mask, rng)?,
        };
        let l = loss_imp_from(g, net, enc, &batch.x, &batch.mask)?;
        out.imp = g.value(l).item();
        let term = g.scale(l, w.lambda_imp);
        total = g.add(total, term)?;
    }
    out.total = g.value(total).item();
    Ok((total, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let w = LossWeights {
            lambda_mart: 3.0,
            ..Default::default()
        };
        assert_eq!(w.gamma(0), 0.0);
        assert_eq!(w.gamma(99), 0.0);
        assert_eq!(w.gamma(100), 0.0);
        assert!((w.effective_mart(300) - 1.5).abs() < 1e-12);
        assert_eq!(w.gamma(500), 1.0);
        assert_eq!(w.gamma(10_000), 1.0);
        let mut prev = 0.0;
        for s in 0..=600 {
            let gm = w.gamma(s);
            assert!(gm >= prev && (0.0..=1.0).contains(&gm));
            prev = gm;
        }
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(matches!(Variant::parse("mart"), Err(Error::Config(_))));
    }

    #[test]
    fn two_sample_negative_allowed() {
        let u = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let a = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(&[1, 2], vec![-1.0, 0.0]).unwrap();
        assert_eq!(two_sample_values(&u, &a, &b).unwrap(), vec![-1.0]);
        let mut g = Graph::training();
        let (uv, av, bv) = (g.constant(u), g.constant(a), g.constant(b));
        let m = mart_two_sample(&mut g, uv, av, bv, None).unwrap();
        assert_eq!(g.value(m).item(), -1.0);
        let c = mart_two_sample(&mut g, uv, av, bv, Some(0.5)).unwrap();
        assert_eq!(g.value(c).item(), -0.5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let u = Tensor::zeros(&[2, 3]);
        let v = Tensor::zeros(&[2, 2]);
        assert!(matches!(two_sample_values(&u, &u, &v), Err(Error::Dimension(_))));
        assert!(matches!(mart_nonnested(&u, &u, &u, &v), Err(Error::Dimension(_))));
    }

    #[test]
    fn pretext_restrictions() {
        let mut obj = Objective {
            mode: Mode::Semi,
            variant: Variant::Base,
            pretext: Pretext::SimClr,
            weights: LossWeights::default(),
            noise_scale: 0.25,
        };
        assert!(obj.validate().is_err());
        obj.mode = Mode::Fully;
        obj.validate().unwrap();
        obj.variant = Variant::MartPredEma;
        assert!(obj.validate().is_err());
    }
}
