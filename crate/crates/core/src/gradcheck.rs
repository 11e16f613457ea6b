//! Central finite-difference checks against the tape.

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::mask::MaskBatch;
use crate::model::{sample_refinements, Extras, Head, ModelBundle, ModelSpec, Net};
use crate::objectives::{self as obj, Batch, LossWeights, Mode, Objective, Pretext, Space, Variant};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences of step `eps`, on every element of every input. `f` must be
/// deterministic (rebuild any random state inside it).
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::training();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::training();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    ensure!(g.value(out).numel() == 1, Dimension, "gradient check needs a scalar output");
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Like [`check_gradients`] but over the online parameters of `bundle`,
/// probing `per_tensor` random entries of every parameter tensor.
pub fn check_bundle_gradients<F>(
    bundle: &ModelBundle,
    eps: f64,
    per_tensor: usize,
    rng: &mut Rng,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &Net) -> Result<Var>,
{
    let eval = |b: &ModelBundle| -> Result<f64> {
        let mut g = Graph::training();
        let net = b.bind(&mut g);
        let out = f(&mut g, &net)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::training();
    let net = bundle.bind(&mut g);
    let out = f(&mut g, &net)?;
    ensure!(g.value(out).numel() == 1, Dimension, "gradient check needs a scalar output");
    g.backward(out)?;
    let grads = net.grads(&g);
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = bundle.clone();
    for (i, t) in bundle.params.tensors().iter().enumerate() {
        for _ in 0..per_tensor.min(t.numel()) {
            let j = rng.below(t.numel());
            let orig = t.data()[j];
            probe.params.tensors_mut()[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe.params.tensors_mut()[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe.params.tensors_mut()[i].data_mut()[j] = orig;
            let a = grads[i].as_ref().map_or(0.0, |t| t.data()[j]);
            let err = rel_err(a, (up - down) / (2.0 * eps));
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn weighted_sum(g: &mut Graph, v: Var, w: &Tensor) -> Result<Var> {
    let p = g.mul_const(v, w)?;
    Ok(g.sum(p))
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Finite-difference step used by [`battery`].
pub const BATTERY_EPS: f64 = 1e-5;

/// Gradient checks for every differentiable graph operation and every loss
/// term, on small random inputs.
pub fn battery(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let root = Rng::new(seed);
    let mut r = root.split("inputs");
    let eps = BATTERY_EPS;
    let mut out = Vec::new();
    let w34 = random(&[3, 4], &mut r);
    let a34 = random(&[3, 4], &mut r);
    let b34 = random(&[3, 4], &mut r);
    let a45 = random(&[4, 5], &mut r);
    let w35 = random(&[3, 5], &mut r);
    let bias5 = random(&[5], &mut r);
    let kinked = a34.map(|v| v.signum() * (v.abs() + 0.1));
    let w234 = random(&[2, 3, 4], &mut r);
    let x234 = random(&[2, 3, 4], &mut r);

    type OpFn = fn(&mut Graph, &[Var], &[Tensor]) -> Result<Var>;
    let elementwise: [(&'static str, Tensor, OpFn); 9] = [
        ("tanh", a34.clone(), |g, v, w| {
            let y = g.tanh(v[0]);
            weighted_sum(g, y, &w[0])
        }),
        ("gelu", a34.clone(), |g, v, w| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, &w[0])
        }),
        ("sigmoid", a34.clone(), |g, v, w| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, &w[0])
        }),
        ("relu", kinked, |g, v, w| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, &w[0])
        }),
        ("square", a34.clone(), |g, v, w| {
            let y = g.square(v[0]);
            weighted_sum(g, y, &w[0])
        }),
        ("scale", a34.clone(), |g, v, w| {
            let y = g.scale(v[0], -2.5);
            weighted_sum(g, y, &w[0])
        }),
        ("mul_const", a34.clone(), |g, v, w| {
            let y = g.mul_const(v[0], &w[1])?;
            weighted_sum(g, y, &w[0])
        }),
        ("mean", a34.clone(), |g, v, w| {
            let y = g.mul_const(v[0], &w[0])?;
            let y = g.square(y);
            Ok(g.mean(y))
        }),
        ("normalize_rows", a34.clone(), |g, v, w| {
            let y = g.normalize_rows(v[0])?;
            weighted_sum(g, y, &w[0])
        }),
    ];
    let consts = [w34.clone(), b34.clone()];
    for (name, x, f) in elementwise {
        out.push((name, check_gradients(&[x], eps, |g, v| f(g, v, &consts))?));
    }

    let w34c = w34.clone();
    out.push(("add", check_gradients(&[a34.clone(), b34.clone()], eps, |g, v| {
        let y = g.add(v[0], v[1])?;
        let y = g.square(y);
        weighted_sum(g, y, &w34c)
    })?));
    out.push(("add_scalar", check_gradients(&[a34.clone(), Tensor::scalar(0.7)], eps, |g, v| {
        let y = g.add(v[0], v[1])?;
        let y = g.square(y);
        weighted_sum(g, y, &w34c)
    })?));
    out.push(("sub", check_gradients(&[a34.clone(), b34.clone()], eps, |g, v| {
        let y = g.sub(v[0], v[1])?;
        let y = g.square(y);
        weighted_sum(g, y, &w34c)
    })?));
    out.push(("mul", check_gradients(&[a34.clone(), b34.clone()], eps, |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, &w34c)
    })?));
    out.push(("mul_scalar", check_gradients(&[Tensor::scalar(-1.3), b34.clone()], eps, |g, v| {
        let y = g.mul(v[0], v[1])?;
        let y = g.square(y);
        weighted_sum(g, y, &w34c)
    })?));
    out.push(("sum", check_gradients(&[a34.clone()], eps, |g, v| {
        let y = g.sum(v[0]);
        Ok(g.square(y))
    })?));
    let w35c = w35.clone();
    out.push(("matmul", check_gradients(&[a34.clone(), a45.clone()], eps, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, &w35c)
    })?));
    out.push(("add_row", check_gradients(&[w35.clone(), bias5.clone()], eps, |g, v| {
        let y = g.add_row(v[0], v[1])?;
        let y = g.square(y);
        weighted_sum(g, y, &w35c)
    })?));
    out.push(("linear", check_gradients(&[a34.clone(), a45.clone(), bias5.clone()], eps, |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        let y = g.square(y);
        weighted_sum(g, y, &w35c)
    })?));
    let w234c = w234.clone();
    out.push(("reshape", check_gradients(&[x234.clone()], eps, |g, v| {
        let y = g.reshape(v[0], &[6, 4])?;
        let y = g.square(y);
        let y = g.reshape(y, &[2, 3, 4])?;
        weighted_sum(g, y, &w234c)
    })?));
    let w43 = w34.transpose2()?;
    out.push(("transpose", check_gradients(&[a34.clone()], eps, |g, v| {
        let y = g.transpose(v[0])?;
        let y = g.square(y);
        weighted_sum(g, y, &w43)
    })?));
    let w64 = random(&[6, 4], &mut r);
    out.push(("concat", check_gradients(&[a34.clone(), b34.clone()], eps, |g, v| {
        let y = g.concat(&[v[0], v[1]])?;
        let y = g.square(y);
        weighted_sum(g, y, &w64)
    })?));
    out.push(("softmax_cross_entropy", check_gradients(&[a34.clone()], eps, |g, v| {
        g.softmax_cross_entropy(v[0], &[0, 3, 1])
    })?));
    let obs = Tensor::new(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0])?;
    let w24 = random(&[2, 4], &mut r);
    out.push(("masked_mean_pool", check_gradients(&[x234.clone()], eps, |g, v| {
        let y = g.masked_mean_pool(v[0], &obs)?;
        let y = g.square(y);
        weighted_sum(g, y, &w24)
    })?));
    let drop_seed = root.split("dropout");
    out.push(("dropout", check_gradients(&[a34.clone()], eps, |g, v| {
        let y = g.dropout(v[0], 0.3, &mut drop_seed.clone())?;
        let y = g.square(y);
        weighted_sum(g, y, &w34c)
    })?));

    out.extend(loss_battery(&root)?);
    Ok(out)
}

fn loss_battery(root: &Rng) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut r = root.split("model");
    let (b, t, d, k) = (4, 2, 3, 3);
    let mut spec = ModelSpec::new(t, d, k);
    spec.extras = Extras::ProjectionPredictor;
    let bundle = ModelBundle::init(spec, &mut r).with_shadow(&["enc.", "proj."], 0.9)?;
    let mut bundle = bundle;
    // Move the shadow away from the online weights.
    for p in bundle.params.tensors_mut() {
        for v in p.data_mut() {
            *v += 0.05 * r.normal();
        }
    }
    let x = random(&[b, t, d], &mut r);
    let y = vec![0, 2, 1, 2];
    let mask_of = |r: &mut Rng| -> Result<MaskBatch> {
        let mut m = Tensor::from_fn(&[b, t, d], |_| if r.bernoulli(0.6) { 1.0 } else { 0.0 });
        m.data_mut()[0] = 0.0;
        m.data_mut()[1] = 1.0;
        MaskBatch::new(m, 0.6)
    };
    let mask = mask_of(&mut r)?;
    let views = [mask_of(&mut r)?, mask_of(&mut r)?];
    let stream = root.split("stochastic");
    let per_tensor = 6;
    let eps = BATTERY_EPS;
    let mut probe_rng = root.split("probe");
    let mut out = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn(&mut Graph, &Net) -> Result<Var>| -> Result<()> {
        let rep = check_bundle_gradients(&bundle, eps, per_tensor, &mut probe_rng, f)?;
        out.push((name, rep));
        Ok(())
    };
    run("loss_pred_cls", &|g, net| obj::loss_pred_cls(g, net, &x, &y, &mut stream.clone()))?;
    run("loss_pred_rec", &|g, net| obj::loss_pred_rec(g, net, &x, &mut stream.clone()))?;
    run("loss_imp", &|g, net| obj::loss_imp(g, net, &x, &mask, &mut stream.clone()))?;
    run("refinement_merge", &|g, net| {
        let pair = sample_refinements(g, net, None, &x, &mask, 0.25, &mut stream.clone())?;
        let s = g.square(pair.x_hat_a);
        let s2 = g.mul(s, pair.x_hat_b)?;
        Ok(g.sum(s2))
    })?;
    for (name, space, head) in [
        ("mart_pred_cls", Space::Pred, Head::Cls),
        ("mart_pred_rec", Space::Pred, Head::Rec),
        ("mart_latent", Space::Latent, Head::Cls),
    ] {
        run(name, &|g, net| {
            Ok(obj::mart_loss(g, net, None, &x, &mask, space, head, 0.25, None, &mut stream.clone())?.0)
        })?;
    }
    // The EMA target sees completions through a stop-gradient, so the
    // completions are fixed up front and only the coarse side is perturbed.
    let hats = {
        let mut g = Graph::training();
        let net = bundle.bind_frozen(&mut g);
        let pair = sample_refinements(&mut g, &net, None, &x, &mask, 0.25, &mut stream.clone())?;
        [g.value(pair.x_hat_a).clone(), g.value(pair.x_hat_b).clone()]
    };
    let target_bundle = bundle.clone();
    run("mart_latent_ema", &|g, net| {
        let mut r = stream.clone();
        let target = target_bundle.bind_target(g)?;
        let coarse = net.encode_masked(g, &x, &mask, &mut r)?;
        let full = Tensor::ones(&[b, t]);
        let mut refined = Vec::new();
        for h in &hats {
            let hv = g.constant(h.clone());
            refined.push(target.encode(g, hv, &full, &mut r)?.pooled);
        }
        obj::mart_two_sample(g, coarse.pooled, refined[0], refined[1], None)
    })?;
    run("simclr", &|g, net| obj::loss_simclr(g, net, &x, [&views[0], &views[1]], &mut stream.clone()))?;
    run("byol", &|g, net| {
        let target = target_bundle.bind_target(g)?;
        obj::loss_byol(g, net, &target, &x, [&views[0], &views[1]], &mut stream.clone())
    })?;
    let objective = Objective {
        mode: Mode::Semi,
        variant: Variant::MartLatent,
        pretext: Pretext::Standard,
        weights: LossWeights {
            lambda_imp: 0.7,
            lambda_mart: 1.3,
            ..LossWeights::default()
        },
        noise_scale: 0.25,
    };
    let batch = Batch {
        x: x.clone(),
        y: y.clone(),
        mask: mask.clone(),
        views: None,
    };
    run("total_loss", &|g, net| {
        Ok(obj::total_loss(g, net, None, &objective, &batch, 300, &mut stream.clone())?.0)
    })?;
    Ok(out)
}
