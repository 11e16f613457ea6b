use mcssl::data::*;
use mcssl::mask::MaskBatch;
use mcssl::{Exec, Rng, Tensor};
use nalgebra::{DMatrix, DVector};

fn frame_major(x: &[f64], d: usize, perm: &[usize]) -> Vec<f64> {
    perm.iter()
        .flat_map(|&t| x[t * d..(t + 1) * d].iter().copied())
        .collect()
}

#[test]
fn shapes_and_determinism() {
    for (ds, t) in [
        (gen_tsim_rc(40, 3).unwrap(), 16),
        (gen_tsim(40, 3).unwrap(), 16),
        (gen_ssim(40, 3).unwrap(), 1),
    ] {
        assert_eq!(ds.x.shape(), &[40, t, if ds.kind == DatasetKind::Tsim { 32 } else { 16 }]);
        assert_eq!(ds.y.len(), 40);
        assert!(ds.y.iter().all(|&y| y < 5));
        assert!(ds.x.is_finite());
    }
    let a = gen_tsim_rc(40, 3).unwrap();
    let b = gen_tsim_rc(40, 3).unwrap();
    assert_eq!(a.x.data(), b.x.data());
    assert_eq!(a.y, b.y);
    let c = gen_tsim_rc(40, 4).unwrap();
    assert_ne!(a.x.data(), c.x.data());
}

#[test]
fn shorter_dataset_is_a_prefix() {
    let long = gen_ssim(60, 8).unwrap();
    let short = gen_ssim(25, 8).unwrap();
    assert_eq!(short.x.data(), &long.x.data()[..short.x.numel()]);
    assert_eq!(short.y, long.y[..25]);
}

#[test]
fn labels_are_roughly_balanced() {
    for ds in [gen_tsim_rc(3000, 1).unwrap(), gen_tsim(3000, 1).unwrap(), gen_ssim(3000, 1).unwrap()] {
        let counts = ds.class_counts();
        assert!(counts.iter().all(|&c| c > 300), "{:?} {counts:?}", ds.kind);
    }
}

#[test]
fn tsim_label_ignores_frames_outside_the_label_set() {
    let ds = gen_tsim(1000, 5).unwrap();
    let gen = ds.generator.clone().unwrap();
    let mut r = Rng::new(0);
    let mut free: Vec<usize> = (0..16).filter(|t| !TSIM_LABEL_FRAMES.contains(t)).collect();
    for i in 0..ds.len() {
        let mut perm: Vec<usize> = (0..16).collect();
        r.shuffle(&mut free);
        let mut k = 0;
        for p in perm.iter_mut() {
            if !TSIM_LABEL_FRAMES.contains(p) {
                *p = free[k];
                k += 1;
            }
        }
        let x = frame_major(ds.sample(i), ds.features(), &perm);
        assert_eq!(gen.label(&x), ds.y[i]);
    }
}

#[test]
fn tsim_label_depends_only_on_relevant_features() {
    let ds = gen_tsim(1000, 6).unwrap();
    let Generator::Tsim(g) = ds.generator.as_deref().unwrap() else { panic!() };
    let mut r = Rng::new(1);
    for i in 0..ds.len() {
        let d = ds.features();
        let mut x = ds.sample(i).to_vec();
        for t in 0..16 {
            for j in (0..d).filter(|j| !g.s.contains(j)) {
                x[t * d + j] = 10.0 * r.normal();
            }
        }
        assert_eq!(g.label(&x), ds.y[i]);
    }
}

#[test]
fn tsim_rc_label_depends_only_on_the_final_window() {
    let ds = gen_tsim_rc(1000, 2).unwrap();
    let gen = ds.generator.clone().unwrap();
    let mut r = Rng::new(2);
    for i in 0..ds.len() {
        let mut x = ds.sample(i).to_vec();
        for v in &mut x[..11 * 16] {
            *v = 5.0 * r.normal();
        }
        assert_eq!(gen.label(&x), ds.y[i]);
    }
}

#[test]
fn ssim_label_uses_only_predictive_coordinates() {
    let ds = gen_ssim(1000, 4).unwrap();
    let Generator::Ssim(g) = ds.generator.as_deref().unwrap() else { panic!() };
    let mut r = Rng::new(3);
    for i in 0..ds.len() {
        let mut x = ds.sample(i).to_vec();
        for j in (0..16).filter(|j| !g.s.contains(j)) {
            x[j] = 10.0 * r.normal();
        }
        assert_eq!(g.label(&x), ds.y[i]);
    }
}

#[test]
fn proxies_covary_positively_with_their_predictive_partner() {
    for seed in 0..5 {
        let ds = gen_ssim(10_000, seed).unwrap();
        let Generator::Ssim(g) = ds.generator.as_deref().unwrap() else { panic!() };
        for (j, &p) in g.proxies.iter().enumerate() {
            let s = g.s[j % g.s.len()];
            let n = ds.len() as f64;
            let (ms, mp) = (0..ds.len()).fold((0.0, 0.0), |(a, b), i| (a + ds.sample(i)[s] / n, b + ds.sample(i)[p] / n));
            let cov: f64 = (0..ds.len()).map(|i| (ds.sample(i)[s] - ms) * (ds.sample(i)[p] - mp)).sum::<f64>() / (n - 1.0);
            assert!(cov > 0.0, "seed {seed} proxy {p} partner {s}: {cov}");
        }
    }
}

#[test]
fn linear_tsim_rc_is_stationary_at_the_lyapunov_covariance() {
    let cfg = TsimRcConfig {
        alpha: 0.0,
        ..TsimRcConfig::default()
    };
    let g = TsimRc::new(cfg, 11).unwrap();
    let d = 16;
    let a = DMatrix::from_row_slice(d, d, &g.a);
    let s0 = DMatrix::from_row_slice(d, d, &g.sigma0);
    let resid = &s0 - &a * &s0 * a.transpose() - DMatrix::identity(d, d) * 0.04;
    assert!(resid.abs().max() < 1e-12);

    let n = 20_000;
    let ds = Generator::TsimRc(g).generate(n).unwrap();
    for t in [0, 7, 15] {
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let f = DVector::from_column_slice(&ds.sample(i)[t * d..(t + 1) * d]);
            cov += &f * f.transpose();
        }
        cov /= n as f64;
        for j in 0..d {
            let v = s0[(j, j)];
            // sd of a sample second moment of a Gaussian is v*sqrt(2/n)
            assert!((cov[(j, j)] - v).abs() < 5.0 * v * (2.0 / n as f64).sqrt(), "t {t} j {j}: {} vs {v}", cov[(j, j)]);
        }
    }
}

#[test]
fn fully_observed_rows_are_returned_unchanged() {
    let ds = gen_tsim(6, 2).unwrap();
    let mask = MaskBatch::ones(6, 16, 32);
    let out = oracle_conditional_sample(&ds, &ds.x, &mask, 4, &Rng::new(0), Exec::Sequential).unwrap();
    for (i, o) in out.iter().enumerate() {
        assert!(!o.flagged);
        for draw in o.draws.rows() {
            assert_eq!(draw, ds.sample(i));
        }
    }
}

#[test]
fn observed_cells_are_kept_exactly() {
    for ds in [gen_tsim_rc(4, 1).unwrap(), gen_tsim(4, 1).unwrap(), gen_ssim(4, 1).unwrap()] {
        let (t, d) = (ds.timesteps(), ds.features());
        let mut r = Rng::new(5);
        let m = Tensor::from_fn(&[4, t, d], |_| if r.bernoulli(0.1) { 1.0 } else { 0.0 });
        let mask = MaskBatch::new(m, 0.1).unwrap();
        let xc = ds.x.mul(&mask.m).unwrap();
        let out = oracle_conditional_sample(&ds, &xc, &mask, 8, &Rng::new(1), Exec::Sequential).unwrap();
        for (i, o) in out.iter().enumerate() {
            for draw in o.draws.rows() {
                for (c, &v) in mask.row(i).iter().enumerate() {
                    if v == 1.0 {
                        assert_eq!(draw[c], ds.sample(i)[c]);
                    }
                }
            }
        }
    }
}

#[test]
fn unconditional_ssim_draws_are_centered() {
    let ds = gen_ssim(1, 9).unwrap();
    let n = 20_000;
    let out = oracle_conditional_sample(&ds, &Tensor::zeros(&[1, 1, 16]), &MaskBatch::zeros(1, 1, 16), n, &Rng::new(3), Exec::Sequential).unwrap();
    let draws = &out[0].draws;
    for j in 0..16 {
        let col: Vec<f64> = draws.rows().map(|r| r[j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 * (var / n as f64).sqrt(), "coord {j}: {mean}");
    }
}

/// Mean and variance of `x_m | x_o` for a zero-mean Gaussian with covariance `s`.
fn gaussian_conditional(s: &DMatrix<f64>, obs: &[usize], x_obs: &[f64], m: usize) -> (f64, f64) {
    let soo = DMatrix::from_fn(obs.len(), obs.len(), |a, b| s[(obs[a], obs[b])]);
    let smo = DVector::from_fn(obs.len(), |a, _| s[(m, obs[a])]);
    let inv = soo.cholesky().unwrap().inverse();
    let k = inv * &smo;
    (k.dot(&DVector::from_column_slice(x_obs)), s[(m, m)] - k.dot(&smo))
}

fn check_against_gaussian(ds: &Dataset, s: &DMatrix<f64>, obs: &[usize], sample: usize) {
    let len = s.nrows();
    let (t, d) = (ds.timesteps(), ds.features());
    let mut m = vec![0.0; len];
    obs.iter().for_each(|&c| m[c] = 1.0);
    let mask = MaskBatch::new(Tensor::new(&[1, t, d], m.clone()).unwrap(), 0.0).unwrap();
    let x = Tensor::new(&[1, t, d], ds.sample(sample).to_vec()).unwrap();
    let xc = x.mul(&mask.m).unwrap();
    let n = 4000;
    let o = oracle_conditional_sample(ds, &xc, &mask, n, &Rng::new(17), Exec::Sequential).unwrap().remove(0);
    assert!(!o.flagged, "ess {}", o.ess);
    let x_obs: Vec<f64> = obs.iter().map(|&c| ds.sample(sample)[c]).collect();
    for c in (0..len).filter(|c| m[*c] == 0.0).step_by(7) {
        let (mu, var) = gaussian_conditional(s, obs, &x_obs, c);
        let est = o.draws.rows().map(|r| r[c]).sum::<f64>() / n as f64;
        let se = (var / o.ess.min(n as f64)).sqrt();
        assert!((est - mu).abs() < 5.0 * se + 1e-3, "cell {c}: {est} vs {mu} (se {se})");
    }
}

#[test]
fn ssim_oracle_matches_gaussian_conditioning() {
    let cfg = SsimConfig {
        alpha: 0.0,
        ..SsimConfig::default()
    };
    let g = Ssim::new(cfg, 12).unwrap();
    let d = 16;
    let r = g.latent_dim();
    let load = DMatrix::from_fn(d, r, |j, k| {
        let c = g.coords[j];
        if k == 0 {
            c.g_load
        } else if c.factor == Some(k - 1) {
            c.f_load
        } else {
            0.0
        }
    });
    let noise = DMatrix::from_fn(d, d, |a, b| if a == b { g.coords[a].sd.powi(2) + 0.04 } else { 0.0 });
    let s = &load * load.transpose() + noise;
    let obs: Vec<usize> = g.s.iter().take(1).chain(g.proxies.iter().skip(4)).copied().collect();
    let ds = Generator::Ssim(g).generate(5).unwrap();
    for i in 0..5 {
        check_against_gaussian(&ds, &s, &obs, i);
    }
}

#[test]
fn tsim_rc_oracle_matches_gaussian_conditioning() {
    let cfg = TsimRcConfig {
        alpha: 0.0,
        ..TsimRcConfig::default()
    };
    let g = TsimRc::new(cfg, 13).unwrap();
    let (t, d) = (16, 16);
    let a = DMatrix::from_row_slice(d, d, &g.a);
    let s0 = DMatrix::from_row_slice(d, d, &g.sigma0);
    // Cov(X_u, X_v) = A^(v-u) Σ0 for v >= u.
    let mut s = DMatrix::zeros(t * d, t * d);
    let mut pow = vec![DMatrix::identity(d, d)];
    for k in 1..t {
        pow.push(&a * &pow[k - 1]);
    }
    for u in 0..t {
        for v in u..t {
            let block = &pow[v - u] * &s0;
            s.view_mut((v * d, u * d), (d, d)).copy_from(&block);
            s.view_mut((u * d, v * d), (d, d)).copy_from(&block.transpose());
        }
    }
    let obs = [40, 200];
    let ds = Generator::TsimRc(g).generate(3).unwrap();
    for i in 0..3 {
        check_against_gaussian(&ds, &s, &obs, i);
    }
}

#[test]
fn tsim_rc_observed_prefix_is_sampled_exactly() {
    let cfg = TsimRcConfig {
        alpha: 0.0,
        ..TsimRcConfig::default()
    };
    let g = TsimRc::new(cfg, 14).unwrap();
    let a = DMatrix::from_row_slice(16, 16, &g.a);
    let ds = Generator::TsimRc(g).generate(1).unwrap();
    let p = 9;
    let m = Tensor::from_fn(&[1, 16, 16], |c| if c < p * 16 { 1.0 } else { 0.0 });
    let mask = MaskBatch::new(m, 0.0).unwrap();
    let xc = ds.x.mul(&mask.m).unwrap();
    let n = 20_000;
    let o = oracle_conditional_sample(&ds, &xc, &mask, n, &Rng::new(4), Exec::Sequential).unwrap().remove(0);
    assert_eq!(o.ess, ORACLE_POOL as f64);
    let prev = DVector::from_column_slice(&ds.sample(0)[(p - 1) * 16..p * 16]);
    let expect = &a * prev;
    for j in 0..16 {
        let est = o.draws.rows().map(|r| r[p * 16 + j]).sum::<f64>() / n as f64;
        assert!((est - expect[j]).abs() < 5.0 * 0.2 / (n as f64).sqrt(), "{j}: {est} vs {}", expect[j]);
    }
}

#[test]
fn oracle_is_independent_of_execution_mode() {
    let ds = gen_tsim(8, 3).unwrap();
    let mut r = Rng::new(6);
    let m = Tensor::from_fn(&[8, 16, 32], |_| if r.bernoulli(0.3) { 1.0 } else { 0.0 });
    let mask = MaskBatch::new(m, 0.3).unwrap();
    let xc = ds.x.mul(&mask.m).unwrap();
    let a = oracle_conditional_sample(&ds, &xc, &mask, 3, &Rng::new(2), Exec::Sequential).unwrap();
    let b = oracle_conditional_sample(&ds, &xc, &mask, 3, &Rng::new(2), Exec::Parallel).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.draws.data(), y.draws.data());
    }
}

#[test]
fn oracle_rejects_external_data() {
    let mut ds = gen_ssim(2, 0).unwrap();
    ds.generator = None;
    let mask = MaskBatch::zeros(2, 1, 16);
    assert!(oracle_conditional_sample(&ds, &ds.x, &mask, 1, &Rng::new(0), Exec::Sequential).is_err());
}

#[test]
fn splits_are_disjoint_and_cover_requested_sizes() {
    let ds = gen_ssim(7000, 1).unwrap();
    let spec = SplitSpec::for_kind(DatasetKind::Ssim);
    let [a, b, c] = split_indices(ds.len(), &spec, 5).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (3000, 500, 3000));
    let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), 6500);
    let s = split(&ds, &spec, 5).unwrap();
    assert_eq!(s.train.len(), 3000);
    assert_eq!(s.priorfit.as_ref().unwrap().len(), 500);
    assert_eq!(s.test.x.row(0), ds.sample(c[0]));
    assert_eq!(split_indices(ds.len(), &spec, 5).unwrap()[0], a);
    assert!(split_indices(100, &spec, 5).is_err());
    let fr = SplitSpec::Fractions { train: 0.5, priorfit: 0.2, test: 0.3 };
    let [a, b, c] = split_indices(10, &fr, 0).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (5, 2, 3));
}
