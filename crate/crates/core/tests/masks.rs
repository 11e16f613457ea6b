use mcssl::data::{gen_ssim, gen_tsim, gen_tsim_rc, Dataset, DatasetKind, Generator, TSIM_LABEL_FRAMES};
use mcssl::mask::*;
use mcssl::{Rng, Tensor};

const GRID: [f64; 5] = [0.05, 0.2, 0.4, 0.6, 0.8];

fn processes() -> Vec<(&'static str, MaskProcess, usize, usize)> {
    let rc = gen_tsim_rc(200, 1).unwrap();
    let ts = gen_tsim(200, 1).unwrap();
    let ss = gen_ssim(200, 1).unwrap();
    vec![
        ("tsim_rc", MaskProcess::for_dataset(&rc, 1).unwrap(), 16, 16),
        ("tsim", MaskProcess::for_dataset(&ts, 1).unwrap(), 16, 32),
        ("ssim", MaskProcess::for_dataset(&ss, 1).unwrap(), 1, 16),
    ]
}

#[test]
fn every_process_hits_its_target_completeness() {
    let mut r = Rng::new(0);
    for (name, p, t, d) in processes() {
        for (c, got) in realized_completeness(&p, t, d, &GRID, 100_000, &mut r).unwrap() {
            assert!((got - c).abs() < 0.01, "{name} at {c}: {got}");
        }
    }
}

#[test]
fn structureless_process_concentrates_like_bernoulli() {
    let n = 16;
    let params = LogisticMaskParams {
        layout: Layout::Features,
        timesteps: 1,
        features: n,
        b: vec![0.0; n],
        loadings: vec![0.0; 3 * n],
        q: vec![0.0; n],
        beta: 0.0,
        tau: 0.0,
        rank: 3,
        calibration_seed: 3,
    };
    let mut r = Rng::new(1);
    for c in GRID {
        let b = 10_000;
        let m = logistic_mask(&params, b, c, &mut r).unwrap();
        let cells = (b * n) as f64;
        let tol = 3.0 * (c * (1.0 - c) / cells).sqrt() + 1e-3;
        assert!((m.realized_c() - c).abs() < tol, "{c}: {}", m.realized_c());
    }
}

fn rank_corr(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn important_coordinates_are_missing_more_often() {
    for (name, p, t, d) in processes().into_iter().skip(1) {
        let MaskProcess::Logistic(params) = &p else { panic!() };
        let mut r = Rng::new(2);
        for c in GRID {
            let m = logistic_mask(params, 10_000, c, &mut r).unwrap();
            let freq = params.layout.frequencies(&m);
            assert!(rank_corr(&params.q, &freq) < 0.0, "{name} at {c}");
            let hi = (0..freq.len()).filter(|&j| params.q[j] == 1.0).map(|j| freq[j]).fold(0.0, f64::max);
            let lo = (0..freq.len()).filter(|&j| params.q[j] == 0.0).map(|j| freq[j]).fold(1.0, f64::min);
            assert!(hi < lo, "{name} at {c}: {hi} vs {lo}");
            assert_eq!(m.m.shape(), &[10_000, t, d]);
        }
    }
}

#[test]
fn identical_streams_give_identical_masks() {
    let (_, p, t, d) = processes().remove(2);
    let a = p.sample(50, t, d, 0.4, &mut Rng::new(9)).unwrap();
    let b = p.sample(50, t, d, 0.4, &mut Rng::new(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn synthetic_importance_follows_the_construction() {
    let ts = gen_tsim(50, 2).unwrap();
    let q = estimate_importance(&ts);
    for (s, v) in q.iter().enumerate() {
        assert_eq!(*v, if TSIM_LABEL_FRAMES.contains(&s) { 1.0 } else { 0.0 });
    }
    let ss = gen_ssim(50, 2).unwrap();
    let Some(Generator::Ssim(g)) = ss.generator.as_deref() else { panic!() };
    let q = estimate_importance(&ss);
    for (j, v) in q.iter().enumerate() {
        assert_eq!(*v, if g.s.contains(&j) { 1.0 } else { 0.0 });
    }
}

#[test]
fn external_importance_is_normalized_correlation() {
    let n = 400;
    let mut r = Rng::new(4);
    let y: Vec<usize> = (0..n).map(|_| r.below(2) as usize).collect();
    // feature 0 tracks the label, feature 1 is noise, feature 2 is constant
    let x = Tensor::new(
        &[n, 1, 3],
        y.iter()
            .flat_map(|&c| [c as f64 + 0.3 * r.normal(), r.normal(), 7.0])
            .collect(),
    )
    .unwrap();
    let ds = Dataset::new(x, y, 2, DatasetKind::External).unwrap();
    let q = estimate_importance(&ds);
    assert_eq!(q[0], 1.0);
    assert!(q[1] < 0.3);
    assert_eq!(q[2], 0.0);
}

#[test]
fn prior_round_trips_calibration_frequencies() {
    let (_, p, t, d) = processes().remove(1);
    let mut r = Rng::new(5);
    let calib = p.sample(2000, t, d, 0.5, &mut r).unwrap();
    let prior = fit_mask_prior(&[calib.clone()], Layout::Timesteps).unwrap();
    let want = Layout::Timesteps.frequencies(&calib);
    let shift = prior.shift_for(0.5).unwrap();
    let resampled = prior.sample(10_000, 0.5, &mut r).unwrap();
    let got = Layout::Timesteps.frequencies(&resampled);
    assert!(shift.abs() < 0.05, "{shift}");
    for (a, b) in want.iter().zip(&got) {
        assert!((a - b).abs() < 0.02, "{a} vs {b}");
    }
}

#[test]
fn prior_hits_any_target_completeness() {
    let (_, p, t, d) = processes().remove(2);
    let mut r = Rng::new(6);
    let calib = p.sample(3000, t, d, 0.5, &mut r).unwrap();
    let prior = fit_mask_prior(&[calib], Layout::Features).unwrap();
    for c in GRID {
        let m = prior.sample(10_000, c, &mut r).unwrap();
        assert!((m.realized_c() - c).abs() < 0.01);
    }
    assert!(fit_mask_prior(&[], Layout::Features).is_err());
}

#[test]
fn training_completeness_is_uniform() {
    let (_, p, t, d) = processes().remove(2);
    let MaskProcess::Logistic(params) = p else { panic!() };
    let calib = logistic_mask(&params, 500, 0.5, &mut Rng::new(7)).unwrap();
    let source = TrainMasks::Prior(fit_mask_prior(&[calib], Layout::Features).unwrap());
    let mut r = Rng::new(8);
    let mut cs: Vec<f64> = (0..1000)
        .map(|_| sample_training_mask(&source, 2, t, d, &mut r).unwrap().target_c)
        .collect();
    cs.sort_by(f64::total_cmp);
    let n = cs.len() as f64;
    let ks = cs
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let f = (c - TRAIN_C_MIN) / (1.0 - TRAIN_C_MIN);
            f64::max((i as f64 + 1.0) / n - f, f - i as f64 / n)
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.05, "{ks}");
}

#[test]
fn right_censored_training_masks_are_prefixes() {
    let mut r = Rng::new(9);
    for _ in 0..200 {
        let m = sample_training_mask(&TrainMasks::RightCensor, 4, 16, 5, &mut r).unwrap();
        let obs = m.timestep_observed();
        for row in obs.rows() {
            assert!(row.windows(2).all(|w| w[0] >= w[1]));
        }
        for (k, v) in m.m.data().iter().enumerate() {
            assert_eq!(*v, obs.data()[k / 5]);
        }
    }
}

#[test]
fn all_observed_prior_at_full_completeness() {
    let prior = fit_mask_prior(&[MaskBatch::ones(10, 1, 4)], Layout::Features).unwrap();
    let source = TrainMasks::Prior(prior);
    let m = sample_training_mask_at(&source, 8, 1, 4, 1.0, &mut Rng::new(0)).unwrap();
    assert_eq!(m, MaskBatch::ones(8, 1, 4));
}

#[test]
fn every_mask_is_binary() {
    let mut r = Rng::new(10);
    for (_, p, t, d) in processes() {
        for c in [0.0, 0.3, 1.0] {
            let m = p.sample(20, t, d, c, &mut r).unwrap();
            assert!(m.m.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(m.realized_c().is_finite());
        }
    }
}
