//! Executable checks of the estimator identity, the excess-risk bound and
//! the linear-Gaussian minimizer.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::par::Exec;
use crate::rng::Rng;

const DIAGONAL_LOADING: f64 = 1e-3;
pub const WELL_CONDITIONED: f64 = 1e4;

// ---------------------------------------------------------------------------
// Linear-Gaussian model

/// Jointly Gaussian `(X1, X2)` with `Y = w1ᵀX1 + w2ᵀX2 + ε`.
#[derive(Clone, Debug)]
pub struct LGInstance {
    pub s11: DMatrix<f64>,
    pub s12: DMatrix<f64>,
    pub s21: DMatrix<f64>,
    pub s22: DMatrix<f64>,
    pub w1: DVector<f64>,
    pub w2: DVector<f64>,
    pub sigma: f64,
    /// `Σ21 Σ11⁻¹ Σ12`
    pub c: DMatrix<f64>,
    /// `Σ22 − C`
    pub s2_1: DMatrix<f64>,
}

impl LGInstance {
    pub fn new(sigma_full: DMatrix<f64>, d1: usize, w: DVector<f64>, sigma: f64) -> Result<Self> {
        let d = sigma_full.nrows();
        ensure!(
            sigma_full.is_square() && w.len() == d && d1 > 0 && d1 < d,
            Dimension,
            "covariance {}x{}, coefficients {}, coarse block {d1}",
            sigma_full.nrows(),
            sigma_full.ncols(),
            w.len()
        );
        let asym = (&sigma_full - sigma_full.transpose()).amax();
        ensure!(asym <= 1e-12 * sigma_full.amax(), Domain, "covariance is not symmetric");
        if sigma_full.clone().cholesky().is_none() {
            return Err(Error::Domain("covariance is not positive definite".into()));
        }
        let d2 = d - d1;
        let s11 = sigma_full.view((0, 0), (d1, d1)).into_owned();
        let s12 = sigma_full.view((0, d1), (d1, d2)).into_owned();
        let s21 = sigma_full.view((d1, 0), (d2, d1)).into_owned();
        let s22 = sigma_full.view((d1, d1), (d2, d2)).into_owned();
        let chol = s11.clone().cholesky().expect("leading block of an SPD matrix");
        let c = &s21 * chol.solve(&s12);
        let c = (&c + c.transpose()) * 0.5;
        let s2_1 = &s22 - &c;
        Ok(LGInstance {
            w1: w.rows(0, d1).into_owned(),
            w2: w.rows(d1, d2).into_owned(),
            s11,
            s12,
            s21,
            s22,
            sigma,
            c,
            s2_1,
        })
    }

    /// Random instance with a Gram-matrix covariance plus diagonal loading.
    pub fn random(d1: usize, d2: usize, rng: &mut Rng) -> Result<Self> {
        let d = d1 + d2;
        let rows = d + 2;
        let a = DMatrix::from_fn(rows, d, |_, _| rng.normal());
        let sigma_full = a.transpose() * &a / rows as f64 + DMatrix::identity(d, d) * DIAGONAL_LOADING;
        let sigma_full = (&sigma_full + sigma_full.transpose()) * 0.5;
        let w = DVector::from_fn(d, |_, _| rng.normal());
        Self::new(sigma_full, d1, w, 0.5)
    }

    /// Resamples [`LGInstance::random`] until both the covariance and `C`
    /// have condition number below `max_condition`.
    pub fn random_well_conditioned(d1: usize, d2: usize, max_condition: f64, rng: &mut Rng) -> Result<Self> {
        for _ in 0..1000 {
            let inst = Self::random(d1, d2, rng)?;
            if inst.condition() < max_condition && condition_number(&inst.c) < max_condition {
                return Ok(inst);
            }
        }
        Err(Error::Numerical(format!(
            "no instance with condition below {max_condition:e} in 1000 draws"
        )))
    }

    pub fn d1(&self) -> usize {
        self.w1.len()
    }

    pub fn d2(&self) -> usize {
        self.w2.len()
    }

    pub fn sigma_full(&self) -> DMatrix<f64> {
        let (d1, d2) = (self.d1(), self.d2());
        let mut s = DMatrix::zeros(d1 + d2, d1 + d2);
        s.view_mut((0, 0), (d1, d1)).copy_from(&self.s11);
        s.view_mut((0, d1), (d1, d2)).copy_from(&self.s12);
        s.view_mut((d1, 0), (d2, d1)).copy_from(&self.s21);
        s.view_mut((d1, d1), (d2, d2)).copy_from(&self.s22);
        s
    }

    pub fn w(&self) -> DVector<f64> {
        let mut w = DVector::zeros(self.d1() + self.d2());
        w.rows_mut(0, self.d1()).copy_from(&self.w1);
        w.rows_mut(self.d1(), self.d2()).copy_from(&self.w2);
        w
    }

    /// Ratio of extreme eigenvalues of the full covariance.
    pub fn condition(&self) -> f64 {
        condition_number(&self.sigma_full())
    }

    /// Coefficients of the best predictor from `X1` alone.
    pub fn coarse_ols(&self) -> DVector<f64> {
        let chol = self.s11.clone().cholesky().expect("validated at construction");
        &self.w1 + chol.solve(&(&self.s12 * &self.w2))
    }

    /// Prediction risk plus `λ` times the martingale penalty.
    pub fn objective(&self, lambda: f64, beta1: &DVector<f64>, beta2: &DVector<f64>) -> f64 {
        let mut beta = DVector::zeros(self.d1() + self.d2());
        beta.rows_mut(0, self.d1()).copy_from(beta1);
        beta.rows_mut(self.d1(), self.d2()).copy_from(beta2);
        let diff = beta - self.w();
        let risk = (diff.transpose() * self.sigma_full() * &diff)[(0, 0)] + self.sigma * self.sigma;
        risk + lambda * (beta2.transpose() * &self.c * beta2)[(0, 0)]
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e.abs()), hi.max(e.abs())));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    ensure!(lambda.is_finite() && lambda >= 0.0, Domain, "lambda must be finite and >= 0, got {lambda}");
    Ok(())
}

pub fn lg_closed_form(inst: &LGInstance, lambda: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    check_lambda(lambda)?;
    let system = &inst.s2_1 + &inst.c * lambda;
    let lu = system.clone().lu();
    let beta2 = lu.solve(&(&inst.s2_1 * &inst.w2)).ok_or_else(|| {
        Error::Numerical(format!(
            "singular refined system, condition estimate {:.3e}",
            condition_number(&system)
        ))
    })?;
    let chol = inst.s11.clone().cholesky().expect("validated at construction");
    let beta1 = &inst.w1 + chol.solve(&(&inst.s12 * (&inst.w2 - &beta2)));
    Ok((beta1, beta2))
}

/// Solves the joint stationarity system `(Σ + λ·diag(0, C)) β = Σ w` directly.
pub fn lg_numeric_min(inst: &LGInstance, lambda: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    check_lambda(lambda)?;
    let (d1, d2) = (inst.d1(), inst.d2());
    let sigma = inst.sigma_full();
    let mut hessian = sigma.clone();
    let mut block = hessian.view_mut((d1, d1), (d2, d2));
    block += &inst.c * lambda;
    let rhs = &sigma * inst.w();
    let beta = hessian.clone().lu().solve(&rhs).ok_or_else(|| {
        Error::Numerical(format!(
            "singular normal equations, condition estimate {:.3e}",
            condition_number(&hessian)
        ))
    })?;
    Ok((beta.rows(0, d1).into_owned(), beta.rows(d1, d2).into_owned()))
}

/// `‖a − b‖ / max(‖b‖, 1)` over the stacked coefficient vectors.
pub fn relative_gap(a: &(DVector<f64>, DVector<f64>), b: &(DVector<f64>, DVector<f64>)) -> f64 {
    let num = ((&a.0 - &b.0).norm_squared() + (&a.1 - &b.1).norm_squared()).sqrt();
    let den = (b.0.norm_squared() + b.1.norm_squared()).sqrt().max(1.0);
    num / den
}

#[derive(Clone, Debug, Serialize)]
pub struct LinearGaussianRow {
    pub instance: u64,
    pub lambda: f64,
    pub condition: f64,
    pub relative_gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LinearGaussianReport {
    pub rows: Vec<LinearGaussianRow>,
    pub max_relative_gap: f64,
    pub ols_gap: f64,
    pub limit_beta2_norm: f64,
    pub limit_beta1_gap: f64,
}

/// Compares both solution paths on `instances` random problems, and probes
/// the `λ = 0` and large-`λ` limits.
pub fn verify_linear_gaussian(
    instances: usize,
    lambdas: &[f64],
    large_lambda: f64,
    rng: &Rng,
    exec: Exec,
) -> Result<LinearGaussianReport> {
    verify_linear_gaussian_with(lg_closed_form, instances, lambdas, large_lambda, rng, exec)
}

/// [`verify_linear_gaussian`] against an arbitrary closed-form `solver`.
pub fn verify_linear_gaussian_with<F>(
    solver: F,
    instances: usize,
    lambdas: &[f64],
    large_lambda: f64,
    rng: &Rng,
    exec: Exec,
) -> Result<LinearGaussianReport>
where
    F: Fn(&LGInstance, f64) -> Result<(DVector<f64>, DVector<f64>)> + Sync + Send,
{
    let per_instance = exec.map_range(instances, |i| -> Result<_> {
        let mut r = rng.split_index(i as u64);
        let d1 = 2 + r.below(4);
        let d2 = 1 + r.below(d1 - 1);
        let inst = LGInstance::random_well_conditioned(d1, d2, WELL_CONDITIONED, &mut r)?;
        let condition = inst.condition();
        let mut rows = Vec::new();
        for &lambda in lambdas {
            let closed = solver(&inst, lambda)?;
            let numeric = lg_numeric_min(&inst, lambda)?;
            rows.push(LinearGaussianRow {
                instance: i as u64,
                lambda,
                condition,
                relative_gap: relative_gap(&closed, &numeric),
            });
        }
        let at_zero = solver(&inst, 0.0)?;
        let ols_gap = relative_gap(&at_zero, &(inst.w1.clone(), inst.w2.clone()));
        let (b1, b2) = solver(&inst, large_lambda)?;
        let limit_beta1_gap = (&b1 - inst.coarse_ols()).amax();
        Ok((rows, ols_gap, b2.amax(), limit_beta1_gap))
    });
    let mut report = LinearGaussianReport {
        rows: Vec::new(),
        max_relative_gap: 0.0,
        ols_gap: 0.0,
        limit_beta2_norm: 0.0,
        limit_beta1_gap: 0.0,
    };
    for item in per_instance {
        let (rows, ols, b2, b1) = item?;
        for row in &rows {
            report.max_relative_gap = report.max_relative_gap.max(row.relative_gap);
        }
        report.rows.extend(rows);
        report.ols_gap = report.ols_gap.max(ols);
        report.limit_beta2_norm = report.limit_beta2_norm.max(b2);
        report.limit_beta1_gap = report.limit_beta1_gap.max(b1);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Two-sample estimator

/// `v = mean + scale · z` with i.i.d. unit-variance, mean-zero, skewed `z`.
#[derive(Clone, Debug)]
pub struct Sampler {
    pub mean: DVector<f64>,
    pub scale: DMatrix<f64>,
}

impl Sampler {
    pub fn degenerate(mean: DVector<f64>) -> Self {
        let d = mean.len();
        Sampler {
            mean,
            scale: DMatrix::zeros(d, d),
        }
    }

    pub fn random(dims: usize, rng: &mut Rng) -> Self {
        Sampler {
            mean: DVector::from_fn(dims, |_, _| rng.normal()),
            scale: DMatrix::from_fn(dims, dims, |i, j| if j <= i { 0.7 * rng.normal() } else { 0.0 }),
        }
    }

    /// Trace of the covariance.
    pub fn total_variance(&self) -> f64 {
        self.scale.norm_squared()
    }

    pub fn draw(&self, rng: &mut Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| -rng.uniform().max(f64::MIN_POSITIVE).ln() - 1.0);
        &self.mean + &self.scale * z
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct UnbiasednessReport {
    pub trials: usize,
    /// `‖u − μ‖²`
    pub target: f64,
    pub total_variance: f64,
    pub two_sample_mean: f64,
    pub two_sample_se: f64,
    pub single_sample_mean: f64,
    pub single_sample_se: f64,
}

impl UnbiasednessReport {
    /// Two-sample deviation from the target, in standard errors.
    pub fn two_sample_z(&self) -> f64 {
        z_score(self.two_sample_mean - self.target, self.two_sample_se)
    }

    /// Single-sample bias minus the total variance, in standard errors.
    pub fn single_bias_z(&self) -> f64 {
        z_score(
            self.single_sample_mean - self.target - self.total_variance,
            self.single_sample_se,
        )
    }

    pub fn passes(&self, k: f64) -> bool {
        self.two_sample_z().abs() < k && self.single_bias_z().abs() < k
    }
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se == 0.0 {
        if diff.abs() <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / se
    }
}

const TRIAL_CHUNK: usize = 1000;

pub fn verify_unbiasedness_with(
    u: &DVector<f64>,
    sampler: &Sampler,
    n_trials: usize,
    rng: &Rng,
    exec: Exec,
) -> Result<UnbiasednessReport> {
    ensure!(n_trials >= 2, Domain, "need at least two trials");
    ensure!(u.len() == sampler.mean.len(), Dimension, "u and sampler dimensions differ");
    let chunks = n_trials.div_ceil(TRIAL_CHUNK);
    let partial = exec.map_range(chunks, |ci| {
        let mut r = rng.split_index(ci as u64);
        let n = TRIAL_CHUNK.min(n_trials - ci * TRIAL_CHUNK);
        let mut s = [0.0f64; 4];
        for _ in 0..n {
            let da = u - sampler.draw(&mut r);
            let db = u - sampler.draw(&mut r);
            let two = da.dot(&db);
            let single = da.norm_squared();
            s[0] += two;
            s[1] += two * two;
            s[2] += single;
            s[3] += single * single;
        }
        s
    });
    let mut s = [0.0f64; 4];
    for p in partial {
        for (a, b) in s.iter_mut().zip(p) {
            *a += b;
        }
    }
    let n = n_trials as f64;
    let moments = |sum: f64, sq: f64| {
        let mean = sum / n;
        let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (mean, (var / n).sqrt())
    };
    let (two_mean, two_se) = moments(s[0], s[1]);
    let (single_mean, single_se) = moments(s[2], s[3]);
    Ok(UnbiasednessReport {
        trials: n_trials,
        target: (u - &sampler.mean).norm_squared(),
        total_variance: sampler.total_variance(),
        two_sample_mean: two_mean,
        two_sample_se: two_se,
        single_sample_mean: single_mean,
        single_sample_se: single_se,
    })
}

/// Random `u` and a random skewed sampler in `dims` dimensions.
pub fn verify_unbiasedness(dims: usize, n_trials: usize, rng: &Rng, exec: Exec) -> Result<UnbiasednessReport> {
    ensure!(dims > 0, Domain, "dims must be positive");
    let mut setup = rng.split("setup");
    let u = DVector::from_fn(dims, |_, _| setup.normal());
    let sampler = Sampler::random(dims, &mut setup);
    verify_unbiasedness_with(&u, &sampler, n_trials, &rng.split("trials"), exec)
}

// ---------------------------------------------------------------------------
// Excess-risk bound on finite joint distributions

/// Finite `(X1, X2)` with vector-valued conditional means and two predictors:
/// `coarse(x1)` on the partial view and `fine(x1, x2)` on the full view.
#[derive(Clone, Debug)]
pub struct DiscreteInstance {
    pub n1: usize,
    pub n2: usize,
    pub dim: usize,
    /// `p[x1 * n2 + x2]`
    pub p: Vec<f64>,
    /// `E[Y | x1, x2]`, row per joint state.
    pub m2: Vec<Vec<f64>>,
    pub coarse: Vec<Vec<f64>>,
    pub fine: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BoundTerms {
    /// `E‖g(x_F1) − E[Y|F1]‖²`
    pub coarse_error: f64,
    pub violation: f64,
    pub fine_risk: f64,
}

impl BoundTerms {
    pub fn bound(&self) -> f64 {
        2.0 * self.violation + 2.0 * self.fine_risk
    }

    pub fn holds(&self) -> bool {
        self.coarse_error <= self.bound() * (1.0 + 1e-12) + 1e-15
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorKind {
    Arbitrary,
    /// Fine predictor equals `E[Y|F2]`.
    ExactFine,
    /// Coarse predictor equals `E[Y|F1]`.
    ExactCoarse,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl DiscreteInstance {
    pub fn random(rng: &mut Rng, kind: PredictorKind) -> Self {
        let n1 = 1 + rng.below(6);
        let n2 = 1 + rng.below(6);
        let dim = 1 + rng.below(3);
        let mut p: Vec<f64> = (0..n1 * n2)
            .map(|_| if rng.bernoulli(0.2) { 0.0 } else { rng.uniform() })
            .collect();
        if p.iter().all(|&v| v == 0.0) {
            p[0] = 1.0;
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        let vecs = |n: usize, rng: &mut Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| rng.normals(dim, 2.0)).collect()
        };
        let m2 = vecs(n1 * n2, rng);
        let coarse = vecs(n1, rng);
        let fine = vecs(n1 * n2, rng);
        let mut inst = DiscreteInstance {
            n1,
            n2,
            dim,
            p,
            m2,
            coarse,
            fine,
        };
        match kind {
            PredictorKind::Arbitrary => {}
            PredictorKind::ExactFine => inst.fine = inst.m2.clone(),
            PredictorKind::ExactCoarse => inst.coarse = inst.conditional(&inst.m2),
        }
        inst
    }

    pub fn marginal1(&self) -> Vec<f64> {
        (0..self.n1)
            .map(|a| self.p[a * self.n2..(a + 1) * self.n2].iter().sum())
            .collect()
    }

    /// `E[f(x1, X2) | x1]` for each `x1`; zero rows where `P(x1) = 0`.
    pub fn conditional(&self, f: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let p1 = self.marginal1();
        (0..self.n1)
            .map(|a| {
                let mut out = vec![0.0; self.dim];
                if p1[a] > 0.0 {
                    for b in 0..self.n2 {
                        let w = self.p[a * self.n2 + b] / p1[a];
                        for (o, v) in out.iter_mut().zip(&f[a * self.n2 + b]) {
                            *o += w * v;
                        }
                    }
                }
                out
            })
            .collect()
    }

    pub fn terms(&self) -> BoundTerms {
        let p1 = self.marginal1();
        let m1 = self.conditional(&self.m2);
        let fine_mean = self.conditional(&self.fine);
        let coarse_error = (0..self.n1).map(|a| p1[a] * sq_dist(&self.coarse[a], &m1[a])).sum();
        let violation = (0..self.n1)
            .map(|a| p1[a] * sq_dist(&self.coarse[a], &fine_mean[a]))
            .sum();
        let fine_risk = self
            .p
            .iter()
            .zip(self.fine.iter().zip(&self.m2))
            .map(|(&w, (g, m))| w * sq_dist(g, m))
            .sum();
        BoundTerms {
            coarse_error,
            violation,
            fine_risk,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundFailure {
    pub instance: u64,
    pub terms: BoundTerms,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExcessRiskReport {
    pub instances: usize,
    pub violations: Vec<BoundFailure>,
    /// Instances whose fine risk is exactly zero, checked against `2V`.
    pub zero_risk_checked: usize,
    /// Largest `coarse_error / bound` seen.
    pub max_ratio: f64,
}

impl ExcessRiskReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Enumerates `instances` random finite problems. Every fourth instance uses
/// an exact fine predictor, so the zero-risk limit is exercised too.
pub fn verify_excess_risk_bound(instances: usize, rng: &Rng, exec: Exec) -> ExcessRiskReport {
    let results = exec.map_range(instances, |i| {
        let mut r = rng.split_index(i as u64);
        let kind = if i % 4 == 3 {
            PredictorKind::ExactFine
        } else {
            PredictorKind::Arbitrary
        };
        let terms = DiscreteInstance::random(&mut r, kind).terms();
        (i as u64, kind, terms)
    });
    let mut report = ExcessRiskReport {
        instances,
        violations: Vec::new(),
        zero_risk_checked: 0,
        max_ratio: 0.0,
    };
    for (instance, kind, terms) in results {
        if kind == PredictorKind::ExactFine {
            report.zero_risk_checked += 1;
        }
        if terms.bound() > 0.0 {
            report.max_ratio = report.max_ratio.max(terms.coarse_error / terms.bound());
        }
        if !terms.holds() {
            report.violations.push(BoundFailure { instance, terms });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoupled_blocks_leave_refined_coefficients() {
        let mut s = DMatrix::identity(3, 3);
        s[(0, 1)] = 0.3;
        s[(1, 0)] = 0.3;
        let inst = LGInstance::new(s, 2, DVector::from_vec(vec![1.0, -1.0, 2.0]), 1.0).unwrap();
        assert!(inst.c.amax() == 0.0);
        for lambda in [0.0, 1.0, 1e6] {
            let (_, b2) = lg_closed_form(&inst, lambda).unwrap();
            assert!((b2[0] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_lambda_rejected() {
        let inst = LGInstance::random(2, 1, &mut Rng::new(1)).unwrap();
        assert!(matches!(lg_closed_form(&inst, -1.0), Err(Error::Domain(_))));
        assert!(lg_numeric_min(&inst, f64::NAN).is_err());
    }

    #[test]
    fn indefinite_covariance_rejected() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(LGInstance::new(s, 1, DVector::zeros(2), 1.0).is_err());
    }

    #[test]
    fn exact_coarse_predictor_has_zero_error() {
        let mut r = Rng::new(3);
        let t = DiscreteInstance::random(&mut r, PredictorKind::ExactCoarse).terms();
        assert!(t.coarse_error < 1e-24);
        assert!(t.holds());
    }
}
