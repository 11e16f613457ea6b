//! Property battery behind `mcssl verify` and the theory table.

use std::fmt::Write;
use std::time::Instant;

use mcssl::data::{gen_ssim, gen_tsim, gen_tsim_rc, DatasetKind};
use mcssl::eval::{eval_masks, estimator_bias_diag, RefineSource};
use mcssl::gradcheck::battery;
use mcssl::mask::{realized_completeness, MaskProcess};
use mcssl::model::Head;
use mcssl::objectives::{Mode, Variant};
use mcssl::theory::{
    lg_closed_form, verify_excess_risk_bound, verify_linear_gaussian_with, verify_unbiasedness, LGInstance,
};
use mcssl::train::{prepare, train, RunConfig};
use mcssl::{Exec, Result, Rng};
use nalgebra::DVector;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name,
        pass,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn unbiasedness(exec: Exec) -> Result<(bool, String)> {
    let seed = 1;
    let rep = verify_unbiasedness(6, 100_000, &Rng::new(seed), exec)?;
    let mut d = format!("two-sample z {:+.2}, single-sample bias z {:+.2}", rep.two_sample_z(), rep.single_bias_z());
    if !rep.passes(4.0) {
        let _ = write!(d, " (instance seed {seed})");
    }
    Ok((rep.passes(4.0), d))
}

fn linear_gaussian<F>(solver: F, exec: Exec) -> Result<(bool, String)>
where
    F: Fn(&LGInstance, f64) -> Result<(DVector<f64>, DVector<f64>)> + Sync + Send,
{
    let rng = Rng::new(2);
    let rep = verify_linear_gaussian_with(solver, 100, &[0.0, 0.01, 0.1, 1.0, 10.0, 100.0], 1e8, &rng, exec)?;
    let pass = rep.max_relative_gap < 1e-10 && rep.ols_gap < 1e-10 && rep.limit_beta2_norm < 1e-4 && rep.limit_beta1_gap < 1e-4;
    let mut d = format!(
        "100 instances, max gap {:.1e}, zero-penalty gap {:.1e}, large-penalty |β2| {:.1e}",
        rep.max_relative_gap, rep.ols_gap, rep.limit_beta2_norm
    );
    if let Some(worst) = rep.rows.iter().max_by(|a, b| a.relative_gap.total_cmp(&b.relative_gap)) {
        if worst.relative_gap >= 1e-10 {
            let _ = write!(d, "; worst instance seed {} at λ={}", worst.instance, worst.lambda);
        }
    }
    Ok((pass, d))
}

fn excess_risk(exec: Exec) -> Result<(bool, String)> {
    let rep = verify_excess_risk_bound(1000, &Rng::new(3), exec);
    let mut d = format!("{} instances, max ratio {:.3}", rep.instances, rep.max_ratio);
    if let Some(f) = rep.violations.first() {
        let _ = write!(d, "; {} violations, first instance seed {}", rep.violations.len(), f.instance);
    }
    Ok((rep.passed(), d))
}

fn gradients() -> Result<(bool, String)> {
    let results = battery(17)?;
    let failing: Vec<&str> = results
        .iter()
        .filter(|(_, r)| r.checked == 0 || r.max_rel_err >= 1e-4)
        .map(|(n, _)| *n)
        .collect();
    let worst = results.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let mut d = format!("{} operations, worst relative error {worst:.1e}", results.len());
    if !failing.is_empty() {
        let _ = write!(d, "; failing {}", failing.join(", "));
    }
    Ok((failing.is_empty(), d))
}

fn masks() -> Result<(bool, String)> {
    let grid = [0.05, 0.2, 0.4, 0.6, 0.8];
    let mut r = Rng::new(5);
    let mut worst = (0.0f64, "", 0.0);
    for (name, ds) in [("t-sim-rc", gen_tsim_rc(200, 5)?), ("t-sim", gen_tsim(200, 5)?), ("s-sim", gen_ssim(200, 5)?)] {
        let p = MaskProcess::for_dataset(&ds, 5)?;
        for (c, got) in realized_completeness(&p, ds.timesteps(), ds.features(), &grid, 100_000, &mut r)? {
            if (got - c).abs() > worst.0 {
                worst = ((got - c).abs(), name, c);
            }
        }
    }
    Ok((worst.0 < 0.01, format!("max |error| {:.4} ({} at c={})", worst.0, worst.1, worst.2)))
}

fn estimator_bias(exec: Exec) -> Result<(bool, String)> {
    let cfg = RunConfig::new(DatasetKind::Ssim, Mode::Semi, Variant::Base, 0);
    let p = prepare(&cfg)?;
    let (bundle, _) = train(&cfg, &p)?;
    let test = p.splits.test.subset(&(0..256).collect::<Vec<_>>());
    let (t, d) = (test.timesteps(), test.features());
    let (_, mask) = eval_masks(&p.process, test.len(), t, d, &[0.05], p.data_seed)?.remove(0);
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, src) in [
        ("imputer", RefineSource::Imputer { noise_scale: cfg.noise_scale }),
        ("oracle", RefineSource::Oracle { data: &test }),
    ] {
        let diag = estimator_bias_diag(&bundle, &test.x, &mask, Head::Cls, src, 128, &Rng::new(0).split("bias-diag"), exec)?;
        pass &= diag.two_abs < diag.single_abs;
        parts.push(format!("{name} two {:.2e} vs single {:.2e}", diag.two_abs, diag.single_abs));
    }
    Ok((pass, parts.join(", ")))
}

/// Every check, with `solver` standing in for the linear-Gaussian closed
/// form. `runs` adds the checks that train a model.
pub fn run_checks_with<F>(solver: F, runs: bool, exec: Exec) -> Vec<Check>
where
    F: Fn(&LGInstance, f64) -> Result<(DVector<f64>, DVector<f64>)> + Sync + Send,
{
    let mut out = vec![
        timed("two-sample unbiasedness", || unbiasedness(exec)),
        timed("linear-gaussian closed form", || linear_gaussian(solver, exec)),
        timed("excess-risk bound", || excess_risk(exec)),
        timed("gradient integrity", gradients),
        timed("mask calibration", masks),
    ];
    if runs {
        out.push(timed("estimator bias", || estimator_bias(exec)));
    }
    out
}

pub fn run_checks(runs: bool, exec: Exec) -> Vec<Check> {
    run_checks_with(lg_closed_form, runs, exec)
}

/// Closed form with the sign of `β1` flipped.
pub fn sign_flipped(inst: &LGInstance, lambda: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    let (b1, b2) = lg_closed_form(inst, lambda)?;
    Ok((-b1, b2))
}

pub fn report(checks: &[Check]) -> String {
    let mut s = String::new();
    for c in checks {
        let _ = writeln!(
            s,
            "{:<28} {}  {:>7.2}s  {}",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            c.seconds,
            c.detail
        );
    }
    let passed = checks.iter().filter(|c| c.pass).count();
    let _ = writeln!(s, "{passed}/{} checks pass", checks.len());
    s
}

/// Delimited form without timings, so it regenerates byte-identically.
pub fn theory_table(checks: &[Check]) -> String {
    let mut s = String::from("property,pass,detail\n");
    for c in checks {
        let _ = writeln!(s, "{},{},\"{}\"", c.name, c.pass, c.detail.replace('"', "'"));
    }
    s
}
