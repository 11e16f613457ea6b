use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use mcssl::data::{DatasetKind, SplitSpec};
use mcssl::objectives::{Mode, Variant};
use mcssl::train::{MetricRow, RunConfig};
use mcssl::Exec;
use mcssl_cli::plan::Plan;
use mcssl_cli::store::{self, Outcome, Status, Stored, Summary};
use mcssl_cli::table::{self, Kind};
use mcssl_cli::{render_table, run_configs, run_plan, verify};

const SMALL_PLAN: &str = r#"
schema = "mcssl.plan.v1"

[defaults]
steps = 5
batch_size = 32

[[cells]]
dataset = { kind = "ssim", split = { by = "counts", train = 200, priorfit = 60, test = 100 } }
mode = "semi"
variants = ["base", "mart_pred"]
seeds = [0, 1]
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mcssl"));
    c.env_remove("MCSSL_OUT");
    c
}

#[test]
fn empty_plan_is_a_successful_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.toml");
    fs::write(&plan, "schema = \"mcssl.plan.v1\"\n").unwrap();
    let out = bin()
        .args(["run", "--plan"])
        .arg(&plan)
        .arg("--out")
        .arg(dir.path().join("runs"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 runs"));
}

#[test]
fn plan_errors_carry_their_location() {
    let cases = [
        ("schema = \"mcssl.plan.v9\"\n", "plan.v9"),
        ("schema = \"mcssl.plan.v1\"\nbogus = 1\n", "bogus"),
        (
            "schema = \"mcssl.plan.v1\"\n[[cells]]\ndataset = { kind = \"ssim\" }\nmode = \"semi\"\nvariants = [\"base\"]\nseeds = []\n",
            "cells[0]",
        ),
        ("schema = \"mcssl.plan.v1\"\n[[cells]]\nmode = \"sideways\"\n", "sideways"),
    ];
    for (text, needle) in cases {
        let err = Plan::parse(text, "my-plan.toml").unwrap_err().to_string();
        assert!(err.contains("my-plan.toml"), "{err}");
        assert!(err.contains(needle), "{err}");
    }
}

#[test]
fn plan_expands_cells_with_seed_offset() {
    let plan = Plan::parse(SMALL_PLAN, "inline").unwrap();
    let cfgs = plan.configs(10).unwrap();
    assert_eq!(cfgs.len(), 4);
    let seeds: Vec<u64> = cfgs.iter().map(|c| c.seed).collect();
    assert_eq!(seeds, [10, 11, 10, 11]);
    assert!(cfgs.iter().all(|c| c.steps == 5 && c.batch_size == 32));
    assert_eq!(cfgs[2].variant, Variant::MartPred);
}

#[test]
fn rerunning_a_plan_trains_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let plan = Plan::parse(SMALL_PLAN, "inline").unwrap();
    let first = run_plan(&plan, dir.path(), 2, 0).unwrap();
    assert_eq!(first.cells.len(), 4);
    assert_eq!(first.failed(), 0);
    assert_eq!(first.steps_trained(), 20);
    let runs = store::scan(dir.path()).unwrap();
    assert_eq!(runs.len(), 4);
    for r in &runs {
        for f in ["config.toml", "steps.csv", "metrics.csv", "checkpoint.bin", "summary.toml"] {
            assert!(r.dir.join(f).exists(), "{f}");
        }
        assert_eq!(r.dir.file_name().unwrap().to_string_lossy(), r.config.hash().unwrap());
        assert_eq!(store::load_checkpoint(&r.dir).unwrap().count(), r.summary.param_count);
    }
    let again = run_plan(&plan, dir.path(), 1, 0).unwrap();
    assert_eq!(again.steps_trained(), 0);
    assert!(again.cells.iter().all(|(_, o)| *o == Outcome::Skipped));
}

#[test]
fn failed_cell_does_not_stop_the_others() {
    let dir = tempfile::tempdir().unwrap();
    let mut good = RunConfig::new(DatasetKind::Ssim, Mode::Semi, Variant::Base, 0);
    good.dataset.split = Some(SplitSpec::Counts {
        train: 200,
        priorfit: 60,
        test: 100,
    });
    good.steps = 3;
    good.batch_size = 16;
    let mut bad = good.clone();
    bad.optimizer.learning_rate = 1e200;
    bad.steps = 10;
    let report = run_configs(&[bad.clone(), good.clone()], dir.path(), 1).unwrap();
    assert!(matches!(report.cells[0].1, Outcome::Failed(ref e) if e.contains("non-finite")));
    assert_eq!(report.cells[1].1, Outcome::Completed { steps: 3 });
    let failed = store::read_summary(&dir.path().join(bad.hash().unwrap())).unwrap();
    assert_eq!(failed.status, Status::Failed);
    assert_eq!(store::scan(dir.path()).unwrap().len(), 1);
    let again = run_configs(&[bad, good], dir.path(), 1).unwrap();
    assert!(matches!(again.cells[0].1, Outcome::Failed(_)));
    assert_eq!(again.cells[1].1, Outcome::Skipped);
}

fn fixture(variant: Variant, seed: u64, accuracy: &[f64]) -> Stored {
    let config = RunConfig::new(DatasetKind::Ssim, Mode::Semi, variant, seed);
    let metrics = [0.05, 0.2, 0.4, 0.6, 0.8]
        .iter()
        .zip(accuracy)
        .map(|(&c, &value)| MetricRow {
            c,
            metric: "accuracy".into(),
            value,
        })
        .collect();
    Stored {
        dir: Path::new("/nonexistent").into(),
        summary: Summary {
            schema: store::SUMMARY_SCHEMA.into(),
            status: Status::Completed,
            config_hash: config.hash().unwrap(),
            error: None,
            param_count: 0,
            step_count: 0,
            wall_seconds: 0.0,
            grid_mean: BTreeMap::new(),
        },
        config,
        metrics,
    }
}

fn row<'a>(table: &'a str, variant: &str) -> Vec<&'a str> {
    table
        .lines()
        .find(|l| l.split(',').nth(2) == Some(variant))
        .unwrap_or_else(|| panic!("no {variant} row in\n{table}"))
        .split(',')
        .collect()
}

#[test]
fn gain_follows_the_relative_convention() {
    let runs = vec![
        fixture(Variant::Base, 0, &[0.32; 5]),
        fixture(Variant::MartPred, 0, &[0.419; 5]),
        fixture(Variant::MartLatent, 0, &[0.32; 5]),
    ];
    let t = table::metric_table(&table::groups(&runs, &[]), &["accuracy"], true);
    assert_eq!(row(&t, "base")[7..], ["0.3200", "0.0000", "+0.0%"]);
    assert_eq!(row(&t, "mart_pred")[7..], ["0.4190", "0.0000", "+30.9%"]);
    assert_eq!(row(&t, "mart_latent")[9], "+0.0%");
    assert_eq!(row(&t, "best")[9], "+30.9% (mart_pred)");
}

#[test]
fn sem_is_the_standard_error_across_seeds() {
    let runs = vec![
        fixture(Variant::Base, 0, &[0.2; 5]),
        fixture(Variant::Base, 1, &[0.3; 5]),
        fixture(Variant::Base, 2, &[0.4; 5]),
    ];
    let t = table::metric_table(&table::groups(&runs, &[]), &["accuracy"], false);
    let r = row(&t, "base");
    assert_eq!(r[6], "3");
    assert_eq!(r[7], "0.3000");
    assert_eq!(r[8], format!("{:.4}", 0.1 / 3f64.sqrt()));
    assert_eq!(table::mean_sem(&[0.7]), (0.7, 0.0));
}

#[test]
fn missing_cells_are_explicit_gaps() {
    let plan = Plan::parse(SMALL_PLAN, "inline").unwrap();
    let planned = plan.configs(0).unwrap();
    let mut present = fixture(Variant::Base, 0, &[0.3; 5]);
    present.config = planned[0].clone();
    let runs = vec![present];
    let t = table::metric_table(&table::groups(&runs, &planned), &["accuracy"], true);
    assert_eq!(row(&t, "base")[6], "1/2");
    let mart = row(&t, "mart_pred");
    assert_eq!(mart[6..], ["0/2", "missing", "missing", "n/a"]);
    assert_eq!(row(&t, "best")[9], "n/a");
}

#[test]
fn tables_regenerate_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let plan = Plan::parse(SMALL_PLAN, "inline").unwrap();
    run_plan(&plan, dir.path(), 1, 0).unwrap();
    for kind in [Kind::Main, Kind::Sensitivity, Kind::Calibration] {
        let a = render_table(kind, dir.path(), Some(&plan), 0, Exec::Parallel).unwrap();
        let b = render_table(kind, dir.path(), Some(&plan), 0, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        let unplanned = render_table(kind, dir.path(), None, 0, Exec::Parallel).unwrap();
        assert_eq!(unplanned, a.replace(",2/2,", ",2,"));
        assert_eq!(a.lines().count(), if kind == Kind::Main { 4 } else { 3 });
    }
    let bias = render_table(Kind::Bias, dir.path(), Some(&plan), 0, Exec::Parallel).unwrap();
    // header plus 2 groups x 5 levels x 2 sources
    assert_eq!(bias.lines().count(), 21);
    assert!(!bias.contains("missing"));
}

#[test]
fn env_var_sets_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.toml");
    fs::write(&plan, SMALL_PLAN.replace("[\"base\", \"mart_pred\"]", "[\"base\"]").replace("[0, 1]", "[0]")).unwrap();
    let root = dir.path().join("from-env");
    let out = bin()
        .env("MCSSL_OUT", &root)
        .args(["run", "--workers", "1", "--seed-offset", "3", "--plan"])
        .arg(&plan)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = store::scan(&root).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].config.seed, 3);
    let table = bin().env("MCSSL_OUT", &root).args(["table", "main"]).output().unwrap();
    assert!(String::from_utf8_lossy(&table.stdout).starts_with("dataset,mode,variant"));
}

#[test]
fn sweep_writes_the_grid_once() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
schema = "mcssl.plan.v1"

[[sweeps]]
dataset = { kind = "ssim", split = { by = "counts", train = 200, priorfit = 60, test = 100 } }
mode = "semi"
variant = "mart_pred"
seed = 0
steps = 3
batch_size = 16
lambda_imp = [1.0]
lambda_mart = [0.1, 10.0]
"#;
    let plan = Plan::parse(text, "inline").unwrap();
    let done = mcssl_cli::run_sweeps(&plan, dir.path(), 1, 0).unwrap();
    assert_eq!(done.len(), 1);
    assert!(done[0].1);
    let grid = fs::read_to_string(done[0].0.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 3);
    let again = mcssl_cli::run_sweeps(&plan, dir.path(), 1, 0).unwrap();
    assert!(!again[0].1);
}

#[test]
fn verify_passes_and_reports_runtimes() {
    let checks = verify::run_checks(false, Exec::Parallel);
    let report = verify::report(&checks);
    assert!(checks.iter().all(|c| c.pass), "{report}");
    assert_eq!(report.lines().filter(|l| l.contains("PASS") && l.contains("s  ")).count(), checks.len());
}

#[test]
fn sign_flip_canary_is_caught_by_name() {
    let checks = verify::run_checks_with(verify::sign_flipped, false, Exec::Parallel);
    let failing: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    assert_eq!(failing, ["linear-gaussian closed form"]);
    let lg = checks.iter().find(|c| !c.pass).unwrap();
    assert!(lg.detail.contains("instance seed"), "{}", lg.detail);

    let out = bin().args(["verify", "--quick", "--canary"]).output().unwrap();
    assert!(!out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("linear-gaussian closed form") && l.contains("FAIL")), "{stdout}");
}

#[test]
fn unknown_table_is_rejected() {
    let out = bin().args(["table", "nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(Kind::parse("calibration").is_some());
}
