use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fedmu2");

const QUAD: &str = "\
objective = quadratic
algorithm = mu2-partial
rounds = 80
machines = 6
participants = 3
dim = 8
rho = 4
seed = 3
";

fn fedmu2(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_writes_metrics_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "q.conf", QUAD);
    let out = dir.path().join("m.csv");
    let o = fedmu2(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,train_loss,test_acc,excess_loss,eps_err_sq,rho_spent_max,grad_evals,wall_ms"
    );
    let last = text.lines().last().unwrap();
    let cols: Vec<&str> = last.split(',').collect();
    assert_eq!(cols[0], "80");
    assert_eq!(cols[6], "480");
    assert!(cols[2].is_empty() && cols[7].is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains("mu2-partial seed=3"));
}

#[test]
fn seed_flag_overrides_and_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "q.conf", QUAD);
    let render = |seed: &str| {
        let o = fedmu2(&["run", "--config", &cfg, "--seed", seed]);
        assert!(o.status.success());
        o.stdout
    };
    assert_eq!(render("5"), render("5"));
    assert_ne!(render("5"), render("6"));
}

#[test]
fn sweep_emits_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "q.conf", QUAD);
    let grid = write(dir.path(), "g.grid", "rho = 2, 8\nseed = 1, 2, 3\n");
    let o = fedmu2(&["sweep", "--config", &cfg, "--grid", &grid]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("rho,algorithm,seed,rounds"));
    assert!(lines[6].starts_with("8,mu2-partial,3,"));
}

#[test]
fn empty_grid_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "q.conf", QUAD);
    let grid = write(dir.path(), "g.grid", "# nothing here\n");
    let o = fedmu2(&["sweep", "--config", &cfg, "--grid", &grid]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid is empty"));
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "q.conf", &format!("{QUAD}partcipants = 2\n"));
    let o = fedmu2(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("partcipants"));
}

#[test]
fn verify_single_check_to_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v.csv");
    let o = fedmu2(&["verify", "--check", "accounting", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("check,passed,statistic,relation,bound,stderr,trials\n"));
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")));
}

#[test]
fn verify_rejects_unknown_check() {
    let o = fedmu2(&["verify", "--check", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}
