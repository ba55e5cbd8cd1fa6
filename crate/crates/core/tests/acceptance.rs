//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.
//!
//! The MNIST criterion reads `data/mnist_train.csv` and `data/mnist_test.csv`
//! at the workspace root (see `scripts/mnist_idx_to_csv.py`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use fedmu2::fedcore::{Algorithm, Problem, RunConfig};
use fedmu2::harness::{self, ExperimentConfig};
use fedmu2::objectives::{derive_constants, ProblemSpec, QuadraticSpec, Sample};
use fedmu2::verify::{self, CheckReport};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn from_reports(reports: &[CheckReport], extra: &[(bool, String)]) -> Self {
        let mut detail: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.line()).collect();
        detail.extend(extra.iter().filter(|(ok, _)| !ok).map(|(_, m)| m.clone()));
        let passed = detail.is_empty();
        let summary = if passed {
            format!("{} checks", reports.len() + extra.len())
        } else {
            detail.join("; ")
        };
        Self { passed, detail: summary }
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn quad_spec(heterogeneity: f64) -> QuadraticSpec {
    QuadraticSpec {
        dim: 10,
        machines: 10,
        smoothness: 1.0,
        sample_noise: 0.5,
        heterogeneity,
        curvature_jitter: 0.2,
        radius: 1.0,
        optimum_offset: 0.3,
    }
}

fn quad_config(m: usize, rounds: usize) -> RunConfig {
    RunConfig {
        rounds,
        machines: 10,
        participants: m,
        noise: false,
        seed: 101,
        ..RunConfig::default()
    }
}

fn criterion_1() -> fedmu2::Result<Outcome> {
    let start = Instant::now();
    let reports = verify::check_random_traces(20, 1001)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome::from_reports(
        &reports[..1],
        &[(secs < 60.0, format!("runtime {secs:.1}s exceeds 60s"))],
    ))
}

/// MNIST data shared by the criteria that need it.
struct Mnist {
    train: Vec<Sample>,
    test: Arc<[Sample]>,
}

fn load_mnist() -> Result<Mnist, String> {
    let root = workspace_root();
    let train_path = root.join("data/mnist_train.csv");
    let test_path = root.join("data/mnist_test.csv");
    if !train_path.exists() || !test_path.exists() {
        return Err(format!(
            "MNIST CSVs missing under {}; generate them with scripts/mnist_idx_to_csv.py",
            root.join("data").display()
        ));
    }
    let train = harness::load_samples(&train_path).map_err(|e| e.to_string())?;
    let test = harness::load_samples(&test_path).map_err(|e| e.to_string())?;
    Ok(Mnist {
        train,
        test: test.into(),
    })
}

fn mnist_config(algorithm: Algorithm, rho: f64, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::parse(
        "objective = logistic\nmachines = 100\nparticipants = 50\nradius = 0.05\ndelta = 1e-5",
    )
    .expect("static config");
    c.run.algorithm = algorithm;
    c.run.rho = rho;
    c.run.seed = seed;
    c
}

struct MnistRun {
    algorithm: Algorithm,
    rho: f64,
    accuracy: f64,
    max_correction_norm: f64,
    grad_evals: u64,
    samples_used: u64,
    secs: f64,
}

fn mnist_runs(data: &Mnist) -> fedmu2::Result<Vec<MnistRun>> {
    let mut plan = Vec::new();
    for seed in 1..=3u64 {
        for rho in [4.0, 8.0, 12.0] {
            plan.push((Algorithm::Mu2Partial, rho, seed));
        }
        plan.push((Algorithm::NoisySgd, 8.0, seed));
    }
    let mut runs = Vec::new();
    let mut problems: Vec<(u64, Problem<fedmu2::LogisticRegression>)> = Vec::new();
    for (algorithm, rho, seed) in plan {
        let config = mnist_config(algorithm, rho, seed);
        if !problems.iter().any(|(s, _)| *s == seed) {
            problems.clear();
            problems.push((seed, harness::logistic_federation(&data.train, Arc::clone(&data.test), &config)?));
        }
        let problem = &problems[0].1;
        let start = Instant::now();
        let outcome = harness::run_logistic(problem, &config)?;
        let secs = start.elapsed().as_secs_f64();
        let out = &outcome.output;
        runs.push(MnistRun {
            algorithm,
            rho,
            accuracy: outcome.summary.test_acc.unwrap_or(f64::NAN),
            max_correction_norm: out.max_correction_norm,
            grad_evals: out.grad_evals,
            samples_used: out.participation.iter().map(|p| p.len() as u64).sum(),
            secs,
        });
        eprintln!("  {}", outcome.summary.line());
    }
    Ok(runs)
}

fn criterion_2(mnist: Option<&[MnistRun]>) -> fedmu2::Result<Outcome> {
    let mut reports = verify::check_random_traces(20, 2002)?.split_off(1);
    reports.extend(verify::check_logistic_sensitivity(2003)?);
    let spec = quad_spec(0.5);
    let problem = Problem::quadratic(spec.clone(), 200, 2004)?;
    let replacement = problem
        .objective
        .draw_sample(&mut fedmu2::fedcore::stream_rng(2005, fedmu2::fedcore::Stream::Verification));
    let mut cfg = quad_config(3, 200);
    cfg.noise = true;
    reports.extend(verify::check_swap_replay(&problem, &cfg, 2, 7, &replacement)?);

    let s = derive_constants(&ProblemSpec::Logistic {
        num_classes: 10,
        feature_dim: 785,
        diameter: 0.1,
    })?
    .s;
    let mut extra = vec![((s - 118.1).abs() < 0.05, format!("MNIST S = {s}"))];
    match mnist {
        Some(runs) => {
            let worst = runs
                .iter()
                .filter(|r| r.algorithm != Algorithm::NoisySgd)
                .map(|r| r.max_correction_norm)
                .fold(0.0, f64::max);
            extra.push((worst <= 118.1, format!("MNIST max correction norm {worst}")));
        }
        None => extra.push((false, "MNIST runs unavailable".into())),
    }
    Ok(Outcome::from_reports(&reports, &extra))
}

fn criterion_3() -> fedmu2::Result<Outcome> {
    let reports = vec![
        verify::check_accounting(100, 10_000, 3001)?,
        verify::check_trusted_accounting()?,
        verify::check_renyi()?,
        verify::check_dp_conversion()?,
    ];
    Ok(Outcome::from_reports(&reports, &[]))
}

fn criterion_4() -> fedmu2::Result<Outcome> {
    let spec = quad_spec(0.5);
    let mut reports = Vec::new();
    for m in [1, 5, 10] {
        reports.extend(verify::check_sampling_variance(&spec, m, 4000, 4001)?);
        reports.extend(verify::check_error_growth(&spec, &quad_config(m, 200), 100)?);
    }
    // with m = M the heterogeneity term vanishes: identical statistics and
    // bounds with and without heterogeneity (no curvature jitter, so the
    // shifts cannot enter the sample variance either)
    let rigid = QuadraticSpec {
        curvature_jitter: 0.0,
        ..spec.clone()
    };
    let flat = QuadraticSpec {
        heterogeneity: 0.0,
        ..rigid.clone()
    };
    let a = verify::check_sampling_variance(&rigid, 10, 1000, 4002)?;
    let b = verify::check_sampling_variance(&flat, 10, 1000, 4002)?;
    let same_stat = (a[0].statistic - b[0].statistic).abs() <= 1e-9 * b[0].statistic;
    let same_bound = (a[0].bound - b[0].bound).abs() <= 1e-12 * b[0].bound;
    let ga = verify::check_error_growth(&rigid, &quad_config(10, 100), 30)?;
    let gb = verify::check_error_growth(&flat, &quad_config(10, 100), 30)?;
    let growth_same = ga.iter().zip(&gb).all(|(x, y)| (x.bound - y.bound).abs() <= 1e-12 * y.bound);
    Ok(Outcome::from_reports(
        &reports,
        &[
            (same_stat && same_bound, "m = M variance depends on heterogeneity".into()),
            (growth_same, "m = M error bound depends on heterogeneity".into()),
        ],
    ))
}

fn criterion_5() -> fedmu2::Result<Outcome> {
    let report = verify::check_delayed_degradation(&quad_spec(0.0), &quad_config(1, 400), 100)?;
    eprintln!("  delayed / partial error ratio {:.2} (M/m = 10)", report.statistic);
    Ok(Outcome::from_reports(&[report], &[]))
}

fn criterion_6() -> fedmu2::Result<Outcome> {
    let reports = verify::check_convergence(&quad_spec(0.5), &quad_config(5, 0), &[250, 1000, 4000], 20)?;
    eprintln!("  log-log slope {:.3}", reports[0].statistic);
    Ok(Outcome::from_reports(&reports, &[]))
}

fn criterion_7(mnist: Result<&[MnistRun], &str>) -> Outcome {
    let runs = match mnist {
        Ok(r) => r,
        Err(e) => {
            return Outcome {
                passed: false,
                detail: e.to_string(),
            }
        }
    };
    let mean = |alg: Algorithm, rho: f64| {
        let v: Vec<f64> = runs
            .iter()
            .filter(|r| r.algorithm == alg && r.rho == rho)
            .map(|r| r.accuracy)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let ours = [4.0, 8.0, 12.0].map(|rho| mean(Algorithm::Mu2Partial, rho));
    let baseline = mean(Algorithm::NoisySgd, 8.0);
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    eprintln!(
        "  mu2-partial mean accuracy rho=4/8/12: {:.2}% / {:.2}% / {:.2}%; noisy-sgd rho=8: {:.2}%; slowest run {:.1}s",
        100.0 * ours[0],
        100.0 * ours[1],
        100.0 * ours[2],
        100.0 * baseline,
        slowest
    );
    let checks = [
        ((ours[1] - 0.637).abs() <= 0.05, format!("mu2-partial rho=8 accuracy {:.4}", ours[1])),
        ((baseline - 0.589).abs() <= 0.05, format!("noisy-sgd rho=8 accuracy {baseline:.4}")),
        (ours[0] < ours[1] && ours[1] < ours[2], format!("accuracy not monotone in rho: {ours:?}")),
        (slowest < 300.0, format!("slowest run {slowest:.1}s exceeds 5 minutes")),
    ];
    Outcome::from_reports(&[], &checks)
}

fn criterion_8(mnist: Option<&[MnistRun]>) -> fedmu2::Result<Outcome> {
    let mut reports = verify::check_cost(&quad_spec(0.5), &RunConfig { noise: true, ..quad_config(5, 300) })?;
    reports.extend(verify::check_cost(&quad_spec(0.5), &RunConfig { noise: true, ..quad_config(10, 57) })?);
    let mut extra = Vec::new();
    if let Some(runs) = mnist {
        // single-pass runs may end with short rounds; the counter still
        // charges exactly one or two evaluations per consumed sample
        for r in runs {
            let expected = r.algorithm.evals_per_sample() * r.samples_used;
            extra.push((
                r.grad_evals == expected,
                format!("{} MNIST counter {} != {expected}", r.algorithm, r.grad_evals),
            ));
        }
    }
    Ok(Outcome::from_reports(&reports, &extra))
}

fn criterion_9(mnist_available: bool) -> fedmu2::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut configs = vec![ExperimentConfig::parse(
        "objective = quadratic\nalgorithm = mu2-partial\nrounds = 300\nmachines = 12\nparticipants = 4\ndim = 20\nrho = 2\nseed = 9",
    )?];
    for alg in ["mu2-trusted", "noisy-sgd", "mu2-delayed"] {
        let mut c = configs[0].clone();
        c.set("algorithm", alg)?;
        configs.push(c);
    }
    if mnist_available {
        let root = workspace_root();
        let mut c = mnist_config(Algorithm::Mu2Partial, 8.0, 4);
        c.train_path = Some(root.join("data/mnist_train.csv"));
        c.test_path = Some(root.join("data/mnist_test.csv"));
        c.set("rounds", "60")?;
        configs.push(c);
    }
    let mut extra = Vec::new();
    for (k, base) in configs.iter().enumerate() {
        let mut bytes = Vec::new();
        for rep in 0..2 {
            let mut c = base.clone();
            let path = dir.path().join(format!("run{k}_{rep}.csv"));
            c.out = Some(path.clone());
            harness::run_experiment(&c)?;
            bytes.push(std::fs::read(&path)?);
        }
        extra.push((
            bytes[0] == bytes[1] && !bytes[0].is_empty(),
            format!("{} CSV differs between reruns", base.run.algorithm),
        ));
    }
    if !mnist_available {
        extra.push((false, "MNIST determinism not exercised (data missing)".into()));
    }
    Ok(Outcome::from_reports(&[], &extra))
}

fn report(n: usize, title: &str, outcome: fedmu2::Result<Outcome>, all: &mut bool) {
    let (passed, detail) = match outcome {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    *all &= passed;
    println!(
        "criterion {n} [{}] {title}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
}

fn main() -> ExitCode {
    let mut all = true;
    let mnist_data = load_mnist();
    let mnist: Result<Vec<MnistRun>, String> = match &mnist_data {
        Ok(data) => mnist_runs(data).map_err(|e| e.to_string()),
        Err(e) => Err(e.clone()),
    };
    let mnist_ok = mnist.as_ref().ok().map(Vec::as_slice);
    drop(mnist_data);

    report(1, "noise-cancellation identity", criterion_1(), &mut all);
    report(2, "sensitivity and swap replay", criterion_2(mnist_ok), &mut all);
    report(3, "privacy accounting", criterion_3(), &mut all);
    report(4, "sampling variance and error growth", criterion_4(), &mut all);
    report(5, "delayed-update degradation", criterion_5(), &mut all);
    report(6, "convergence scaling", criterion_6(), &mut all);
    report(
        7,
        "MNIST accuracy (rho = 8, m = 50, M = 100)",
        Ok(criterion_7(mnist.as_ref().map(Vec::as_slice).map_err(String::as_str))),
        &mut all,
    );
    report(8, "gradient-evaluation counters", criterion_8(mnist_ok), &mut all);
    report(9, "byte-identical reruns", criterion_9(mnist_ok.is_some()), &mut all);

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
