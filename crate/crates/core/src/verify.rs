//! Empirical checks of the analytical guarantees: sampling variance,
//! noise cancellation, sensitivity, privacy accounting, error growth, the
//! delayed-update degradation, convergence scaling, cost and determinism.
//!
//! Statistical checks pass when the estimate is within three standard errors
//! of its bound; identities use an absolute tolerance of `1e-9`.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::fedcore::{
    run, sample_participants, storm_difference, stream_rng, Algorithm, Problem, RunConfig,
    RunTrace, StepSize, Stream,
};
use crate::numkit::{Ball, Vector};
use crate::objectives::{
    derive_constants, tilde_constants, LogisticRegression, MachineDataset, Objective,
    ObjectiveConstants, ProblemSpec, QuadraticProblem, QuadraticSpec, Sample,
};
use crate::privacy::{calibrate_trusted, calibrate_untrusted, renyi_gaussian, zcdp_to_dp, BudgetLedger};

pub const IDENTITY_TOL: f64 = 1e-9;
pub const REPORT_HEADER: &str = "check,passed,statistic,relation,bound,stderr,trials";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    /// `statistic <= bound + 3 stderr`
    AtMost,
    /// `statistic >= bound`
    AtLeast,
    /// `statistic` inside `[bound / 3, 3 bound]` (log-scale band).
    WithinFactor3,
}

impl Relation {
    fn symbol(self) -> &'static str {
        match self {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
            Relation::WithinFactor3 => "~x3",
        }
    }
}

/// One row of the verification table.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub statistic: f64,
    pub relation: Relation,
    pub bound: f64,
    pub stderr: f64,
    pub trials: usize,
}

impl CheckReport {
    fn new(name: impl Into<String>, statistic: f64, relation: Relation, bound: f64, stderr: f64, trials: usize) -> Self {
        let passed = match relation {
            Relation::AtMost => statistic <= bound + 3.0 * stderr,
            Relation::AtLeast => statistic >= bound,
            Relation::WithinFactor3 => {
                let (lo, hi) = if bound < 0.0 {
                    (3.0 * bound, bound / 3.0)
                } else {
                    (bound / 3.0, 3.0 * bound)
                };
                (lo..=hi).contains(&statistic)
            }
        };
        Self {
            name: name.into(),
            passed: passed && statistic.is_finite(),
            statistic,
            relation,
            bound,
            stderr,
            trials,
        }
    }

    fn identity(name: impl Into<String>, deviation: f64, tol: f64, trials: usize) -> Self {
        Self::new(name, deviation, Relation::AtMost, tol, 0.0, trials)
    }

    fn with_stderr(mut self, stderr: f64, passed: bool) -> Self {
        self.stderr = stderr;
        self.passed = passed;
        self
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {:.6e} {} {:.6e} (stderr {:.2e}, n = {})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.statistic,
            self.relation.symbol(),
            self.bound,
            self.stderr,
            self.trials
        )
    }
}

pub fn write_reports<W: Write>(w: &mut W, reports: &[CheckReport]) -> io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.name,
            r.passed,
            r.statistic,
            r.relation.symbol(),
            r.bound,
            r.stderr,
            r.trials
        )?;
    }
    Ok(())
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `(M - m) / (M - 1)`, zero for a single machine.
pub fn sampling_factor(machines: usize, m: usize) -> f64 {
    if machines <= 1 {
        0.0
    } else {
        (machines - m) as f64 / (machines - 1) as f64
    }
}

fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, ball: &Ball) -> Vector {
    let d = ball.dim();
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 <= 1.0 && n2 > 0.0 {
            let mut out = ball.center().clone();
            out.axpy(ball.radius(), &v);
            return out;
        }
    }
}

/// Monte Carlo estimate of both sampling-variance bounds for a minibatch that
/// draws `m` of the machines without replacement and one sample each.
pub fn check_sampling_variance(spec: &QuadraticSpec, m: usize, trials: usize, seed: u64) -> Result<Vec<CheckReport>> {
    if trials < 100 {
        return Err(invalid(format!("sampling-variance needs >= 100 trials, got {trials}")));
    }
    let problem = QuadraticProblem::new(spec.clone())?;
    let c = problem.constants()?;
    let machines = spec.machines;
    let mut rng = stream_rng(seed, Stream::Verification);
    let factor = sampling_factor(machines, m);
    let value_bound = (c.sigma.powi(2) + factor * c.xi.powi(2)) / m as f64;
    let smooth_bound = (c.sigma_l.powi(2) + factor * c.xi_l.powi(2)) / m as f64;

    let mut value = Vec::with_capacity(trials);
    let mut smooth = Vec::with_capacity(trials);
    for _ in 0..trials {
        let x = uniform_in_ball(&mut rng, problem.domain());
        let y = uniform_in_ball(&mut rng, problem.domain());
        let chosen = sample_participants(machines, m, &mut rng)?;
        let mut gx = Vector::zeros(spec.dim);
        let mut gy = Vector::zeros(spec.dim);
        for &i in &chosen {
            let z = problem.draw_sample(&mut rng);
            gx.axpy(1.0 / m as f64, &problem.gradient(i, &x, &z));
            gy.axpy(1.0 / m as f64, &problem.gradient(i, &y, &z));
        }
        let fx = problem.full_gradient(&x).expect("closed form");
        let fy = problem.full_gradient(&y).expect("closed form");
        value.push(gx.sub(&fx).norm_sq());
        let diff = gx.sub(&gy).sub(&fx.sub(&fy));
        smooth.push(diff.norm_sq() / x.distance(&y).powi(2));
    }
    let (mv, sv) = mean_stderr(&value);
    let (ms, ss) = mean_stderr(&smooth);
    Ok(vec![
        CheckReport::new(format!("sampling-variance-value[M={machines},m={m}]"), mv, Relation::AtMost, value_bound, sv, trials),
        CheckReport::new(
            format!("sampling-variance-smooth[M={machines},m={m}]"),
            ms,
            Relation::AtMost,
            smooth_bound + 1e-15,
            ss,
            trials,
        ),
    ])
}

fn require_trace(trace: Option<&RunTrace>) -> Result<&RunTrace> {
    trace.ok_or_else(|| invalid("check needs a run recorded with trace = true"))
}

/// Largest coordinate gap between the server's running sum and the raw
/// running sum plus the mean retained noise, over all rounds.
pub fn cancellation_deviation(trace: &RunTrace) -> Result<f64> {
    let m = trace.participants as f64;
    let Some(first) = trace.rounds.first() else {
        return Ok(0.0);
    };
    let d = first.q_tilde.dim();
    let mut q = Vector::zeros(d);
    let mut worst: f64 = 0.0;
    for r in &trace.rounds {
        if r.retained.len() != trace.machines {
            return Err(invalid("trace lacks retained noise for every machine"));
        }
        for s in &r.raw {
            q.axpy(1.0 / m, s);
        }
        let mut expect = q.clone();
        for y in &r.retained {
            expect.axpy(1.0 / m, y);
        }
        let gap = expect
            .iter()
            .zip(r.q_tilde.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(gap);
    }
    Ok(worst)
}

pub fn check_cancellation(trace: Option<&RunTrace>) -> Result<CheckReport> {
    let trace = require_trace(trace)?;
    let dev = cancellation_deviation(trace)?;
    Ok(CheckReport::identity("cancellation", dev, IDENTITY_TOL, trace.rounds.len()))
}

/// Largest recorded correction norm against `S = G + 2LD`.
pub fn check_sensitivity(trace: Option<&RunTrace>, constants: &ObjectiveConstants) -> Result<CheckReport> {
    let trace = require_trace(trace)?;
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for r in &trace.rounds {
        for s in &r.raw {
            worst = worst.max(s.norm());
            n += 1;
        }
    }
    Ok(CheckReport::new("sensitivity", worst, Relation::AtMost, constants.s, 0.0, n))
}

/// Replays one machine along the recorded query points with sample `slot`
/// replaced, and reports the largest gap between the two prefix sums of its
/// corrections. Also fails if the unswapped replay does not reproduce the
/// recorded corrections.
pub fn check_swap_replay<O: Objective>(
    problem: &Problem<O>,
    config: &RunConfig,
    machine: usize,
    slot: usize,
    replacement: &O::Sample,
) -> Result<Vec<CheckReport>> {
    let mut cfg = config.clone();
    cfg.trace = true;
    let out = run(problem, &cfg)?;
    let trace = require_trace(out.trace.as_ref())?;
    let samples = problem
        .datasets
        .get(machine)
        .ok_or_else(|| invalid(format!("no machine {machine}")))?
        .samples();
    let d = problem.dim();
    let mut original = Vector::zeros(d);
    let mut swapped = Vector::zeros(d);
    let mut replay_gap: f64 = 0.0;
    let mut worst: f64 = 0.0;
    let mut k = 0;
    for r in &trace.rounds {
        let Some(pos) = r.participants.iter().position(|&i| i == machine) else {
            continue;
        };
        let t = r.t as f64;
        let z = &samples[k];
        let s = storm_difference(&problem.objective, machine, z, &r.x, t, &r.x_prev, t - 1.0);
        replay_gap = replay_gap.max(s.distance(&r.raw[pos]));
        let s_swap = if k == slot {
            storm_difference(&problem.objective, machine, replacement, &r.x, t, &r.x_prev, t - 1.0)
        } else {
            s.clone()
        };
        original.axpy(1.0, &s);
        swapped.axpy(1.0, &s_swap);
        worst = worst.max(original.distance(&swapped));
        k += 1;
    }
    Ok(vec![
        CheckReport::identity("swap-replay-faithful", replay_gap, IDENTITY_TOL, k),
        CheckReport::new("swap-replay", worst, Relation::AtMost, 2.0 * problem.constants.s, 0.0, k),
    ])
}

/// Drives the per-machine noise schedule over random participation patterns
/// and reports the largest `rho_i / rho`.
pub fn check_accounting(patterns: usize, max_rounds: usize, seed: u64) -> Result<CheckReport> {
    if patterns == 0 || max_rounds == 0 {
        return Err(invalid("accounting needs at least one pattern and one round"));
    }
    let mut rng = stream_rng(seed, Stream::Verification);
    let mut worst: f64 = 0.0;
    for _ in 0..patterns {
        let rounds = rng.random_range(1..=max_rounds);
        let machines = rng.random_range(1..=20usize);
        let m = rng.random_range(1..=machines);
        let rho = rng.random_range(0.5..16.0);
        let s = rng.random_range(0.1..200.0);
        let mut counts = vec![0usize; machines];
        let mut ledger = BudgetLedger::new(2.0 * s, machines);
        for _ in 0..rounds {
            for i in sample_participants(machines, m, &mut rng)? {
                counts[i] += 1;
                ledger.record(i, calibrate_untrusted(s, rounds, rho, counts[i])?);
            }
        }
        worst = worst.max(ledger.max_spent() / rho);
    }
    Ok(CheckReport::new("accounting", worst, Relation::AtMost, 1.0 + 1e-12, 0.0, patterns))
}

/// Trusted schedule: `(2S/m) sqrt(T / sigma^2)` recovers `rho`.
pub fn check_trusted_accounting() -> Result<CheckReport> {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for &(s, rounds, rho, m) in &[
        (118.1, 1200usize, 8.0, 50usize),
        (1.0, 1, 0.5, 1),
        (3.7, 10_000, 12.0, 7),
        (0.2, 333, 1.5, 20),
    ] {
        let var = calibrate_trusted(s, rounds, rho, m)?;
        let mut ledger = BudgetLedger::new(2.0 * s / m as f64, 1);
        for _ in 0..rounds {
            ledger.record(0, var);
        }
        worst = worst.max((ledger.spent(0) - rho).abs());
        n += 1;
    }
    Ok(CheckReport::identity("trusted-accounting", worst, IDENTITY_TOL, n))
}

/// Log of the order-`alpha` Renyi integral of two unit-shifted Gaussians,
/// by composite Simpson over a wide window.
pub fn renyi_by_quadrature(alpha: f64, delta_norm: f64, sigma: f64) -> f64 {
    let log_p = |x: f64| -x * x / (2.0 * sigma * sigma);
    let log_q = |x: f64| -(x - delta_norm) * (x - delta_norm) / (2.0 * sigma * sigma);
    let norm = -(2.0 * std::f64::consts::PI).sqrt().ln() - sigma.ln();
    let center = alpha * 0.0 + (1.0 - alpha) * delta_norm;
    let width = 40.0 * sigma + alpha.abs() * delta_norm;
    let (a, b) = (center - width, center + width);
    let n = 200_000usize;
    let h = (b - a) / n as f64;
    let f = |x: f64| (alpha * log_p(x) + (1.0 - alpha) * log_q(x) + norm).exp();
    let mut sum = f(a) + f(b);
    for k in 1..n {
        let x = a + k as f64 * h;
        sum += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    (sum * h / 3.0).ln() / (alpha - 1.0)
}

pub fn check_renyi() -> Result<CheckReport> {
    let mut worst: f64 = 0.0;
    let cases = [(2.0, 1.0, 1.0), (1.5, 0.3, 0.7), (5.0, 2.0, 3.0), (10.0, 0.5, 1.0), (3.0, 4.0, 2.5)];
    for &(alpha, delta, sigma) in &cases {
        let closed = renyi_gaussian(alpha, delta, sigma)?;
        let numeric = renyi_by_quadrature(alpha, delta, sigma);
        worst = worst.max((closed - numeric).abs() / closed.max(1e-300));
    }
    Ok(CheckReport::identity("renyi-gaussian", worst, 1e-6, cases.len()))
}

/// Conversion from `rho`-zCDP via the standard `(r, 2 sqrt(r ln(1/delta)))`
/// form with `r = rho^2 / 2`.
pub fn check_dp_conversion() -> Result<CheckReport> {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for &rho in &[0.1, 1.0, 4.0, 8.0, 12.0] {
        for &delta in &[1e-3, 1e-5, 1e-9] {
            let r: f64 = rho * rho / 2.0;
            let reference = r + 2.0 * (r * (1.0f64 / delta).ln()).sqrt();
            let eps = zcdp_to_dp(rho, delta)?;
            worst = worst.max((eps - reference).abs() / reference);
            n += 1;
        }
    }
    Ok(CheckReport::identity("dp-conversion", worst, 1e-12, n))
}

fn noiseless(config: &RunConfig, algorithm: Algorithm) -> RunConfig {
    RunConfig {
        algorithm,
        noise: false,
        trace: false,
        ..config.clone()
    }
}

/// Per-replicate `||eps_t||^2` at the requested rounds.
fn error_samples(
    spec: &QuadraticSpec,
    config: &RunConfig,
    replicates: usize,
    at: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut samples = vec![Vec::with_capacity(replicates); at.len()];
    for r in 0..replicates {
        let seed = config.seed.wrapping_add(r as u64);
        let problem = Problem::quadratic(spec.clone(), config.rounds, seed)?;
        let out = run(&problem, &RunConfig { seed, ..config.clone() })?;
        for (k, &t) in at.iter().enumerate() {
            samples[k].push(out.error_sq[t - 1]);
        }
    }
    Ok(samples)
}

/// Mean `||eps_t||^2` of noiseless runs at `T/4`, `T/2` and `T` against
/// `(t/m)(sigma~^2 + (M-m)/(M-1) xi~^2)`.
pub fn check_error_growth(spec: &QuadraticSpec, config: &RunConfig, replicates: usize) -> Result<Vec<CheckReport>> {
    if replicates < 30 {
        return Err(invalid(format!("error growth needs >= 30 replicates, got {replicates}")));
    }
    let cfg = noiseless(config, Algorithm::Mu2Partial);
    let c = QuadraticProblem::new(spec.clone())?.constants()?;
    let (st, xt) = tilde_constants(&c);
    let factor = sampling_factor(cfg.machines, cfg.participants);
    let at: Vec<usize> = [cfg.rounds / 4, cfg.rounds / 2, cfg.rounds]
        .into_iter()
        .map(|t| t.max(1))
        .collect();
    let samples = error_samples(spec, &cfg, replicates, &at)?;
    Ok(at
        .iter()
        .zip(samples)
        .map(|(&t, v)| {
            let (mean, se) = mean_stderr(&v);
            let bound = t as f64 / cfg.participants as f64 * (st * st + factor * xt * xt);
            CheckReport::new(
                format!("error-growth[m={},t={t}]", cfg.participants),
                mean,
                Relation::AtMost,
                bound,
                se,
                replicates,
            )
        })
        .collect())
}

/// Ratio of the delayed variant's mean `||eps_T||^2` to the
/// partial-participation variant's, against `0.5 M / m`.
pub fn check_delayed_degradation(spec: &QuadraticSpec, config: &RunConfig, replicates: usize) -> Result<CheckReport> {
    if replicates == 0 {
        return Err(invalid("need at least one replicate"));
    }
    let t = config.rounds;
    let delayed = error_samples(spec, &noiseless(config, Algorithm::Mu2Delayed), replicates, &[t])?;
    let partial = error_samples(spec, &noiseless(config, Algorithm::Mu2Partial), replicates, &[t])?;
    let (md, _) = mean_stderr(&delayed[0]);
    let (mp, _) = mean_stderr(&partial[0]);
    let bound = 0.5 * config.machines as f64 / config.participants as f64;
    Ok(CheckReport::new("delayed-degradation", md / mp, Relation::AtLeast, bound, 0.0, replicates))
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Mean final excess loss of noiseless runs for each horizon.
pub fn mean_excess_loss(spec: &QuadraticSpec, config: &RunConfig, horizons: &[usize], replicates: usize) -> Result<Vec<(f64, f64)>> {
    let cfg = noiseless(config, Algorithm::Mu2Partial);
    horizons
        .iter()
        .map(|&rounds| {
            let mut vals = Vec::with_capacity(replicates);
            for r in 0..replicates {
                let seed = cfg.seed.wrapping_add(r as u64);
                let problem = Problem::quadratic(spec.clone(), rounds, seed)?;
                let out = run(&problem, &RunConfig { rounds, seed, ..cfg.clone() })?;
                vals.push(problem.objective.excess_loss(&out.x_out));
            }
            Ok(mean_stderr(&vals))
        })
        .collect()
}

/// Log-log slope of the excess loss across horizons (target `-1/2` within a
/// factor of three) and a strict decrease between the two largest horizons.
pub fn check_convergence(
    spec: &QuadraticSpec,
    config: &RunConfig,
    horizons: &[usize],
    replicates: usize,
) -> Result<Vec<CheckReport>> {
    if horizons.len() < 2 || replicates == 0 {
        return Err(invalid("convergence needs >= 2 horizons and >= 1 replicate"));
    }
    let stats = mean_excess_loss(spec, config, horizons, replicates)?;
    let xs: Vec<f64> = horizons.iter().map(|&t| t as f64).collect();
    let ys: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let slope = loglog_slope(&xs, &ys);
    let k = stats.len();
    let (last, last_se) = stats[k - 1];
    let (prev, prev_se) = stats[k - 2];
    Ok(vec![
        CheckReport::new("convergence-slope", slope, Relation::WithinFactor3, -0.5, 0.0, replicates),
        CheckReport::new(
            format!("convergence-decrease[T={}<T={}]", horizons[k - 1], horizons[k - 2]),
            last,
            Relation::AtMost,
            prev,
            0.0,
            replicates,
        )
        .with_stderr((last_se.powi(2) + prev_se.powi(2)).sqrt(), last < prev),
    ])
}

/// Gradient-evaluation counters against `2mT` (weighted-momentum variants)
/// and `mT` (SGD baseline).
pub fn check_cost(spec: &QuadraticSpec, config: &RunConfig) -> Result<Vec<CheckReport>> {
    let problem = Problem::quadratic(spec.clone(), config.rounds, config.seed)?;
    Algorithm::ALL
        .into_iter()
        .map(|algorithm| {
            let out = run(&problem, &RunConfig { algorithm, ..config.clone() })?;
            let expected = algorithm.evals_per_sample() * (config.participants * config.rounds) as u64;
            Ok(CheckReport::identity(
                format!("cost[{algorithm}]"),
                (out.grad_evals as f64 - expected as f64).abs(),
                0.0,
                1,
            ))
        })
        .collect()
}

/// Two runs with the same configuration produce identical metrics bytes.
pub fn check_determinism(spec: &QuadraticSpec, config: &RunConfig) -> Result<CheckReport> {
    let render = || -> Result<Vec<u8>> {
        let problem = Problem::quadratic(spec.clone(), config.rounds, config.seed)?;
        let out = run(&problem, config)?;
        let mut buf = Vec::new();
        crate::harness::write_metrics(&mut buf, &out.metrics)?;
        Ok(buf)
    };
    let a = render()?;
    let b = render()?;
    let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len());
    Ok(CheckReport::identity("determinism", differing as f64, 0.0, 2))
}

/// Random small federations for trace-level checks.
pub fn random_configs(count: usize, seed: u64) -> Vec<(QuadraticSpec, RunConfig)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let machines = rng.random_range(1..=20usize);
            let spec = QuadraticSpec {
                dim: rng.random_range(1..=50),
                machines,
                smoothness: rng.random_range(0.5..4.0),
                sample_noise: rng.random_range(0.0..2.0),
                heterogeneity: rng.random_range(0.0..2.0),
                curvature_jitter: rng.random_range(0.0..0.5),
                radius: rng.random_range(0.5..3.0),
                optimum_offset: rng.random_range(0.0..2.0),
            };
            let config = RunConfig {
                algorithm: Algorithm::Mu2Partial,
                rounds: rng.random_range(1..=500),
                machines,
                participants: rng.random_range(1..=machines),
                rho: rng.random_range(0.5..16.0),
                seed: seed.wrapping_mul(1000).wrapping_add(k as u64),
                trace: true,
                ..RunConfig::default()
            };
            (spec, config)
        })
        .collect()
}

/// Cancellation identity and correction-norm bound over random federations.
pub fn check_random_traces(count: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut dev: f64 = 0.0;
    let mut ratio: f64 = 0.0;
    let mut rounds = 0;
    for (spec, config) in random_configs(count, seed) {
        let problem = Problem::quadratic(spec, config.rounds, config.seed)?;
        let out = run(&problem, &config)?;
        let trace = require_trace(out.trace.as_ref())?;
        dev = dev.max(cancellation_deviation(trace)?);
        let sens = check_sensitivity(Some(trace), &problem.constants)?;
        ratio = ratio.max(sens.statistic / problem.constants.s);
        rounds += trace.rounds.len();
    }
    Ok(vec![
        CheckReport::identity(format!("cancellation[{count} configs]"), dev, IDENTITY_TOL, rounds),
        CheckReport::new(format!("sensitivity[{count} configs]"), ratio, Relation::AtMost, 1.0, 0.0, rounds),
    ])
}

/// Softmax-regression federation with random `[0, 1]` features of MNIST shape.
pub fn synthetic_logistic(machines: usize, per_machine: usize, seed: u64) -> Result<Problem<LogisticRegression>> {
    let features = crate::harness::MNIST_PIXELS + 1;
    let mut rng = stream_rng(seed, Stream::Verification);
    let datasets = (0..machines)
        .map(|_| {
            let samples = (0..per_machine)
                .map(|_| {
                    let raw = (0..features - 1).map(|_| rng.random::<f64>()).collect();
                    Sample::with_bias(raw, rng.random_range(0..10))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MachineDataset::new(samples))
        })
        .collect::<Result<Vec<_>>>()?;
    let model = LogisticRegression::new(10, features)?;
    let domain = Ball::centered(model.dim(), 0.05)?;
    let constants = derive_constants(&ProblemSpec::Logistic {
        num_classes: 10,
        feature_dim: features,
        diameter: domain.diameter(),
    })?;
    Problem::new(model, domain, constants, datasets)
}

/// Logistic sensitivity bound under MNIST constants, plus a swap replay.
pub fn check_logistic_sensitivity(seed: u64) -> Result<Vec<CheckReport>> {
    let problem = synthetic_logistic(4, 40, seed)?;
    let config = RunConfig {
        rounds: 40,
        machines: 4,
        participants: 2,
        trace: true,
        seed,
        // large steps move the query points enough to exercise the bound
        step: StepSize::Fixed(1e-3),
        ..RunConfig::default()
    };
    let out = run(&problem, &config)?;
    let mut reports = vec![CheckReport::new(
        "sensitivity-logistic",
        check_sensitivity(out.trace.as_ref(), &problem.constants)?.statistic,
        Relation::AtMost,
        118.1,
        0.0,
        out.participation.iter().map(Vec::len).sum(),
    )];
    let mut flipped = problem.datasets[0].samples()[0].clone();
    flipped.features.iter_mut().rev().skip(1).for_each(|v| *v = 1.0 - *v);
    flipped.label = (flipped.label + 5) % 10;
    reports.extend(check_swap_replay(&problem, &config, 0, 0, &flipped)?);
    Ok(reports)
}

fn growth_spec() -> QuadraticSpec {
    QuadraticSpec {
        dim: 10,
        machines: 10,
        smoothness: 1.0,
        sample_noise: 0.5,
        heterogeneity: 0.5,
        curvature_jitter: 0.2,
        radius: 1.0,
        optimum_offset: 0.3,
    }
}

fn growth_config(m: usize, rounds: usize) -> RunConfig {
    RunConfig {
        algorithm: Algorithm::Mu2Partial,
        rounds,
        machines: 10,
        participants: m,
        noise: false,
        seed: 1,
        ..RunConfig::default()
    }
}

/// Names accepted by [`run_check`].
pub const CHECKS: &[&str] = &[
    "sampling-variance",
    "cancellation",
    "sensitivity",
    "accounting",
    "error-growth",
    "delayed",
    "convergence",
    "cost",
    "determinism",
];

/// Runs one named check at the default reduced scale.
pub fn run_check(name: &str) -> Result<Vec<CheckReport>> {
    let spec = growth_spec();
    match name {
        "sampling-variance" => {
            let mut out = Vec::new();
            for m in [1, 5, 10] {
                out.extend(check_sampling_variance(&spec, m, 4000, 11)?);
            }
            Ok(out)
        }
        "cancellation" | "sensitivity" => {
            let mut out = check_random_traces(20, 21)?;
            if name == "sensitivity" {
                out.remove(0);
                out.extend(check_logistic_sensitivity(22)?);
                let quad = Problem::quadratic(spec.clone(), 100, 23)?;
                let replacement = quad.objective.draw_sample(&mut stream_rng(24, Stream::Verification));
                out.extend(check_swap_replay(&quad, &growth_config(3, 100), 1, 4, &replacement)?);
            } else {
                out.truncate(1);
            }
            Ok(out)
        }
        "accounting" => Ok(vec![
            check_accounting(100, 10_000, 31)?,
            check_trusted_accounting()?,
            check_renyi()?,
            check_dp_conversion()?,
        ]),
        "error-growth" => {
            let mut out = Vec::new();
            for m in [1, 5, 10] {
                out.extend(check_error_growth(&spec, &growth_config(m, 200), 100)?);
            }
            Ok(out)
        }
        "delayed" => {
            let homogeneous = QuadraticSpec {
                heterogeneity: 0.0,
                ..spec
            };
            Ok(vec![check_delayed_degradation(&homogeneous, &growth_config(1, 400), 100)?])
        }
        "convergence" => check_convergence(&spec, &growth_config(5, 0), &[250, 1000, 4000], 20),
        "cost" => check_cost(&spec, &RunConfig { noise: true, ..growth_config(5, 50) }),
        "determinism" => Ok(vec![check_determinism(&spec, &RunConfig { noise: true, ..growth_config(5, 120) })?]),
        other => Err(Error::Unsupported(format!(
            "check `{other}`; available: {}",
            CHECKS.join(", ")
        ))),
    }
}

pub fn run_all() -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for name in CHECKS {
        out.extend(run_check(name)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_spec(machines: usize) -> QuadraticSpec {
        QuadraticSpec {
            dim: 3,
            machines,
            optimum_offset: 0.2,
            ..QuadraticSpec::default()
        }
    }

    fn traced(machines: usize, m: usize, rounds: usize, noise: bool) -> (Problem<QuadraticProblem>, RunTrace) {
        let problem = Problem::quadratic(small_spec(machines), rounds, 5).unwrap();
        let config = RunConfig {
            rounds,
            machines,
            participants: m,
            noise,
            trace: true,
            seed: 5,
            ..RunConfig::default()
        };
        let trace = run(&problem, &config).unwrap().trace.unwrap();
        (problem, trace)
    }

    #[test]
    fn hand_traced_cancellation() {
        let (_, trace) = traced(2, 1, 3, true);
        // brute-force replay: q~ accumulates released messages, Y is the last
        // fresh draw of each machine
        let mut q_tilde = Vector::zeros(3);
        let mut q = Vector::zeros(3);
        let mut last = [Vector::zeros(3), Vector::zeros(3)];
        for r in &trace.rounds {
            let i = r.participants[0];
            let released = r.raw[0].add(&r.fresh_noise[0]).sub(&last[i]);
            assert_eq!(released, r.released[0]);
            last[i] = r.fresh_noise[0].clone();
            q_tilde.axpy(1.0, &released);
            q.axpy(1.0, &r.raw[0]);
            let effective = q.add(&last[0]).add(&last[1]);
            for j in 0..3 {
                assert!((effective[j] - q_tilde[j]).abs() < 1e-12);
                assert!((r.q_tilde[j] - q_tilde[j]).abs() < 1e-12);
            }
        }
        assert!(check_cancellation(Some(&trace)).unwrap().passed);
    }

    #[test]
    fn zero_noise_running_sum_is_raw() {
        let (_, trace) = traced(4, 2, 20, false);
        let mut q = Vector::zeros(3);
        for r in &trace.rounds {
            for s in &r.raw {
                q.axpy(0.5, s);
            }
            assert!(r.retained.iter().all(|y| y.norm() == 0.0));
            assert!(q.distance(&r.q_tilde) < 1e-12);
        }
    }

    #[test]
    fn full_participation_noise_is_mean_of_fresh_draws() {
        let (_, trace) = traced(3, 3, 10, true);
        let mut q = Vector::zeros(3);
        for r in &trace.rounds {
            let mut expect = Vector::zeros(3);
            for (s, y) in r.raw.iter().zip(&r.fresh_noise) {
                q.axpy(1.0 / 3.0, s);
                expect.axpy(1.0 / 3.0, y);
            }
            let noise = r.q_tilde.sub(&q);
            assert!(noise.distance(&expect) < 1e-9);
        }
    }

    #[test]
    fn missing_trace_is_rejected() {
        assert!(check_cancellation(None).is_err());
        let c = small_spec(2);
        let k = QuadraticProblem::new(c).unwrap().constants().unwrap();
        assert!(check_sensitivity(None, &k).is_err());
    }

    #[test]
    fn argument_floors() {
        let spec = small_spec(4);
        assert!(check_sampling_variance(&spec, 2, 99, 0).is_err());
        let cfg = RunConfig {
            rounds: 10,
            machines: 4,
            participants: 2,
            ..RunConfig::default()
        };
        assert!(check_error_growth(&spec, &cfg, 29).is_err());
        assert!(run_check("nope").is_err());
    }

    #[test]
    fn full_participation_removes_heterogeneity() {
        let base = QuadraticSpec {
            machines: 6,
            ..small_spec(6)
        };
        let flat = QuadraticSpec {
            heterogeneity: 0.0,
            ..base.clone()
        };
        let a = check_sampling_variance(&base, 6, 300, 9).unwrap();
        let b = check_sampling_variance(&flat, 6, 300, 9).unwrap();
        assert_relative_eq!(a[0].statistic, b[0].statistic, max_relative = 1e-9);
        assert_relative_eq!(a[0].bound, b[0].bound, max_relative = 1e-12);
    }

    #[test]
    fn homogeneous_bound_is_sigma_squared_over_m() {
        let spec = QuadraticSpec {
            heterogeneity: 0.0,
            ..small_spec(8)
        };
        let sigma = spec.sample_noise;
        for m in [1, 3, 8] {
            let r = check_sampling_variance(&spec, m, 500, 2).unwrap();
            assert_relative_eq!(r[0].bound, sigma * sigma / m as f64, max_relative = 1e-12);
            assert!(r[0].passed);
        }
    }

    #[test]
    fn deterministic_gradients_have_no_error() {
        let spec = QuadraticSpec {
            sample_noise: 0.0,
            heterogeneity: 0.0,
            ..small_spec(5)
        };
        let cfg = RunConfig {
            rounds: 40,
            machines: 5,
            participants: 2,
            noise: false,
            ..RunConfig::default()
        };
        for r in check_error_growth(&spec, &cfg, 30).unwrap() {
            assert!(r.statistic < 1e-20, "{}", r.line());
            assert!(r.bound < 1e-20);
        }
    }

    #[test]
    fn slope_of_a_power_law() {
        let xs = [10.0, 100.0, 1000.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert_relative_eq!(loglog_slope(&xs, &ys), -0.5, max_relative = 1e-12);
    }

    #[test]
    fn quadrature_matches_closed_form() {
        let q = renyi_by_quadrature(2.0, 1.0, 1.0);
        assert_relative_eq!(q, 1.0, max_relative = 1e-8);
    }

    #[test]
    fn band_relation() {
        let r = CheckReport::new("x", -1.4, Relation::WithinFactor3, -0.5, 0.0, 1);
        assert!(r.passed);
        let r = CheckReport::new("x", -1.6, Relation::WithinFactor3, -0.5, 0.0, 1);
        assert!(!r.passed);
        let r = CheckReport::new("x", f64::NAN, Relation::AtMost, 1.0, 0.0, 1);
        assert!(!r.passed);
    }

    #[test]
    fn report_csv() {
        let mut buf = Vec::new();
        let r = CheckReport::identity("cost", 0.0, 0.0, 1);
        write_reports(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, format!("{REPORT_HEADER}\ncost,true,0,<=,0,0,1\n"));
    }
}
