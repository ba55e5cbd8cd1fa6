//! Configuration files, dataset ingestion, metric emission, single runs and
//! parameter sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{invalid, Error, Result};
use crate::fedcore::{
    run, stream_rng, Algorithm, MetricsRow, Problem, RunConfig, RunOutput, StepSize, Stream,
};
use crate::numkit::Ball;
use crate::objectives::{
    derive_constants, LogisticRegression, MachineDataset, ProblemSpec, QuadraticSpec, Sample,
};
use crate::privacy::zcdp_to_dp;

pub const METRICS_HEADER: &str =
    "round,train_loss,test_acc,excess_loss,eps_err_sq,rho_spent_max,grad_evals,wall_ms";

/// Raw pixel columns per MNIST row.
pub const MNIST_PIXELS: usize = 784;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Logistic,
    Quadratic,
}

impl ObjectiveKind {
    fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Logistic => "logistic",
            ObjectiveKind::Quadratic => "quadratic",
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub objective: ObjectiveKind,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Samples per machine; defaults to all rows split evenly (logistic) or
    /// `rounds` (quadratic).
    pub per_machine: Option<usize>,
    /// Whether `rounds` was left to default to a single pass over the data.
    pub rounds_auto: bool,
    /// Ball radius; defaults to 0.05 (logistic) or the quadratic spec's.
    pub radius: Option<f64>,
    pub num_classes: usize,
    pub quadratic: QuadraticSpec,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            objective: ObjectiveKind::Quadratic,
            train_path: None,
            test_path: None,
            per_machine: None,
            rounds_auto: false,
            radius: None,
            num_classes: 10,
            quadratic: QuadraticSpec::default(),
            out: None,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "algorithm",
    "objective",
    "rounds",
    "machines",
    "participants",
    "rho",
    "delta",
    "eta",
    "seed",
    "noise",
    "trace",
    "report_every",
    "cap_by_data",
    "wall_clock",
    "train_path",
    "test_path",
    "per_machine",
    "radius",
    "num_classes",
    "dim",
    "smoothness",
    "sample_noise",
    "heterogeneity",
    "curvature_jitter",
    "optimum_offset",
    "out",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true/false, got `{value}`"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let run = &mut self.run;
        match key {
            "algorithm" => run.algorithm = value.parse()?,
            "objective" => {
                self.objective = match ProblemSpec::family(value)? {
                    "logistic" => ObjectiveKind::Logistic,
                    _ => ObjectiveKind::Quadratic,
                }
            }
            "rounds" => {
                self.rounds_auto = value == "auto";
                run.rounds = if self.rounds_auto {
                    RunConfig::default().rounds
                } else {
                    parse_num(key, value)?
                };
            }
            "machines" => {
                run.machines = parse_num(key, value)?;
                self.quadratic.machines = run.machines;
            }
            "participants" => run.participants = parse_num(key, value)?,
            "rho" => run.rho = parse_num(key, value)?,
            "delta" => run.delta = parse_num(key, value)?,
            "eta" => {
                run.step = if value == "auto" {
                    StepSize::Auto
                } else {
                    StepSize::Fixed(parse_num(key, value)?)
                }
            }
            "seed" => run.seed = parse_num(key, value)?,
            "noise" => run.noise = parse_bool(key, value)?,
            "trace" => run.trace = parse_bool(key, value)?,
            "report_every" => run.report_every = parse_num(key, value)?,
            "cap_by_data" => run.cap_by_data = parse_bool(key, value)?,
            "wall_clock" => run.wall_clock = parse_bool(key, value)?,
            "train_path" => self.train_path = opt_path(value),
            "test_path" => self.test_path = opt_path(value),
            "per_machine" => {
                self.per_machine = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "radius" => {
                self.radius = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "num_classes" => self.num_classes = parse_num(key, value)?,
            "dim" => self.quadratic.dim = parse_num(key, value)?,
            "smoothness" => self.quadratic.smoothness = parse_num(key, value)?,
            "sample_noise" => self.quadratic.sample_noise = parse_num(key, value)?,
            "heterogeneity" => self.quadratic.heterogeneity = parse_num(key, value)?,
            "curvature_jitter" => self.quadratic.curvature_jitter = parse_num(key, value)?,
            "optimum_offset" => self.quadratic.optimum_offset = parse_num(key, value)?,
            "out" => self.out = opt_path(value),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses the flat `key = value` format; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if seen.insert(key.to_string(), n + 1).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            config
                .set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        // single-pass experiments never reuse a sample
        if config.objective == ObjectiveKind::Logistic && !seen.contains_key("cap_by_data") {
            config.run.cap_by_data = true;
        }
        if config.objective == ObjectiveKind::Logistic && !seen.contains_key("rounds") {
            config.rounds_auto = true;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Serializes every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let r = &self.run;
        let q = &self.quadratic;
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into())
        };
        let auto = |v: Option<String>| v.unwrap_or_else(|| "auto".into());
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("algorithm", r.algorithm.name().into());
        put("objective", self.objective.name().into());
        put(
            "rounds",
            if self.rounds_auto {
                "auto".into()
            } else {
                r.rounds.to_string()
            },
        );
        put("machines", r.machines.to_string());
        put("participants", r.participants.to_string());
        put("rho", r.rho.to_string());
        put("delta", r.delta.to_string());
        put(
            "eta",
            match r.step {
                StepSize::Auto => "auto".into(),
                StepSize::Fixed(e) => e.to_string(),
            },
        );
        put("seed", r.seed.to_string());
        put("noise", r.noise.to_string());
        put("trace", r.trace.to_string());
        put("report_every", r.report_every.to_string());
        put("cap_by_data", r.cap_by_data.to_string());
        put("wall_clock", r.wall_clock.to_string());
        put("train_path", path(&self.train_path));
        put("test_path", path(&self.test_path));
        put("per_machine", auto(self.per_machine.map(|v| v.to_string())));
        put("radius", auto(self.radius.map(|v| v.to_string())));
        put("num_classes", self.num_classes.to_string());
        put("dim", q.dim.to_string());
        put("smoothness", q.smoothness.to_string());
        put("sample_noise", q.sample_noise.to_string());
        put("heterogeneity", q.heterogeneity.to_string());
        put("curvature_jitter", q.curvature_jitter.to_string());
        put("optimum_offset", q.optimum_offset.to_string());
        put("out", path(&self.out));
        s
    }
}

/// Reads `label,p1,...,p784` rows with pixels in `[0, 1]`, appending the bias.
pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| {
        Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut samples = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let label_text = cols.next().unwrap_or("").trim();
        let label: usize = label_text
            .parse()
            .map_err(|_| parse_err(lineno, format!("label `{label_text}` is not an integer")))?;
        let mut raw = Vec::with_capacity(MNIST_PIXELS + 1);
        for (j, c) in cols.enumerate() {
            let v: f64 = c
                .trim()
                .parse()
                .map_err(|_| parse_err(lineno, format!("column {}: `{c}` is not a number", j + 2)))?;
            raw.push(v);
        }
        if raw.len() != MNIST_PIXELS {
            return Err(parse_err(
                lineno,
                format!("expected {MNIST_PIXELS} feature columns, found {}", raw.len()),
            ));
        }
        samples.push(Sample::with_bias(raw, label).map_err(|e| parse_err(lineno, e.to_string()))?);
    }
    Ok(samples)
}

/// Shuffles with the data stream of `seed` and cuts `machines` contiguous
/// blocks of `per_machine` samples.
pub fn partition<S: Clone>(
    samples: &[S],
    machines: usize,
    per_machine: usize,
    seed: u64,
) -> Result<Vec<MachineDataset<S>>> {
    if machines == 0 || per_machine == 0 {
        return Err(invalid("need at least one machine and one sample per machine"));
    }
    let need = machines * per_machine;
    if samples.len() < need {
        return Err(Error::Sizing(format!(
            "{} rows cannot fill {machines} machines x {per_machine} samples",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut stream_rng(seed, Stream::DataShuffle));
    Ok(order[..need]
        .chunks(per_machine)
        .map(|c| MachineDataset::new(c.iter().map(|&k| samples[k].clone()).collect::<Vec<_>>()))
        .collect())
}

/// `load_samples` followed by `partition`; `per_machine = None` splits every row.
pub fn load_dataset(
    path: &Path,
    machines: usize,
    per_machine: Option<usize>,
    seed: u64,
) -> Result<Vec<MachineDataset<Sample>>> {
    let samples = load_samples(path)?;
    if machines == 0 {
        return Err(invalid("need at least one machine"));
    }
    let per = per_machine.unwrap_or(samples.len() / machines);
    partition(&samples, machines, per, seed)
}

/// Final state of one run.
#[derive(Debug, Clone)]
pub struct Summary {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub rounds: usize,
    pub test_acc: Option<f64>,
    pub excess_loss: Option<f64>,
    pub rho_spent_max: f64,
    pub epsilon: f64,
    pub grad_evals: u64,
    pub wall_ms: f64,
}

impl Summary {
    fn from_output(config: &RunConfig, out: &RunOutput) -> Self {
        let last = out.metrics.last();
        let rho = out.ledger.max_spent();
        let epsilon = if rho.is_finite() {
            zcdp_to_dp(rho, config.delta).unwrap_or(f64::INFINITY)
        } else {
            f64::INFINITY
        };
        Self {
            algorithm: config.algorithm,
            seed: config.seed,
            rounds: config.rounds,
            test_acc: last.and_then(|r| r.test_acc),
            excess_loss: last.and_then(|r| r.excess_loss),
            rho_spent_max: rho,
            epsilon,
            grad_evals: out.grad_evals,
            wall_ms: out.wall_ms,
        }
    }

    pub fn line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
        format!(
            "{} seed={} T={} test_acc={} excess_loss={} rho_max={:.4} eps={:.4} grad_evals={} time={:.0}ms",
            self.algorithm,
            self.seed,
            self.rounds,
            opt(self.test_acc),
            opt(self.excess_loss),
            self.rho_spent_max,
            self.epsilon,
            self.grad_evals,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub output: RunOutput,
    pub summary: Summary,
}

/// Builds the problem, runs it, and writes the metrics CSV when `out` is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    match config.objective {
        ObjectiveKind::Quadratic => {
            let mut spec = config.quadratic.clone();
            spec.machines = config.run.machines;
            if let Some(r) = config.radius {
                spec.radius = r;
            }
            let per = config.per_machine.unwrap_or(config.run.rounds);
            let problem = Problem::quadratic(spec, per, config.run.seed)?;
            finish_experiment(&problem, config.clone())
        }
        ObjectiveKind::Logistic => {
            let problem = logistic_problem(config)?;
            run_logistic(&problem, config)
        }
    }
}

/// Runs a prepared softmax-regression federation; `rounds = auto` becomes
/// one pass over the partitioned data.
pub fn run_logistic(problem: &Problem<LogisticRegression>, config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let mut config = config.clone();
    if config.rounds_auto {
        let n: usize = problem.datasets.iter().map(|d| d.len()).sum();
        config.run.rounds = (n / config.run.participants.max(1)).max(1);
    }
    finish_experiment(problem, config)
}

fn finish_experiment<O: crate::objectives::Objective>(
    problem: &Problem<O>,
    config: ExperimentConfig,
) -> Result<ExperimentOutcome> {
    let output = run(problem, &config.run)?;
    if let Some(path) = &config.out {
        let mut file = io::BufWriter::new(fs::File::create(path)?);
        write_metrics(&mut file, &output.metrics)?;
        file.flush()?;
    }
    let summary = Summary::from_output(&config.run, &output);
    Ok(ExperimentOutcome {
        config,
        output,
        summary,
    })
}

/// MNIST-style softmax regression federation from the configured CSV files.
pub fn logistic_problem(config: &ExperimentConfig) -> Result<Problem<LogisticRegression>> {
    let train_path = config
        .train_path
        .as_ref()
        .ok_or_else(|| Error::Config("logistic objective needs `train_path`".into()))?;
    let train = load_samples(train_path)?;
    let test = match &config.test_path {
        Some(p) => load_samples(p)?,
        None => Vec::new(),
    };
    logistic_federation(&train, test, config)
}

/// Partitions `train` across the configured machines (shuffled by the run
/// seed) and attaches `test` for accuracy reporting.
pub fn logistic_federation(
    train: &[Sample],
    test: impl Into<Arc<[Sample]>>,
    config: &ExperimentConfig,
) -> Result<Problem<LogisticRegression>> {
    let machines = config.run.machines;
    if machines == 0 {
        return Err(invalid("need at least one machine"));
    }
    let per = config.per_machine.unwrap_or(train.len() / machines);
    let datasets = partition(train, machines, per, config.run.seed)?;
    let feature_dim = MNIST_PIXELS + 1;
    let model = LogisticRegression::new(config.num_classes, feature_dim)?.with_test_set(test)?;
    let radius = config.radius.unwrap_or(0.05);
    let domain = Ball::centered(config.num_classes * feature_dim, radius)?;
    let constants = derive_constants(&ProblemSpec::Logistic {
        num_classes: config.num_classes,
        feature_dim,
        diameter: domain.diameter(),
    })?;
    Problem::new(model, domain, constants, datasets)
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the fixed-schema metrics table.
pub fn write_metrics<W: Write>(w: &mut W, rows: &[MetricsRow]) -> io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.round,
            cell(r.train_loss),
            cell(r.test_acc),
            cell(r.excess_loss),
            cell(r.eps_err_sq),
            r.rho_spent_max,
            r.grad_evals,
            cell(r.wall_ms)
        )?;
    }
    Ok(())
}

/// Ordered `key = v1, v2, ...` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub axes: Vec<(String, Vec<String>)>,
}

impl Grid {
    pub fn parse(text: &str) -> Result<Self> {
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, values) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid line {}: expected `key = v1, v2`", n + 1)))?;
            let key = key.trim().to_string();
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("grid line {}: unknown key `{key}`", n + 1)));
            }
            if axes.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config(format!("grid line {}: duplicate key `{key}`", n + 1)));
            }
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(Error::Config(format!("grid line {}: `{key}` has no values", n + 1)));
            }
            axes.push((key, values));
        }
        if axes.is_empty() {
            return Err(Error::Config("grid is empty".into()));
        }
        Ok(Self { axes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Cartesian product; the first axis varies slowest.
    pub fn points(&self) -> Vec<Vec<(String, String)>> {
        let mut points = vec![Vec::new()];
        for (key, values) in &self.axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((key.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub assignment: Vec<(String, String)>,
    pub outcome: ExperimentOutcome,
}

/// Runs every grid point in order. Per-run metrics files are not written.
pub fn sweep(base: &ExperimentConfig, grid: &Grid) -> Result<Vec<SweepPoint>> {
    grid.points()
        .into_iter()
        .map(|assignment| {
            let mut config = base.clone();
            for (k, v) in &assignment {
                config.set(k, v)?;
            }
            config.out = None;
            let outcome = run_experiment(&config)?;
            Ok(SweepPoint {
                assignment,
                outcome,
            })
        })
        .collect()
}

/// One summary row per grid point, preceded by the grid keys.
const SWEEP_COLUMNS: [&str; 8] = [
    "algorithm",
    "seed",
    "rounds",
    "test_acc",
    "excess_loss",
    "rho_spent_max",
    "epsilon",
    "grad_evals",
];

pub fn write_sweep<W: Write>(w: &mut W, grid: &Grid, points: &[SweepPoint]) -> io::Result<()> {
    // Swept keys that are also summary columns appear once, with the resolved value.
    let own = |k: &str| !SWEEP_COLUMNS.contains(&k);
    let mut header: Vec<&str> = grid.axes.iter().map(|(k, _)| k.as_str()).filter(|k| own(k)).collect();
    header.extend(SWEEP_COLUMNS);
    writeln!(w, "{}", header.join(","))?;
    for p in points {
        let s = &p.outcome.summary;
        let mut row: Vec<String> = p
            .assignment
            .iter()
            .filter(|(k, _)| own(k))
            .map(|(_, v)| v.clone())
            .collect();
        row.extend([
            s.algorithm.to_string(),
            s.seed.to_string(),
            s.rounds.to_string(),
            cell(s.test_acc),
            cell(s.excess_loss),
            s.rho_spent_max.to_string(),
            s.epsilon.to_string(),
            s.grad_evals.to_string(),
        ]);
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
