//! Simulation engine: parameter server and machine state machines for the
//! noise-cancelling partial-participation protocol, the trusted-server
//! variant, a noisy minibatch-SGD baseline and the delayed-update variant.
//!
//! Randomness is split into named streams derived from one master seed so
//! that variants run with the same seed see the same participant sets and the
//! same per-machine noise sequences.

use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::numkit::{Ball, Vector};
use crate::objectives::{
    MachineDataset, ObjectiveConstants, Objective, QuadSample, QuadraticProblem, QuadraticSpec,
};
use crate::privacy::{
    calibrate_trusted, calibrate_untrusted, step_size_trusted, step_size_untrusted, BudgetLedger,
};

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Participation,
    ServerNoise,
    DataShuffle,
    Verification,
    MachineNoise(usize),
    SyntheticData(usize),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Participation => 0,
            Stream::ServerNoise => 1,
            Stream::DataShuffle => 2,
            Stream::Verification => 3,
            Stream::MachineNoise(i) => (1 << 32) | i as u64,
            Stream::SyntheticData(i) => (2 << 32) | i as u64,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Mu2Partial,
    Mu2Trusted,
    NoisySgd,
    Mu2Delayed,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Mu2Partial,
        Algorithm::Mu2Trusted,
        Algorithm::NoisySgd,
        Algorithm::Mu2Delayed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Mu2Partial => "mu2-partial",
            Algorithm::Mu2Trusted => "mu2-trusted",
            Algorithm::NoisySgd => "noisy-sgd",
            Algorithm::Mu2Delayed => "mu2-delayed",
        }
    }

    /// Gradient evaluations spent per participating machine per round.
    pub fn evals_per_sample(self) -> u64 {
        match self {
            Algorithm::NoisySgd => 1,
            _ => 2,
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Unsupported(format!("algorithm `{s}`")))
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    /// Use the algorithm's prescribed formula.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub machines: usize,
    pub participants: usize,
    pub rho: f64,
    pub delta: f64,
    pub step: StepSize,
    pub seed: u64,
    /// `false` switches every privacy noise draw off (verification mode).
    pub noise: bool,
    pub trace: bool,
    /// Metrics row cadence; `0` means `ceil(T / 50)`.
    pub report_every: usize,
    /// Sample participants only among machines that still hold unused data,
    /// and let a round run short when fewer than `m` remain.
    pub cap_by_data: bool,
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Mu2Partial,
            rounds: 100,
            machines: 10,
            participants: 5,
            rho: 8.0,
            delta: crate::privacy::PrivacyBudget::DEFAULT_DELTA,
            step: StepSize::Auto,
            seed: 0,
            noise: true,
            trace: false,
            report_every: 0,
            cap_by_data: false,
            wall_clock: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(invalid("rounds must be >= 1"));
        }
        if self.participants == 0 || self.participants > self.machines {
            return Err(invalid(format!(
                "participants per round must satisfy 1 <= m <= M, got m = {}, M = {}",
                self.participants, self.machines
            )));
        }
        if self.noise && !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(invalid(format!("rho must be finite and > 0, got {}", self.rho)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if let StepSize::Fixed(eta) = self.step {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(invalid(format!("step size must be > 0, got {eta}")));
            }
        }
        Ok(())
    }

    pub fn report_interval(&self) -> usize {
        if self.report_every > 0 {
            self.report_every
        } else {
            self.rounds.div_ceil(50)
        }
    }
}

/// Objective, feasible set, constants and per-machine data for one federation.
#[derive(Debug, Clone)]
pub struct Problem<O: Objective> {
    pub objective: O,
    pub domain: Ball,
    pub constants: ObjectiveConstants,
    pub datasets: Vec<MachineDataset<O::Sample>>,
    pub x0: Vector,
}

impl<O: Objective> Problem<O> {
    pub fn new(
        objective: O,
        domain: Ball,
        constants: ObjectiveConstants,
        datasets: Vec<MachineDataset<O::Sample>>,
    ) -> Result<Self> {
        if domain.dim() != objective.dim() {
            return Err(invalid("domain and objective dimensions differ"));
        }
        let x0 = domain.center().clone();
        Ok(Self {
            objective,
            domain,
            constants,
            datasets,
            x0,
        })
    }

    pub fn machines(&self) -> usize {
        self.datasets.len()
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }
}

impl Problem<QuadraticProblem> {
    /// Synthetic federation with `samples_per_machine` i.i.d. draws per machine.
    pub fn quadratic(spec: QuadraticSpec, samples_per_machine: usize, seed: u64) -> Result<Self> {
        let objective = QuadraticProblem::new(spec)?;
        let constants = objective.constants()?;
        let datasets = (0..objective.spec().machines)
            .map(|i| {
                let mut rng = stream_rng(seed, Stream::SyntheticData(i));
                let samples: Vec<QuadSample> = (0..samples_per_machine)
                    .map(|_| objective.draw_sample(&mut rng))
                    .collect();
                MachineDataset::new(samples)
            })
            .collect();
        let domain = objective.domain().clone();
        Self::new(objective, domain, constants, datasets)
    }
}

/// Uniformly random `m`-subset of `0..machines`, in ascending order.
pub fn sample_participants<R: Rng + ?Sized>(machines: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m == 0 || m > machines {
        return Err(invalid(format!("cannot choose {m} of {machines} machines")));
    }
    let mut chosen = index::sample(rng, machines, m).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// A machine's message for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundCorrection {
    pub machine: usize,
    /// Raw correction `s_{t,i}`.
    pub s: Vector,
    /// Privatized correction; `None` until privatized.
    pub s_tilde: Option<Vector>,
    /// Fresh noise `y_{t,i}` drawn this round.
    pub fresh_noise: Option<Vector>,
    /// Loss of this round's sample at the current query point.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct MachineState<S> {
    pub id: usize,
    /// Last noise vector this machine injected (`Y_i`).
    pub retained_noise: Vector,
    pub n_participations: usize,
    pub participation_rounds: Vec<usize>,
    pub dataset: MachineDataset<S>,
    pub grad_evals: u64,
    noise_rng: ChaCha8Rng,
}

impl<S: Clone> MachineState<S> {
    pub fn new(id: usize, dim: usize, dataset: MachineDataset<S>, seed: u64) -> Self {
        Self {
            id,
            retained_noise: Vector::zeros(dim),
            n_participations: 0,
            participation_rounds: Vec::new(),
            dataset,
            grad_evals: 0,
            noise_rng: stream_rng(seed, Stream::MachineNoise(id)),
        }
    }

    fn take_sample(&mut self) -> Result<S> {
        self.dataset
            .next_sample()
            .cloned()
            .ok_or(Error::DataExhausted { machine: self.id })
    }

    fn mark_participation(&mut self, t: usize) {
        self.n_participations += 1;
        self.participation_rounds.push(t);
    }

    /// `s = t grad f(x_t; z) - (t - 1) grad f(x_{t-1}; z)` on a fresh sample.
    pub fn storm_correction<O: Objective<Sample = S>>(
        &mut self,
        objective: &O,
        x_t: &[f64],
        x_prev: &[f64],
        t: usize,
    ) -> Result<RoundCorrection> {
        let z = self.take_sample()?;
        self.mark_participation(t);
        let s = storm_difference(objective, self.id, &z, x_t, t as f64, x_prev, (t - 1) as f64);
        self.grad_evals += 2;
        Ok(RoundCorrection {
            machine: self.id,
            s,
            s_tilde: None,
            fresh_noise: None,
            loss: objective.loss(self.id, x_t, &z),
        })
    }

    /// `s~ = s + y - Y_i` with `y ~ N(0, sigma_sq I)`; then `Y_i := y`.
    pub fn privatize_correction(&mut self, c: &mut RoundCorrection, sigma_sq: f64) -> Result<()> {
        if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return Err(invalid(format!("noise variance must be > 0, got {sigma_sq}")));
        }
        let sd = sigma_sq.sqrt();
        let y = Vector::from_raw(
            (0..c.s.dim())
                .map(|_| sd * self.noise_rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        self.release(c, y);
        Ok(())
    }

    /// Zero-variance limit used for verification runs: `s~ = s`.
    pub fn privatize_noiseless(&mut self, c: &mut RoundCorrection) {
        let y = Vector::zeros(c.s.dim());
        self.release(c, y);
    }

    fn release(&mut self, c: &mut RoundCorrection, y: Vector) {
        let mut s_tilde = c.s.clone();
        s_tilde.axpy(1.0, &y);
        s_tilde.axpy(-1.0, &self.retained_noise);
        self.retained_noise = y.clone();
        c.s_tilde = Some(s_tilde);
        c.fresh_noise = Some(y);
    }

    fn draw_gaussian(&mut self, dim: usize, sigma_sq: f64) -> Vector {
        let sd = sigma_sq.sqrt();
        Vector::from_raw(
            (0..dim)
                .map(|_| sd * self.noise_rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    }
}

/// `a grad f(x; z) - b grad f(y; z)` for one machine.
pub(crate) fn storm_difference<O: Objective>(
    objective: &O,
    machine: usize,
    z: &O::Sample,
    x: &[f64],
    a: f64,
    y: &[f64],
    b: f64,
) -> Vector {
    let mut s = objective.gradient(machine, x, z);
    let g_prev = objective.gradient(machine, y, z);
    s.scale(a);
    s.axpy(-b, &g_prev);
    s
}

/// Parameter-server iterates with weights `alpha_t = t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// Iterate `w_t`.
    pub w: Vector,
    /// Query point `x_t`.
    pub x: Vector,
    /// Previous query point `x_{t-1}` (equal to `x_1` before the first round).
    pub x_prev: Vector,
    /// Noisy weighted momentum `q~_{t-1}`.
    pub q_tilde: Vector,
    /// Number of completed rounds; the next round is `t + 1`.
    pub t: usize,
    pub eta: f64,
    participants: usize,
    allow_short_rounds: bool,
}

/// `alpha_{1:t} = t (t + 1) / 2`
pub fn alpha_sum(t: usize) -> f64 {
    let t = t as f64;
    t * (t + 1.0) / 2.0
}

impl ServerState {
    pub fn new(x0: Vector, eta: f64, participants: usize) -> Self {
        let d = x0.dim();
        Self {
            w: x0.clone(),
            x_prev: x0.clone(),
            x: x0,
            q_tilde: Vector::zeros(d),
            t: 0,
            eta,
            participants,
            allow_short_rounds: false,
        }
    }

    pub fn allow_short_rounds(mut self, allow: bool) -> Self {
        self.allow_short_rounds = allow;
        self
    }

    /// Averages the participants' messages with weight `1 / m`, folds them
    /// into `q~` and takes one step.
    pub fn server_round(&mut self, corrections: &[&Vector], domain: &Ball) -> Result<()> {
        let n = corrections.len();
        if n != self.participants && !(self.allow_short_rounds && n <= self.participants) {
            return Err(Error::Protocol(format!(
                "round {} received {n} corrections, expected {}",
                self.t + 1,
                self.participants
            )));
        }
        let inv_m = 1.0 / self.participants as f64;
        for c in corrections {
            if c.dim() != self.q_tilde.dim() {
                return Err(Error::Protocol("correction dimension mismatch".into()));
            }
            self.q_tilde.axpy(inv_m, c);
        }
        let estimate = self.q_tilde.clone();
        self.step(&estimate, domain);
        Ok(())
    }

    /// `w <- Proj(w - eta estimate)`, then the weighted-average query update.
    pub fn step(&mut self, estimate: &[f64], domain: &Ball) {
        self.w.axpy(-self.eta, estimate);
        domain.project_in_place(&mut self.w);
        let next = self.t + 2;
        let weight = next as f64 / alpha_sum(next);
        let mut x_next = self.x.scaled(1.0 - weight);
        x_next.axpy(weight, &self.w);
        self.x_prev = std::mem::replace(&mut self.x, x_next);
        self.t += 1;
    }
}

/// Per-round record for verification.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub t: usize,
    pub participants: Vec<usize>,
    pub x: Vector,
    pub x_prev: Vector,
    pub raw: Vec<Vector>,
    pub fresh_noise: Vec<Vector>,
    pub released: Vec<Vector>,
    pub variances: Vec<f64>,
    /// Retained noise `Y_{t,i}` of every machine after the round.
    pub retained: Vec<Vector>,
    pub q_tilde: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub machines: usize,
    pub participants: usize,
    pub rounds: Vec<RoundTrace>,
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub train_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub excess_loss: Option<f64>,
    pub eps_err_sq: Option<f64>,
    pub rho_spent_max: f64,
    pub grad_evals: u64,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub algorithm: Algorithm,
    /// Final query point (last iterate for the SGD baseline).
    pub x_out: Vector,
    pub eta: f64,
    pub metrics: Vec<MetricsRow>,
    pub ledger: BudgetLedger,
    pub trace: Option<RunTrace>,
    pub grad_evals: u64,
    pub participation: Vec<Vec<usize>>,
    /// `||eps_t||^2` per round when the objective exposes its exact gradient.
    pub error_sq: Vec<f64>,
    pub max_correction_norm: f64,
    /// `max_t alpha_{t-1} ||x_t - x_{t-1}||`
    pub max_scaled_query_step: f64,
    /// Samples consumed per machine.
    pub cursors: Vec<usize>,
    pub wall_ms: f64,
}

struct Recorder {
    every: usize,
    rounds: usize,
    wall_clock: bool,
    start: Instant,
    loss_sum: f64,
    loss_count: usize,
    rows: Vec<MetricsRow>,
    error_sq: Vec<f64>,
}

impl Recorder {
    fn new(config: &RunConfig) -> Self {
        Self {
            every: config.report_interval(),
            rounds: config.rounds,
            wall_clock: config.wall_clock,
            start: Instant::now(),
            loss_sum: 0.0,
            loss_count: 0,
            rows: Vec::new(),
            error_sq: Vec::new(),
        }
    }

    fn add_loss(&mut self, loss: f64) {
        self.loss_sum += loss;
        self.loss_count += 1;
    }

    fn end_round<O: Objective>(
        &mut self,
        objective: &O,
        t: usize,
        point: &[f64],
        eps: Option<f64>,
        ledger: &BudgetLedger,
        grad_evals: u64,
    ) {
        if let Some(e) = eps {
            self.error_sq.push(e);
        }
        if !t.is_multiple_of(self.every) && t != self.rounds {
            return;
        }
        let eval = objective.evaluate(point);
        let train_loss = (self.loss_count > 0).then(|| self.loss_sum / self.loss_count as f64);
        self.loss_sum = 0.0;
        self.loss_count = 0;
        self.rows.push(MetricsRow {
            round: t,
            train_loss,
            test_acc: eval.test_acc,
            excess_loss: eval.excess_loss,
            eps_err_sq: eps,
            rho_spent_max: ledger.max_spent(),
            grad_evals,
            wall_ms: self.wall_clock.then(|| self.elapsed_ms()),
        });
    }

    fn elapsed_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }
}

struct Participation {
    rng: ChaCha8Rng,
    machines: usize,
    m: usize,
    cap_by_data: bool,
}

impl Participation {
    fn new(config: &RunConfig) -> Self {
        Self {
            rng: stream_rng(config.seed, Stream::Participation),
            machines: config.machines,
            m: config.participants,
            cap_by_data: config.cap_by_data,
        }
    }

    fn draw<S>(&mut self, machines: &[MachineState<S>]) -> Result<Vec<usize>> {
        if !self.cap_by_data {
            return sample_participants(self.machines, self.m, &mut self.rng);
        }
        let open: Vec<usize> = machines
            .iter()
            .filter(|mc| mc.dataset.remaining() > 0)
            .map(|mc| mc.id)
            .collect();
        if open.len() <= self.m {
            return Ok(open);
        }
        let mut picked: Vec<usize> = index::sample(&mut self.rng, open.len(), self.m)
            .into_iter()
            .map(|k| open[k])
            .collect();
        picked.sort_unstable();
        Ok(picked)
    }
}

fn check_problem<O: Objective>(problem: &Problem<O>, config: &RunConfig) -> Result<()> {
    config.validate()?;
    if problem.machines() != config.machines {
        return Err(invalid(format!(
            "config has M = {} machines but the problem provides {} datasets",
            config.machines,
            problem.machines()
        )));
    }
    if !config.cap_by_data {
        if let Some(short) = problem.datasets.iter().position(|d| d.len() < config.rounds) {
            return Err(Error::Sizing(format!(
                "machine {short} holds {} samples; {} rounds need up to {} (set cap_by_data for single-pass experiments)",
                problem.datasets[short].len(),
                config.rounds,
                config.rounds
            )));
        }
    }
    Ok(())
}

fn machines_for<O: Objective>(problem: &Problem<O>, seed: u64) -> Vec<MachineState<O::Sample>> {
    problem
        .datasets
        .iter()
        .enumerate()
        .map(|(i, d)| MachineState::new(i, problem.dim(), d.fresh(), seed))
        .collect()
}

fn error_sq<O: Objective>(objective: &O, q: &[f64], alpha: f64, x: &[f64]) -> Option<f64> {
    let g = objective.full_gradient(x)?;
    Some(
        q.iter()
            .zip(g.iter())
            .map(|(a, b)| (a - alpha * b).powi(2))
            .sum(),
    )
}

fn resolve_eta<O: Objective>(problem: &Problem<O>, config: &RunConfig) -> f64 {
    if let StepSize::Fixed(eta) = config.step {
        return eta;
    }
    let c = &problem.constants;
    let t = config.rounds as f64;
    let (m, mm, d) = (config.participants, config.machines, problem.dim());
    match (config.algorithm, config.noise) {
        (Algorithm::Mu2Partial, true) => step_size_untrusted(c, config.rounds, m, mm, d, config.rho),
        (Algorithm::Mu2Trusted, true) => step_size_trusted(c, config.rounds, m, d, config.rho),
        (Algorithm::Mu2Trusted, false) => 1.0 / (4.0 * c.l * t),
        (Algorithm::Mu2Partial | Algorithm::Mu2Delayed, _) => 1.0 / (8.0 * c.l * t),
        (Algorithm::NoisySgd, _) => {
            // constant projected-SGD step D / (G_eff sqrt(T)), where G_eff^2
            // bounds the second moment of the noisy averaged gradient
            let var = if config.noise {
                noisy_sgd_variance(problem, config)
            } else {
                0.0
            };
            let g_eff = (c.g * c.g + d as f64 * var / m as f64).sqrt();
            c.d / (g_eff * t.sqrt())
        }
    }
}

/// Per-release variance of the SGD baseline. Samples are never reused and the
/// noise draws are independent, so each sample influences exactly one
/// release with sensitivity `2G`.
pub fn noisy_sgd_variance<O: Objective>(problem: &Problem<O>, config: &RunConfig) -> f64 {
    let g = problem.constants.g;
    4.0 * g * g / (config.rho * config.rho)
}

/// Dispatches on `config.algorithm`.
pub fn run<O: Objective>(problem: &Problem<O>, config: &RunConfig) -> Result<RunOutput> {
    match config.algorithm {
        Algorithm::Mu2Partial => run_mu2_partial(problem, config),
        Algorithm::Mu2Trusted => run_mu2_trusted(problem, config),
        Algorithm::NoisySgd => run_noisy_sgd(problem, config),
        Algorithm::Mu2Delayed => run_mu2_delayed(problem, config),
    }
}

/// Untrusted server, partial participation, correlated noise that cancels in
/// the server's running sum.
pub fn run_mu2_partial<O: Objective>(problem: &Problem<O>, config: &RunConfig) -> Result<RunOutput> {
    check_problem(problem, config)?;
    let obj = &problem.objective;
    let d = problem.dim();
    let m = config.participants;
    let eta = resolve_eta(problem, config);
    let s_bound = problem.constants.s;

    let mut machines = machines_for(problem, config.seed);
    let mut server = ServerState::new(problem.x0.clone(), eta, m).allow_short_rounds(config.cap_by_data);
    let mut draw = Participation::new(config);
    let mut ledger = BudgetLedger::new(2.0 * s_bound, config.machines);
    let mut rec = Recorder::new(config);
    let mut trace = config.trace.then(|| RunTrace {
        machines: config.machines,
        participants: m,
        rounds: Vec::with_capacity(config.rounds),
    });
    let mut q_raw = Vector::zeros(d);
    let mut participation = Vec::with_capacity(config.rounds);
    let mut max_s: f64 = 0.0;
    let mut max_step: f64 = 0.0;

    for t in 1..=config.rounds {
        let chosen = draw.draw(&machines)?;
        let x_t = server.x.clone();
        let x_prev = server.x_prev.clone();
        max_step = max_step.max((t - 1) as f64 * x_t.distance(&x_prev));

        let mut corrections = Vec::with_capacity(chosen.len());
        let mut variances = Vec::with_capacity(chosen.len());
        for &i in &chosen {
            let mc = &mut machines[i];
            let mut c = mc.storm_correction(obj, &x_t, &x_prev, t)?;
            let norm = c.s.norm();
            if config.trace && norm > s_bound * (1.0 + 1e-9) {
                return Err(Error::Protocol(format!(
                    "round {t}: machine {i} correction norm {norm} exceeds S = {s_bound}"
                )));
            }
            max_s = max_s.max(norm);
            let variance = if config.noise {
                let v = calibrate_untrusted(s_bound, config.rounds, config.rho, mc.n_participations)?;
                mc.privatize_correction(&mut c, v)?;
                v
            } else {
                mc.privatize_noiseless(&mut c);
                0.0
            };
            ledger.record(i, variance);
            rec.add_loss(c.loss);
            variances.push(variance);
            corrections.push(c);
        }

        let released: Vec<&Vector> = corrections.iter().filter_map(|c| c.s_tilde.as_ref()).collect();
        server.server_round(&released, &problem.domain)?;
        for c in &corrections {
            q_raw.axpy(1.0 / m as f64, &c.s);
        }
        let eps = error_sq(obj, &q_raw, t as f64, &x_t);

        if let Some(tr) = trace.as_mut() {
            tr.rounds.push(RoundTrace {
                t,
                participants: chosen.clone(),
                x: x_t.clone(),
                x_prev: x_prev.clone(),
                raw: corrections.iter().map(|c| c.s.clone()).collect(),
                fresh_noise: corrections.iter().filter_map(|c| c.fresh_noise.clone()).collect(),
                released: corrections.iter().filter_map(|c| c.s_tilde.clone()).collect(),
                variances,
                retained: machines.iter().map(|mc| mc.retained_noise.clone()).collect(),
                q_tilde: server.q_tilde.clone(),
            });
        }
        participation.push(chosen);
        let evals = machines.iter().map(|mc| mc.grad_evals).sum();
        rec.end_round(obj, t, &server.x, eps, &ledger, evals);
    }

    Ok(finish(
        config, server.x, eta, rec, ledger, trace, &machines, participation, max_s, max_step,
    ))
}

/// Trusted server: raw corrections are aggregated centrally and a single
/// fresh Gaussian is added to the running estimate each round.
pub fn run_mu2_trusted<O: Objective>(problem: &Problem<O>, config: &RunConfig) -> Result<RunOutput> {
    check_problem(problem, config)?;
    let obj = &problem.objective;
    let d = problem.dim();
    let m = config.participants;
    let eta = resolve_eta(problem, config);
    let s_bound = problem.constants.s;
    let variance = if config.noise {
        calibrate_trusted(s_bound, config.rounds, config.rho, m)?
    } else {
        0.0
    };

    let mut machines = machines_for(problem, config.seed);
    let mut server = ServerState::new(problem.x0.clone(), eta, m).allow_short_rounds(config.cap_by_data);
    let mut server_rng = stream_rng(config.seed, Stream::ServerNoise);
    let mut draw = Participation::new(config);
    // every machine's data influences every released query point
    let mut ledger = BudgetLedger::new(2.0 * s_bound / m as f64, config.machines);
    let mut rec = Recorder::new(config);
    let mut trace = config.trace.then(|| RunTrace {
        machines: config.machines,
        participants: m,
        rounds: Vec::with_capacity(config.rounds),
    });
    let mut q = Vector::zeros(d);
    let mut participation = Vec::with_capacity(config.rounds);
    let mut max_s: f64 = 0.0;
    let mut max_step: f64 = 0.0;

    for t in 1..=config.rounds {
        let chosen = draw.draw(&machines)?;
        let x_t = server.x.clone();
        let x_prev = server.x_prev.clone();
        max_step = max_step.max((t - 1) as f64 * x_t.distance(&x_prev));

        let mut corrections = Vec::with_capacity(chosen.len());
        for &i in &chosen {
            let c = machines[i].storm_correction(obj, &x_t, &x_prev, t)?;
            max_s = max_s.max(c.s.norm());
            rec.add_loss(c.loss);
            corrections.push(c);
        }
        for c in &corrections {
            q.axpy(1.0 / m as f64, &c.s);
        }
        let mut q_tilde = q.clone();
        if config.noise {
            let sd = variance.sqrt();
            for v in q_tilde.iter_mut() {
                *v += sd * server_rng.sample::<f64, _>(StandardNormal);
            }
        }
        for i in 0..config.machines {
            ledger.record(i, variance);
        }
        server.q_tilde = q_tilde;
        let estimate = server.q_tilde.clone();
        server.step(&estimate, &problem.domain);
        let eps = error_sq(obj, &q, t as f64, &x_t);

        if let Some(tr) = trace.as_mut() {
            tr.rounds.push(RoundTrace {
                t,
                participants: chosen.clone(),
                x: x_t.clone(),
                x_prev: x_prev.clone(),
                raw: corrections.iter().map(|c| c.s.clone()).collect(),
                fresh_noise: Vec::new(),
                released: Vec::new(),
                variances: vec![variance],
                retained: Vec::new(),
                q_tilde: server.q_tilde.clone(),
            });
        }
        participation.push(chosen);
        let evals = machines.iter().map(|mc| mc.grad_evals).sum();
        rec.end_round(obj, t, &server.x, eps, &ledger, evals);
    }

    Ok(finish(
        config, server.x, eta, rec, ledger, trace, &machines, participation, max_s, max_step,
    ))
}

/// Projected minibatch SGD where every participant perturbs its own gradient.
pub fn run_noisy_sgd<O: Objective>(problem: &Problem<O>, config: &RunConfig) -> Result<RunOutput> {
    check_problem(problem, config)?;
    let obj = &problem.objective;
    let d = problem.dim();
    let m = config.participants;
    let eta = resolve_eta(problem, config);
    let variance = if config.noise {
        noisy_sgd_variance(problem, config)
    } else {
        0.0
    };

    let mut machines = machines_for(problem, config.seed);
    let mut draw = Participation::new(config);
    let mut ledger = BudgetLedger::new(2.0 * problem.constants.g, config.machines);
    let mut rec = Recorder::new(config);
    let mut w = problem.x0.clone();
    let mut participation = Vec::with_capacity(config.rounds);
    let mut max_g: f64 = 0.0;

    for t in 1..=config.rounds {
        let chosen = draw.draw(&machines)?;
        let mut avg = Vector::zeros(d);
        let mut raw_avg = Vector::zeros(d);
        for &i in &chosen {
            let mc = &mut machines[i];
            let z = mc.take_sample()?;
            mc.mark_participation(t);
            let mut g = obj.gradient(i, &w, &z);
            mc.grad_evals += 1;
            rec.add_loss(obj.loss(i, &w, &z));
            max_g = max_g.max(g.norm());
            raw_avg.axpy(1.0 / m as f64, &g);
            if config.noise {
                let y = mc.draw_gaussian(d, variance);
                g.axpy(1.0, &y);
            }
            ledger.record_disjoint(i, variance);
            avg.axpy(1.0 / m as f64, &g);
        }
        let eps = obj
            .full_gradient(&w)
            .map(|full| raw_avg.distance(&full).powi(2));
        w.axpy(-eta, &avg);
        problem.domain.project_in_place(&mut w);
        participation.push(chosen);
        let evals = machines.iter().map(|mc| mc.grad_evals).sum();
        rec.end_round(obj, t, &w, eps, &ledger, evals);
    }

    Ok(finish(
        config, w, eta, rec, ledger, None, &machines, participation, max_g, 0.0,
    ))
}

/// Each machine keeps its own weighted momentum and corrects it against the
/// query point of its previous participation. No privacy noise.
pub fn run_mu2_delayed<O: Objective>(problem: &Problem<O>, config: &RunConfig) -> Result<RunOutput> {
    check_problem(problem, config)?;
    let obj = &problem.objective;
    let d = problem.dim();
    let m = config.participants;
    let eta = resolve_eta(problem, config);

    let mut machines = machines_for(problem, config.seed);
    let mut local_q = vec![Vector::zeros(d); config.machines];
    let mut last_seen: Vec<(usize, Vector)> = vec![(0, problem.x0.clone()); config.machines];
    let mut server = ServerState::new(problem.x0.clone(), eta, m);
    let mut draw = Participation::new(config);
    let mut ledger = BudgetLedger::new(2.0 * problem.constants.s, config.machines);
    let mut rec = Recorder::new(config);
    let mut participation = Vec::with_capacity(config.rounds);
    let mut max_s: f64 = 0.0;

    for t in 1..=config.rounds {
        let chosen = draw.draw(&machines)?;
        let x_t = server.x.clone();
        let mut estimate = Vector::zeros(d);
        for &i in &chosen {
            let mc = &mut machines[i];
            let z = mc.take_sample()?;
            mc.mark_participation(t);
            let (prev_t, prev_x) = &last_seen[i];
            let s = storm_difference(obj, i, &z, &x_t, t as f64, prev_x, *prev_t as f64);
            mc.grad_evals += 2;
            rec.add_loss(obj.loss(i, &x_t, &z));
            max_s = max_s.max(s.norm());
            local_q[i].axpy(1.0, &s);
            last_seen[i] = (t, x_t.clone());
            ledger.record(i, 0.0);
            estimate.axpy(1.0 / m as f64, &local_q[i]);
        }
        let eps = error_sq(obj, &estimate, t as f64, &x_t);
        server.q_tilde = estimate.clone();
        server.step(&estimate, &problem.domain);
        participation.push(chosen);
        let evals = machines.iter().map(|mc| mc.grad_evals).sum();
        rec.end_round(obj, t, &server.x, eps, &ledger, evals);
    }

    Ok(finish(
        config, server.x, eta, rec, ledger, None, &machines, participation, max_s, 0.0,
    ))
}

#[allow(clippy::too_many_arguments)]
fn finish<S>(
    config: &RunConfig,
    x_out: Vector,
    eta: f64,
    rec: Recorder,
    ledger: BudgetLedger,
    trace: Option<RunTrace>,
    machines: &[MachineState<S>],
    participation: Vec<Vec<usize>>,
    max_correction_norm: f64,
    max_scaled_query_step: f64,
) -> RunOutput {
    RunOutput {
        algorithm: config.algorithm,
        x_out,
        eta,
        wall_ms: rec.elapsed_ms(),
        metrics: rec.rows,
        ledger,
        trace,
        grad_evals: machines.iter().map(|mc| mc.grad_evals).sum(),
        participation,
        error_sq: rec.error_sq,
        max_correction_norm,
        max_scaled_query_step,
        cursors: machines.iter().map(|mc| mc.dataset.cursor()).collect(),
    }
}
