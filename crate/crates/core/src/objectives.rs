//! Stochastic gradient oracles and the problem constants derived from them.
//!
//! Two families are provided: multiclass logistic regression over `[0, 1]`
//! features with an appended bias coordinate, and a synthetic heterogeneous
//! quadratic whose variance and heterogeneity levels are known exactly.

use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::numkit::{dot, Ball, Vector};

/// Every constant consumed by noise calibration, step sizes and bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConstants {
    /// Lipschitz bound on the per-sample loss.
    pub g: f64,
    /// Smoothness bound on the per-sample loss.
    pub l: f64,
    /// Diameter of the feasible set.
    pub d: f64,
    /// Per-round sensitivity bound, `g + 2 l d`.
    pub s: f64,
    pub sigma: f64,
    pub sigma_l: f64,
    pub xi: f64,
    pub xi_l: f64,
    pub sigma_tilde: f64,
    pub xi_tilde: f64,
    /// Norm of the population gradient at the constrained minimizer, if known.
    pub g_star: Option<f64>,
}

impl ObjectiveConstants {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        g: f64,
        l: f64,
        d: f64,
        sigma: f64,
        sigma_l: f64,
        xi: f64,
        xi_l: f64,
        g_star: Option<f64>,
    ) -> Result<Self> {
        let all = [g, l, d, sigma, sigma_l, xi, xi_l];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(format!("constants must be finite and >= 0: {all:?}")));
        }
        let slack = 1e-9 * (1.0 + g.max(l));
        if sigma > g + slack || xi > g + slack {
            return Err(invalid("sigma and xi must lie in [0, G]"));
        }
        if sigma_l > l + slack || xi_l > l + slack {
            return Err(invalid("sigma_L and xi_L must lie in [0, L]"));
        }
        let mut c = Self {
            g,
            l,
            d,
            s: g + 2.0 * l * d,
            sigma,
            sigma_l,
            xi,
            xi_l,
            sigma_tilde: 0.0,
            xi_tilde: 0.0,
            g_star,
        };
        (c.sigma_tilde, c.xi_tilde) = tilde_constants(&c);
        Ok(c)
    }

    /// `G*`, falling back to the upper bound `G` when the minimizer is unknown.
    pub fn g_star_or_bound(&self) -> f64 {
        self.g_star.unwrap_or(self.g)
    }
}

/// `(sigma + 2 sigma_L D, xi + 2 xi_L D)`
pub fn tilde_constants(c: &ObjectiveConstants) -> (f64, f64) {
    (c.sigma + 2.0 * c.sigma_l * c.d, c.xi + 2.0 * c.xi_l * c.d)
}

/// Quality of a point as reported in the metrics stream.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Evaluation {
    pub test_acc: Option<f64>,
    pub excess_loss: Option<f64>,
}

/// A per-machine stochastic first-order oracle `grad f_i(x; z)`.
pub trait Objective: Send + Sync {
    type Sample: Clone + Send + Sync;

    fn dim(&self) -> usize;

    /// Writes `grad f_machine(w; z)` into `out`.
    fn gradient_into(&self, machine: usize, w: &[f64], z: &Self::Sample, out: &mut [f64]);

    fn loss(&self, machine: usize, w: &[f64], z: &Self::Sample) -> f64;

    /// Exact population gradient `grad f(x)`, when it is available in closed form.
    fn full_gradient(&self, _w: &[f64]) -> Option<Vector> {
        None
    }

    /// Exact `grad f_i(x)`, when available.
    fn machine_gradient(&self, _machine: usize, _w: &[f64]) -> Option<Vector> {
        None
    }

    fn evaluate(&self, _w: &[f64]) -> Evaluation {
        Evaluation::default()
    }

    fn gradient(&self, machine: usize, w: &[f64], z: &Self::Sample) -> Vector {
        let mut out = Vector::zeros(self.dim());
        self.gradient_into(machine, w, z, &mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

/// A labelled example. The last feature is the bias coordinate (always 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vector,
    pub label: usize,
}

impl Sample {
    /// Appends the bias coordinate and validates the `[0, 1]` feature range.
    pub fn with_bias(mut raw: Vec<f64>, label: usize) -> Result<Self> {
        if let Some(j) = raw.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid(format!("feature {j} = {} outside [0, 1]", raw[j])));
        }
        raw.push(1.0);
        Ok(Self {
            features: Vector::from_raw(raw),
            label,
        })
    }
}

/// Softmax cross-entropy over `num_classes` classes; weights are stored
/// class-major, block `c` occupying `[c * feature_dim, (c + 1) * feature_dim)`.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    num_classes: usize,
    feature_dim: usize,
    test_set: Arc<[Sample]>,
}

impl LogisticRegression {
    pub fn new(num_classes: usize, feature_dim: usize) -> Result<Self> {
        if num_classes < 2 || feature_dim == 0 {
            return Err(invalid("logistic regression needs >= 2 classes and >= 1 feature"));
        }
        Ok(Self {
            num_classes,
            feature_dim,
            test_set: Arc::from(Vec::new()),
        })
    }

    pub fn with_test_set(mut self, test_set: impl Into<Arc<[Sample]>>) -> Result<Self> {
        let test_set = test_set.into();
        for s in test_set.iter() {
            self.check_sample(s)?;
        }
        self.test_set = test_set;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.features.dim() != self.feature_dim || s.label >= self.num_classes {
            return Err(invalid(format!(
                "sample has {} features and label {}, expected {} features and label < {}",
                s.features.dim(),
                s.label,
                self.feature_dim,
                self.num_classes
            )));
        }
        Ok(())
    }

    fn logits(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = dot(&w[c * self.feature_dim..(c + 1) * self.feature_dim], x);
        }
    }

    /// Class probabilities at `w` for features `x`.
    fn softmax(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.num_classes];
        self.logits(w, x, &mut p);
        let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in &mut p {
            *v = (*v - max).exp();
            total += *v;
        }
        p.iter_mut().for_each(|v| *v /= total);
        p
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> usize {
        let mut z = vec![0.0; self.num_classes];
        self.logits(w, x, &mut z);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, w: &[f64], samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return f64::NAN;
        }
        let hits = samples
            .iter()
            .filter(|s| self.predict(w, &s.features) == s.label)
            .count();
        hits as f64 / samples.len() as f64
    }
}

impl Objective for LogisticRegression {
    type Sample = Sample;

    fn dim(&self) -> usize {
        self.num_classes * self.feature_dim
    }

    fn gradient_into(&self, _machine: usize, w: &[f64], z: &Sample, out: &mut [f64]) {
        let p = self.softmax(w, &z.features);
        let f = self.feature_dim;
        for (c, pc) in p.iter().enumerate() {
            let coef = pc - if c == z.label { 1.0 } else { 0.0 };
            for (o, x) in out[c * f..(c + 1) * f].iter_mut().zip(z.features.iter()) {
                *o = coef * x;
            }
        }
    }

    fn loss(&self, _machine: usize, w: &[f64], z: &Sample) -> f64 {
        let mut logits = vec![0.0; self.num_classes];
        self.logits(w, &z.features, &mut logits);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        lse - logits[z.label]
    }

    fn evaluate(&self, w: &[f64]) -> Evaluation {
        Evaluation {
            test_acc: (!self.test_set.is_empty()).then(|| self.accuracy(w, &self.test_set)),
            excess_loss: None,
        }
    }
}

/// Gradient of the multiclass cross-entropy at `(w, s)`.
pub fn logistic_gradient(w: &Vector, s: &Sample, num_classes: usize) -> Result<Vector> {
    let f = s.features.dim();
    if f == 0 || w.dim() != num_classes * f {
        return Err(invalid(format!(
            "weights of dimension {} do not match {num_classes} classes x {f} features",
            w.dim()
        )));
    }
    let model = LogisticRegression::new(num_classes, f)?;
    model.check_sample(s)?;
    Ok(model.gradient(0, w, s))
}

// ---------------------------------------------------------------------------
// Synthetic heterogeneous quadratic
// ---------------------------------------------------------------------------

/// Configuration of the synthetic problem
/// `f_i(x; z) = (a_z L / 2) ||x - b_i - u_z||^2` over a ball.
///
/// `u_z` has independent `+-` coordinates with `||L u_z|| = sample_noise`, and
/// `a_z` is `1 +- curvature_jitter` with equal probability. Shifts `b_i` sit
/// equally spaced on a circle around `target` so that the heterogeneity level
/// is `heterogeneity`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSpec {
    pub dim: usize,
    pub machines: usize,
    pub smoothness: f64,
    pub sample_noise: f64,
    pub heterogeneity: f64,
    pub curvature_jitter: f64,
    pub radius: f64,
    /// Distance of the population minimizer from the origin, along `(1, ..., 1) / sqrt(d)`.
    pub optimum_offset: f64,
}

impl Default for QuadraticSpec {
    fn default() -> Self {
        Self {
            dim: 10,
            machines: 10,
            smoothness: 1.0,
            sample_noise: 0.5,
            heterogeneity: 0.5,
            curvature_jitter: 0.0,
            radius: 1.0,
            optimum_offset: 0.0,
        }
    }
}

impl QuadraticSpec {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.machines == 0 {
            return Err(invalid("quadratic problem needs dim >= 1 and machines >= 1"));
        }
        let reals = [
            self.smoothness,
            self.sample_noise,
            self.heterogeneity,
            self.radius,
            self.curvature_jitter,
        ];
        if reals.iter().any(|v| !v.is_finite() || *v < 0.0) || self.smoothness == 0.0 {
            return Err(invalid("quadratic parameters must be finite, >= 0, smoothness > 0"));
        }
        if self.curvature_jitter >= 1.0 {
            return Err(invalid("curvature_jitter must lie in [0, 1)"));
        }
        if !self.optimum_offset.is_finite() {
            return Err(invalid("optimum_offset must be finite"));
        }
        Ok(())
    }
}

/// Sample of the synthetic quadratic: curvature multiplier and target perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadSample {
    pub curvature: f64,
    pub offset: Vector,
}

#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    spec: QuadraticSpec,
    shifts: Vec<Vector>,
    mean_shift: Vector,
    domain: Ball,
    minimizer: Vector,
}

impl QuadraticProblem {
    pub fn new(spec: QuadraticSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        let target = Vector::from_raw(vec![spec.optimum_offset / (d as f64).sqrt(); d]);
        let ring = spec.heterogeneity / spec.smoothness;
        let shifts: Vec<Vector> = (0..spec.machines)
            .map(|i| {
                let mut b = target.clone();
                if spec.machines > 1 {
                    let theta = 2.0 * std::f64::consts::PI * i as f64 / spec.machines as f64;
                    b[0] += ring * theta.cos();
                    if d > 1 {
                        b[1] += ring * theta.sin();
                    }
                }
                b
            })
            .collect();
        let mut mean_shift = Vector::zeros(d);
        for b in &shifts {
            mean_shift.axpy(1.0 / spec.machines as f64, b);
        }
        let domain = Ball::centered(d, spec.radius)?;
        let minimizer = domain.project(&mean_shift)?;
        Ok(Self {
            spec,
            shifts,
            mean_shift,
            domain,
            minimizer,
        })
    }

    pub fn spec(&self) -> &QuadraticSpec {
        &self.spec
    }

    pub fn shift(&self, machine: usize) -> &Vector {
        &self.shifts[machine]
    }

    pub fn domain(&self) -> &Ball {
        &self.domain
    }

    pub fn minimizer(&self) -> &Vector {
        &self.minimizer
    }

    /// Per-coordinate magnitude of the target perturbation.
    fn offset_coordinate(&self) -> f64 {
        self.spec.sample_noise / (self.spec.smoothness * (self.spec.dim as f64).sqrt())
    }

    pub fn draw_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> QuadSample {
        let k = self.spec.curvature_jitter;
        let curvature = if rng.random::<bool>() { 1.0 + k } else { 1.0 - k };
        let h = self.offset_coordinate();
        let offset = (0..self.spec.dim)
            .map(|_| if rng.random::<bool>() { h } else { -h })
            .collect();
        QuadSample {
            curvature,
            offset: Vector::from_raw(offset),
        }
    }

    /// Population objective `f(x)` minus its constant part.
    fn population_value(&self, x: &[f64]) -> f64 {
        0.5 * self.spec.smoothness * self.mean_shift.distance(x).powi(2)
    }

    pub fn excess_loss(&self, x: &[f64]) -> f64 {
        (self.population_value(x) - self.population_value(&self.minimizer)).max(0.0)
    }

    /// Exact problem constants.
    pub fn constants(&self) -> Result<ObjectiveConstants> {
        let s = &self.spec;
        let base = s.smoothness;
        let k = s.curvature_jitter;
        let u_norm = s.sample_noise / base;
        let far = self
            .shifts
            .iter()
            .map(|b| self.domain.center().distance(b) + s.radius)
            .fold(0.0, f64::max);
        let g = (1.0 + k) * base * (far + u_norm);
        let l = (1.0 + k) * base;
        let sigma = base * ((k * far).powi(2) + (1.0 + k * k) * u_norm * u_norm).sqrt();
        let spread = self
            .shifts
            .iter()
            .map(|b| b.distance(&self.mean_shift).powi(2))
            .sum::<f64>()
            / s.machines as f64;
        let xi = base * spread.sqrt();
        let g_star = base * self.minimizer.distance(&self.mean_shift);
        ObjectiveConstants::new(g, l, self.domain.diameter(), sigma, k * base, xi, 0.0, Some(g_star))
    }
}

impl Objective for QuadraticProblem {
    type Sample = QuadSample;

    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn gradient_into(&self, machine: usize, w: &[f64], z: &QuadSample, out: &mut [f64]) {
        let a = z.curvature * self.spec.smoothness;
        let b = &self.shifts[machine];
        for (j, o) in out.iter_mut().enumerate() {
            *o = a * (w[j] - b[j] - z.offset[j]);
        }
    }

    fn loss(&self, machine: usize, w: &[f64], z: &QuadSample) -> f64 {
        let b = &self.shifts[machine];
        let sq: f64 = (0..w.len())
            .map(|j| (w[j] - b[j] - z.offset[j]).powi(2))
            .sum();
        0.5 * z.curvature * self.spec.smoothness * sq
    }

    fn full_gradient(&self, w: &[f64]) -> Option<Vector> {
        let mut g = Vector::from_raw(w.to_vec());
        g.axpy(-1.0, &self.mean_shift);
        g.scale(self.spec.smoothness);
        Some(g)
    }

    fn machine_gradient(&self, machine: usize, w: &[f64]) -> Option<Vector> {
        let mut g = Vector::from_raw(w.to_vec());
        g.axpy(-1.0, &self.shifts[machine]);
        g.scale(self.spec.smoothness);
        Some(g)
    }

    fn evaluate(&self, w: &[f64]) -> Evaluation {
        Evaluation {
            test_acc: None,
            excess_loss: Some(self.excess_loss(w)),
        }
    }
}

/// Gradient of `(L/2) ||w - (shift + z.offset)||^2` scaled by the sample curvature.
pub fn quadratic_gradient(
    w: &Vector,
    s: &QuadSample,
    machine_shift: &Vector,
    smoothness: f64,
) -> Result<Vector> {
    if w.dim() != s.offset.dim() || w.dim() != machine_shift.dim() {
        return Err(invalid("quadratic_gradient: dimension mismatch"));
    }
    let a = s.curvature * smoothness;
    Ok(Vector::from_raw(
        (0..w.dim())
            .map(|j| a * (w[j] - machine_shift[j] - s.offset[j]))
            .collect(),
    ))
}

// ---------------------------------------------------------------------------
// Constants
// ---------------------------------------------------------------------------

/// Objective family plus the data needed to derive its constants.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSpec {
    /// Softmax regression over `feature_dim` features in `[0, 1]` (bias included).
    Logistic {
        num_classes: usize,
        feature_dim: usize,
        diameter: f64,
    },
    Quadratic(QuadraticSpec),
}

impl ProblemSpec {
    pub fn family(name: &str) -> Result<&'static str> {
        match name {
            "logistic" => Ok("logistic"),
            "quadratic" => Ok("quadratic"),
            other => Err(Error::Unsupported(format!("objective family `{other}`"))),
        }
    }
}

/// Lipschitz/smoothness/sensitivity constants of a problem.
///
/// For logistic regression with features in `[0, 1]`, `||x||^2 <= F`, the
/// gradient norm is at most `sqrt(2F)` and the Hessian norm at most `F / 2`.
/// The variance and heterogeneity levels are not known there and default to
/// their worst-case values `G` and `L`.
pub fn derive_constants(spec: &ProblemSpec) -> Result<ObjectiveConstants> {
    match spec {
        ProblemSpec::Logistic {
            num_classes,
            feature_dim,
            diameter,
        } => {
            if *num_classes < 2 || *feature_dim == 0 {
                return Err(invalid("logistic regression needs >= 2 classes and >= 1 feature"));
            }
            let f = *feature_dim as f64;
            let g = (2.0 * f).sqrt();
            let l = f / 2.0;
            ObjectiveConstants::new(g, l, *diameter, g, l, g, l, None)
        }
        ProblemSpec::Quadratic(q) => QuadraticProblem::new(q.clone())?.constants(),
    }
}

// ---------------------------------------------------------------------------
// Per-machine data
// ---------------------------------------------------------------------------

/// One machine's sample sequence, consumed front to back at most once.
#[derive(Debug, Clone)]
pub struct MachineDataset<S> {
    samples: Arc<[S]>,
    cursor: usize,
}

impl<S> MachineDataset<S> {
    pub fn new(samples: impl Into<Arc<[S]>>) -> Self {
        Self {
            samples: samples.into(),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.samples.len() - self.cursor
    }

    pub fn samples(&self) -> &[S] {
        &self.samples
    }

    /// Same samples, cursor rewound.
    pub fn fresh(&self) -> Self {
        Self {
            samples: Arc::clone(&self.samples),
            cursor: 0,
        }
    }

    pub fn next_sample(&mut self) -> Option<&S> {
        let s = self.samples.get(self.cursor)?;
        self.cursor += 1;
        Some(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_sample(rng: &mut ChaCha8Rng, f: usize, classes: usize) -> Sample {
        let raw = (0..f - 1).map(|_| rng.random::<f64>()).collect();
        Sample::with_bias(raw, rng.random_range(0..classes)).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_sample(&mut rng, 6, 4);
        let w = Vector::zeros(24);
        let g = logistic_gradient(&w, &s, 4).unwrap();
        for c in 0..4 {
            let coef = 0.25 - if c == s.label { 1.0 } else { 0.0 };
            for j in 0..6 {
                assert_relative_eq!(g[c * 6 + j], coef * s.features[j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = LogisticRegression::new(3, 5).unwrap();
        for _ in 0..20 {
            let s = random_sample(&mut rng, 5, 3);
            let w = Vector::new((0..15).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let g = logistic_gradient(&w, &s, 3).unwrap();
            let h = 1e-5;
            for j in 0..15 {
                let mut wp = w.clone();
                wp[j] += h;
                let mut wm = w.clone();
                wm[j] -= h;
                let fd = (model.loss(0, &wp, &s) - model.loss(0, &wm, &s)) / (2.0 * h);
                let err = (fd - g[j]).abs();
                assert!(err <= 1e-5 * g[j].abs().max(1e-3), "coord {j}: fd {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn mnist_shapes_and_constants() {
        let spec = ProblemSpec::Logistic {
            num_classes: 10,
            feature_dim: 785,
            diameter: 0.1,
        };
        let c = derive_constants(&spec).unwrap();
        assert_relative_eq!(c.g, 39.62, epsilon = 0.01);
        assert_eq!(c.l, 392.5);
        assert!((c.s - 118.1).abs() < 0.05, "S = {}", c.s);
        let model = LogisticRegression::new(10, 785).unwrap();
        assert_eq!(model.dim(), 7850);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let s = Sample::with_bias(vec![0.5; 3], 1).unwrap();
        assert!(logistic_gradient(&Vector::zeros(7), &s, 2).is_err());
    }

    #[test]
    fn features_outside_unit_interval_are_rejected() {
        assert!(Sample::with_bias(vec![0.2, 1.5], 0).is_err());
        let s = Sample::with_bias(vec![0.2, 1.0], 0).unwrap();
        assert_eq!(s.features[2], 1.0);
    }

    #[test]
    fn sensitivity_with_flat_objective() {
        let c = ObjectiveConstants::new(1.0, 0.0, 123.0, 0.5, 0.0, 0.5, 0.0, None).unwrap();
        assert_eq!(c.s, 1.0);
    }

    #[test]
    fn tilde_examples() {
        let c = ObjectiveConstants::new(1.0, 1.0, 2.0, 1.0, 0.0, 0.0, 0.0, None).unwrap();
        assert_eq!(tilde_constants(&c).0, 1.0);
        let c = ObjectiveConstants::new(1.0, 1.0, 2.0, 0.0, 1.0, 0.0, 0.0, None).unwrap();
        assert_eq!(tilde_constants(&c).0, 4.0);
        let c = ObjectiveConstants::new(1.0, 1.0, 0.5, 0.0, 0.0, 1.0, 1.0, None).unwrap();
        assert_eq!(tilde_constants(&c).1, 2.0);
    }

    #[test]
    fn out_of_range_constants_are_rejected() {
        assert!(ObjectiveConstants::new(1.0, 1.0, 1.0, 2.0, 0.0, 0.0, 0.0, None).is_err());
        assert!(ObjectiveConstants::new(1.0, 1.0, 1.0, 0.0, 2.0, 0.0, 0.0, None).is_err());
    }

    #[test]
    fn quadratic_noiseless_gradient_is_linear() {
        let s = QuadSample {
            curvature: 1.0,
            offset: Vector::zeros(3),
        };
        let w = Vector::new(vec![0.1, -0.2, 0.3]).unwrap();
        let g = quadratic_gradient(&w, &s, &Vector::zeros(3), 2.5).unwrap();
        assert_eq!(g, w.scaled(2.5));
    }

    #[test]
    fn machine_average_is_population_gradient() {
        let p = QuadraticProblem::new(QuadraticSpec {
            machines: 7,
            dim: 4,
            optimum_offset: 0.3,
            ..Default::default()
        })
        .unwrap();
        let x = [0.2, -0.1, 0.05, 0.4];
        let mut avg = Vector::zeros(4);
        for i in 0..7 {
            avg.axpy(1.0 / 7.0, &p.machine_gradient(i, &x).unwrap());
        }
        let full = p.full_gradient(&x).unwrap();
        assert!(avg.distance(&full) < 1e-14);
    }

    #[test]
    fn quadratic_constants_are_exact() {
        let p = QuadraticProblem::new(QuadraticSpec {
            machines: 4,
            dim: 3,
            smoothness: 2.0,
            sample_noise: 0.6,
            heterogeneity: 0.8,
            ..Default::default()
        })
        .unwrap();
        let c = p.constants().unwrap();
        assert_relative_eq!(c.sigma, 0.6, epsilon = 1e-12);
        assert_relative_eq!(c.xi, 0.8, epsilon = 1e-12);
        assert_eq!(c.sigma_l, 0.0);
        assert_relative_eq!(c.sigma_tilde, c.sigma + 2.0 * c.sigma_l * c.d);
        assert_relative_eq!(c.s, c.g + 2.0 * c.l * c.d);
        assert_eq!(c.g_star, Some(0.0));
    }

    #[test]
    fn dataset_cursor_is_single_pass() {
        let mut ds = MachineDataset::new(vec![1, 2, 3]);
        assert_eq!(ds.next_sample(), Some(&1));
        assert_eq!(ds.next_sample(), Some(&2));
        assert_eq!(ds.remaining(), 1);
        assert_eq!(ds.next_sample(), Some(&3));
        assert_eq!(ds.next_sample(), None);
        assert_eq!(ds.fresh().cursor(), 0);
    }
}
