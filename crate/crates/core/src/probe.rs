//! Linear concept probes.
//!
//! A CAV is the weight vector `w` (plus intercept `b`) of an L2-regularised
//! logistic regression separating concept-positive from concept-negative
//! embeddings. The objective minimised is
//!
//! ```text
//! (1/n) Σ [log(1 + exp(z_i)) - y_i z_i] + (λ / 2n) ‖w‖²,   z_i = wᵀx_i + b
//! ```
//!
//! The intercept is never penalised.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// Plain gradient descent with a constant step size.
    Fixed,
    /// Limited-memory quasi-Newton directions with Armijo backtracking.
    Backtracking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub l2_lambda: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the infinity norm of the gradient.
    pub gradient_tolerance: f64,
    pub step_rule: StepRule,
    /// Step size for [`StepRule::Fixed`]; ignored otherwise.
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    pub reliability_threshold: f64,
    /// Fit on per-feature standardised inputs and fold the transform back
    /// into `(w, b)` so projections always apply to raw vectors.
    #[serde(default)]
    pub standardize: bool,
}

fn default_step_size() -> f64 {
    0.1
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            l2_lambda: 1.0,
            max_iterations: 1000,
            gradient_tolerance: 1e-7,
            step_rule: StepRule::Backtracking,
            step_size: default_step_size(),
            reliability_threshold: 0.65,
            standardize: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::InvalidConfig("l2_lambda must be finite and >= 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be positive".into()));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::InvalidConfig("gradient_tolerance must be positive".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig("step_size must be positive".into()));
        }
        if !(self.reliability_threshold > 0.5 && self.reliability_threshold <= 1.0) {
            return Err(Error::InvalidConfig(
                "reliability_threshold must lie in (0.5, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Anything that behaves as the affine decision function `wᵀx + b`.
pub trait LinearDecision {
    fn weights(&self) -> &[f64];
    fn bias(&self) -> f64;

    fn dimension(&self) -> usize {
        self.weights().len()
    }

    /// `wᵀx + b`, without a sigmoid.
    fn project(&self, x: &[f64]) -> Result<f64> {
        let w = self.weights();
        if w.len() != x.len() {
            return Err(Error::DimensionMismatch {
                id: String::from("<input>"),
                expected: w.len(),
                found: x.len(),
            });
        }
        Ok(dot(w, x) + self.bias())
    }
}

/// A learned concept activation vector with its training diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    #[serde(rename = "concept")]
    pub concept_name: String,
    pub dim: usize,
    pub w: Vec<f64>,
    pub b: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    #[serde(rename = "config")]
    pub trainer_config: TrainerConfig,
    pub seed: Option<u64>,
    pub replicate_index: Option<u64>,
}

impl LinearDecision for Cav {
    fn weights(&self) -> &[f64] {
        &self.w
    }

    fn bias(&self) -> f64 {
        self.b
    }
}

impl Cav {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cav: Cav = serde_json::from_str(&text)?;
        if cav.w.len() != cav.dim {
            return Err(Error::DimensionMismatch {
                id: cav.concept_name,
                expected: cav.dim,
                found: cav.w.len(),
            });
        }
        Ok(cav)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reliability {
    Reliable,
    Unreliable,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// The regularised logistic objective over a fixed sample set. Parameters are
/// packed as `[w_0, ..., w_{d-1}, b]`.
pub struct LogisticObjective<'a> {
    xs: Vec<&'a [f64]>,
    ys: Vec<f64>,
    l2_lambda: f64,
    dim: usize,
}

impl<'a> LogisticObjective<'a> {
    pub fn new<V: AsRef<[f64]>>(samples: &'a [(V, bool)], l2_lambda: f64) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptySampleList)?;
        let dim = first.0.as_ref().len();
        let mut xs = Vec::with_capacity(samples.len());
        let mut ys = Vec::with_capacity(samples.len());
        for (i, (x, y)) in samples.iter().enumerate() {
            let x = x.as_ref();
            if x.len() != dim {
                return Err(Error::DimensionMismatch {
                    id: format!("sample {i}"),
                    expected: dim,
                    found: x.len(),
                });
            }
            xs.push(x);
            ys.push(if *y { 1.0 } else { 0.0 });
        }
        Ok(LogisticObjective {
            xs,
            ys,
            l2_lambda,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.xs.len()
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let (w, b) = theta.split_at(self.dim);
        let n = self.n() as f64;
        let data: f64 = self
            .xs
            .iter()
            .zip(&self.ys)
            .map(|(x, y)| {
                let z = dot(w, x) + b[0];
                softplus(z) - y * z
            })
            .sum();
        data / n + 0.5 * self.l2_lambda / n * dot(w, w)
    }

    pub fn loss_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (w, b) = theta.split_at(self.dim);
        let n = self.n() as f64;
        let mut grad = vec![0.0; self.dim + 1];
        let mut data = 0.0;
        for (x, y) in self.xs.iter().zip(&self.ys) {
            let z = dot(w, x) + b[0];
            data += softplus(z) - y * z;
            let r = sigmoid(z) - y;
            for (g, xi) in grad.iter_mut().zip(x.iter()) {
                *g += r * xi;
            }
            grad[self.dim] += r;
        }
        let reg = self.l2_lambda / n;
        for (g, wi) in grad.iter_mut().zip(w) {
            *g = *g / n + reg * wi;
        }
        grad[self.dim] /= n;
        (data / n + 0.5 * reg * dot(w, w), grad)
    }
}

/// Diagnostics of one optimisation run.
#[derive(Clone, Debug)]
pub struct FitTrace {
    pub theta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Objective value after each accepted iteration, starting with the
    /// initial point.
    pub losses: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

const LBFGS_MEMORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// Minimises `objective` from `theta0`.
pub fn minimize(
    objective: &LogisticObjective<'_>,
    theta0: Vec<f64>,
    config: &TrainerConfig,
) -> Result<FitTrace> {
    let mut theta = theta0;
    let (mut f, mut g) = objective.loss_and_gradient(&theta);
    if !f.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    let mut losses = vec![f];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();

    for iteration in 1..=config.max_iterations {
        if inf_norm(&g) <= config.gradient_tolerance {
            return Ok(FitTrace {
                theta,
                converged: true,
                iterations: iteration - 1,
                losses,
            });
        }
        let (next, f_next, g_next) = match config.step_rule {
            StepRule::Fixed => {
                let next: Vec<f64> = theta
                    .iter()
                    .zip(&g)
                    .map(|(t, gi)| t - config.step_size * gi)
                    .collect();
                let (f_next, g_next) = objective.loss_and_gradient(&next);
                (next, f_next, g_next)
            }
            StepRule::Backtracking => {
                let mut direction = lbfgs_direction(&g, &history);
                let mut slope = dot(&direction, &g);
                if !(slope < 0.0) {
                    history.clear();
                    direction = g.iter().map(|x| -x).collect();
                    slope = -dot(&g, &g);
                }
                let mut step = 1.0;
                let mut accepted = None;
                for _ in 0..MAX_BACKTRACKS {
                    let trial: Vec<f64> = theta
                        .iter()
                        .zip(&direction)
                        .map(|(t, d)| t + step * d)
                        .collect();
                    let f_trial = objective.loss(&trial);
                    if f_trial.is_finite() && f_trial <= f + ARMIJO_C1 * step * slope {
                        accepted = Some(trial);
                        break;
                    }
                    step *= 0.5;
                }
                match accepted {
                    Some(trial) => {
                        let (f_next, g_next) = objective.loss_and_gradient(&trial);
                        (trial, f_next, g_next)
                    }
                    // No representable decrease left along a descent
                    // direction: the iterate is as good as f64 allows.
                    None => {
                        let converged = inf_norm(&g) <= config.gradient_tolerance;
                        return Ok(FitTrace {
                            theta,
                            converged,
                            iterations: iteration - 1,
                            losses,
                        });
                    }
                }
            }
        };
        if !f_next.is_finite() || g_next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration });
        }
        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_next.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == LBFGS_MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        theta = next;
        f = f_next;
        g = g_next;
        losses.push(f);
    }
    let converged = inf_norm(&g) <= config.gradient_tolerance;
    Ok(FitTrace {
        theta,
        converged,
        iterations: config.max_iterations,
        losses,
    })
}

/// Two-loop recursion for the L-BFGS search direction.
fn lbfgs_direction(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - beta) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn check_classes<V: AsRef<[f64]>>(samples: &[(V, bool)]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptySampleList);
    }
    let positives = samples.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == samples.len() {
        return Err(Error::SingleClassInput);
    }
    Ok(())
}

/// Fits a CAV starting from `w = 0, b = 0`.
pub fn fit<V: AsRef<[f64]>>(
    samples: &[(V, bool)],
    config: &TrainerConfig,
    concept_name: &str,
) -> Result<Cav> {
    fit_from(samples, config, concept_name, None)
}

/// Fits a CAV from an explicit initial point `(w, b)` (zeros when `None`).
pub fn fit_from<V: AsRef<[f64]>>(
    samples: &[(V, bool)],
    config: &TrainerConfig,
    concept_name: &str,
    init: Option<(Vec<f64>, f64)>,
) -> Result<Cav> {
    config.validate()?;
    check_classes(samples)?;
    let dim = samples[0].0.as_ref().len();

    let (w, b, trace) = if config.standardize {
        let (mean, scale) = feature_moments(samples, dim)?;
        let scaled: Vec<(Vec<f64>, bool)> = samples
            .iter()
            .map(|(x, y)| {
                let z = x
                    .as_ref()
                    .iter()
                    .zip(mean.iter().zip(&scale))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect();
                (z, *y)
            })
            .collect();
        let objective = LogisticObjective::new(&scaled, config.l2_lambda)?;
        let theta0 = initial_theta(init, dim, |w, b| {
            // Map a raw-space initial point into standardised coordinates.
            let ws: Vec<f64> = w.iter().zip(&scale).map(|(wi, s)| wi * s).collect();
            let bs = b + dot(w, &mean);
            (ws, bs)
        })?;
        let trace = minimize(&objective, theta0, config)?;
        let (ws, bs) = trace.theta.split_at(dim);
        let w: Vec<f64> = ws.iter().zip(&scale).map(|(wi, s)| wi / s).collect();
        let b = bs[0] - dot(&w, &mean);
        (w, b, trace)
    } else {
        let objective = LogisticObjective::new(samples, config.l2_lambda)?;
        let theta0 = initial_theta(init, dim, |w, b| (w.to_vec(), b))?;
        let trace = minimize(&objective, theta0, config)?;
        let w = trace.theta[..dim].to_vec();
        let b = trace.theta[dim];
        (w, b, trace)
    };

    if !trace.converged {
        log::warn!(
            "{concept_name}: no convergence after {} iterations",
            trace.iterations
        );
    }
    let mut cav = Cav {
        concept_name: concept_name.to_string(),
        dim,
        w,
        b,
        train_accuracy: 0.0,
        test_accuracy: None,
        converged: trace.converged,
        iterations: trace.iterations,
        trainer_config: config.clone(),
        seed: None,
        replicate_index: None,
    };
    cav.train_accuracy = evaluate_accuracy(&cav, samples)?;
    Ok(cav)
}

fn initial_theta(
    init: Option<(Vec<f64>, f64)>,
    dim: usize,
    map: impl Fn(&[f64], f64) -> (Vec<f64>, f64),
) -> Result<Vec<f64>> {
    match init {
        None => Ok(vec![0.0; dim + 1]),
        Some((w, b)) => {
            if w.len() != dim {
                return Err(Error::DimensionMismatch {
                    id: "<initial point>".into(),
                    expected: dim,
                    found: w.len(),
                });
            }
            let (mut w, b) = map(&w, b);
            w.push(b);
            Ok(w)
        }
    }
}

fn feature_moments<V: AsRef<[f64]>>(samples: &[(V, bool)], dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = samples.len() as f64;
    let mut mean = vec![0.0; dim];
    for (x, _) in samples {
        let x = x.as_ref();
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                id: "<sample>".into(),
                expected: dim,
                found: x.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for (x, _) in samples {
        for ((s, v), m) in var.iter_mut().zip(x.as_ref()).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    // Constant features keep unit scale.
    let scale = var
        .into_iter()
        .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
        .collect();
    Ok((mean, scale))
}

/// Fraction of samples whose predicted class (`wᵀx + b > 0`) equals the label.
pub fn evaluate_accuracy<V: AsRef<[f64]>>(
    cav: &impl LinearDecision,
    samples: &[(V, bool)],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySampleList);
    }
    let mut correct = 0usize;
    for (x, y) in samples {
        if (cav.project(x.as_ref())? > 0.0) == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Reliable iff the held-out accuracy reaches the configured threshold.
/// A CAV without a test accuracy is never reliable.
pub fn reliability_gate(cav: &Cav, config: &TrainerConfig) -> Reliability {
    match cav.test_accuracy {
        Some(acc) if acc >= config.reliability_threshold => Reliability::Reliable,
        _ => Reliability::Unreliable,
    }
}
