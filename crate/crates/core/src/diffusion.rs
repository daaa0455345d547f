//! Noise schedules and the closed-form forward process on latent graphs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Sigmoid,
    Linear,
}

/// Serializable description from which a schedule is rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Sigmoid,
            steps: 1000,
            beta_min: 1e-7,
            beta_max: 2e-3,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max, self.kind)
    }
}

/// `β`, `α` and `ᾱ` indexed `0..=T` with `β(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::InvalidParameter("schedule needs at least one step".into()));
    }
    if !(0.0 <= beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 <= beta_min < beta_max < 1, got {beta_min} and {beta_max}"
        )));
    }
    let t_max = steps as f64;
    let (lo, hi) = (sig(-6.0), sig(6.0));
    let mut betas = vec![0.0];
    for t in 1..=steps {
        let w = match kind {
            ScheduleKind::Sigmoid => (sig(12.0 * t as f64 / t_max - 6.0) - lo) / (hi - lo),
            ScheduleKind::Linear if steps == 1 => 1.0,
            ScheduleKind::Linear => (t - 1) as f64 / (steps - 1) as f64,
        };
        // lerp form keeps β(T) = β_max bit-exact
        betas.push(beta_min * (1.0 - w) + beta_max * w);
    }
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    /// Builds a schedule from explicit `β(0..=T)`; `β(0)` must be 0.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas[0] != 0.0 {
            return Err(Error::InvalidParameter("betas must start with beta(0) = 0 and have T >= 1".into()));
        }
        if betas.iter().any(|b| !(b.is_finite() && (0.0..1.0).contains(b))) {
            return Err(Error::InvalidParameter("every beta must lie in [0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for (t, a) in alphas.iter().enumerate() {
            if t > 0 {
                acc *= a;
            }
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `α(t)/β(t)`; infinite at `t = 0`.
    pub fn snr(&self, t: usize) -> f64 {
        self.alphas[t] / self.betas[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidParameter(format!("step {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }
}

/// Vertex and edge latents of one (sub)graph, each `[n, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLatents {
    pub vertices: Tensor,
    pub edges: Tensor,
}

impl GraphLatents {
    pub fn new(vertices: Tensor, edges: Tensor) -> Result<Self> {
        if vertices.shape.len() != 2 || edges.shape.len() != 2 || vertices.shape[1] != edges.shape[1] {
            return Err(Error::Shape(format!(
                "vertex {:?} and edge {:?} latents must be [n, d] with equal d",
                vertices.shape, edges.shape
            )));
        }
        Ok(Self { vertices, edges })
    }

    pub fn width(&self) -> usize {
        self.vertices.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyGraphState {
    pub vertices: Tensor,
    pub edges: Tensor,
    pub t: usize,
    pub eps_vertices: Tensor,
    pub eps_edges: Tensor,
}

fn noise_like(t: &Tensor, rng: &mut impl Rng) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: (0..t.len()).map(|_| rng.sample(StandardNormal)).collect(),
    }
}

/// Samples `ε` and applies the closed-form forward process.
pub fn forward_noise(clean: &GraphLatents, t: usize, rng: &mut impl Rng, schedule: &NoiseSchedule) -> Result<NoisyGraphState> {
    schedule.check_step(t)?;
    let ev = noise_like(&clean.vertices, rng);
    let ee = noise_like(&clean.edges, rng);
    forward_noise_with(clean, t, ev, ee, schedule)
}

/// `√ᾱ(t)·x + √(1−ᾱ(t))·ε` with explicit noise.
pub fn forward_noise_with(
    clean: &GraphLatents,
    t: usize,
    eps_vertices: Tensor,
    eps_edges: Tensor,
    schedule: &NoiseSchedule,
) -> Result<NoisyGraphState> {
    schedule.check_step(t)?;
    if eps_vertices.shape != clean.vertices.shape || eps_edges.shape != clean.edges.shape {
        return Err(Error::Shape("noise shape differs from clean latents".into()));
    }
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mix = |x: &Tensor, e: &Tensor| Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().zip(&e.data).map(|(x, e)| s * x + n * e).collect(),
    };
    Ok(NoisyGraphState {
        vertices: mix(&clean.vertices, &eps_vertices),
        edges: mix(&clean.edges, &eps_edges),
        t,
        eps_vertices,
        eps_edges,
    })
}

/// Applies `x_i = √(1−β(i))·x_{i−1} + √β(i)·ε_i` for `i = 1..=t`.
pub fn stepwise_forward(clean: &[f64], t: usize, noises: &[Vec<f64>], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if noises.len() != t {
        return Err(Error::InvalidInput(format!("expected {t} per-step noises, got {}", noises.len())));
    }
    let mut x = clean.to_vec();
    for (i, eps) in noises.iter().enumerate() {
        if eps.len() != x.len() {
            return Err(Error::Shape("per-step noise length differs from latents".into()));
        }
        let b = schedule.beta(i + 1);
        let (s, n) = ((1.0 - b).sqrt(), b.sqrt());
        x.iter_mut().zip(eps).for_each(|(x, e)| *x = s * *x + n * e);
    }
    Ok(x)
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Vertex MSE plus edge MSE; an empty edge set contributes zero.
pub fn simple_loss(pred: &GraphLatents, truth: &GraphLatents) -> Result<f64> {
    if pred.vertices.shape != truth.vertices.shape || pred.edges.shape != truth.edges.shape {
        return Err(Error::Shape(format!(
            "prediction {:?}/{:?} does not match target {:?}/{:?}",
            pred.vertices.shape, pred.edges.shape, truth.vertices.shape, truth.edges.shape
        )));
    }
    Ok(mse(&pred.vertices, &truth.vertices) + mse(&pred.edges, &truth.edges))
}
