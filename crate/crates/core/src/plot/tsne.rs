//! Exact t-SNE for small embedding sets (O(n²) per iteration).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            seed: 0,
        }
    }
}

const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 100;
const MOMENTUM_SWITCH: usize = 250;

/// Row-conditional affinities whose entropy matches `ln(perplexity)`.
fn conditional_p(dist: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..200 {
            let m = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let e = (-(row[j] - m) * beta).exp();
                p[i * n + j] = e;
                sum += e;
                weighted += e * (row[j] - m);
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for j in 0..n {
                p[i * n + j] /= sum;
            }
            if (entropy - target).abs() < 1e-5 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    p
}

/// Two-dimensional t-SNE layout, one point per input row.
pub fn tsne(data: &[Vec<f64>], config: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = data.len();
    if n <= 1 {
        return Ok(vec![[0.0, 0.0]; n]);
    }
    let d = data[0].len();
    if data.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput("t-SNE rows must be finite and equally long".into()));
    }
    if config.perplexity.is_nan() || config.perplexity <= 0.0 {
        return Err(Error::InvalidParameter("perplexity must be positive".into()));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = data[i].iter().zip(&data[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            dist[i * n + j] = s;
            dist[j * n + i] = s;
        }
    }
    let perplexity = config.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let cond = conditional_p(&dist, n, perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, 1e-4).expect("positive spread");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut num = vec![0.0; n * n];
    for it in 0..config.iterations {
        let exaggeration = if it < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if it < MOMENTUM_SWITCH { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dy = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
                let q = 1.0 / (1.0 + dy[0] * dy[0] + dy[1] * dy[1]);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in (0..n).filter(|&j| j != i) {
                let q = num[i * n + j];
                let m = 4.0 * (exaggeration * p[i * n + j] - q / z) * q;
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                gains[i][k] = if (g[k] > 0.0) != (update[i][k] > 0.0) { gains[i][k] + 0.2 } else { (gains[i][k] * 0.8f64).max(0.01) };
                update[i][k] = momentum * update[i][k] - config.learning_rate * gains[i][k] * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += update[i][0];
            y[i][1] += update[i][1];
        }
        let c = y.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        for p in &mut y {
            p[0] -= c[0] / n as f64;
            p[1] -= c[1] / n as f64;
        }
    }
    Ok(y)
}
