//! Small exact t-SNE for embedding feature vectors into 2D. O(n^2) per
//! iteration, intended for a few hundred points; deterministic per seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::randn_like;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self { perplexity: 10.0, iterations: 300, learning_rate: 50.0, seed: 0 }
    }
}

fn pairwise_sq_dists(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i][j] = s;
            d[j][i] = s;
        }
    }
    d
}

/// Row conditional probabilities with the bandwidth tuned by bisection to
/// hit the target perplexity.
fn conditional_probs(dists: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let n = dists.len();
    let target = perplexity.ln();
    let mut beta = 1.0;
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    let mut p = vec![0.0; n];
    for _ in 0..64 {
        let mut sum = 0.0;
        for j in 0..n {
            p[j] = if j == i { 0.0 } else { (-beta * dists[j]).exp() };
            sum += p[j];
        }
        if sum <= 0.0 {
            beta /= 2.0;
            continue;
        }
        let mut entropy = 0.0;
        for pj in p.iter_mut() {
            *pj /= sum;
            if *pj > 1e-300 {
                entropy -= *pj * pj.ln();
            }
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
    p
}

/// Embeds `points` (each the same length) into 2D. Returns an `[n,2]`
/// tensor; deterministic for a fixed config.
pub fn tsne(points: &[Vec<f64>], cfg: &TsneConfig) -> Result<Tensor> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Argument("t-SNE needs at least 3 points".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Argument("inconsistent feature lengths".into()));
    }
    let perplexity = cfg.perplexity.min((n as f64 - 1.0) / 3.0).max(2.0);
    let d = pairwise_sq_dists(points);
    // symmetrized affinities
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let row = conditional_probs(&d[i], i, perplexity);
        for j in 0..n {
            p[i][j] = row[j];
        }
    }
    let mut psym = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            psym[i][j] = ((p[i][j] + p[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    // gradient descent with momentum and early exaggeration
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = randn_like(&[n, 2], &mut rng);
    let mut y: Vec<[f64; 2]> = (0..n).map(|i| [init.data()[2 * i] * 1e-2, init.data()[2 * i + 1] * 1e-2]).collect();
    let mut vel = vec![[0.0; 2]; n];
    for iter in 0..cfg.iterations {
        let exaggeration = if iter < cfg.iterations / 4 { 4.0 } else { 1.0 };
        // q distribution
        let mut num = vec![vec![0.0; n]; n];
        let mut zsum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let dy0 = y[i][0] - y[j][0];
                    let dy1 = y[i][1] - y[j][1];
                    let v = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                    num[i][j] = v;
                    zsum += v;
                }
            }
        }
        let momentum = if iter < 60 { 0.5 } else { 0.8 };
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[i][j] / zsum).max(1e-12);
                let coeff = (exaggeration * psym[i][j] - q) * num[i][j];
                grad[0] += 4.0 * coeff * (y[i][0] - y[j][0]);
                grad[1] += 4.0 * coeff * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                vel[i][k] = momentum * vel[i][k] - cfg.learning_rate * grad[k];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
        // recenter
        let cx: f64 = y.iter().map(|p| p[0]).sum::<f64>() / n as f64;
        let cy: f64 = y.iter().map(|p| p[1]).sum::<f64>() / n as f64;
        for pt in &mut y {
            pt[0] -= cx;
            pt[1] -= cy;
        }
    }
    let mut out = Tensor::zeros(&[n, 2]);
    for i in 0..n {
        out.data_mut()[2 * i] = y[i][0];
        out.data_mut()[2 * i + 1] = y[i][1];
    }
    Ok(out)
}
