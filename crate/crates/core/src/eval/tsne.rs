//! Exact t-SNE (all pairs, no tree approximation) in double precision.

use crate::error::{Error, Result};
use crate::rng::Rng;

const DIST_FLOOR: f64 = 1e-12;
const ENTROPY_TOL: f64 = 1e-5;
const SEARCH_STEPS: usize = 50;
const MIN_GAIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iters: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iters: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneResult {
    pub points: Vec<[f64; 2]>,
    /// KL(P‖Q) after each iteration, always against the unexaggerated P.
    pub kl: Vec<f64>,
}

/// Squared Euclidean distances, row-major `n×n`.
pub fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row-normalized Gaussian affinities `p_{j|i}` whose entropy matches
/// `log2(perplexity)` bits, found by bisection on the precision of each row.
pub fn conditional_probabilities(dist2: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.log2();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &dist2[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
        let min_d = (0..n)
            .filter(|&j| j != i)
            .map(|j| row[j].max(DIST_FLOOR))
            .fold(f64::INFINITY, f64::min);
        for _ in 0..SEARCH_STEPS {
            // shifting by the nearest distance keeps exp() away from underflow
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d = row[j].max(DIST_FLOOR) - min_d;
                let e = (-beta * d).exp();
                sum += e;
                weighted += d * e;
            }
            let entropy_nats = beta * weighted / sum + sum.ln();
            let h = entropy_nats / std::f64::consts::LN_2;
            let diff = h - target;
            if diff.abs() < ENTROPY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                let e = (-beta * (row[j].max(DIST_FLOOR) - min_d)).exp();
                p[i * n + j] = e;
                sum += e;
            }
        }
        for j in 0..n {
            p[i * n + j] /= sum;
        }
    }
    p
}

/// Embeds the rows of `x` in two dimensions.
pub fn tsne(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = x.len();
    if (n as f64) < 3.0 * cfg.perplexity + 1.0 {
        return Err(Error::Data(format!(
            "t-SNE with perplexity {} needs at least {} points, got {n}",
            cfg.perplexity,
            (3.0 * cfg.perplexity + 1.0).ceil()
        )));
    }
    if cfg.perplexity <= 1.0 {
        return Err(Error::Config("perplexity must exceed 1".into()));
    }
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim) {
        return Err(Error::dim("t-SNE rows differ in length"));
    }
    let cond = conditional_probabilities(&squared_distances(x), n, cfg.perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-300);
        }
        p[i * n + i] = 0.0;
    }

    let mut rng = Rng::new(cfg.seed);
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [1e-2 * rng.normal(), 1e-2 * rng.normal()]).collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut kl = Vec::with_capacity(cfg.iters);

    for it in 0..cfg.iters {
        let exag = if it < cfg.exaggeration_iters { cfg.exaggeration } else { 1.0 };
        let momentum = if it < cfg.momentum_switch { cfg.momentum } else { cfg.final_momentum };

        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dy0 = y[i][0] - y[j][0];
                let dy1 = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let m = (exag * p[i * n + j] - q / z) * q;
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                let grad = 4.0 * g[d];
                gains[i][d] = if (grad > 0.0) != (update[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(MIN_GAIN)
                };
                update[i][d] = momentum * update[i][d] - cfg.learning_rate * gains[i][d] * grad;
            }
        }
        for i in 0..n {
            y[i][0] += update[i][0];
            y[i][1] += update[i][1];
        }
        // recentre
        let (mx, my) = y.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        for p in &mut y {
            p[0] -= mx / n as f64;
            p[1] -= my / n as f64;
        }
        kl.push(kl_divergence(&p, &y));
    }
    if y.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::NonFinite("t-SNE embedding"));
    }
    Ok(TsneResult { points: y, kl })
}

/// `KL(P‖Q)` for an embedding `y`; zero entries of `P` contribute nothing.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let mut z = 0.0;
    let mut num = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d0 = y[i][0] - y[j][0];
                let d1 = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + d0 * d0 + d1 * d1);
                num[i * n + j] = q;
                z += q;
            }
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[i * n + j];
            if i != j && pij > 0.0 {
                kl += pij * (pij / (num[i * n + j] / z)).ln();
            }
        }
    }
    kl
}
