//! Brute-force reference values by explicit enumeration of the state space.

/// Distribution over an enumerated state space.
pub struct Enumerated {
    pub log_z: f64,
    pub log_probs: Vec<f64>,
    pub stats: Vec<Vec<f64>>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Enumerated {
    fn from_weights(log_weights: Vec<f64>, stats: Vec<Vec<f64>>) -> Self {
        let log_z = log_sum_exp(&log_weights);
        Self {
            log_z,
            log_probs: log_weights.iter().map(|w| w - log_z).collect(),
            stats,
        }
    }

    fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_probs.iter().map(|l| l.exp())
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.stats[0].len();
        let mut m = vec![0.0; d];
        for (p, s) in self.probs().zip(&self.stats) {
            for a in 0..d {
                m[a] += p * s[a];
            }
        }
        m
    }

    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let mean = self.mean();
        let d = mean.len();
        let mut c = vec![vec![0.0; d]; d];
        for (p, s) in self.probs().zip(&self.stats) {
            for a in 0..d {
                for b in 0..d {
                    c[a][b] += p * (s[a] - mean[a]) * (s[b] - mean[b]);
                }
            }
        }
        c
    }

    pub fn entropy(&self) -> f64 {
        self.probs()
            .zip(&self.log_probs)
            .map(|(p, l)| if p > 0.0 { -p * l } else { 0.0 })
            .sum()
    }

    /// `KL(self | other)` over the same enumeration.
    pub fn kl_from(&self, other: &Enumerated) -> f64 {
        self.probs()
            .zip(self.log_probs.iter().zip(&other.log_probs))
            .map(|(p, (l, m))| if p > 0.0 { p * (l - m) } else { 0.0 })
            .sum()
    }
}

/// Mean-field Ising model over all `2^n` spin configurations. The second
/// statistic is the pair sum `Σ_{i<j} σ_i σ_j / n`.
pub fn ising(n: u32, theta: &[f64]) -> Enumerated {
    let mut weights = Vec::new();
    let mut stats = Vec::new();
    for config in 0u32..(1 << n) {
        let spins: Vec<f64> = (0..n)
            .map(|i| if config >> i & 1 == 0 { 1.0 } else { -1.0 })
            .collect();
        let total: f64 = spins.iter().sum();
        let mut pairs = 0.0;
        for i in 0..spins.len() {
            for j in i + 1..spins.len() {
                pairs += spins[i] * spins[j];
            }
        }
        let s = if theta.len() == 2 {
            vec![total, pairs / n as f64]
        } else {
            vec![total]
        };
        weights.push(s.iter().zip(theta).map(|(a, b)| a * b).sum());
        stats.push(s);
    }
    Enumerated::from_weights(weights, stats)
}

/// One-hot model over `theta.len()` states.
pub fn rem(theta: &[f64]) -> Enumerated {
    let k = theta.len();
    let stats = (0..k)
        .map(|s| (0..k).map(|a| if a == s { 1.0 } else { 0.0 }).collect())
        .collect();
    Enumerated::from_weights(theta.to_vec(), stats)
}

/// Poisson model in its natural parameter, truncated where the remaining
/// mass is far below double precision.
pub fn poisson(theta: f64) -> Enumerated {
    let mean = theta.exp();
    let upper = (mean + 50.0 * mean.sqrt() + 60.0) as u64;
    let mut log_fact = 0.0;
    let mut weights = Vec::new();
    let mut stats = Vec::new();
    for s in 0..=upper {
        if s > 0 {
            log_fact += (s as f64).ln();
        }
        weights.push(s as f64 * theta - log_fact);
        stats.push(vec![s as f64]);
    }
    Enumerated::from_weights(weights, stats)
}
