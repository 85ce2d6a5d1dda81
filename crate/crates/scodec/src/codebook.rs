//! Codebook health during training: usage tracking, dead-code
//! reinitialization by clustering, balancing and commitment losses, and the
//! utilization metrics CUR and BE.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{CodecError, Result};

/// Floor inside logarithms of probabilities.
pub const LOG_EPS: f64 = 1e-10;

/// Exponentially averaged selection frequencies for one codebook.
#[derive(Debug, Clone)]
pub struct UsageStats {
    counts: Vec<f64>,
    total: f64,
    ema_decay: f64,
}

impl UsageStats {
    pub fn new(codebook_size: usize, ema_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(CodecError::Config(format!(
                "EMA decay must lie in (0,1), got {ema_decay}"
            )));
        }
        Ok(Self {
            counts: vec![0.0; codebook_size],
            total: 0.0,
            ema_decay,
        })
    }

    pub fn codebook_size(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Normalized posterior `counts / total`, or the uniform distribution
    /// before any update.
    pub fn posterior(&self) -> Vec<f64> {
        if self.total <= 0.0 {
            return vec![1.0 / self.counts.len() as f64; self.counts.len()];
        }
        self.counts.iter().map(|c| c / self.total).collect()
    }

    /// Fold one batch of selected tokens into the running averages. An empty
    /// batch leaves the statistics unchanged.
    pub fn update(&mut self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let k = self.counts.len();
        let mut histogram = vec![0.0; k];
        for &t in tokens {
            let idx = t as usize;
            if idx >= k {
                return Err(CodecError::Token(format!(
                    "usage token {t} out of range for codebook size {k}"
                )));
            }
            histogram[idx] += 1.0;
        }
        let d = self.ema_decay;
        for (c, h) in self.counts.iter_mut().zip(&histogram) {
            *c = d * *c + (1.0 - d) * h;
        }
        self.total = d * self.total + (1.0 - d) * tokens.len() as f64;
        Ok(())
    }
}

/// Replace codevectors whose running usage falls below `threshold` with
/// cluster representatives of the current feature batch.
///
/// Clustering runs k-means (k = number of dead codes, k-means++ seeding,
/// 10 Lloyd iterations) over `batch_features` (`N x M`). If there are more
/// dead codes than features, features are resampled with replacement plus a
/// small jitter. Live codevectors are never touched. Returns the number of
/// reinitialized codevectors.
pub fn reinit_dead_codes(
    codebook: &mut Array2<f64>,
    stats: &UsageStats,
    batch_features: &Array2<f64>,
    threshold: f64,
    seed: u64,
) -> Result<usize> {
    if batch_features.nrows() == 0 {
        return Err(CodecError::Config(
            "dead-code reinitialization needs a non-empty feature batch".into(),
        ));
    }
    if batch_features.ncols() != codebook.ncols() {
        return Err(CodecError::Config(format!(
            "feature dimension {} does not match codevector dimension {}",
            batch_features.ncols(),
            codebook.ncols()
        )));
    }
    let dead: Vec<usize> = stats
        .counts()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c < threshold)
        .map(|(k, _)| k)
        .collect();
    if dead.is_empty() {
        return Ok(0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch_features.nrows();
    let centroids = if dead.len() <= n {
        kmeans(batch_features, dead.len(), 10, &mut rng)
    } else {
        // Not enough features: sample with replacement and jitter slightly.
        let mut centroids = Array2::zeros((dead.len(), codebook.ncols()));
        for i in 0..dead.len() {
            let pick = rng.gen_range(0..n);
            for m in 0..codebook.ncols() {
                centroids[[i, m]] = batch_features[[pick, m]] + rng.gen_range(-1e-4..1e-4);
            }
        }
        centroids
    };
    for (i, &k) in dead.iter().enumerate() {
        codebook.row_mut(k).assign(&centroids.row(i));
    }
    Ok(dead.len())
}

/// Plain k-means with k-means++ seeding; deterministic for a given RNG state.
pub fn kmeans(features: &Array2<f64>, k: usize, iterations: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = features.nrows();
    let m = features.ncols();
    assert!(k >= 1 && k <= n, "k must lie in [1, n]");
    // Seeding: first center uniform, then distance-squared weighted.
    let mut centers = Array2::zeros((k, m));
    let first = rng.gen_range(0..n);
    centers.row_mut(0).assign(&features.row(first));
    let mut d2 = vec![f64::INFINITY; n];
    for c in 1..k {
        for i in 0..n {
            let mut dist = 0.0;
            for j in 0..m {
                let diff = features[[i, j]] - centers[[c - 1, j]];
                dist += diff * diff;
            }
            if dist < d2[i] {
                d2[i] = dist;
            }
        }
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).assign(&features.row(pick));
    }
    let mut assignment = vec![0usize; n];
    for _ in 0..iterations {
        // Assign.
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let mut dist = 0.0;
                for j in 0..m {
                    let diff = features[[i, j]] - centers[[c, j]];
                    dist += diff * diff;
                }
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            assignment[i] = best;
        }
        // Update; empty clusters keep their center.
        let mut sums = Array2::<f64>::zeros((k, m));
        let mut sizes = vec![0usize; k];
        for i in 0..n {
            let c = assignment[i];
            sizes[c] += 1;
            for j in 0..m {
                sums[[c, j]] += features[[i, j]];
            }
        }
        for c in 0..k {
            if sizes[c] > 0 {
                for j in 0..m {
                    centers[[c, j]] = sums[[c, j]] / sizes[c] as f64;
                }
            }
        }
    }
    centers
}

/// Cross-entropy between the uniform prior and the running posterior:
/// `-(1/K) * sum_k ln(P_post[k] + eps)`, minimized iff the posterior is
/// uniform (value `ln K` up to the epsilon floor).
pub fn balancing_loss(stats: &UsageStats) -> f64 {
    let k = stats.codebook_size() as f64;
    stats
        .posterior()
        .iter()
        .map(|&p| -(p + LOG_EPS).ln() / k)
        .sum()
}

/// VQ-VAE commitment pair:
/// `weight * |v_pre - sg(v_sel)|^2 + |sg(v_pre) - v_sel|^2`.
pub fn commitment_loss(v_pre: &Array1<f64>, v_selected: &Array1<f64>, weight: f64) -> f64 {
    let d2: f64 = v_pre
        .iter()
        .zip(v_selected.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    (weight + 1.0) * d2
}

/// Codebook utilization rate: fraction of the codebook selected at least
/// once over the token log.
pub fn cur(stats: &UsageStats, window_tokens: &[u32]) -> Result<f64> {
    if window_tokens.is_empty() {
        return Err(CodecError::Metric("CUR needs a non-empty token log".into()));
    }
    let k = stats.codebook_size();
    let mut seen = vec![false; k];
    for &t in window_tokens {
        let idx = t as usize;
        if idx >= k {
            return Err(CodecError::Token(format!(
                "CUR token {t} out of range for codebook size {k}"
            )));
        }
        seen[idx] = true;
    }
    Ok(seen.iter().filter(|&&s| s).count() as f64 / k as f64)
}

/// Empirical entropy of a token log in bits.
pub fn empirical_entropy_bits(tokens: &[u32]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(CodecError::Metric("entropy needs a non-empty token log".into()));
    }
    let mut histogram = std::collections::BTreeMap::new();
    for &t in tokens {
        *histogram.entry(t).or_insert(0u64) += 1;
    }
    let n = tokens.len() as f64;
    Ok(histogram
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum())
}

/// Bitrate efficiency: summed empirical token entropy divided by summed
/// codebook capacity in bits, over all stages.
pub fn bitrate_efficiency(stage_logs: &[Vec<u32>], stage_capacities: &[u64]) -> Result<f64> {
    if stage_logs.len() != stage_capacities.len() {
        return Err(CodecError::Metric(format!(
            "{} token logs for {} stages",
            stage_logs.len(),
            stage_capacities.len()
        )));
    }
    if stage_logs.is_empty() {
        return Err(CodecError::Metric("bitrate efficiency needs at least one stage".into()));
    }
    let mut entropy = 0.0;
    let mut capacity = 0.0;
    for (log, &cap) in stage_logs.iter().zip(stage_capacities) {
        entropy += empirical_entropy_bits(log)?;
        capacity += (cap as f64).log2();
    }
    Ok(entropy / capacity)
}
