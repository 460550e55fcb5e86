use rand::Rng;

use crate::dataset::CenterRef;
use crate::error::{Error, Result};

/// Candidate patch centers with per-entry loss and selection probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePool {
    pub entries: Vec<CenterRef>,
    pub losses: Vec<f64>,
    pub probabilities: Vec<f64>,
    cumulative: Vec<f64>,
}

impl SamplePool {
    /// Equal probabilities, zero recorded loss.
    pub fn uniform(entries: Vec<CenterRef>) -> Self {
        let n = entries.len();
        let p = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        Self::with_probabilities(entries, vec![0.0; n], vec![p; n])
    }

    fn with_probabilities(entries: Vec<CenterRef>, losses: Vec<f64>, probabilities: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = probabilities
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self {
            entries,
            losses,
            probabilities,
            cumulative,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index drawn with the pool's selection probabilities.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty pool");
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.len() - 1)
    }

    /// Index drawn uniformly.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.len())
    }
}

fn check_losses(losses: &[f64]) -> Result<()> {
    if let Some(l) = losses.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(Error::Input(format!("selection loss {l} is not a finite non-negative number")));
    }
    Ok(())
}

/// `(Lᵢ + δ) / Σⱼ(Lⱼ + δ)` with `δ = 1e-6·max(max L, 1)`.
fn proportional(losses: &[f64]) -> Vec<f64> {
    let max = losses.iter().copied().fold(0.0, f64::max);
    let delta = 1e-6 * max.max(1.0);
    let total: f64 = losses.iter().map(|l| l + delta).sum();
    losses.iter().map(|l| (l + delta) / total).collect()
}

/// Rebuilds every selection probability from one loss per entry.
pub fn update_selection_probabilities(pool: &SamplePool, losses: &[f64]) -> Result<SamplePool> {
    if losses.len() != pool.len() {
        return Err(Error::Input(format!("{} losses for a pool of {}", losses.len(), pool.len())));
    }
    check_losses(losses)?;
    Ok(SamplePool::with_probabilities(
        pool.entries.clone(),
        losses.to_vec(),
        proportional(losses),
    ))
}

/// Re-scores only the entries at `indices`: they share their previous
/// total mass in proportion to the new losses, everything else keeps its
/// probability.
pub fn update_subset(pool: &SamplePool, indices: &[usize], losses: &[f64]) -> Result<SamplePool> {
    if indices.len() != losses.len() {
        return Err(Error::Input("subset indices and losses differ in length".into()));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= pool.len()) {
        return Err(Error::Input(format!("subset index {i} outside pool of {}", pool.len())));
    }
    check_losses(losses)?;
    let mass: f64 = indices.iter().map(|&i| pool.probabilities[i]).sum();
    let share = proportional(losses);
    let mut probs = pool.probabilities.clone();
    let mut all_losses = pool.losses.clone();
    for ((&i, &s), &l) in indices.iter().zip(&share).zip(losses) {
        probs[i] = mass * s;
        all_losses[i] = l;
    }
    Ok(SamplePool::with_probabilities(pool.entries.clone(), all_losses, probs))
}

/// Aligned pool indices of one mini-batch of triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Anchors and positives uniformly from the lesion pool (distinct within a
/// triplet), negatives from the healthy pool by selection probability, or
/// uniformly when `selective` is off.
pub fn build_triplet_batch<R: Rng + ?Sized>(
    lesion: &SamplePool,
    healthy: &SamplePool,
    size: usize,
    selective: bool,
    rng: &mut R,
) -> Result<TripletBatch> {
    if lesion.len() < 2 {
        return Err(Error::Usage(format!("lesion pool has {} entries, need at least 2", lesion.len())));
    }
    if healthy.is_empty() {
        return Err(Error::Usage("healthy pool is empty".into()));
    }
    let mut b = TripletBatch {
        anchors: Vec::with_capacity(size),
        positives: Vec::with_capacity(size),
        negatives: Vec::with_capacity(size),
    };
    for _ in 0..size {
        let a = lesion.sample_uniform(rng);
        let mut p = lesion.sample_uniform(rng);
        while p == a {
            p = lesion.sample_uniform(rng);
        }
        b.anchors.push(a);
        b.positives.push(p);
        b.negatives.push(if selective { healthy.sample(rng) } else { healthy.sample_uniform(rng) });
    }
    Ok(b)
}
