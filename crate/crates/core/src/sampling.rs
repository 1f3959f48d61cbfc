//! State sequence generation.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Independent draws from `prior`.
pub fn iid_states(prior: &[f64], len: usize, seed: u64) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(prior).map_err(|e| Error::invalid("prior", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len).map(|_| dist.sample(&mut rng)).collect())
}

/// A shuffled sequence whose empirical distribution matches `prior` as
/// closely as integer counts allow (largest-remainder apportionment).
pub fn balanced_states(prior: &[f64], len: usize, seed: u64) -> Result<Vec<usize>> {
    if prior.is_empty() {
        return Err(Error::Empty("prior"));
    }
    let quotas: Vec<f64> = prior.iter().map(|p| p * len as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remaining = len - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..prior.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &w in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[w] += 1;
        remaining -= 1;
    }
    let mut seq: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(w, &c)| std::iter::repeat_n(w, c))
        .collect();
    seq.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(seq)
}
