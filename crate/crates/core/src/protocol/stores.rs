//! Review, regret and choice-count stores shared by a lineage of sessions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ops::{instantaneous_regret, Tenths};
use super::record::RoundRecord;
use crate::error::{Error, Result};

/// Store key: realized state and displayed rating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StoreKey {
    pub state: usize,
    pub rating: Tenths,
}

impl StoreKey {
    pub fn new(state: usize, rating: f64) -> Self {
        Self {
            state,
            rating: Tenths::of(rating),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreEntry {
    state: usize,
    rating: f64,
    reviews: Vec<f64>,
    regrets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreSnapshot {
    n_routes: usize,
    r_max: f64,
    entries: Vec<StoreEntry>,
    choice_counts: Vec<Vec<u64>>,
}

/// Keyed history of every round played in a lineage.
///
/// `choice_counts[i][j]` counts rounds where route `i` was recommended and
/// `j` was chosen, diagonal included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StoreSnapshot", into = "StoreSnapshot")]
pub struct KeyedStores {
    n_routes: usize,
    r_max: f64,
    reviews: BTreeMap<StoreKey, Vec<f64>>,
    regrets: BTreeMap<StoreKey, Vec<f64>>,
    choice_counts: Vec<Vec<u64>>,
}

/// Aggregated regret of one round and its running mean over the session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatedRegret {
    pub u_hat: f64,
    pub m_hat: f64,
}

impl KeyedStores {
    pub fn new(n_routes: usize, r_max: f64) -> Self {
        Self {
            n_routes,
            r_max,
            reviews: BTreeMap::new(),
            regrets: BTreeMap::new(),
            choice_counts: vec![vec![0; n_routes]; n_routes],
        }
    }

    pub fn n_routes(&self) -> usize {
        self.n_routes
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn choice_counts(&self) -> &[Vec<u64>] {
        &self.choice_counts
    }

    pub fn reviews(&self, key: StoreKey) -> &[f64] {
        self.reviews.get(&key).map_or(&[], Vec::as_slice)
    }

    pub fn regrets(&self, key: StoreKey) -> &[f64] {
        self.regrets.get(&key).map_or(&[], Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = StoreKey> + '_ {
        self.reviews.keys().copied()
    }

    pub fn mean_review(&self, key: StoreKey) -> Result<f64> {
        mean(self.reviews(key)).ok_or(Error::MissingKey {
            state: key.state,
            rating: key.rating.value(),
        })
    }

    pub fn mean_regret(&self, key: StoreKey) -> Result<f64> {
        mean(self.regrets(key)).ok_or(Error::MissingKey {
            state: key.state,
            rating: key.rating.value(),
        })
    }

    /// Total number of recorded rounds.
    pub fn len(&self) -> usize {
        self.reviews.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }

    /// Appends a validated round under its `(state, rating_displayed)` key.
    pub fn record_round(&mut self, rec: &RoundRecord) -> Result<()> {
        rec.validate(self.n_routes, self.r_max)?;
        let key = StoreKey::new(rec.state, rec.rating_displayed);
        self.reviews.entry(key).or_default().push(rec.review);
        self.regrets.entry(key).or_default().push(rec.regret);
        self.choice_counts[rec.recommended][rec.chosen] += 1;
        Ok(())
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// `u_hat` is the mean regret stored under `(state, rating)`; `m_hat` is the
/// mean of `previous` (the session's earlier `u_hat` values) and `u_hat`.
pub fn aggregated_regret(
    stores: &KeyedStores,
    state: usize,
    rating: f64,
    previous: &[f64],
) -> Result<AggregatedRegret> {
    let u_hat = stores.mean_regret(StoreKey::new(state, rating))?;
    let k = previous.len() as f64 + 1.0;
    let m_hat = (previous.iter().sum::<f64>() + u_hat) / k;
    Ok(AggregatedRegret { u_hat, m_hat })
}

impl From<KeyedStores> for StoreSnapshot {
    fn from(s: KeyedStores) -> Self {
        let entries = s
            .reviews
            .iter()
            .map(|(key, reviews)| StoreEntry {
                state: key.state,
                rating: key.rating.value(),
                reviews: reviews.clone(),
                regrets: s.regrets.get(key).cloned().unwrap_or_default(),
            })
            .collect();
        StoreSnapshot {
            n_routes: s.n_routes,
            r_max: s.r_max,
            entries,
            choice_counts: s.choice_counts,
        }
    }
}

impl TryFrom<StoreSnapshot> for KeyedStores {
    type Error = Error;

    fn try_from(snap: StoreSnapshot) -> Result<Self> {
        let n = snap.n_routes;
        if snap.choice_counts.len() != n || snap.choice_counts.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("choice_counts", format!("expected {n}x{n}")));
        }
        let mut stores = KeyedStores {
            choice_counts: snap.choice_counts,
            ..KeyedStores::new(n, snap.r_max)
        };
        for e in snap.entries {
            if e.reviews.len() != e.regrets.len() {
                return Err(Error::invalid("entries", "review and regret lists differ in length"));
            }
            if e.reviews.iter().any(|r| !(0.0..=snap.r_max).contains(r)) {
                return Err(Error::invalid("entries", "review outside [0, r_max]"));
            }
            if e.regrets.iter().any(|r| !(*r >= 0.0)) {
                return Err(Error::invalid("entries", "negative regret"));
            }
            let key = StoreKey::new(e.state, e.rating);
            stores.reviews.insert(key, e.reviews);
            stores.regrets.insert(key, e.regrets);
        }
        Ok(stores)
    }
}

impl RoundRecord {
    /// Checks ranges and that `regret` matches the travel times.
    pub fn validate(&self, n_routes: usize, r_max: f64) -> Result<()> {
        if self.flows.len() != n_routes || self.travel_times.len() != n_routes {
            return Err(Error::Dimension {
                context: "round record",
                expected: n_routes,
                actual: self.travel_times.len(),
            });
        }
        for route in [self.recommended, self.chosen] {
            if route >= n_routes {
                return Err(Error::UnknownRoute(route));
            }
        }
        for (what, value) in [("rating_displayed", self.rating_displayed), ("review", self.review)] {
            if !(0.0..=r_max).contains(&value) {
                return Err(Error::OutOfRange {
                    what,
                    value,
                    lo: 0.0,
                    hi: r_max,
                });
            }
        }
        let expected = instantaneous_regret(&self.travel_times, self.recommended)?;
        if (expected - self.regret).abs() > 1e-9 * expected.abs().max(1.0) {
            return Err(Error::invalid(
                "regret",
                format!("recorded {} but travel times give {expected}", self.regret),
            ));
        }
        if self.t_end < self.t_start {
            return Err(Error::invalid("t_end", "earlier than t_start"));
        }
        Ok(())
    }
}
