//! Per-round arithmetic of the rating/review protocol.

use serde::{Deserialize, Serialize};

use crate::dynamics::induced_flow;
use crate::error::{Error, Result};
use crate::game::{DefectionMatrix, GameConfig, SignalPolicy};

/// Regret of the recommendation: its travel time minus the fastest route's.
pub fn instantaneous_regret(travel_times: &[f64], recommended: usize) -> Result<f64> {
    if travel_times.is_empty() {
        return Err(Error::Empty("travel times"));
    }
    let chosen = *travel_times
        .get(recommended)
        .ok_or(Error::UnknownRoute(recommended))?;
    let fastest = travel_times.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((chosen - fastest).max(0.0))
}

/// A rating rounded to one decimal place, stored as an integer count of tenths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tenths(pub u32);

impl Tenths {
    /// Nearest tenth, ties away from zero. `rating` must be nonnegative.
    pub fn of(rating: f64) -> Self {
        Tenths((rating * 10.0).round() as u32)
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 10.0
    }
}

fn check_rating(what: &'static str, value: f64, r_max: f64) -> Result<()> {
    if (0.0..=r_max).contains(&value) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            what,
            value,
            lo: 0.0,
            hi: r_max,
        })
    }
}

/// Rounds a rating to the nearest tenth for display and store keys.
pub fn quantize_rating(rating: f64, r_max: f64) -> Result<f64> {
    check_rating("rating", rating, r_max)?;
    Ok(Tenths::of(rating).value())
}

/// `k/(k+1) r + mean_review/(k+1)`, for round `k >= 1`.
pub fn update_rating(rating: f64, k: usize, mean_review: f64, r_max: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k", "rounds are numbered from 1"));
    }
    check_rating("rating", rating, r_max)?;
    check_rating("mean review", mean_review, r_max)?;
    let k = k as f64;
    Ok(((k * rating + mean_review) / (k + 1.0)).clamp(0.0, r_max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub flows: Vec<f64>,
    pub travel_times: Vec<f64>,
}

/// Link flows and travel times when a `rating / r_max` fraction of the
/// population follows and the rest reroute by `p_hat`.
pub fn forecast_flows(
    cfg: &GameConfig,
    state: usize,
    rating: f64,
    r_max: f64,
    policy: &SignalPolicy,
    p_hat: &DefectionMatrix,
) -> Result<Forecast> {
    check_rating("rating", rating, r_max)?;
    let flows = induced_flow(policy.row(state)?, p_hat, 1.0 - rating / r_max)?;
    let travel_times = cfg.route_latencies(state, &flows)?;
    Ok(Forecast {
        flows,
        travel_times,
    })
}

/// Off-diagonal choice frequencies per recommended route. Rows with no
/// observed defection keep the corresponding row of `previous`.
pub fn estimate_defection(counts: &[Vec<u64>], previous: &DefectionMatrix) -> Result<DefectionMatrix> {
    let n = previous.n();
    if counts.len() != n || counts.iter().any(|row| row.len() != n) {
        return Err(Error::Dimension {
            context: "estimate_defection counts",
            expected: n,
            actual: counts.len(),
        });
    }
    let rows = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let off_diagonal: u64 = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, c)| c)
                .sum();
            if off_diagonal == 0 {
                previous.row(i).to_vec()
            } else {
                row.iter()
                    .enumerate()
                    .map(|(j, &c)| {
                        if j == i {
                            0.0
                        } else {
                            c as f64 / off_diagonal as f64
                        }
                    })
                    .collect()
            }
        })
        .collect();
    DefectionMatrix::new(rows)
}
