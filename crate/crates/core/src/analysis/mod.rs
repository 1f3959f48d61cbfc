//! Hypothesis tables and regressions over session logs.
//!
//! - H1: follow frequency against displayed rating.
//! - H2: terminal rating and follow frequency per participant.
//! - H3: defection estimate entries per participant.
//! - H4: displayed rating against the time-averaged aggregated regret.
//!
//! Everything is recomputed from the logs, so a report is a pure function of
//! logs, the initial defection estimate and the filters.

mod export;
mod regression;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;
use crate::error::{Error, Result};
use crate::game::DefectionMatrix;
use crate::protocol::{aggregated_regret, estimate_defection, KeyedStores, SessionLog, Strategy, Tenths};

pub use export::{write_exports, ExportPaths};
pub use regression::{linear_fit, RegressionResult};

pub const DEFAULT_BAND: (f64, f64) = (2.6, 3.9);
pub const DEFAULT_MIN_RATING: f64 = 4.0;
pub const DEFAULT_MIN_REGRET: f64 = 2.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Filters {
    /// Displayed ratings inside this closed interval are left out of H1.
    pub band: Option<(f64, f64)>,
    /// H4 drops rounds whose displayed rating is below this.
    pub min_rating: f64,
    /// H4 drops rounds whose time-averaged aggregated regret is below this.
    pub min_regret: f64,
}

impl Default for Filters {
    fn default() -> Self {
        Self {
            band: Some(DEFAULT_BAND),
            min_rating: DEFAULT_MIN_RATING,
            min_regret: DEFAULT_MIN_REGRET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowRow {
    pub rating: f64,
    pub follows: usize,
    pub count: usize,
    pub frequency: f64,
}

fn in_band(rating: Tenths, band: Option<(f64, f64)>) -> bool {
    band.is_some_and(|(lo, hi)| Tenths::of(lo) <= rating && rating <= Tenths::of(hi))
}

/// Follow frequency per displayed rating, excluding ratings inside `band`.
pub fn follow_prob_by_rating(logs: &[SessionLog], band: Option<(f64, f64)>) -> Result<Vec<FollowRow>> {
    if logs.iter().all(|l| l.records.is_empty()) {
        return Err(Error::Empty("session logs"));
    }
    let mut table: BTreeMap<Tenths, (usize, usize)> = BTreeMap::new();
    for r in logs.iter().flat_map(|l| &l.records) {
        let key = Tenths::of(r.rating_displayed);
        if in_band(key, band) {
            continue;
        }
        let entry = table.entry(key).or_default();
        entry.0 += usize::from(r.followed());
        entry.1 += 1;
    }
    if table.is_empty() {
        return Err(Error::Empty("rounds outside the exclusion band"));
    }
    Ok(table
        .into_iter()
        .map(|(rating, (follows, count))| FollowRow {
            rating: rating.value(),
            follows,
            count,
            frequency: follows as f64 / count as f64,
        })
        .collect())
}

/// Outcome of a regression that may lack usable data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Fit {
    Ok(RegressionResult),
    /// Points exist but the response has no variance.
    Degenerate { reason: String },
    InsufficientData { points: usize },
}

impl Fit {
    fn from_points(points: &[(f64, f64)]) -> Self {
        match linear_fit(points) {
            Err(_) => Fit::InsufficientData {
                points: points.len(),
            },
            Ok(fit) if points.iter().all(|p| p.1 == points[0].1) => Fit::Degenerate {
                reason: format!("all {} responses equal {}", fit.points, points[0].1),
            },
            Ok(fit) => Fit::Ok(fit),
        }
    }

    pub fn result(&self) -> Option<&RegressionResult> {
        match self {
            Fit::Ok(r) => Some(r),
            _ => None,
        }
    }
}

/// Aggregated regret of one round, replayed from the logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretPoint {
    pub s: usize,
    pub k: usize,
    pub rating: f64,
    pub u_hat: f64,
    pub m_hat: f64,
}

/// Store and estimator state reconstructed by replaying logs in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub points: Vec<RegretPoint>,
    /// Estimate each participant played under, in participant order.
    pub defection: Vec<DefectionMatrix>,
}

/// Replays the keyed stores over `logs` (sorted by participant then round).
pub fn replay(logs: &[SessionLog], initial: &DefectionMatrix, r_max: f64) -> Result<Replay> {
    let mut order: Vec<&SessionLog> = logs.iter().collect();
    order.sort_by_key(|l| l.s);
    let mut stores = KeyedStores::new(initial.n(), r_max);
    let mut p_hat = initial.clone();
    let mut defection = Vec::with_capacity(order.len());
    let mut points = Vec::new();
    for log in order {
        defection.push(p_hat.clone());
        let mut records: Vec<_> = log.records.iter().collect();
        records.sort_by_key(|r| r.k);
        let mut history = Vec::with_capacity(records.len());
        for r in records {
            stores.record_round(r)?;
            let agg = aggregated_regret(&stores, r.state, r.rating_displayed, &history)?;
            history.push(agg.u_hat);
            points.push(RegretPoint {
                s: r.s,
                k: r.k,
                rating: r.rating_displayed,
                u_hat: agg.u_hat,
                m_hat: agg.m_hat,
            });
        }
        p_hat = estimate_defection(stores.choice_counts(), &p_hat)?;
    }
    Ok(Replay { points, defection })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H1 {
    pub table: Vec<FollowRow>,
    pub fit: Fit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantSummary {
    pub s: usize,
    pub rounds: usize,
    pub follows: usize,
    pub follow_frequency: f64,
    /// Follow frequency pooled over participants `1..=s`.
    pub cumulative_follow_frequency: f64,
    /// Displayed rating in the last round.
    pub terminal_rating: f64,
    pub homogeneity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H3 {
    /// Tracked entries `(i, i + 1 mod n)`.
    pub pairs: Vec<(usize, usize)>,
    /// One row per participant, one column per tracked pair.
    pub series: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H4 {
    pub min_regret: f64,
    pub min_rating: f64,
    pub retained: usize,
    pub total: usize,
    pub retained_pct: f64,
    /// `(min_regret, min_rating, pct%)`.
    pub label: String,
    /// Regression of displayed rating on time-averaged aggregated regret.
    pub fit: Fit,
}

/// H4 regression after dropping rounds below either threshold.
pub fn h4_fit(points: &[RegretPoint], min_regret: f64, min_rating: f64) -> H4 {
    let kept: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.rating >= min_rating && p.m_hat >= min_regret)
        .map(|p| (p.m_hat, p.rating))
        .collect();
    let total = points.len();
    let retained_pct = if total == 0 {
        0.0
    } else {
        100.0 * kept.len() as f64 / total as f64
    };
    H4 {
        min_regret,
        min_rating,
        retained: kept.len(),
        total,
        retained_pct,
        label: format!("({min_regret}, {min_rating}, {retained_pct:.0}%)"),
        fit: Fit::from_points(&kept),
    }
}

/// `h4_fit` over every combination of thresholds.
pub fn h4_sweep(points: &[RegretPoint], min_regrets: &[f64], min_ratings: &[f64]) -> Vec<H4> {
    min_ratings
        .iter()
        .flat_map(|&rating| min_regrets.iter().map(move |&regret| (regret, rating)))
        .map(|(regret, rating)| h4_fit(points, regret, rating))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub schema_version: u32,
    pub participants: usize,
    pub rounds: usize,
    pub filters: Filters,
    pub h1: H1,
    pub h2: Vec<ParticipantSummary>,
    pub h3: H3,
    pub h4: H4,
    #[serde(skip)]
    pub regret_points: Vec<RegretPoint>,
}

fn choice_table(logs: &[&SessionLog], n: usize) -> Vec<Vec<u64>> {
    let mut t = vec![vec![0u64; n]; n];
    for r in logs.iter().flat_map(|l| &l.records) {
        if r.recommended < n && r.chosen < n {
            t[r.recommended][r.chosen] += 1;
        }
    }
    t
}

fn n_routes(logs: &[SessionLog]) -> usize {
    logs.iter()
        .flat_map(|l| &l.records)
        .map(|r| r.travel_times.len())
        .max()
        .unwrap_or(0)
}

/// One minus the total-variation distance between participant `s`'s
/// conditional choice distribution and that of all earlier participants,
/// averaged over recommendations weighted by how often `s` received them.
/// Recommendations earlier participants never received are skipped; with no
/// comparable data the score is 1.
pub fn homogeneity_score(logs: &[SessionLog], s: usize) -> Result<f64> {
    let own: Vec<&SessionLog> = logs.iter().filter(|l| l.s == s).collect();
    if own.is_empty() {
        return Err(Error::invalid("s", format!("no log for participant {s}")));
    }
    let earlier: Vec<&SessionLog> = logs.iter().filter(|l| l.s < s).collect();
    let n = n_routes(logs);
    let mine = choice_table(&own, n);
    let pooled = choice_table(&earlier, n);
    let (mut weighted, mut weight) = (0.0, 0.0);
    for i in 0..n {
        let a: u64 = mine[i].iter().sum();
        let b: u64 = pooled[i].iter().sum();
        if a == 0 || b == 0 {
            continue;
        }
        let tv = 0.5
            * (0..n)
                .map(|j| (mine[i][j] as f64 / a as f64 - pooled[i][j] as f64 / b as f64).abs())
                .sum::<f64>();
        weighted += a as f64 * tv;
        weight += a as f64;
    }
    Ok(if weight == 0.0 {
        1.0
    } else {
        1.0 - weighted / weight
    })
}

/// All four hypothesis artifacts.
pub fn hypothesis_report(
    logs: &[SessionLog],
    initial: &DefectionMatrix,
    r_max: f64,
    filters: &Filters,
) -> Result<HypothesisReport> {
    if logs.is_empty() {
        return Err(Error::Empty("session logs"));
    }
    let mut logs = logs.to_vec();
    logs.sort_by_key(|l| l.s);

    let table = follow_prob_by_rating(&logs, filters.band)?;
    let points: Vec<(f64, f64)> = table.iter().map(|r| (r.rating, r.frequency)).collect();
    let h1 = H1 {
        fit: Fit::from_points(&points),
        table,
    };

    let mut h2 = Vec::with_capacity(logs.len());
    let (mut cum_follows, mut cum_rounds) = (0usize, 0usize);
    for log in &logs {
        let follows = log.follow_count();
        let rounds = log.records.len();
        cum_follows += follows;
        cum_rounds += rounds;
        h2.push(ParticipantSummary {
            s: log.s,
            rounds,
            follows,
            follow_frequency: if rounds == 0 { 0.0 } else { follows as f64 / rounds as f64 },
            cumulative_follow_frequency: if cum_rounds == 0 {
                0.0
            } else {
                cum_follows as f64 / cum_rounds as f64
            },
            terminal_rating: log.records.iter().max_by_key(|r| r.k).map_or(0.0, |r| r.rating_displayed),
            homogeneity: homogeneity_score(&logs, log.s)?,
        });
    }

    let replayed = replay(&logs, initial, r_max)?;
    let n = initial.n();
    let pairs: Vec<(usize, usize)> = if n < 2 {
        Vec::new()
    } else {
        (0..n).map(|i| (i, (i + 1) % n)).collect()
    };
    let series = replayed
        .defection
        .iter()
        .map(|p| pairs.iter().map(|&(i, j)| p.get(i, j)).collect())
        .collect();

    Ok(HypothesisReport {
        schema_version: SCHEMA_VERSION,
        participants: logs.len(),
        rounds: logs.iter().map(|l| l.records.len()).sum(),
        filters: *filters,
        h1,
        h2,
        h3: H3 { pairs, series },
        h4: h4_fit(&replayed.points, filters.min_regret, filters.min_rating),
        regret_points: replayed.points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupFit {
    pub strategy: Strategy,
    pub participants: usize,
    /// Participants whose own H4 regression was computable.
    pub fitted: usize,
    pub mean_r_squared: Option<f64>,
}

/// Mean per-participant H4 R² for each self-reported strategy, keeping only
/// rounds with displayed rating at least `min_rating`.
pub fn subgroup_r_squared(
    points: &[RegretPoint],
    strategies: &BTreeMap<usize, Strategy>,
    min_rating: f64,
) -> Vec<SubgroupFit> {
    let mut per_s: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for p in points.iter().filter(|p| p.rating >= min_rating) {
        per_s.entry(p.s).or_default().push((p.m_hat, p.rating));
    }
    let mut groups: BTreeMap<Strategy, (usize, Vec<f64>)> = BTreeMap::new();
    for (&s, &strategy) in strategies {
        let g = groups.entry(strategy).or_default();
        g.0 += 1;
        if let Some(fit) = per_s.get(&s).and_then(|pts| linear_fit(pts).ok()) {
            g.1.push(fit.r_squared);
        }
    }
    groups
        .into_iter()
        .map(|(strategy, (participants, r2))| SubgroupFit {
            strategy,
            participants,
            fitted: r2.len(),
            mean_r_squared: (!r2.is_empty()).then(|| r2.iter().sum::<f64>() / r2.len() as f64),
        })
        .collect()
}
