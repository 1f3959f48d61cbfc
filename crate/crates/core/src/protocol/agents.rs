//! Participant behavior: the agent interface and the built-in simulated agents.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::instantaneous_regret;
use crate::config::{AgentSettings, FollowerKind};

/// Forecast for one state as shown to a participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateForecast {
    pub state: usize,
    pub name: String,
    pub prior: f64,
    pub flows: Vec<f64>,
    pub travel_times: Vec<f64>,
}

/// What a participant sees before choosing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundView {
    pub s: usize,
    pub k: usize,
    pub rounds: usize,
    pub rating_displayed: f64,
    pub r_max: f64,
    pub recommended: usize,
    pub forecasts: Vec<StateForecast>,
    /// Row of the frozen defection estimate for the recommended route.
    pub defection_row: Vec<f64>,
}

/// What a participant sees after choosing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub recommended: usize,
    pub chosen: usize,
    pub travel_times: Vec<f64>,
}

pub trait AgentPolicy {
    /// Route to drive.
    fn choose(&mut self, view: &RoundView) -> usize;
    /// Review in `[0, r_max]`.
    fn review(&mut self, outcome: &Outcome, r_max: f64) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FollowRule {
    /// Follow with probability `rating_displayed / r_max`.
    RatingProportional,
    /// Follow iff the displayed rating is at least the threshold.
    Threshold(f64),
    Always,
    /// Pick any route uniformly, ignoring the recommendation.
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reviewer {
    /// `r_max * max(0, 1 - regret / scale)`.
    RegretMapped { scale: f64 },
    Constant(f64),
}

impl Reviewer {
    pub fn review(&self, outcome: &Outcome, r_max: f64) -> f64 {
        match *self {
            Reviewer::RegretMapped { scale } => {
                let regret = instantaneous_regret(&outcome.travel_times, outcome.recommended)
                    .unwrap_or(0.0);
                r_max * (1.0 - regret / scale).max(0.0)
            }
            Reviewer::Constant(v) => v.clamp(0.0, r_max),
        }
    }
}

/// Seeded scripted participant.
#[derive(Debug, Clone)]
pub struct SimulatedAgent {
    pub follow: FollowRule,
    pub reviewer: Reviewer,
    rng: ChaCha8Rng,
}

impl SimulatedAgent {
    pub fn new(follow: FollowRule, reviewer: Reviewer, seed: u64) -> Self {
        Self {
            follow,
            reviewer,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_settings(settings: &AgentSettings, seed: u64) -> Self {
        let follow = match settings.follower {
            FollowerKind::RatingProportional => FollowRule::RatingProportional,
            FollowerKind::Threshold => FollowRule::Threshold(settings.threshold),
            FollowerKind::AlwaysFollow => FollowRule::Always,
            FollowerKind::UniformRandom => FollowRule::UniformRandom,
        };
        let reviewer = Reviewer::RegretMapped {
            scale: settings.regret_scale,
        };
        Self::new(follow, reviewer, seed)
    }

    fn defect(&mut self, view: &RoundView) -> usize {
        let n = view.forecasts.first().map_or(view.defection_row.len(), |f| f.flows.len());
        if let Ok(dist) = WeightedIndex::new(&view.defection_row) {
            return dist.sample(&mut self.rng);
        }
        if n <= 1 {
            return view.recommended;
        }
        let pick = self.rng.random_range(0..n - 1);
        if pick >= view.recommended {
            pick + 1
        } else {
            pick
        }
    }
}

impl AgentPolicy for SimulatedAgent {
    fn choose(&mut self, view: &RoundView) -> usize {
        let follows = match self.follow {
            FollowRule::RatingProportional => {
                self.rng.random::<f64>() < view.rating_displayed / view.r_max
            }
            FollowRule::Threshold(t) => view.rating_displayed >= t,
            FollowRule::Always => true,
            FollowRule::UniformRandom => {
                let n = view.defection_row.len().max(1);
                return self.rng.random_range(0..n);
            }
        };
        if follows {
            view.recommended
        } else {
            self.defect(view)
        }
    }

    fn review(&mut self, outcome: &Outcome, r_max: f64) -> f64 {
        self.reviewer.review(outcome, r_max)
    }
}
