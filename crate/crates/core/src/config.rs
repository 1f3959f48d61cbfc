//! Experiment config documents (TOML).
//!
//! One document carries the game, the signal policy, the protocol settings,
//! the simulated-agent settings, and the dynamics settings. See
//! `configs/reference.toml` for the shipped reference experiment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{DefectionMatrix, GameConfig, SignalPolicy, RECOMMENDED_FRACTION};
use crate::sampling;

pub const SCHEMA_VERSION: u32 = 1;

/// Text of the shipped reference experiment.
pub const REFERENCE_CONFIG: &str = include_str!("../configs/reference.toml");

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    schema_version: Option<u32>,
    game: RawGame,
    policy: Option<RawPolicy>,
    experiment: Option<RawExperiment>,
    agents: Option<AgentSettings>,
    dynamics: Option<DynamicsSettings>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGame {
    n_routes: Option<usize>,
    states: Vec<String>,
    prior: Vec<f64>,
    recommended_fraction: Option<f64>,
    coeffs: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    pi: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    initial_defection: Vec<Vec<f64>>,
    #[serde(default = "default_initial_rating")]
    initial_rating: f64,
    #[serde(default = "default_r_max")]
    r_max: f64,
    #[serde(default = "default_rounds")]
    rounds: usize,
    #[serde(default = "default_sessions")]
    sessions: usize,
    #[serde(default)]
    state_sampling: StateSampling,
    #[serde(default)]
    state_seed: u64,
    state_sequence: Option<Vec<String>>,
    review_default: Option<f64>,
}

fn default_initial_rating() -> f64 {
    2.5
}
fn default_r_max() -> f64 {
    5.0
}
fn default_rounds() -> usize {
    100
}
fn default_sessions() -> usize {
    33
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateSampling {
    /// Exact prior counts, shuffled.
    #[default]
    Balanced,
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FollowerKind {
    RatingProportional,
    Threshold,
    AlwaysFollow,
    UniformRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSettings {
    #[serde(default = "default_follower")]
    pub follower: FollowerKind,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_regret_scale")]
    pub regret_scale: f64,
}

fn default_follower() -> FollowerKind {
    FollowerKind::RatingProportional
}
fn default_threshold() -> f64 {
    4.175
}
fn default_regret_scale() -> f64 {
    10.0
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            follower: default_follower(),
            threshold: default_threshold(),
            regret_scale: default_regret_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSettings {
    pub m_max: Option<f64>,
    #[serde(default)]
    pub m1: f64,
}

/// Settings for the rating/review protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSettings {
    pub initial_defection: DefectionMatrix,
    pub initial_rating: f64,
    pub r_max: f64,
    pub rounds: usize,
    pub sessions: usize,
    pub state_sequence: Vec<usize>,
    pub sequence_source: SequenceSource,
    pub review_default: f64,
}

/// Where the state sequence came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SequenceSource {
    Explicit,
    Sampled { sampling: StateSampling, seed: u64 },
}

/// A fully validated experiment document.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub game: GameConfig,
    pub policy: SignalPolicy,
    pub protocol: ProtocolSettings,
    pub agents: AgentSettings,
    pub dynamics: DynamicsSettings,
}

fn parse_document(text: &str) -> Result<RawDocument> {
    let doc: RawDocument = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    if let Some(v) = doc.schema_version {
        if v != SCHEMA_VERSION {
            return Err(Error::invalid(
                "schema_version",
                format!("unsupported version {v} (expected {SCHEMA_VERSION})"),
            ));
        }
    }
    Ok(doc)
}

fn build_game(raw: RawGame) -> Result<GameConfig> {
    let nu = raw.recommended_fraction.unwrap_or(RECOMMENDED_FRACTION);
    if nu != RECOMMENDED_FRACTION {
        return Err(Error::invalid(
            "recommended_fraction",
            format!("only full coverage (1) is supported, got {nu}"),
        ));
    }
    let game = GameConfig::new(raw.states, raw.prior, raw.coeffs)?;
    if let Some(n) = raw.n_routes {
        if n != game.n_routes() {
            return Err(Error::invalid(
                "n_routes",
                format!("declared {n} but coefficient tables have {}", game.n_routes()),
            ));
        }
    }
    Ok(game)
}

/// Parses a config document and returns its validated game.
pub fn validate_config(text: &str) -> Result<GameConfig> {
    build_game(parse_document(text)?.game)
}

/// Parses and validates a complete experiment document.
pub fn parse_experiment(text: &str) -> Result<Experiment> {
    let doc = parse_document(text)?;
    let game = build_game(doc.game)?;

    let policy = doc
        .policy
        .ok_or_else(|| Error::invalid("policy", "missing [policy] table"))?;
    let policy = SignalPolicy::new(policy.pi)?;
    if policy.n_states() != game.n_states() || policy.n_routes() != game.n_routes() {
        return Err(Error::invalid(
            "policy.pi",
            format!(
                "expected {}x{} table, got {}x{}",
                game.n_states(),
                game.n_routes(),
                policy.n_states(),
                policy.n_routes()
            ),
        ));
    }

    let raw = doc
        .experiment
        .ok_or_else(|| Error::invalid("experiment", "missing [experiment] table"))?;
    let initial_defection = DefectionMatrix::new(raw.initial_defection)?;
    if initial_defection.n() != game.n_routes() {
        return Err(Error::invalid(
            "experiment.initial_defection",
            format!("expected {n}x{n}", n = game.n_routes()),
        ));
    }
    if !(raw.r_max > 0.0 && raw.r_max.is_finite()) {
        return Err(Error::invalid("experiment.r_max", "must be positive"));
    }
    if !(0.0..=raw.r_max).contains(&raw.initial_rating) {
        return Err(Error::invalid("experiment.initial_rating", "must lie in [0, r_max]"));
    }
    let review_default = raw.review_default.unwrap_or(raw.r_max);
    if !(0.0..=raw.r_max).contains(&review_default) {
        return Err(Error::invalid("experiment.review_default", "must lie in [0, r_max]"));
    }
    if raw.rounds == 0 || raw.sessions == 0 {
        return Err(Error::invalid("experiment", "rounds and sessions must be positive"));
    }
    let sequence_source = match raw.state_sequence {
        Some(_) => SequenceSource::Explicit,
        None => SequenceSource::Sampled {
            sampling: raw.state_sampling,
            seed: raw.state_seed,
        },
    };
    let state_sequence = match raw.state_sequence {
        Some(names) => {
            if names.len() != raw.rounds {
                return Err(Error::invalid(
                    "experiment.state_sequence",
                    format!("expected {} entries, got {}", raw.rounds, names.len()),
                ));
            }
            names
                .iter()
                .map(|name| {
                    game.state_index(name).ok_or_else(|| {
                        Error::invalid(
                            "experiment.state_sequence",
                            format!("unknown state `{name}`"),
                        )
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => sample_sequence(&game, raw.state_sampling, raw.rounds, raw.state_seed)?,
    };

    let agents = doc.agents.unwrap_or_default();
    if !(agents.regret_scale > 0.0) {
        return Err(Error::invalid("agents.regret_scale", "must be positive"));
    }
    let dynamics = doc.dynamics.unwrap_or_default();
    if let Some(m_max) = dynamics.m_max {
        if !(m_max > 0.0) {
            return Err(Error::invalid("dynamics.m_max", "must be positive"));
        }
    }

    Ok(Experiment {
        game,
        policy,
        protocol: ProtocolSettings {
            initial_defection,
            initial_rating: raw.initial_rating,
            r_max: raw.r_max,
            rounds: raw.rounds,
            sessions: raw.sessions,
            state_sequence,
            sequence_source,
            review_default,
        },
        agents,
        dynamics,
    })
}

fn sample_sequence(game: &GameConfig, how: StateSampling, rounds: usize, seed: u64) -> Result<Vec<usize>> {
    match how {
        StateSampling::Balanced => sampling::balanced_states(game.prior(), rounds, seed),
        StateSampling::Iid => sampling::iid_states(game.prior(), rounds, seed),
    }
}

/// The shipped reference experiment.
pub fn reference_experiment() -> Experiment {
    parse_experiment(REFERENCE_CONFIG).expect("shipped reference config is valid")
}

impl Experiment {
    /// Changes the round count, resampling the state sequence.
    ///
    /// Fails for explicit sequences of a different length.
    pub fn with_rounds(mut self, rounds: usize) -> Result<Self> {
        if rounds == self.protocol.rounds {
            return Ok(self);
        }
        if rounds == 0 {
            return Err(Error::invalid("rounds", "must be positive"));
        }
        match self.protocol.sequence_source {
            SequenceSource::Explicit => Err(Error::invalid(
                "rounds",
                "config lists an explicit state sequence of a different length",
            )),
            SequenceSource::Sampled { sampling, seed } => {
                self.protocol.state_sequence = sample_sequence(&self.game, sampling, rounds, seed)?;
                self.protocol.rounds = rounds;
                Ok(self)
            }
        }
    }

    /// `m_max` from the document, or the coefficient bound when absent.
    pub fn m_max(&self) -> f64 {
        self.dynamics
            .m_max
            .unwrap_or_else(|| self.game.m_max_lower_bound())
    }
}
