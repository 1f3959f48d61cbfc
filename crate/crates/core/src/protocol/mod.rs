//! The rating/review experiment engine.
//!
//! Each participant plays `rounds` rounds. In every round the engine samples
//! a recommendation from the policy, shows per-state forecasts at the current
//! rating, takes a route choice, reveals realized travel times, takes a
//! review, stores it under `(state, displayed rating)`, and moves the rating
//! toward the stored mean review. The defection estimate is frozen within a
//! session and re-estimated from choice counts between participants.

mod agents;
mod ops;
mod record;
mod session;
mod stores;
mod survey;

pub use agents::{AgentPolicy, FollowRule, Outcome, Reviewer, RoundView, SimulatedAgent, StateForecast};
pub use ops::{
    estimate_defection, forecast_flows, instantaneous_regret, quantize_rating, update_rating, Forecast,
    Tenths,
};
pub use record::{
    group_sessions, read_records, read_session_logs, JsonlSink, NullSink, RoundRecord, RoundSink,
    SessionLog,
};
pub use session::{
    derive_seed, run_batch, run_session, Clock, Lineage, LogicalClock, Phase, Protocol, Session,
    SystemClock,
};
pub use stores::{aggregated_regret, AggregatedRegret, KeyedStores, StoreKey};
pub use survey::{read_surveys, Strategy, SurveyAnswers, SurveyRecord, SURVEY_QUESTIONS};
