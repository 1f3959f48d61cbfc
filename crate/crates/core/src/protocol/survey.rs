//! End-of-session feedback survey.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Answer to "How did you make your route choice decisions?"
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Weighed rating, histograms and recommendation together.
    A,
    /// Followed while the rating stayed above a threshold.
    B,
    /// Always followed.
    C,
    /// Random choices.
    D,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::A => "a",
            Strategy::B => "b",
            Strategy::C => "c",
            Strategy::D => "d",
        }
    }
}

pub const SURVEY_QUESTIONS: [&str; 9] = [
    "On the scale of 1 to 5, how well did you understand what was happening in each scenario, what you were doing and what you needed to do next?",
    "On the scale of 1 to 5, how often did you check the average star rating before making route choice decisions?",
    "When you checked the average star rating, on the scale of 1 to 5, how much did it affect your route choice decisions?",
    "On the scale of 1 to 5, how often did you check the histograms before making route choice decisions?",
    "When you checked the histograms, on the scale of 1 to 5, how much did they affect your route choice decisions?",
    "How did you make your route choice decisions? (a) study the rating, histograms and recommendation; (b) follow while the rating is above some value; (c) always follow; (d) random choices",
    "If you chose (b) above, what was the threshold value?",
    "What did you like or dislike about the experiment interface?",
    "Any other comments?",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyAnswers {
    pub understanding: u8,
    pub rating_checks: u8,
    pub rating_influence: u8,
    pub histogram_checks: u8,
    pub histogram_influence: u8,
    pub strategy: Strategy,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub interface_feedback: Option<String>,
    #[serde(default)]
    pub comments: Option<String>,
}

/// Stored survey of one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub s: usize,
    pub answers: SurveyAnswers,
}

/// Reads every `*.json` survey record in `dir`.
pub fn read_surveys(dir: impl AsRef<std::path::Path>) -> Result<Vec<SurveyRecord>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| Ok(serde_json::from_slice(&std::fs::read(p)?)?))
        .collect()
}

impl SurveyAnswers {
    pub fn validate(&self, r_max: f64) -> Result<()> {
        for (field, v) in [
            ("understanding", self.understanding),
            ("rating_checks", self.rating_checks),
            ("rating_influence", self.rating_influence),
            ("histogram_checks", self.histogram_checks),
            ("histogram_influence", self.histogram_influence),
        ] {
            if !(1..=5).contains(&v) {
                return Err(Error::invalid(field, "answer must be 1 to 5"));
            }
        }
        match (self.strategy, self.threshold) {
            (Strategy::B, None) => Err(Error::invalid("threshold", "required for strategy (b)")),
            (Strategy::B, Some(t)) if !(0.0..=r_max).contains(&t) => {
                Err(Error::invalid("threshold", "must lie in [0, r_max]"))
            }
            (s, Some(_)) if s != Strategy::B => {
                Err(Error::invalid("threshold", "only asked for strategy (b)"))
            }
            _ => Ok(()),
        }
    }
}
