//! HTTP session service.
//!
//! | method | path | body | response |
//! |--------|------|------|----------|
//! | POST | `/sessions` | `{lineage?, seed?}` | session state (201) |
//! | GET | `/sessions/{id}` | | session state |
//! | GET | `/sessions/{id}/round` | | round view |
//! | POST | `/sessions/{id}/choice` | `{k, chosen}` | revealed travel times |
//! | POST | `/sessions/{id}/review` | `{k, review}` | stored record and next view |
//! | GET | `/sessions/{id}/summary` | | session summary |
//! | POST | `/sessions/{id}/survey` | survey answers | stored survey |
//! | GET | `/survey` | | survey questions |
//!
//! Requests carrying a round index `k` are idempotent: repeating an already
//! applied request returns the original result and writes nothing.
//! Out-of-phase requests get 409, unknown sessions 404, invalid values 400.
//!
//! Each lineage lives in `data_dir/<lineage>/` with round logs under `logs/`,
//! finished sessions under `sessions/`, surveys under `surveys/`, and the
//! store snapshot in `lineage.json`. At most one session per lineage is active.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use routerec_core::protocol::{
    derive_seed, quantize_rating, JsonlSink, Lineage, Outcome, Phase, Protocol, RoundRecord, RoundView,
    Session, SessionLog, SurveyAnswers, SurveyRecord, SystemClock, SURVEY_QUESTIONS,
};
use routerec_core::Error;
use serde::{Deserialize, Serialize};

pub const DEFAULT_LINEAGE: &str = "default";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session `{id}`"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Phase { .. } => StatusCode::CONFLICT,
            Error::OutOfRange { .. } | Error::UnknownRoute(_) | Error::Invalid { .. } => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct LiveSession {
    session: Session,
    sink: JsonlSink,
    survey: Option<SurveyAnswers>,
}

struct LineageSlot {
    dir: PathBuf,
    lineage: Lineage,
    active: Option<String>,
    sessions: HashMap<String, LiveSession>,
}

impl LineageSlot {
    fn open(protocol: &Protocol, dir: PathBuf) -> routerec_core::Result<Self> {
        let snapshot = dir.join("lineage.json");
        let lineage = if snapshot.exists() {
            let lineage = Lineage::load(&snapshot)?;
            if lineage.stores.n_routes() != protocol.game.n_routes() {
                return Err(Error::Dimension {
                    context: "stored lineage routes",
                    expected: protocol.game.n_routes(),
                    actual: lineage.stores.n_routes(),
                });
            }
            lineage
        } else {
            protocol.new_lineage()
        };
        // Rounds of a session that never finished are not in the snapshot.
        let partial = log_path(&dir, lineage.next_participant());
        if partial.exists() {
            let aside = partial.with_extension("jsonl.aborted");
            log::warn!("setting aside unfinished log {}", partial.display());
            std::fs::rename(&partial, aside)?;
        }
        Ok(Self {
            dir,
            lineage,
            active: None,
            sessions: HashMap::new(),
        })
    }
}

fn log_path(dir: &Path, s: usize) -> PathBuf {
    dir.join("logs").join(format!("session_{s:03}.jsonl"))
}

struct Shared {
    protocol: Protocol,
    data_dir: PathBuf,
    seed: u64,
    lineages: Mutex<HashMap<String, Arc<Mutex<LineageSlot>>>>,
    sessions: Mutex<HashMap<String, String>>,
}

/// Service state; cheap to clone.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(protocol: Protocol, data_dir: impl Into<PathBuf>, seed: u64) -> Self {
        AppState(Arc::new(Shared {
            protocol,
            data_dir: data_dir.into(),
            seed,
            lineages: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
        }))
    }

    fn lineage(&self, id: &str) -> ApiResult<Arc<Mutex<LineageSlot>>> {
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !valid {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("invalid lineage name `{id}`")));
        }
        let mut map = self.0.lineages.lock().expect("lineage map poisoned");
        if let Some(slot) = map.get(id) {
            return Ok(slot.clone());
        }
        let slot = LineageSlot::open(&self.0.protocol, self.0.data_dir.join(id))?;
        let slot = Arc::new(Mutex::new(slot));
        map.insert(id.to_string(), slot.clone());
        Ok(slot)
    }

    fn session_slot(&self, id: &str) -> ApiResult<Arc<Mutex<LineageSlot>>> {
        let lineage = self
            .0
            .sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))?;
        self.lineage(&lineage)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/round", get(get_round))
        .route("/sessions/{id}/choice", post(submit_choice))
        .route("/sessions/{id}/review", post(submit_review))
        .route("/sessions/{id}/summary", get(get_summary))
        .route("/sessions/{id}/survey", post(submit_survey))
        .route("/survey", get(survey_questions))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    pub lineage: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub lineage: String,
    pub s: usize,
    pub k: usize,
    pub rounds: usize,
    pub phase: Phase,
    pub review_default: f64,
    pub view: Option<RoundView>,
    pub outcome: Option<Outcome>,
}

fn session_state(id: &str, lineage: &str, live: &LiveSession, protocol: &Protocol) -> SessionState {
    SessionState {
        session_id: id.to_string(),
        lineage: lineage.to_string(),
        s: live.session.participant(),
        k: live.session.round(),
        rounds: protocol.rounds(),
        phase: live.session.phase(),
        review_default: protocol.settings.review_default,
        view: live.session.view().cloned(),
        outcome: live.session.outcome(),
    }
}

fn lineage_of(id: &str) -> &str {
    id.rsplit_once('.').map_or(DEFAULT_LINEAGE, |(l, _)| l)
}

async fn create_session(
    State(app): State<AppState>,
    body: Option<Json<CreateSession>>,
) -> ApiResult<(StatusCode, Json<SessionState>)> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let lineage_id = req.lineage.unwrap_or_else(|| DEFAULT_LINEAGE.to_string());
    let slot = app.lineage(&lineage_id)?;
    let mut slot = slot.lock().expect("lineage poisoned");
    if let Some(active) = &slot.active {
        return Err(ApiError::conflict(format!(
            "lineage `{lineage_id}` already has active session `{active}`"
        )));
    }
    let protocol = &app.0.protocol;
    let s = slot.lineage.next_participant();
    let seed = req.seed.unwrap_or_else(|| derive_seed(app.0.seed, s, 2));
    let session = Session::start(protocol, &slot.lineage, seed, &mut SystemClock)?;
    let path = log_path(&slot.dir, s);
    if path.exists() {
        std::fs::rename(&path, path.with_extension("jsonl.aborted")).map_err(Error::from)?;
    }
    let sink = JsonlSink::open(&path)?;
    let id = format!("{lineage_id}.{s:03}");
    let live = LiveSession {
        session,
        sink,
        survey: None,
    };
    let state = session_state(&id, &lineage_id, &live, protocol);
    slot.sessions.insert(id.clone(), live);
    slot.active = Some(id.clone());
    app.0
        .sessions
        .lock()
        .expect("session map poisoned")
        .insert(id.clone(), lineage_id.clone());
    log::info!("session {id} started (seed {seed})");
    Ok((StatusCode::CREATED, Json(state)))
}

fn with_session<T>(
    app: &AppState,
    id: &str,
    f: impl FnOnce(&mut LineageSlot, &str) -> ApiResult<T>,
) -> ApiResult<T> {
    let slot = app.session_slot(id)?;
    let mut slot = slot.lock().expect("lineage poisoned");
    if !slot.sessions.contains_key(id) {
        return Err(ApiError::not_found(id));
    }
    f(&mut slot, id)
}

async fn get_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionState>> {
    with_session(&app, &id, |slot, id| {
        Ok(Json(session_state(id, lineage_of(id), &slot.sessions[id], &app.0.protocol)))
    })
}

async fn get_round(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<RoundView>> {
    with_session(&app, &id, |slot, id| {
        slot.sessions[id]
            .session
            .view()
            .cloned()
            .map(Json)
            .ok_or_else(|| ApiError::conflict("session is finished"))
    })
}

fn check_round(k: usize) -> ApiResult<()> {
    if k == 0 {
        Err(ApiError::new(StatusCode::BAD_REQUEST, "rounds are numbered from 1"))
    } else {
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChoiceRequest {
    pub k: usize,
    pub chosen: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChoiceResponse {
    pub s: usize,
    pub k: usize,
    pub recommended: usize,
    pub chosen: usize,
    pub travel_times: Vec<f64>,
}

async fn submit_choice(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<ChoiceRequest>,
) -> ApiResult<Json<ChoiceResponse>> {
    with_session(&app, &id, |slot, id| {
        let live = slot.sessions.get_mut(id).expect("checked");
        let s = live.session.participant();
        let current = live.session.round();
        check_round(req.k)?;
        if req.k < current {
            let rec = &live.session.records()[req.k - 1];
            return if rec.chosen == req.chosen {
                Ok(Json(ChoiceResponse {
                    s,
                    k: rec.k,
                    recommended: rec.recommended,
                    chosen: rec.chosen,
                    travel_times: rec.travel_times.clone(),
                }))
            } else {
                Err(ApiError::conflict(format!("round {} was already played", req.k)))
            };
        }
        if req.k != current {
            return Err(ApiError::conflict(format!("current round is {current}, got {}", req.k)));
        }
        let outcome = match live.session.outcome() {
            Some(o) if o.chosen == req.chosen => o,
            Some(_) => return Err(ApiError::conflict("a different route was already chosen this round")),
            None => live.session.choose(req.chosen)?,
        };
        Ok(Json(ChoiceResponse {
            s,
            k: current,
            recommended: outcome.recommended,
            chosen: outcome.chosen,
            travel_times: outcome.travel_times,
        }))
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewRequest {
    pub k: usize,
    pub review: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReviewResponse {
    pub record: RoundRecord,
    pub phase: Phase,
    pub next: Option<RoundView>,
}

fn finish(slot: &mut LineageSlot, id: &str) -> ApiResult<()> {
    let live = &slot.sessions[id];
    let s = live.session.participant();
    let log = SessionLog {
        s,
        records: live.session.records().to_vec(),
        final_rating: live.session.rating(),
    };
    log.save(slot.dir.join("sessions").join(format!("session_{s:03}.json")))?;
    slot.lineage.save(slot.dir.join("lineage.json"))?;
    slot.active = None;
    log::info!("session {id} finished with rating {:.3}", log.final_rating);
    Ok(())
}

async fn submit_review(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<ReviewRequest>,
) -> ApiResult<Json<ReviewResponse>> {
    let protocol = &app.0.protocol;
    with_session(&app, &id, |slot, id| {
        let r_max = protocol.r_max();
        if !(0.0..=r_max).contains(&req.review) {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("review {} is outside [0, {r_max}]", req.review),
            ));
        }
        let LineageSlot { lineage, sessions, .. } = &mut *slot;
        let live = sessions.get_mut(id).expect("checked");
        let current = live.session.round();
        check_round(req.k)?;
        if req.k < current {
            let rec = live.session.records()[req.k - 1].clone();
            return if rec.review == req.review {
                Ok(Json(ReviewResponse {
                    record: rec,
                    phase: live.session.phase(),
                    next: live.session.view().cloned(),
                }))
            } else {
                Err(ApiError::conflict(format!("round {} was already reviewed", req.k)))
            };
        }
        if req.k != current {
            return Err(ApiError::conflict(format!("current round is {current}, got {}", req.k)));
        }
        let record = live
            .session
            .review(protocol, lineage, req.review, &mut live.sink, &mut SystemClock)?;
        let phase = live.session.phase();
        let next = live.session.view().cloned();
        if phase == Phase::Finished {
            finish(slot, id)?;
        }
        Ok(Json(ReviewResponse { record, phase, next }))
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub session_id: String,
    pub s: usize,
    pub phase: Phase,
    pub rounds: usize,
    pub rounds_completed: usize,
    pub follow_count: usize,
    pub mean_review: Option<f64>,
    /// Current rating, unrounded.
    pub rating: f64,
    pub rating_displayed: f64,
    /// Set once the session is finished.
    pub final_rating: Option<f64>,
    pub survey_submitted: bool,
}

async fn get_summary(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Summary>> {
    let protocol = &app.0.protocol;
    with_session(&app, &id, |slot, id| {
        let live = &slot.sessions[id];
        let records = live.session.records();
        let phase = live.session.phase();
        let rating = live.session.rating();
        let mean_review = if records.is_empty() {
            None
        } else {
            Some(records.iter().map(|r| r.review).sum::<f64>() / records.len() as f64)
        };
        Ok(Json(Summary {
            session_id: id.to_string(),
            s: live.session.participant(),
            phase,
            rounds: protocol.rounds(),
            rounds_completed: records.len(),
            follow_count: records.iter().filter(|r| r.followed()).count(),
            mean_review,
            rating,
            rating_displayed: quantize_rating(rating, protocol.r_max())?,
            final_rating: (phase == Phase::Finished).then_some(rating),
            survey_submitted: live.survey.is_some(),
        }))
    })
}

async fn submit_survey(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(answers): Json<SurveyAnswers>,
) -> ApiResult<Json<SurveyRecord>> {
    let r_max = app.0.protocol.r_max();
    with_session(&app, &id, |slot, id| {
        let dir = slot.dir.join("surveys");
        let live = slot.sessions.get_mut(id).expect("checked");
        if live.session.phase() != Phase::Finished {
            return Err(ApiError::conflict(format!(
                "survey opens after the last round; session is {}",
                live.session.phase().name()
            )));
        }
        let s = live.session.participant();
        if let Some(existing) = &live.survey {
            return if *existing == answers {
                Ok(Json(SurveyRecord { s, answers }))
            } else {
                Err(ApiError::conflict("survey already submitted"))
            };
        }
        answers.validate(r_max)?;
        let record = SurveyRecord { s, answers };
        write_durable(&dir.join(format!("session_{s:03}.json")), &serde_json::to_vec_pretty(&record).map_err(Error::from)?)?;
        live.survey = Some(record.answers.clone());
        Ok(Json(record))
    })
}

fn write_durable(path: &Path, bytes: &[u8]) -> ApiResult<()> {
    let io = || -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        std::io::Write::write_all(&mut f, bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    io().map_err(|e| ApiError::from(Error::from(e)))
}

async fn survey_questions() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "questions": SURVEY_QUESTIONS }))
}
