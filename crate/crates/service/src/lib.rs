//! HTTP service that lets a person play the user in a live retrieval
//! dialogue against a trained manager, and collects four-way document
//! choices for behavior comparison. Every route lives under `/api/v1`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use iscr_core::corpus::{Corpus, QueryRecord};
use iscr_core::dialogue::{key_term_utterance, PromptPayload, UTTERANCE_DOCUMENTS, UTTERANCE_REQUEST, UTTERANCE_TOPIC};
use iscr_core::dqn::QLearner;
use iscr_core::episode::{Dialogue, EngineParams};
use iscr_core::retrieval::QueryModel;
use iscr_core::simulator::{Outcome, UserResponse};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

mod humaneval;
pub mod wire;

pub use humaneval::{read_choices, tasks_from_scenarios, HumanEvalTask};
use wire::*;

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);

#[derive(Clone, Debug)]
pub struct ServiceOptions {
    pub idle_timeout: Duration,
    /// Append-only JSONL log of session events.
    pub session_log: Option<PathBuf>,
    /// Append-only JSONL log of human choices.
    pub choice_log: Option<PathBuf>,
    /// Ranked-list entries returned with every session view.
    pub page_size: usize,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
            session_log: None,
            choice_log: None,
            page_size: 10,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: message.into() }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self { status: StatusCode::NOT_FOUND, message: message.into() }
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self { status: StatusCode::CONFLICT, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, message: message.into() }
    }

    fn from_core(e: iscr_core::Error) -> Self {
        use iscr_core::Error as E;
        match e {
            E::Validation(_) | E::Parse { .. } | E::Config(_) => Self::bad_request(e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let kind = match self.status {
            StatusCode::BAD_REQUEST => "validation",
            StatusCode::NOT_FOUND => "not_found",
            StatusCode::CONFLICT => "conflict",
            _ => "internal",
        };
        let body = ErrorBody {
            error: kind.into(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.status, self.message)
    }
}

impl std::error::Error for ApiError {}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

struct Session {
    id: String,
    dialogue: Dialogue,
    status: Status,
    last_active: Instant,
}

/// Shared, read-only corpus and manager plus the mutable session and
/// choice tables.
pub struct Service {
    corpus: Corpus,
    queries: BTreeMap<String, QueryRecord>,
    manager: QLearner,
    params: EngineParams,
    options: ServiceOptions,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    humaneval: humaneval::HumanEval,
    log: Mutex<Option<File>>,
}

impl Service {
    pub fn new(
        corpus: Corpus,
        queries: Vec<QueryRecord>,
        manager: QLearner,
        params: EngineParams,
        tasks: Vec<HumanEvalTask>,
        options: ServiceOptions,
    ) -> iscr_core::Result<Self> {
        params.validate()?;
        if manager.input_dim() != params.manager_dim() || manager.n_actions() != 4 {
            return Err(iscr_core::Error::Checkpoint(format!(
                "manager takes {} inputs and {} actions, the engine produces {} features and 4 actions",
                manager.input_dim(),
                manager.n_actions(),
                params.manager_dim()
            )));
        }
        let open = |p: &PathBuf| {
            File::options()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| iscr_core::Error::io(p, e))
        };
        let log = options.session_log.as_ref().map(open).transpose()?;
        let humaneval = humaneval::HumanEval::new(tasks, options.choice_log.as_deref())
            .map_err(|e| iscr_core::Error::io(options.choice_log.clone().unwrap_or_default(), e))?;
        Ok(Self {
            corpus,
            queries: queries.into_iter().map(|q| (q.id.clone(), q)).collect(),
            manager,
            params,
            options,
            sessions: Mutex::new(HashMap::new()),
            humaneval,
            log: Mutex::new(log),
        })
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    fn append(&self, event: &LogEvent) -> Result<(), ApiError> {
        let mut log = self.log.lock().expect("session log poisoned");
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(event).expect("log event serializes");
            writeln!(f, "{line}").map_err(|e| ApiError::internal(format!("session log: {e}")))?;
        }
        Ok(())
    }

    pub fn create_session(&self, req: CreateSession) -> Result<SessionView, ApiError> {
        self.sweep_idle();
        let (query_id, query_terms, mut dialogue) = match (req.query_id, req.query_text) {
            (Some(id), None) => {
                let q = self
                    .queries
                    .get(&id)
                    .ok_or_else(|| ApiError::not_found(format!("unknown query {id}")))?;
                let d = Dialogue::for_query(q, &self.corpus, &self.params).map_err(ApiError::from_core)?;
                (Some(id), q.terms.clone(), d)
            }
            (None, Some(text)) => {
                let model = QueryModel::from_text(&self.corpus, &text).map_err(ApiError::from_core)?;
                let mut terms = BTreeMap::new();
                for tok in text.split_whitespace() {
                    *terms.entry(tok.to_lowercase()).or_insert(0.0) += 1.0;
                }
                let d = Dialogue::start(String::new(), model, None, Vec::new(), &self.corpus, &self.params);
                (None, terms, d)
            }
            _ => return Err(ApiError::bad_request("give exactly one of query_id and query_text")),
        };
        let id = uuid::Uuid::new_v4().simple().to_string();
        self.append(&LogEvent::Create {
            session: id.clone(),
            time_ms: now_ms(),
            query_id,
            query_terms,
            map_initial: dialogue.map_initial(),
        })?;
        self.propose(&id, &mut dialogue)?;
        let session = Session {
            id: id.clone(),
            dialogue,
            status: Status::Active,
            last_active: Instant::now(),
        };
        let view = self.view(&session);
        self.sessions
            .lock()
            .expect("session table poisoned")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    fn propose(&self, id: &str, dialogue: &mut Dialogue) -> Result<(), ApiError> {
        // Greedy selection never touches the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let prompt = dialogue
            .propose(&self.manager, 0.0, &self.corpus, &self.params, &mut rng)
            .map_err(ApiError::from_core)?
            .clone();
        self.append(&LogEvent::Prompt {
            session: id.to_owned(),
            time_ms: now_ms(),
            prompt,
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }

    pub fn get_session(&self, id: &str) -> Result<SessionView, ApiError> {
        let slot = self.session(id)?;
        let mut s = slot.lock().expect("session poisoned");
        self.expire_if_idle(&mut s)?;
        Ok(self.view(&s))
    }

    pub fn respond(&self, id: &str, response: UserResponse) -> Result<SessionView, ApiError> {
        let slot = self.session(id)?;
        let mut s = slot.lock().expect("session poisoned");
        self.expire_if_idle(&mut s)?;
        if s.status != Status::Active {
            return Err(ApiError::conflict(format!(
                "session {id} has ended ({})",
                status_name(s.status)
            )));
        }
        if let Some(prompt) = s.dialogue.pending_prompt() {
            if response.answers(prompt.action) {
                check_offered(&response, &prompt.payload, &self.corpus)?;
            }
        }
        let outcome = s
            .dialogue
            .respond(response, None, &self.corpus, &self.params)
            .map_err(ApiError::from_core)?;
        s.last_active = Instant::now();
        let turn = s.dialogue.turns().last().expect("a turn was just recorded").clone();
        self.append(&LogEvent::Turn {
            session: id.to_owned(),
            time_ms: now_ms(),
            turn: Box::new(turn),
        })?;
        match outcome.outcome {
            Outcome::Continue => {
                let Session { id, dialogue, .. } = &mut *s;
                self.propose(id, dialogue)?;
            }
            Outcome::Success => self.finish(&mut s, Status::Success)?,
            Outcome::Failure => self.finish(&mut s, Status::Failure)?,
        }
        Ok(self.view(&s))
    }

    fn finish(&self, s: &mut Session, status: Status) -> Result<(), ApiError> {
        s.status = status;
        self.append(&LogEvent::End {
            session: s.id.clone(),
            time_ms: now_ms(),
            status,
            trace: Box::new(s.dialogue.trace()),
        })
    }

    fn expire_if_idle(&self, s: &mut Session) -> Result<(), ApiError> {
        if s.status == Status::Active && s.last_active.elapsed() > self.options.idle_timeout {
            s.dialogue.abandon();
            self.finish(s, Status::Abandoned)?;
        }
        Ok(())
    }

    /// Abandon idle active sessions and drop ended ones that have sat idle
    /// for a full timeout.
    pub fn sweep_idle(&self) {
        let slots: Vec<Arc<Mutex<Session>>> = self.sessions.lock().expect("session table poisoned").values().cloned().collect();
        let mut stale = Vec::new();
        for slot in slots {
            let Ok(mut s) = slot.try_lock() else { continue };
            let ended_before = s.status != Status::Active;
            // A failed log write leaves the session abandoned in memory anyway.
            let _ = self.expire_if_idle(&mut s);
            if ended_before && s.last_active.elapsed() > self.options.idle_timeout {
                stale.push(s.id.clone());
            }
        }
        let mut table = self.sessions.lock().expect("session table poisoned");
        for id in stale {
            table.remove(&id);
        }
    }

    fn view(&self, s: &Session) -> SessionView {
        let d = &s.dialogue;
        let ranking = d
            .list()
            .top(self.options.page_size)
            .iter()
            .enumerate()
            .map(|(i, e)| DocView::new(&self.corpus, e.doc, i + 1, Some(e.score)))
            .collect();
        let summary = (s.status != Status::Active).then(|| {
            let trace = d.trace();
            Summary {
                outcome: s.status,
                turns: trace.turns.len(),
                map_trajectory: trace.map_sequence(),
                ret: trace.manager_return,
                judged: d.goal().is_some(),
            }
        });
        SessionView {
            api_version: API_VERSION.into(),
            session_id: s.id.clone(),
            status: s.status,
            turn: d.turns().len(),
            query_id: d.goal().map(|_| d.query_id().to_owned()),
            query_terms: d.query().origin().keys().map(|&t| self.corpus.term(t).to_owned()).collect(),
            ranking,
            prompt: d.pending_prompt().map(|p| PromptView::new(p, &self.corpus)),
            summary,
        }
    }

    pub fn next_task(&self, subject: &str) -> Result<NextTask, ApiError> {
        self.humaneval.next_task(subject, &self.corpus, &self.queries)
    }

    pub fn submit_choice(&self, body: ChoiceBody) -> Result<ChoiceAck, ApiError> {
        self.humaneval.submit(body, &self.corpus)
    }

    pub fn distribution(&self) -> DistributionView {
        self.humaneval.distribution()
    }

    pub fn models(&self) -> ModelsView {
        let arch = self.manager.online().architecture();
        let utterances = [
            ("return_documents", UTTERANCE_DOCUMENTS.to_owned()),
            ("return_key_term", key_term_utterance("{term}")),
            ("return_request", UTTERANCE_REQUEST.to_owned()),
            ("return_topic", UTTERANCE_TOPIC.to_owned()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
        ModelsView {
            api_version: API_VERSION.into(),
            manager: ManagerInfo {
                variant: self.manager.variant().label().into(),
                hidden: arch.hidden.clone(),
                input_dim: arch.input_dim,
                train_steps: self.manager.train_steps(),
            },
            feature_mode: serde_json::to_value(self.params.features.mode).expect("mode serializes"),
            max_turns: self.params.termination.max_turns,
            map_threshold: self.params.termination.map_threshold,
            documents: self.corpus.num_docs(),
            queries: self.queries.keys().cloned().collect(),
            humaneval_tasks: self.humaneval.len(),
            utterances,
        }
    }
}

fn status_name(s: Status) -> &'static str {
    match s {
        Status::Active => "active",
        Status::Success => "success",
        Status::Failure => "failure",
        Status::Abandoned => "abandoned",
    }
}

/// A picked document or topic must be one the prompt showed.
fn check_offered(response: &UserResponse, payload: &PromptPayload, corpus: &Corpus) -> Result<(), ApiError> {
    match (response, payload) {
        (UserResponse::PickDocument { doc }, PromptPayload::Documents { docs }) => {
            if !corpus.doc_idx(doc).is_some_and(|d| docs.contains(&d)) {
                return Err(ApiError::bad_request(format!("document {doc} is not on the displayed list")));
            }
        }
        (UserResponse::PickTopic { topic }, PromptPayload::Topics { topics }) => {
            if !corpus.topic_idx(topic).is_some_and(|t| topics.contains(&t)) {
                return Err(ApiError::bad_request(format!("topic {topic} was not offered")));
            }
        }
        (UserResponse::ProvideTerm { term }, _) if term.trim().is_empty() => {
            return Err(ApiError::bad_request("provided term is empty"));
        }
        _ => {}
    }
    Ok(())
}

type Shared = State<Arc<Service>>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<Json<T>, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
        .map(Json)
}

fn body<T>(b: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    b.map(|Json(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn create_session(State(svc): Shared, b: Result<Json<CreateSession>, JsonRejection>) -> Result<Json<SessionView>, ApiError> {
    let req = body(b)?;
    blocking(move || svc.create_session(req)).await
}

async fn get_session(State(svc): Shared, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    blocking(move || svc.get_session(&id)).await
}

async fn respond(
    State(svc): Shared,
    Path(id): Path<String>,
    b: Result<Json<UserResponse>, JsonRejection>,
) -> Result<Json<SessionView>, ApiError> {
    let response = body(b)?;
    blocking(move || svc.respond(&id, response)).await
}

#[derive(Deserialize)]
struct SubjectQuery {
    subject: String,
}

async fn next_task(State(svc): Shared, q: Result<Query<SubjectQuery>, QueryRejection>) -> Result<Json<NextTask>, ApiError> {
    let Query(q) = q.map_err(|e| ApiError::bad_request(e.body_text()))?;
    svc.next_task(&q.subject).map(Json)
}

async fn submit_choice(State(svc): Shared, b: Result<Json<ChoiceBody>, JsonRejection>) -> Result<Json<ChoiceAck>, ApiError> {
    let req = body(b)?;
    svc.submit_choice(req).map(Json)
}

async fn distribution(State(svc): Shared) -> Json<DistributionView> {
    Json(svc.distribution())
}

async fn models(State(svc): Shared) -> Json<ModelsView> {
    Json(svc.models())
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/api/v1/sessions", post(create_session))
        .route("/api/v1/sessions/{id}", get(get_session))
        .route("/api/v1/sessions/{id}/respond", post(respond))
        .route("/api/v1/humaneval/task", get(next_task))
        .route("/api/v1/humaneval/choice", post(submit_choice))
        .route("/api/v1/humaneval/distribution", get(distribution))
        .route("/api/v1/models", get(models))
        .with_state(service)
}

/// Serve until the process is stopped, sweeping idle sessions once a minute.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let sweeper = Arc::clone(&service);
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let svc = Arc::clone(&sweeper);
            let _ = tokio::task::spawn_blocking(move || svc.sweep_idle()).await;
        }
    });
    axum::serve(listener, router(service)).await
}
