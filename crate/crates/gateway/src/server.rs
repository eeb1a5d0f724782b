//! JSON-over-HTTP session API.
//!
//! Each session lives in `<provenance_dir>/<id>/`: its provenance log, a copy
//! of the vocabulary, uploaded tables, and written artifacts. Mutations go
//! through the same tools the agent uses, so every step is logged and a
//! restarted server can rebuild the session from the log.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use harmonkit_core::agent::{
    apply_user_answer, apply_user_decision, ask_user, register_tools, AgentError, CorrectionTable, MockReviewer, Phase,
    RemoteConfig, RemoteReviewer, Reviewer, SessionConfig, SessionState, Subject, ToolContext, ToolError, ToolRegistry,
    Verdict, ENV_URL,
};
use harmonkit_core::matchers::{top_matches, MatchMethod};
use harmonkit_core::provenance::{log_path, restore, ProvenanceLog};

use crate::config::ServerConfig;

const VOCAB_FILE: &str = "vocabulary.json";
const CORRECTIONS_FILE: &str = "corrections.json";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            error,
            detail: detail.into(),
        }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "validation_error", detail)
    }

    fn not_found(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", detail)
    }

    fn conflict(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "wrong_phase", detail)
    }

    fn internal(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.error, "detail": self.detail}))).into_response()
    }
}

impl From<ToolError> for ApiError {
    fn from(e: ToolError) -> Self {
        match e {
            ToolError::Provenance(_) => ApiError::internal(e.to_string()),
            ToolError::UnknownTool(_) => ApiError::not_found(e.to_string()),
            _ => ApiError::bad_request(e.to_string()),
        }
    }
}

impl From<AgentError> for ApiError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::UnknownQuestion(_) => ApiError::not_found(e.to_string()),
            AgentError::QuestionClosed(_) => ApiError::new(StatusCode::CONFLICT, "question_closed", e.to_string()),
            AgentError::Provenance(_) => ApiError::internal(e.to_string()),
            _ => ApiError::bad_request(e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Session {
    state: SessionState,
    reviewer: Box<dyn Reviewer>,
    dir: PathBuf,
}

impl Session {
    fn invoke(&mut self, registry: &ToolRegistry, tool: &str, args: Value) -> ApiResult<Value> {
        let mut ctx = ToolContext::new(&mut self.state, registry, Some(self.reviewer.as_mut()));
        Ok(ctx.invoke(tool, args)?)
    }

    fn require(&self, phase: Phase, what: &str) -> ApiResult<()> {
        let current = self.state.phase();
        if current < phase {
            return Err(ApiError::conflict(format!(
                "{what} needs phase {} or later; session `{}` is {}",
                phase_name(phase),
                self.state.session_id(),
                phase_name(current)
            )));
        }
        Ok(())
    }

    fn source(&self) -> ApiResult<String> {
        self.state
            .source
            .clone()
            .ok_or_else(|| ApiError::conflict("no source table loaded"))
    }

    fn summary(&self) -> Value {
        let s = &self.state;
        json!({
            "session_id": s.session_id(),
            "phase": s.phase(),
            "vocabulary": s.schema.name(),
            "source": s.source,
            "tables": s.tables.keys().collect::<Vec<_>>(),
            "pending_questions": s.pending_questions.iter().map(|q| &q.id).collect::<Vec<_>>(),
            "spec_approved": s.spec_approved,
            "artifacts": s.artifacts.keys().collect::<Vec<_>>(),
        })
    }
}

fn phase_name(p: Phase) -> String {
    serde_json::to_value(p)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

pub struct AppState {
    config: ServerConfig,
    registry: ToolRegistry,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
}

impl AppState {
    /// Creates the provenance directory if needed and restores every session
    /// found there. Sessions whose logs no longer replay are skipped with a
    /// warning on stderr.
    pub fn new(config: ServerConfig) -> std::io::Result<Self> {
        std::fs::create_dir_all(&config.provenance_dir)?;
        let mut sessions = BTreeMap::new();
        for entry in std::fs::read_dir(&config.provenance_dir)? {
            let dir = entry?.path();
            let Some(id) = dir.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
                continue;
            };
            let log = log_path(&dir, &id);
            if !log.is_file() {
                continue;
            }
            match restore_session(&dir, &log) {
                Ok(s) => {
                    sessions.insert(id, Arc::new(Mutex::new(s)));
                }
                Err(e) => eprintln!("warning: session `{id}` not restored: {e}"),
            }
        }
        Ok(Self {
            config,
            registry: register_tools(),
            sessions: RwLock::new(sessions),
        })
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions
            .read()
            .expect("session map lock")
            .keys()
            .cloned()
            .collect()
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }
}

fn restore_session(dir: &Path, log: &Path) -> Result<Session, String> {
    let log = ProvenanceLog::open(log).map_err(|e| e.to_string())?;
    let state = restore(log, Some(dir), dir.to_path_buf()).map_err(|e| e.to_string())?;
    Ok(Session {
        state,
        reviewer: make_reviewer(dir)?,
        dir: dir.to_path_buf(),
    })
}

/// The session's correction table drives a mock reviewer; without one, a
/// remote reviewer is used when configured, else a plain mock.
fn make_reviewer(dir: &Path) -> Result<Box<dyn Reviewer>, String> {
    let corrections = dir.join(CORRECTIONS_FILE);
    if corrections.is_file() {
        let table = CorrectionTable::load(&corrections).map_err(|e| e.to_string())?;
        return Ok(Box::new(MockReviewer::with_corrections(table)));
    }
    if std::env::var_os(ENV_URL).is_some() {
        let config = RemoteConfig::from_env().map_err(|e| e.to_string())?;
        return Ok(Box::new(RemoteReviewer::new(config).map_err(|e| e.to_string())?));
    }
    Ok(Box::new(MockReviewer::with_corrections(CorrectionTable::default())))
}

/// Runs `f` on the session with its lock held, off the async runtime.
async fn with_session<T, F>(app: &Arc<AppState>, id: &str, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&mut Session, &ToolRegistry) -> ApiResult<T> + Send + 'static,
{
    let session = app.session(id)?;
    let app = Arc::clone(app);
    tokio::task::spawn_blocking(move || {
        let mut guard = session
            .lock()
            .map_err(|_| ApiError::internal("session state is poisoned"))?;
        f(&mut guard, &app.registry)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/tables", post(upload_table))
        .route("/sessions/{id}/match-schema", post(match_schema))
        .route("/sessions/{id}/matches", get(get_matches))
        .route("/sessions/{id}/matches/{column}/alternatives", get(alternatives))
        .route("/sessions/{id}/decisions", post(decide))
        .route("/sessions/{id}/match-values", post(match_values))
        .route("/sessions/{id}/review", post(review))
        .route("/sessions/{id}/questions", get(questions))
        .route("/sessions/{id}/answers", post(answer))
        .route("/sessions/{id}/spec", post(spec))
        .route("/sessions/{id}/materialize", post(materialize))
        .route("/sessions/{id}/provenance", get(provenance))
        .route("/sessions/{id}/artifacts/{name}", get(artifact))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(app)
}

/// Binds and serves until the process is stopped.
pub async fn serve(config: ServerConfig) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", config.host, config.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("{e}")))?;
    let app = Arc::new(AppState::new(config)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(app)).await
}

pub fn serve_blocking(config: ServerConfig) -> std::io::Result<()> {
    tokio::runtime::Runtime::new()?.block_on(serve(config))
}

/// A server running on its own thread; dropping it shuts the server down.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting requests and waits for in-flight ones.
    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown_and_join()
    }

    fn shutdown_and_join(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown_and_join();
    }
}

/// Restores sessions, binds `config.host:config.port` (port 0 picks a free
/// one) and serves on a background thread.
pub fn spawn(config: ServerConfig) -> std::io::Result<ServerHandle> {
    let app = Arc::new(AppState::new(config.clone())?);
    let listener = std::net::TcpListener::bind((config.host.as_str(), config.port))?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, router(app))
                .with_graceful_shutdown(async move {
                    let _ = rx.await;
                })
                .await
        })
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// JSON body extractor whose rejections use the API error shape.
struct JsonBody<T>(T);

impl<S: Send + Sync, T: serde::de::DeserializeOwned> axum::extract::FromRequest<S> for JsonBody<T> {
    type Rejection = ApiError;

    async fn from_request(req: axum::extract::Request, state: &S) -> Result<Self, ApiError> {
        let bytes = axum::body::Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let text: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) {
            b"{}"
        } else {
            &bytes
        };
        serde_json::from_slice(text)
            .map(JsonBody)
            .map_err(|e| ApiError::bad_request(format!("request body: {e}")))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    session_id: Option<String>,
    vocabulary_path: Option<PathBuf>,
    vocabulary: Option<Value>,
    #[serde(default)]
    prompt: String,
    method: Option<MatchMethod>,
    corrections: Option<CorrectionTable>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    JsonBody(req): JsonBody<CreateSession>,
) -> ApiResult<Response> {
    let app2 = Arc::clone(&app);
    let (id, session) = tokio::task::spawn_blocking(move || create_blocking(&app2, req))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let summary = session.summary();
    let mut map = app.sessions.write().expect("session map lock");
    if map.contains_key(&id) {
        return Err(ApiError::conflict(format!("session `{id}` already exists")));
    }
    map.insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(summary)).into_response())
}

fn create_blocking(app: &AppState, req: CreateSession) -> ApiResult<(String, Session)> {
    let id = match req.session_id {
        Some(id) if !valid_id(&id) => {
            return Err(ApiError::bad_request(format!(
                "session id `{id}` must be 1-64 letters, digits, `-` or `_`"
            )))
        }
        Some(id) => id,
        None => {
            let taken = app.session_ids();
            (1..)
                .map(|n| format!("s{n}"))
                .find(|c| !taken.contains(c) && !app.config.provenance_dir.join(c).exists())
                .expect("unbounded")
        }
    };
    let dir = app.config.provenance_dir.join(&id);
    if app.session(&id).is_ok() || dir.exists() {
        return Err(ApiError::conflict(format!("session `{id}` already exists")));
    }
    let vocab_text = match (req.vocabulary, req.vocabulary_path, app.config.vocab.clone()) {
        (Some(_), Some(_), _) => {
            return Err(ApiError::bad_request(
                "give either `vocabulary` or `vocabulary_path`, not both",
            ))
        }
        (Some(v), None, _) => serde_json::to_string_pretty(&v).expect("serializes"),
        (None, Some(p), _) | (None, None, Some(p)) => {
            std::fs::read_to_string(&p).map_err(|e| ApiError::bad_request(format!("{}: {e}", p.display())))?
        }
        (None, None, None) => return Err(ApiError::bad_request("no vocabulary given and none configured")),
    };
    harmonkit_core::vocab::TargetSchema::from_json_str(&vocab_text)
        .map_err(|e| ApiError::bad_request(format!("vocabulary: {e}")))?;
    std::fs::create_dir_all(&dir).map_err(|e| ApiError::internal(e.to_string()))?;
    let setup = || -> ApiResult<Session> {
        std::fs::write(dir.join(VOCAB_FILE), &vocab_text).map_err(|e| ApiError::internal(e.to_string()))?;
        if let Some(c) = &req.corrections {
            let text = serde_json::to_string_pretty(c).expect("serializes");
            std::fs::write(dir.join(CORRECTIONS_FILE), text).map_err(|e| ApiError::internal(e.to_string()))?;
        }
        let reviewer = make_reviewer(&dir).map_err(ApiError::bad_request)?;
        let mut config = SessionConfig::new(VOCAB_FILE);
        config.prompt = req.prompt;
        config.input_dir = dir.clone();
        config.output_dir = dir.clone();
        config.method = req.method.unwrap_or_default();
        config.reviewer = reviewer.name();
        let log = ProvenanceLog::create(&dir, &id).map_err(|e| ApiError::internal(e.to_string()))?;
        let state = SessionState::start(config, log)?;
        Ok(Session {
            state,
            reviewer,
            dir: dir.clone(),
        })
    };
    match setup() {
        Ok(s) => Ok((id, s)),
        Err(e) => {
            let _ = std::fs::remove_dir_all(&dir);
            Err(e)
        }
    }
}

async fn list_sessions(State(app): State<Arc<AppState>>) -> Json<Value> {
    Json(json!(app.session_ids()))
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    with_session(&app, &id, |s, _| Ok(Json(s.summary()))).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UploadTable {
    /// A CSV file readable by the server.
    path: Option<String>,
    /// Inline CSV text; stored in the session directory.
    csv: Option<String>,
    name: Option<String>,
    columns: Option<Vec<String>>,
}

async fn upload_table(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    JsonBody(req): JsonBody<UploadTable>,
) -> ApiResult<Response> {
    with_session(&app, &id, move |s, reg| {
        let path = match (req.path, req.csv) {
            (Some(p), None) => p,
            (None, Some(text)) => {
                let name = req
                    .name
                    .clone()
                    .ok_or_else(|| ApiError::bad_request("inline `csv` needs a `name`"))?;
                if !valid_id(&name) {
                    return Err(ApiError::bad_request(format!(
                        "table name `{name}` is not a plain identifier"
                    )));
                }
                let rel = format!("tables/{name}.csv");
                let target = s.dir.join(&rel);
                std::fs::create_dir_all(target.parent().expect("has parent"))
                    .and_then(|_| std::fs::write(&target, text))
                    .map_err(|e| ApiError::internal(e.to_string()))?;
                rel
            }
            _ => return Err(ApiError::bad_request("give exactly one of `path` or `csv`")),
        };
        let mut args = json!({"path": path});
        if let Some(n) = req.name {
            args["name"] = json!(n);
        }
        if let Some(c) = req.columns {
            args["columns"] = json!(c);
        }
        let result = s.invoke(reg, "load_table", args)?;
        Ok((
            StatusCode::CREATED,
            Json(json!({"table": result, "phase": s.state.phase()})),
        )
            .into_response())
    })
    .await
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct MethodBody {
    method: Option<String>,
}

async fn match_schema(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    JsonBody(req): JsonBody<MethodBody>,
) -> ApiResult<Json<Value>> {
    with_session(&app, &id, move |s, reg| {
        s.require(Phase::TablesLoaded, "match-schema")?;
        let mut args = json!({"source": s.source()?, "target": s.state.schema.name()});
        if let Some(m) = req.method {
            args["method"] = json!(m);
        }
        let matches = s.invoke(reg, "match_schema", args)?;
        Ok(Json(json!({"matches": matches, "phase": s.state.phase()})))
    })
    .await
}

async fn get_matches(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    with_session(&app, &id, |s, _| {
        s.require(Phase::SchemaMatched, "matches")?;
        Ok(Json(json!({
            "columns": s.state.column_matches,
            "values": s.state.value_tables,
        })))
    })
    .await
}

#[derive(Deserialize)]
struct KQuery {
    k: Option<usize>,
}

async fn alternatives(
    State(app): State<Arc<AppState>>,
    UrlPath((id, column)): UrlPath<(String, String)>,
    Query(q): Query<KQuery>,
) -> ApiResult<Json<Value>> {
    with_session(&app, &id, move |s, _| {
        s.require(Phase::SchemaMatched, "alternatives")?;
        if s.state.column_match(&column).is_none() {
            return Err(ApiError::not_found(format!("unknown column `{column}`")));
        }
        let k = q.k.unwrap_or(harmonkit_core::agent::ALTERNATIVES_K);
        let table = s.state.source_table().expect("matched session has a source");
        let ranked = top_matches(table, &column, &s.state.schema, k, s.state.method)
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        Ok(Json(json!(ranked
            .into_iter()
            .map(|(target, score)| json!({"target": target, "score": score}))
            .collect::<Vec<_>>())))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    subject: Subject,
    verdict: String,
    target: Option<String>,
}

async fn decide(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    JsonBody(req): JsonBody<DecisionBody>,
) -> ApiResult<Json<Value>> {
    with_session(&app, &id, move |s, _| {
        let subject = req.subject;
        match &subject.value {
            None => {
                s.require(Phase::SchemaMatched, "column decisions")?;
                if s.state.column_match(&subject.column).is_none() {
                    return Err(ApiError::not_found(format!("unknown column `{}`", subject.column)));
                }
            }
            Some(v) => {
                s.require(Phase::ValuesMatched, "value decisions")?;
                let table = s
                    .state
                    .value_table(&subject.column)
                    .ok_or_else(|| ApiError::not_found(format!("no value matches for column `{}`", subject.column)))?;
                if table.get(v).is_none() {
                    return Err(ApiError::not_found(format!("unknown {subject}")));
                }
            }
        }
        let verdict = match (req.verdict.as_str(), req.target) {
            ("keep", None) => Verdict::Keep,
            ("replace", Some(target)) => Verdict::Replace { target },
            ("keep", Some(_)) => return Err(ApiError::bad_request("`keep` takes no target")),
            ("replace", None) => return Err(ApiError::bad_request("`replace` needs a target")),
            (other, _) => {
                return Err(ApiError::bad_request(format!(
                    "unknown verdict `{other}` (expected keep or replace)"
                )))
            }
        };
        apply_user_decision(&mut s.state, &subject, verdict)?;
        Ok(Json(json!({
            "match": s.state.match_json(&subject),
            "phase": s.state.phase(),
        })))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MatchValuesBody {
    pairs: Option<Vec<(String, String)>>,
    columns: Option<Vec<String>>,
    method: Option<String>,
}

async fn match_values(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    JsonBody(req): JsonBody<MatchValuesBody>,
) -> ApiResult<Json<Value>> {
    with_session(&app, &id, move |s, reg| {
        s.require(Phase::SchemaMatched, "match-values")?;
        let mut args = json!({"source": s.source()?, "target": s.state.schema.name()});
        if let Some(p) = req.pairs {
            args["pairs"] = json!(p.into_iter().map(|(c, a)| vec![c, a]).collect::<Vec<_>>());
        }
        if let Some(c) = req.columns {
            args["columns"] = json!(c);
        }
        if let Some(m) = req.method {
            args["method"] = json!(m);
        }
        let tables = s.invoke(reg, "match_values", args)?;
        Ok(Json(json!({"tables": tables, "phase": s.state.phase()})))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReviewBody {
    level: String,
}

/// Runs the session reviewer over column or value matches; escalations become
/// pending questions.
async fn review(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    JsonBody(req): JsonBody<ReviewBody>,
) -> ApiResult<Json<Value>> {
    with_session(&app, &id, move |s, reg| {
        let tool = match req.level.as_str() {
            "columns" => {
                s.require(Phase::SchemaMatched, "column review")?;
                "review_column_matches"
            }
            "values" => {
                s.require(Phase::ValuesMatched, "value review")?;
                "review_value_matches"
            }
            other => {
                return Err(ApiError::bad_request(format!(
                    "unknown review level `{other}` (expected columns or values)"
                )))
            }
        };
        let result = s.invoke(reg, tool, json!({}))?;
        while let Some(q) = s.state.escalations.front().cloned() {
            ask_user(&mut s.state, q)?;
        }
        Ok(Json(json!({
            "decisions": result["decisions"],
            "questions": s.state.pending_questions,
        })))
    })
    .await
}

async fn questions(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    with_session(&app, &id, |s, _| Ok(Json(json!(s.state.pending_questions)))).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerBody {
    question_id: String,
    answer: String,
}

async fn answer(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    JsonBody(req): JsonBody<AnswerBody>,
) -> ApiResult<Json<Value>> {
    with_session(&app, &id, move |s, _| {
        let subject = s
            .state
            .pending_questions
            .iter()
            .find(|q| q.id == req.question_id)
            .map(|q| q.subject.clone());
        apply_user_answer(&mut s.state, &req.question_id, &req.answer)?;
        Ok(Json(json!({
            "question_id": req.question_id,
            "match": subject.and_then(|sub| s.state.match_json(&sub)),
            "pending": s.state.pending_questions.len(),
        })))
    })
    .await
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SpecBody {
    on_missing: Option<String>,
}

async fn spec(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    JsonBody(req): JsonBody<SpecBody>,
) -> ApiResult<Json<Value>> {
    with_session(&app, &id, move |s, reg| {
        s.require(Phase::SchemaMatched, "spec")?;
        let mut args = json!({});
        if let Some(p) = req.on_missing {
            args["on_missing"] = json!(p);
        }
        let spec = s.invoke(reg, "build_spec", args)?;
        let validation = s.invoke(reg, "validate_spec", json!({}))?;
        Ok(Json(json!({
            "spec": spec,
            "diagnostics": validation["diagnostics"],
            "approved": validation["approved"],
            "phase": s.state.phase(),
        })))
    })
    .await
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct MaterializeBody {
    /// Harmonized CSV file name; `<source>_harmonized.csv` by default.
    table: Option<String>,
    /// Spec file name; `<source>.mapping.json` by default.
    spec: Option<String>,
}

async fn materialize(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    JsonBody(req): JsonBody<MaterializeBody>,
) -> ApiResult<Json<Value>> {
    with_session(&app, &id, move |s, reg| {
        s.require(Phase::SpecBuilt, "materialize")?;
        if !s.state.spec_approved {
            return Err(ApiError::conflict(
                "the mapping spec has validation errors or was not validated",
            ));
        }
        let source = s.source()?;
        let table_file = req.table.unwrap_or_else(|| format!("{source}_harmonized.csv"));
        let spec_file = req.spec.unwrap_or_else(|| format!("{source}.mapping.json"));
        for f in [&table_file, &spec_file] {
            if !artifact_name_ok(f) {
                return Err(ApiError::bad_request(format!(
                    "artifact name `{f}` is not a plain file name"
                )));
            }
        }
        let out = s.invoke(reg, "materialize_mapping", json!({"source": source}))?;
        let written = s.invoke(reg, "write_table", json!({"table": out["table"], "path": table_file}))?;
        let exported = s.invoke(reg, "export_spec", json!({"path": spec_file}))?;
        Ok(Json(json!({
            "table": out,
            "artifacts": [written, exported],
            "phase": s.state.phase(),
        })))
    })
    .await
}

fn artifact_name_ok(name: &str) -> bool {
    !name.is_empty() && !name.starts_with('.') && !name.contains(['/', '\\'])
}

async fn provenance(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    with_session(&app, &id, |s, _| {
        Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], s.state.log.to_jsonl()).into_response())
    })
    .await
}

async fn artifact(
    State(app): State<Arc<AppState>>,
    UrlPath((id, name)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    with_session(&app, &id, move |s, _| {
        if !s.state.artifacts.contains_key(&name) {
            return Err(ApiError::not_found(format!("unknown artifact `{name}`")));
        }
        let bytes = std::fs::read(s.state.resolve_output(&name))
            .map_err(|e| ApiError::not_found(format!("artifact `{name}`: {e}")))?;
        let kind = if name.ends_with(".csv") {
            "text/csv"
        } else if name.ends_with(".json") {
            "application/json"
        } else {
            "application/octet-stream"
        };
        Ok(([(header::CONTENT_TYPE, kind)], Body::from(bytes)).into_response())
    })
    .await
}
