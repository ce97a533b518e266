//! REST and WebSocket interface.

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bt_teach_core::actions::ActionKind;
use bt_teach_core::demo::Session;
use bt_teach_core::error::{DemoError, WorkspaceError};
use bt_teach_core::executor::{Outcome, RunRecord, Runner, TickEvent};
use bt_teach_core::fixtures::Fixture;
use bt_teach_core::geometry::{Orientation, Position};
use bt_teach_core::workspace::Workspace;
use bt_teach_core::world::{Disturbance, DisturbanceKind, GripperState, Primitive, WorldState};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{broadcast, mpsc};
use tokio::task::JoinSet;

use crate::ops::{self, RunRequest};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} not found: {id}"))
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        let status = if let Some(w) = e.downcast_ref::<WorkspaceError>() {
            match w {
                WorkspaceError::NotFound { .. } => StatusCode::NOT_FOUND,
                WorkspaceError::Demo(_) | WorkspaceError::Parse(_) | WorkspaceError::World(_) => {
                    StatusCode::UNPROCESSABLE_ENTITY
                }
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            }
        } else if e.downcast_ref::<DemoError>().is_some() {
            StatusCode::CONFLICT
        } else {
            StatusCode::UNPROCESSABLE_ENTITY
        };
        ApiError::new(status, format!("{e:#}"))
    }
}

impl From<WorkspaceError> for ApiError {
    fn from(e: WorkspaceError) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct SceneSession {
    world: WorldState,
    demo: Option<Session>,
}

/// Broadcast to event-stream subscribers.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
enum StreamItem {
    Tick(TickEvent),
    End { outcome: Option<Outcome> },
}

struct RunHandle {
    record: Mutex<RunRecord>,
    events: broadcast::Sender<StreamItem>,
    commands: mpsc::UnboundedSender<Disturbance>,
}

pub struct AppState {
    ws: Workspace,
    scenes: Mutex<BTreeMap<String, Arc<tokio::sync::Mutex<SceneSession>>>>,
    /// Active demo id -> scene id.
    demos: Mutex<BTreeMap<String, String>>,
    runs: Mutex<BTreeMap<String, Arc<RunHandle>>>,
    tasks: Mutex<JoinSet<()>>,
    counter: AtomicU64,
}

pub type Shared = Arc<AppState>;

impl AppState {
    pub fn new(ws: Workspace) -> Shared {
        Arc::new(AppState {
            ws,
            scenes: Mutex::default(),
            demos: Mutex::default(),
            runs: Mutex::default(),
            tasks: Mutex::new(JoinSet::new()),
            counter: AtomicU64::new(1),
        })
    }

    fn scene(&self, id: &str) -> ApiResult<Arc<tokio::sync::Mutex<SceneSession>>> {
        self.scenes.lock().unwrap().get(id).cloned().ok_or_else(|| ApiError::not_found("scene", id))
    }

    /// Waits for every active run to finish.
    pub async fn drain(&self) {
        let mut tasks = std::mem::take(&mut *self.tasks.lock().unwrap());
        while tasks.join_next().await.is_some() {}
    }
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/scenes", post(create_scene))
        .route("/api/scenes/:id", get(get_scene))
        .route("/api/scenes/:id/primitive", post(primitive))
        .route("/api/demos", get(list_demos))
        .route("/api/demos/start", post(start_demo))
        .route("/api/demos/:id/finish", post(finish_demo))
        .route("/api/learn", post(learn))
        .route("/api/trees/:id", get(get_tree))
        .route("/api/runs", post(create_run))
        .route("/api/runs/:id", get(get_run))
        .route("/api/runs/:id/disturb", post(disturb))
        .route("/api/runs/:id/events", get(events))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then lets active runs finish.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: Shared,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state.clone())).with_graceful_shutdown(shutdown).await?;
    state.drain().await;
    Ok(())
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRequest {
    id: Option<String>,
    world: Option<WorldState>,
    scenario: Option<String>,
    fixture: Option<String>,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct SceneView {
    id: String,
    world: WorldState,
    demo: Option<String>,
    recorded: usize,
}

fn view(id: &str, s: &SceneSession) -> SceneView {
    SceneView {
        id: id.to_string(),
        world: s.world.clone(),
        demo: s.demo.as_ref().map(|d| d.id.clone()),
        recorded: s.demo.as_ref().map_or(0, |d| d.actions().len()),
    }
}

async fn create_scene(
    State(st): State<Shared>,
    Json(req): Json<SceneRequest>,
) -> ApiResult<(StatusCode, Json<SceneView>)> {
    let world = match (req.world, req.scenario, req.fixture) {
        (Some(w), None, None) => w,
        (None, Some(name), None) => st.ws.resolve_scenario(&name)?,
        (None, None, Some(f)) => ops::fixture_scene(f.parse::<Fixture>().map_err(ApiError::bad_request)?, req.seed),
        (None, None, None) => return Err(ApiError::bad_request("one of world, scenario or fixture is required")),
        _ => return Err(ApiError::bad_request("give only one of world, scenario or fixture")),
    };
    let id = req.id.unwrap_or_else(|| format!("scene-{}", st.counter.fetch_add(1, Ordering::SeqCst)));
    let session = SceneSession { world, demo: None };
    let v = view(&id, &session);
    let mut scenes = st.scenes.lock().unwrap();
    if scenes.contains_key(&id) {
        return Err(ApiError::conflict(format!("scene {id} already exists")));
    }
    scenes.insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(v)))
}

async fn get_scene(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<SceneView>> {
    let scene = st.scene(&id)?;
    let s = scene.lock().await;
    Ok(Json(view(&id, &s)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrimitiveRequest {
    t: ActionKind,
    object: Option<String>,
    p: Option<Position>,
    x: Option<GripperState>,
}

async fn primitive(
    State(st): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<PrimitiveRequest>,
) -> ApiResult<Json<SceneView>> {
    let scene = st.scene(&id)?;
    let mut s = scene.lock().await;
    let object = || req.object.clone().ok_or_else(|| ApiError::bad_request("object is required"));
    let target = || req.p.ok_or_else(|| ApiError::bad_request("p is required"));
    if let Some(session) = s.demo.as_mut() {
        let object = object()?;
        let p = match (req.t, req.p) {
            (_, Some(p)) => p,
            (ActionKind::Pick, None) => {
                session.world().position(&object).ok_or_else(|| ApiError::not_found("object", &object))?
            }
            _ => return Err(ApiError::bad_request("p is required")),
        };
        session.record(req.t, &object, p, Orientation::IDENTITY).map_err(|e| ApiError::conflict(e.to_string()))?;
        s.world = session.world().clone();
    } else {
        let prim = match req.t {
            ActionKind::Pick => Primitive::Pick { object: object()? },
            ActionKind::Place => Primitive::Place { object: object()?, target: target()? },
            ActionKind::Drop => Primitive::Drop { object: object()?, target: target()? },
            ActionKind::SetGripper => {
                Primitive::SetGripper { state: req.x.ok_or_else(|| ApiError::bad_request("x is required"))? }
            }
        };
        s.world = s.world.apply_primitive(&prim).map_err(|e| ApiError::conflict(e.to_string()))?;
    }
    Ok(Json(view(&id, &s)))
}

async fn list_demos(State(st): State<Shared>) -> ApiResult<Json<Value>> {
    let stored = st.ws.list_demos()?;
    let active: Vec<String> = st.demos.lock().unwrap().keys().cloned().collect();
    Ok(Json(json!({ "demos": stored, "active": active })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartDemo {
    scene: String,
    id: String,
    #[serde(default)]
    label: String,
}

async fn start_demo(State(st): State<Shared>, Json(req): Json<StartDemo>) -> ApiResult<(StatusCode, Json<Value>)> {
    let scene = st.scene(&req.scene)?;
    let mut s = scene.lock().await;
    if let Some(d) = &s.demo {
        return Err(ApiError::conflict(format!("scene {} is already recording demo {}", req.scene, d.id)));
    }
    if st.ws.list_demos()?.contains(&req.id) {
        return Err(ApiError::conflict(format!("demo {} already exists", req.id)));
    }
    {
        let mut demos = st.demos.lock().unwrap();
        if demos.contains_key(&req.id) {
            return Err(ApiError::conflict(format!("demo {} is already being recorded", req.id)));
        }
        demos.insert(req.id.clone(), req.scene.clone());
    }
    match Session::start(&req.id, &req.label, s.world.clone()) {
        Ok(session) => s.demo = Some(session),
        Err(e) => {
            st.demos.lock().unwrap().remove(&req.id);
            return Err(ApiError::bad_request(e.to_string()));
        }
    }
    Ok((StatusCode::CREATED, Json(json!({ "id": req.id, "scene": req.scene }))))
}

async fn finish_demo(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let scene_id = st.demos.lock().unwrap().get(&id).cloned().ok_or_else(|| ApiError::not_found("active demo", &id))?;
    let scene = st.scene(&scene_id)?;
    let mut s = scene.lock().await;
    let session = s.demo.take().ok_or_else(|| ApiError::not_found("active demo", &id))?;
    st.demos.lock().unwrap().remove(&id);
    let demo = session.finish(ops::now()).map_err(|e| ApiError::conflict(e.to_string()))?;
    st.ws.save_demo(&demo)?;
    Ok(Json(json!({ "id": demo.id, "actions": demo.actions.len() })))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LearnRequest {
    #[serde(default)]
    demos: Vec<String>,
}

async fn learn(State(st): State<Shared>, body: Option<Json<LearnRequest>>) -> ApiResult<Json<Value>> {
    let req = body.map(|b| b.0).unwrap_or_default();
    let ws = st.ws.clone();
    let summary = tokio::task::spawn_blocking(move || ops::learn(&ws, &req.demos))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(serde_json::to_value(summary).expect("serializable")))
}

#[derive(Debug, Deserialize)]
struct TreeQuery {
    format: Option<String>,
}

async fn get_tree(State(st): State<Shared>, Path(id): Path<String>, Query(q): Query<TreeQuery>) -> ApiResult<Response> {
    let tree = st.ws.load_tree(&id)?;
    Ok(match q.format.as_deref() {
        None | Some("json") => ([(header::CONTENT_TYPE, "application/json")], tree.to_json()).into_response(),
        Some("dot") => ([(header::CONTENT_TYPE, "text/vnd.graphviz")], tree.to_dot()).into_response(),
        Some(other) => return Err(ApiError::bad_request(format!("unknown format {other:?}"))),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunBody {
    tree: String,
    scenario: Option<String>,
    scene: Option<String>,
    #[serde(default)]
    disturbances: Vec<Disturbance>,
    /// Wall-clock delay between ticks.
    #[serde(default)]
    tick_ms: u64,
    /// Respond with the finished record instead of the run id.
    #[serde(default)]
    wait: bool,
}

async fn create_run(State(st): State<Shared>, Json(body): Json<RunBody>) -> ApiResult<Response> {
    let (scenario, world) = match (body.scenario, body.scene) {
        (Some(name), None) => {
            let w = st.ws.resolve_scenario(&name)?;
            (name, w)
        }
        (None, Some(id)) => {
            let scene = st.scene(&id)?;
            let w = scene.lock().await.world.clone();
            (format!("scene:{id}"), w)
        }
        _ => return Err(ApiError::bad_request("exactly one of scenario or scene is required")),
    };
    let req = RunRequest { tree: body.tree, scenario, world, disturbances: body.disturbances };
    let mut runner = ops::runner(&st.ws, &req, None)?;
    let mut id = runner.record().id.clone();
    let handle = {
        let mut runs = st.runs.lock().unwrap();
        let mut n = 2;
        while runs.contains_key(&id) {
            id = format!("{}-{n}", runner.record().id);
            n += 1;
        }
        let (events, _) = broadcast::channel(256);
        let (commands, rx) = mpsc::unbounded_channel();
        let mut rec = runner.record().clone();
        rec.id = id.clone();
        let handle = Arc::new(RunHandle { record: Mutex::new(rec), events, commands });
        runs.insert(id.clone(), handle.clone());
        let ws = st.ws.clone();
        let task_handle = handle.clone();
        let tick = Duration::from_millis(body.tick_ms);
        let run_id = id.clone();
        st.tasks.lock().unwrap().spawn(async move {
            drive(&mut runner, &task_handle, rx, tick).await;
            let mut record = runner.record().clone();
            record.id = run_id;
            if let Err(e) = ws.save_run(&record) {
                tracing::error!("saving run {}: {e}", record.id);
            }
            let outcome = record.outcome;
            *task_handle.record.lock().unwrap() = record;
            let _ = task_handle.events.send(StreamItem::End { outcome });
        });
        handle
    };
    if body.wait {
        let mut rx = handle.events.subscribe();
        while handle.record.lock().unwrap().outcome.is_none() {
            match rx.recv().await {
                Ok(StreamItem::End { .. }) | Err(broadcast::error::RecvError::Closed) => break,
                _ => {}
            }
        }
        let record = handle.record.lock().unwrap().clone();
        return Ok((StatusCode::CREATED, Json(record)).into_response());
    }
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))).into_response())
}

async fn drive(
    runner: &mut Runner,
    handle: &RunHandle,
    mut commands: mpsc::UnboundedReceiver<Disturbance>,
    tick: Duration,
) {
    loop {
        while let Ok(d) = commands.try_recv() {
            runner.inject(d);
        }
        let event = match runner.step() {
            Ok(Some(e)) => e.clone(),
            Ok(None) => break,
            Err(e) => {
                tracing::error!("run {} failed: {e}", runner.record().id);
                break;
            }
        };
        handle.record.lock().unwrap().events.push(event.clone());
        let _ = handle.events.send(StreamItem::Tick(event));
        if runner.is_done() {
            break;
        }
        if tick.is_zero() {
            tokio::task::yield_now().await;
        } else {
            tokio::time::sleep(tick).await;
        }
    }
}

async fn get_run(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<RunRecord>> {
    let live = st.runs.lock().unwrap().get(&id).cloned();
    match live {
        Some(h) => Ok(Json(h.record.lock().unwrap().clone())),
        None => Ok(Json(st.ws.load_run(&id)?)),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DisturbBody {
    kind: DisturbanceKind,
    object: String,
    target: Option<Position>,
    /// Earliest tick; defaults to the next one.
    #[serde(default)]
    at_tick: u64,
}

async fn disturb(
    State(st): State<Shared>,
    Path(id): Path<String>,
    Json(b): Json<DisturbBody>,
) -> ApiResult<Json<Value>> {
    let h = st.runs.lock().unwrap().get(&id).cloned().ok_or_else(|| ApiError::not_found("run", &id))?;
    if h.record.lock().unwrap().outcome.is_some() {
        return Err(ApiError::conflict(format!("run {id} has ended")));
    }
    if b.kind == DisturbanceKind::Teleport && b.target.is_none() {
        return Err(ApiError::bad_request("teleport needs a target"));
    }
    let d = Disturbance { at_tick: b.at_tick, kind: b.kind, object: b.object, target: b.target };
    h.commands.send(d).map_err(|_| ApiError::conflict(format!("run {id} has ended")))?;
    Ok(Json(json!({ "queued": true })))
}

async fn events(State(st): State<Shared>, Path(id): Path<String>, upgrade: WebSocketUpgrade) -> ApiResult<Response> {
    let h = st.runs.lock().unwrap().get(&id).cloned();
    let stored = match &h {
        Some(_) => None,
        None => Some(st.ws.load_run(&id)?),
    };
    Ok(upgrade.on_upgrade(move |socket| stream_events(socket, h, stored)))
}

async fn send(socket: &mut WebSocket, item: &StreamItem) -> bool {
    let text = serde_json::to_string(item).expect("serializable");
    socket.send(Message::Text(text)).await.is_ok()
}

/// Sends the backlog, then live events, then an end marker.
async fn stream_events(mut socket: WebSocket, handle: Option<Arc<RunHandle>>, stored: Option<RunRecord>) {
    let (mut rx, backlog, outcome) = match (&handle, stored) {
        (Some(h), _) => {
            let rx = h.events.subscribe();
            let r = h.record.lock().unwrap();
            (Some(rx), r.events.clone(), r.outcome)
        }
        (None, Some(r)) => (None, r.events, r.outcome),
        (None, None) => return,
    };
    let mut last = None;
    for e in backlog {
        last = Some(e.tick);
        if !send(&mut socket, &StreamItem::Tick(e)).await {
            return;
        }
    }
    if outcome.is_none() {
        if let Some(rx) = rx.as_mut() {
            loop {
                match rx.recv().await {
                    Ok(StreamItem::Tick(e)) => {
                        if last.is_some_and(|l| e.tick <= l) {
                            continue;
                        }
                        last = Some(e.tick);
                        if !send(&mut socket, &StreamItem::Tick(e)).await {
                            return;
                        }
                    }
                    Ok(end @ StreamItem::End { .. }) => {
                        let _ = send(&mut socket, &end).await;
                        let _ = socket.close().await;
                        return;
                    }
                    // Slow consumers skip ahead.
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => break,
                }
            }
        }
    }
    let outcome = handle.map_or(outcome, |h| h.record.lock().unwrap().outcome);
    let _ = send(&mut socket, &StreamItem::End { outcome }).await;
    let _ = socket.close().await;
}
