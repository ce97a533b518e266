use std::time::Duration;

use bt_teach::api::{serve_on, AppState};
use bt_teach::cli::{execute, Cli};
use bt_teach_core::actions::Tolerances;
use bt_teach_core::executor::{replay, RunRecord};
use bt_teach_core::workspace::Workspace;
use clap::Parser;
use futures_util::StreamExt;
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio_tungstenite::tungstenite::Message;

struct Server {
    base: String,
    ws: Workspace,
    _dir: tempfile::TempDir,
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<()>,
    http: Client,
}

impl Server {
    async fn start() -> Server {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (stop, rx) = oneshot::channel::<()>();
        let state = AppState::new(ws.clone());
        let task = tokio::spawn(async move {
            serve_on(listener, state, async {
                let _ = rx.await;
            })
            .await
            .unwrap();
        });
        Server { base, ws, _dir: dir, stop: Some(stop), task, http: Client::new() }
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.http.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status(), r.json().await.unwrap())
    }

    /// Shuts down and returns the workspace directory, which outlives the server.
    async fn stop(mut self) -> tempfile::TempDir {
        self.stop.take().unwrap().send(()).unwrap();
        self.task.await.unwrap();
        self._dir
    }
}

fn scene_object<'a>(scene: &'a Value, id: &str) -> &'a Value {
    let list = scene["world"]["objects"].as_array().unwrap();
    list.iter().find(|o| o["id"] == id).unwrap_or_else(|| panic!("no object {id}"))
}

fn fixed_clock() {
    std::env::set_var("SOURCE_DATE_EPOCH", "1700000000");
}

#[tokio::test]
async fn health_reports_version() {
    let s = Server::start().await;
    let (status, body) = s.get("/api/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["version"], env!("CARGO_PKG_VERSION"));
    s.stop().await;
}

/// A two-action demonstration over HTTP, then learn and run; the same steps
/// through the CLI in another workspace give byte-identical artifacts.
#[tokio::test]
async fn http_round_trip_matches_cli() {
    fixed_clock();
    let s = Server::start().await;
    let (status, scene) = s.post("/api/scenes", json!({ "fixture": "object-in-box", "seed": 4 })).await;
    assert_eq!(status, StatusCode::CREATED);
    let sid = scene["id"].as_str().unwrap().to_string();
    let bx = scene_object(&scene, "box")["position"].as_array().unwrap().clone();
    let (x, y) = (bx[0].as_f64().unwrap(), bx[1].as_f64().unwrap());

    let (status, _) = s.post("/api/demos/start", json!({ "scene": sid, "id": "d1" })).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, v) = s.post(&format!("/api/scenes/{sid}/primitive"), json!({ "t": "pick", "object": "A" })).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let (status, v) =
        s.post(&format!("/api/scenes/{sid}/primitive"), json!({ "t": "drop", "object": "A", "p": [x, y, 0.2] })).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["recorded"], 2);
    let (status, v) = s.post("/api/demos/d1/finish", json!({})).await;
    assert_eq!((status, v["actions"].as_u64()), (StatusCode::OK, Some(2)));
    let (_, list) = s.get("/api/demos").await;
    assert_eq!(list["demos"], json!(["d1"]));

    let (status, learned) = s.post("/api/learn", json!({})).await;
    assert_eq!(status, StatusCode::OK, "{learned}");
    let tree = learned["tree_id"].as_str().unwrap().to_string();
    let (status, run) = s.post("/api/runs", json!({ "tree": tree, "scenario": "demo:d1", "wait": true })).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(run["outcome"], "success");

    // Same steps through the CLI.
    let cli_dir = tempfile::tempdir().unwrap();
    let script = cli_dir.path().join("d1.txt");
    std::fs::write(&script, format!("pick A\ndrop A {x} {y} 0.2\n")).unwrap();
    let root = cli_dir.path().join("ws");
    let root = root.to_str().unwrap();
    let mut out = Vec::new();
    for args in [
        vec!["scene", "new", "start", "--fixture", "object-in-box", "--seed", "4"],
        vec!["demo", "record", script.to_str().unwrap(), "--scene", "start"],
        vec!["learn"],
        vec!["run", &tree, "demo:d1"],
    ] {
        let cli = Cli::try_parse_from(["bt-teach", "--workspace", root].into_iter().chain(args)).unwrap();
        execute(&cli, &mut out).unwrap();
    }
    let text = String::from_utf8(out).unwrap();
    assert!(text.contains(&format!("tree {tree}")), "{text}");

    let read = |base: &std::path::Path, rel: &str| std::fs::read(base.join(rel)).unwrap();
    let http_root = s.ws.root().to_path_buf();
    let cli_root = std::path::Path::new(root);
    for rel in [
        "demos/d1.json".to_string(),
        format!("trees/{tree}.json"),
        format!("reports/{tree}-inference.json"),
        format!("reports/{tree}-plan.json"),
        format!("reports/{}.json", run["id"].as_str().unwrap()),
    ] {
        assert_eq!(read(&http_root, &rel), read(cli_root, &rel), "{rel} differs");
    }
    s.stop().await;
}

#[tokio::test]
async fn scenes_are_isolated_under_concurrency() {
    let s = Server::start().await;
    let mut scenes = Vec::new();
    for (seed, object) in [(1, "C"), (2, "D")] {
        let (_, v) = s.post("/api/scenes", json!({ "fixture": "towers", "seed": seed })).await;
        scenes.push((v["id"].as_str().unwrap().to_string(), object, v));
    }
    // Each scene moves its own cube back and forth, interleaved with the other.
    let mut handles = Vec::new();
    for (id, object, before) in &scenes {
        let url = format!("{}/api/scenes/{id}/primitive", s.base);
        let home = scene_object(before, object)["position"].clone();
        for round in 0..6 {
            let (http, url, object, home) = (s.http.clone(), url.clone(), object.to_string(), home.clone());
            handles.push(tokio::spawn(async move {
                let p = if round % 2 == 0 { json!([0.9, 0.9, 0.025]) } else { home };
                let pick = http.post(&url).json(&json!({ "t": "pick", "object": object })).send().await.unwrap();
                let place =
                    http.post(&url).json(&json!({ "t": "place", "object": object, "p": p })).send().await.unwrap();
                (pick.status(), place.status())
            }));
        }
    }
    let mut accepted = 0;
    for h in handles {
        let (a, b) = h.await.unwrap();
        accepted += usize::from(a == StatusCode::OK) + usize::from(b == StatusCode::OK);
    }
    assert!(accepted >= 4, "only {accepted} primitives accepted");
    for (id, object, before) in &scenes {
        let (_, after) = s.get(&format!("/api/scenes/{id}")).await;
        for other in ["C", "D", "E", "F"].into_iter().filter(|o| o != object) {
            assert_eq!(scene_object(&after, other), scene_object(before, other), "{id}: {other} moved");
        }
    }
    s.stop().await;
}

#[tokio::test]
async fn errors_are_reported_with_status() {
    let s = Server::start().await;
    let (status, _) = s.get("/api/scenes/nope").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (_, v) = s.post("/api/scenes", json!({ "fixture": "object-in-box" })).await;
    let sid = v["id"].as_str().unwrap();
    let (status, v) =
        s.post(&format!("/api/scenes/{sid}/primitive"), json!({ "t": "place", "object": "A", "p": [0, 0, 0.1] })).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("rejected"), "{v}");
    s.post("/api/demos/start", json!({ "scene": sid, "id": "d" })).await;
    let (status, v) =
        s.post(&format!("/api/scenes/{sid}/primitive"), json!({ "t": "drop", "object": "A", "p": [0, 0, 0.1] })).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("causality@0"), "{v}");
    let (status, _) = s.post("/api/demos/d/finish", json!({})).await;
    assert_eq!(status, StatusCode::CONFLICT, "empty demo is invalid");
    let (status, v) = s.post("/api/learn", json!({ "demos": ["ghost"] })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().starts_with("[load]"), "{v}");
    let (status, _) = s.post("/api/runs", json!({ "tree": "missing", "scenario": "x" })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = s.post("/api/scenes", json!({})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    s.stop().await;
}

async fn learn_box(s: &Server) -> String {
    bt_teach::ops::synth(&s.ws, bt_teach_core::fixtures::Fixture::ObjectInBox, 7, 0.01).unwrap();
    let (status, v) = s.post("/api/learn", json!({})).await;
    assert_eq!(status, StatusCode::OK);
    v["tree_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn tree_formats() {
    let s = Server::start().await;
    let tree = learn_box(&s).await;
    let (status, v) = s.get(&format!("/api/trees/{tree}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["kind"], "sequence", "{v}");
    let dot = s.http.get(format!("{}/api/trees/{tree}?format=dot", s.base)).send().await.unwrap();
    assert!(dot.text().await.unwrap().starts_with("digraph bt {"));
    s.stop().await;
}

/// Live run: the event stream shows the goal reached, then undone by a
/// disturbance, then reached again; the stored record replays exactly.
#[tokio::test]
async fn live_disturbance_streams_redo() {
    let s = Server::start().await;
    let tree = learn_box(&s).await;
    let (status, v) = s.post("/api/runs", json!({ "tree": tree, "scenario": "demo:box-1", "tick_ms": 20 })).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = v["id"].as_str().unwrap().to_string();

    let url = format!("{}/api/runs/{id}/events", s.base.replace("http", "ws"));
    let (mut stream, _) = tokio_tungstenite::connect_async(url).await.unwrap();
    let mut events: Vec<Value> = Vec::new();
    let mut disturbed = false;
    let end = loop {
        let msg = tokio::time::timeout(Duration::from_secs(30), stream.next()).await.unwrap().unwrap().unwrap();
        let Message::Text(text) = msg else { continue };
        let v: Value = serde_json::from_str(&text).unwrap();
        if v.get("tick").is_none() {
            break v;
        }
        if v["status"] == "success" && !disturbed {
            let (status, _) = s
                .post(
                    &format!("/api/runs/{id}/disturb"),
                    json!({ "kind": "teleport", "object": "A", "target": [-0.6, -0.6, 0.025] }),
                )
                .await;
            assert_eq!(status, StatusCode::OK);
            disturbed = true;
        }
        events.push(v);
    };
    assert_eq!(end["outcome"], "success");
    assert!(events.windows(2).all(|w| w[0]["tick"].as_u64() < w[1]["tick"].as_u64()));
    let first_success = events.iter().position(|e| e["status"] == "success").unwrap();
    assert!(events[first_success..].iter().any(|e| e["status"] == "running"), "no redo after the disturbance");

    let (_, record) = s.get(&format!("/api/runs/{id}")).await;
    let record: RunRecord = serde_json::from_value(record).unwrap();
    assert_eq!(record.disturbances.len(), 1);
    assert_eq!(record.activations, 4);
    let tree = s.ws.load_tree(&tree).unwrap();
    assert_eq!(replay(&tree, &record, &Tolerances::default()).unwrap(), record);
    assert_eq!(s.ws.load_run(&id).unwrap(), record);

    let (status, _) =
        s.post(&format!("/api/runs/{id}/disturb"), json!({ "kind": "remove_from_gripper", "object": "A" })).await;
    assert_eq!(status, StatusCode::CONFLICT, "run already ended");
    s.stop().await;
}

#[tokio::test]
async fn shutdown_drains_active_runs() {
    let s = Server::start().await;
    let tree = learn_box(&s).await;
    let (_, v) = s.post("/api/runs", json!({ "tree": tree, "scenario": "demo:box-2", "tick_ms": 5 })).await;
    let id = v["id"].as_str().unwrap().to_string();
    let ws = s.ws.clone();
    let _dir = s.stop().await;
    let record = ws.load_run(&id).unwrap();
    assert_eq!(record.outcome, Some(bt_teach_core::executor::Outcome::Success));
}
