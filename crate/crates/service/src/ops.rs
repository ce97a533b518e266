//! Operations shared by the CLI and the HTTP service.

use anyhow::{bail, Context, Result};
use bt_teach_core::demo::{parse_script_line, Demonstration, Session};
use bt_teach_core::executor::{perturb, RunRecord, Runner};
use bt_teach_core::fixtures::{corpus, random_scene, Fixture};
use bt_teach_core::geometry::Orientation;
use bt_teach_core::workspace::{learn_pipeline, run_id, LearnSummary, Workspace};
use bt_teach_core::world::{Disturbance, WorldState};
use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Timestamp recorded on demonstrations. Fixed when `SOURCE_DATE_EPOCH` is
/// set, so that repeated recordings are byte-identical.
pub fn now() -> DateTime<Utc> {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse::<i64>().ok())
        .and_then(|s| DateTime::from_timestamp(s, 0))
        .unwrap_or_else(Utc::now)
}

/// A random start scene for a fixture.
pub fn fixture_scene(fixture: Fixture, seed: u64) -> WorldState {
    random_scene(fixture, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Replays a script (`pick A`, `drop A x y z`, ...) against `world` and
/// stores the resulting demonstration.
pub fn record_script(ws: &Workspace, id: &str, label: &str, world: WorldState, script: &str) -> Result<Demonstration> {
    let mut session = Session::start(id, label, world)?;
    for (n, line) in script.lines().enumerate() {
        let Some((kind, object, p)) = parse_script_line(line).map_err(|e| anyhow::anyhow!("line {}: {e}", n + 1))?
        else {
            continue;
        };
        let p = match p {
            Some(p) => p,
            None => session.world().position(&object).with_context(|| format!("line {}: no object {object}", n + 1))?,
        };
        session.record(kind, &object, p, Orientation::IDENTITY).with_context(|| format!("line {}", n + 1))?;
    }
    if session.actions().is_empty() {
        bail!("script contains no actions");
    }
    let demo = session.finish(now())?;
    ws.save_demo(&demo)?;
    Ok(demo)
}

/// Stores a synthetic corpus; returns the demonstration ids.
pub fn synth(ws: &Workspace, fixture: Fixture, seed: u64, sigma: f64) -> Result<Vec<String>> {
    let demos = corpus(fixture, seed, sigma);
    for d in &demos {
        ws.save_demo(d)?;
    }
    Ok(demos.into_iter().map(|d| d.id).collect())
}

/// Learns from the given demonstrations, or from every stored one.
pub fn learn(ws: &Workspace, ids: &[String]) -> Result<LearnSummary> {
    let ids = if ids.is_empty() { ws.list_demos()? } else { ids.to_vec() };
    let cfg = ws.config()?;
    Ok(learn_pipeline(ws, &ids, &cfg)?)
}

#[derive(Debug, Clone)]
pub struct RunRequest {
    pub tree: String,
    pub scenario: String,
    pub world: WorldState,
    pub disturbances: Vec<Disturbance>,
}

/// Builds a runner for a request. `noise` perturbs the start scene.
pub fn runner(ws: &Workspace, req: &RunRequest, noise: Option<u64>) -> Result<Runner> {
    let cfg = ws.config()?;
    let tree = ws.load_tree(&req.tree)?;
    let world = match noise {
        Some(seed) => perturb(&req.world, cfg.executor.repeat_noise_m, seed),
        None => req.world.clone(),
    };
    let id = run_id(&req.tree, &req.scenario, &world, &(&req.disturbances, &cfg.executor, noise));
    Ok(Runner::new(
        id,
        req.tree.clone(),
        req.scenario.clone(),
        tree,
        world,
        req.disturbances.clone(),
        cfg.tolerances,
        cfg.executor,
    )?)
}

/// Runs to completion and stores the record.
pub fn run(ws: &Workspace, req: &RunRequest, noise: Option<u64>) -> Result<RunRecord> {
    let record = runner(ws, req, noise)?.finish_run()?;
    ws.save_run(&record)?;
    Ok(record)
}

/// `repeat` runs; with more than one, or with a seed, each start scene is
/// perturbed with seed `seed + i`.
pub fn run_repeated(ws: &Workspace, req: &RunRequest, repeat: usize, seed: Option<u64>) -> Result<Vec<RunRecord>> {
    let noisy = repeat > 1 || seed.is_some();
    let base = seed.unwrap_or(0);
    (0..repeat as u64).map(|i| run(ws, req, noisy.then_some(base + i))).collect()
}
