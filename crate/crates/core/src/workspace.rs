//! File-backed workspace: demonstrations, scenes, trees, reports and runs
//! under one root directory, with an index kept in step with the files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bt::BtNode;
use crate::config::Config;
use crate::demo::{is_valid_id, Demonstration};
use crate::error::{DemoError, PipelineError, WorkspaceError};
use crate::executor::RunRecord;
use crate::pipeline::learn;
use crate::world::WorldState;

pub const CONFIG_FILE: &str = "config.toml";
pub const INDEX_FILE: &str = "index.json";

/// Scenario names of this form resolve to a demonstration's initial scene.
pub const DEMO_SCENE_PREFIX: &str = "demo:";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Index {
    pub demos: Vec<String>,
    pub scenarios: Vec<String>,
    pub trees: Vec<String>,
    pub reports: Vec<String>,
    pub runs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnSummary {
    pub tree_id: String,
    pub demos: Vec<String>,
    pub node_count: usize,
    pub sound: bool,
    pub inference_report: String,
    pub plan_report: String,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

fn check_id(kind: &'static str, id: &str) -> Result<(), WorkspaceError> {
    if is_valid_id(id) {
        Ok(())
    } else {
        Err(WorkspaceError::NotFound { kind, id: id.to_string() })
    }
}

/// Writes through a temporary file so readers never see half a document.
fn write_atomic(path: &Path, contents: &str) -> Result<(), WorkspaceError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| WorkspaceError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| WorkspaceError::io(path, e))
}

fn read(path: &Path, kind: &'static str, id: &str) -> Result<String, WorkspaceError> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => WorkspaceError::NotFound { kind, id: id.to_string() },
        _ => WorkspaceError::io(path, e),
    })
}

fn stems(dir: &Path, ext: &str, prefix: Option<&str>) -> Result<Vec<String>, WorkspaceError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| WorkspaceError::io(dir, e))? {
        let path = entry.map_err(|e| WorkspaceError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if prefix.is_none_or(|p| stem.starts_with(p)) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn to_pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

impl Workspace {
    /// Opens `root`, creating the directory layout if it is missing.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, WorkspaceError> {
        let ws = Workspace { root: root.into() };
        for d in ["demos", "scenarios", "trees", "reports"] {
            let p = ws.root.join(d);
            fs::create_dir_all(&p).map_err(|e| WorkspaceError::io(&p, e))?;
        }
        ws.refresh_index()?;
        Ok(ws)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, dir: &str, id: &str, ext: &str) -> PathBuf {
        self.root.join(dir).join(format!("{id}.{ext}"))
    }

    pub fn config(&self) -> Result<Config, WorkspaceError> {
        let p = self.root.join(CONFIG_FILE);
        match fs::read_to_string(&p) {
            Ok(text) => Config::from_toml(&text).map_err(WorkspaceError::Config),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Config::default()),
            Err(e) => Err(WorkspaceError::io(&p, e)),
        }
    }

    pub fn write_config(&self, cfg: &Config) -> Result<(), WorkspaceError> {
        cfg.check().map_err(WorkspaceError::Config)?;
        write_atomic(&self.root.join(CONFIG_FILE), &cfg.to_toml())
    }

    pub fn index(&self) -> Result<Index, WorkspaceError> {
        let text = read(&self.root.join(INDEX_FILE), "index", INDEX_FILE)?;
        serde_json::from_str(&text).map_err(|e| WorkspaceError::Config(format!("corrupt index: {e}")))
    }

    /// Rebuilds the index from the directory contents.
    pub fn refresh_index(&self) -> Result<Index, WorkspaceError> {
        let reports = self.root.join("reports");
        let mut report_names = stems(&reports, "json", None)?;
        report_names.retain(|n| !n.starts_with("run-"));
        let index = Index {
            demos: stems(&self.root.join("demos"), "json", None)?,
            scenarios: stems(&self.root.join("scenarios"), "yaml", None)?,
            trees: stems(&self.root.join("trees"), "json", None)?,
            reports: report_names,
            runs: stems(&reports, "json", Some("run-"))?,
        };
        write_atomic(&self.root.join(INDEX_FILE), &to_pretty(&index))?;
        Ok(index)
    }

    pub fn save_scene(&self, id: &str, world: &WorldState) -> Result<(), WorkspaceError> {
        check_id("scene", id)?;
        write_atomic(&self.path("scenarios", id, "yaml"), &world.to_yaml())?;
        self.refresh_index().map(|_| ())
    }

    pub fn load_scene(&self, id: &str) -> Result<WorldState, WorkspaceError> {
        check_id("scene", id)?;
        Ok(WorldState::from_yaml(&read(&self.path("scenarios", id, "yaml"), "scene", id)?)?)
    }

    /// A named scene, or `demo:<id>` for a demonstration's starting scene.
    pub fn resolve_scenario(&self, name: &str) -> Result<WorldState, WorkspaceError> {
        match name.strip_prefix(DEMO_SCENE_PREFIX) {
            Some(demo) => Ok(self.load_demo(demo)?.initial_scene),
            None => self.load_scene(name),
        }
    }

    /// Stores a demonstration. Ids are never overwritten.
    pub fn save_demo(&self, demo: &Demonstration) -> Result<(), WorkspaceError> {
        check_id("demo", &demo.id)?;
        if let Some(d) = demo.validate().into_iter().next() {
            return Err(d.into_error().into());
        }
        let p = self.path("demos", &demo.id, "json");
        if p.exists() {
            return Err(DemoError::DuplicateId(demo.id.clone()).into());
        }
        write_atomic(&p, &demo.to_json())?;
        self.refresh_index().map(|_| ())
    }

    pub fn load_demo(&self, id: &str) -> Result<Demonstration, WorkspaceError> {
        check_id("demo", id)?;
        Ok(Demonstration::from_json(&read(&self.path("demos", id, "json"), "demo", id)?)?)
    }

    pub fn list_demos(&self) -> Result<Vec<String>, WorkspaceError> {
        stems(&self.root.join("demos"), "json", None)
    }

    pub fn save_tree(&self, id: &str, tree: &BtNode) -> Result<(), WorkspaceError> {
        check_id("tree", id)?;
        write_atomic(&self.path("trees", id, "json"), &tree.to_json())?;
        self.refresh_index().map(|_| ())
    }

    pub fn load_tree(&self, id: &str) -> Result<BtNode, WorkspaceError> {
        check_id("tree", id)?;
        Ok(BtNode::from_json(&read(&self.path("trees", id, "json"), "tree", id)?)?)
    }

    pub fn save_report(&self, name: &str, report: &Value) -> Result<(), WorkspaceError> {
        check_id("report", name)?;
        write_atomic(&self.path("reports", name, "json"), &to_pretty(report))?;
        self.refresh_index().map(|_| ())
    }

    pub fn load_report(&self, name: &str) -> Result<Value, WorkspaceError> {
        check_id("report", name)?;
        let text = read(&self.path("reports", name, "json"), "report", name)?;
        serde_json::from_str(&text).map_err(|e| WorkspaceError::Config(format!("corrupt report {name}: {e}")))
    }

    pub fn save_run(&self, run: &RunRecord) -> Result<(), WorkspaceError> {
        check_id("run", &run.id)?;
        write_atomic(&self.path("reports", &run.id, "json"), &to_pretty(run))?;
        self.refresh_index().map(|_| ())
    }

    pub fn load_run(&self, id: &str) -> Result<RunRecord, WorkspaceError> {
        check_id("run", id)?;
        let text = read(&self.path("reports", id, "json"), "run", id)?;
        serde_json::from_str(&text).map_err(|e| WorkspaceError::Config(format!("corrupt run {id}: {e}")))
    }

    /// Deletes artifacts written by a pipeline that did not finish.
    fn discard(&self, paths: &[PathBuf]) {
        for p in paths {
            let _ = fs::remove_file(p);
        }
        let _ = self.refresh_index();
    }
}

/// Deterministic run id from everything that determines the run.
pub fn run_id(tree_id: &str, scenario: &str, world: &WorldState, extra: &impl Serialize) -> String {
    let mut h = Sha256::new();
    for part in [tree_id, scenario, &world.digest(), &serde_json::to_string(extra).expect("serializable")] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    format!("run-{}", &hex::encode(h.finalize())[..16])
}

/// Loads the given demonstrations, learns a tree, and persists the tree and
/// both reports. Nothing is written unless every stage succeeds.
pub fn learn_pipeline(ws: &Workspace, demo_ids: &[String], cfg: &Config) -> Result<LearnSummary, PipelineError> {
    let demos = demo_ids
        .iter()
        .map(|id| ws.load_demo(id))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| PipelineError::stage("load", e))?;
    let learned = learn(&demos, cfg)?;
    let id = learned.tree_id.clone();
    let summary = LearnSummary {
        tree_id: id.clone(),
        demos: learned.demos.clone(),
        node_count: learned.tree.count_nodes(),
        sound: learned.plan.sound,
        inference_report: format!("{id}-inference"),
        plan_report: format!("{id}-plan"),
    };
    let written = [
        ws.path("trees", &id, "json"),
        ws.path("reports", &summary.inference_report, "json"),
        ws.path("reports", &summary.plan_report, "json"),
    ];
    let persisted = ws
        .save_tree(&id, &learned.tree)
        .and_then(|_| ws.save_report(&summary.inference_report, &learned.inference_report()))
        .and_then(|_| ws.save_report(&summary.plan_report, &learned.plan_report()));
    if let Err(e) = persisted {
        ws.discard(&written);
        return Err(PipelineError::stage("persist", e));
    }
    Ok(summary)
}
