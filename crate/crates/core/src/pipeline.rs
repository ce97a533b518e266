//! Demonstrations in, behavior tree out: clustering, task inference and
//! planning chained together.

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bt::BtNode;
use crate::clustering::{cluster_corpus, ClusteringResult};
use crate::config::Config;
use crate::demo::Demonstration;
use crate::error::PipelineError;
use crate::inference::{infer_task, InferenceResult};
use crate::planner::{plan, PlanGroup, PlanProblem, PlanTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct Learned {
    pub tree_id: String,
    pub tree: BtNode,
    pub demos: Vec<String>,
    pub clustering: ClusteringResult,
    pub inference: InferenceResult,
    pub plan: PlanTrace,
}

/// Deterministic id for a corpus and configuration.
pub fn tree_id(demos: &[Demonstration], cfg: &Config) -> String {
    let mut sorted: Vec<&Demonstration> = demos.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut h = Sha256::new();
    for d in sorted {
        h.update(d.to_json().as_bytes());
        h.update([0]);
    }
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    format!("tree-{}", &hex::encode(h.finalize())[..16])
}

/// Learns a tree from `demos`. Demonstrations are processed in id order, so
/// the result does not depend on the order they are given in.
pub fn learn(demos: &[Demonstration], cfg: &Config) -> Result<Learned, PipelineError> {
    if demos.is_empty() {
        return Err(PipelineError::stage("validate", "at least one demonstration is required"));
    }
    cfg.check().map_err(|e| PipelineError::stage("validate", e))?;
    let mut demos: Vec<Demonstration> = demos.to_vec();
    demos.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = demos.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(PipelineError::stage("validate", format!("duplicate demonstration id {}", w[0].id)));
    }
    for d in &demos {
        if let Some(diag) = d.validate().into_iter().next() {
            return Err(PipelineError::stage("validate", format!("{}: {diag}", d.id)));
        }
    }

    let clustering =
        cluster_corpus(&demos, &cfg.clustering, &cfg.costs).map_err(|e| PipelineError::stage("cluster", e))?;
    let inference =
        infer_task(&demos, &clustering, &cfg.goals, &cfg.tolerances).map_err(|e| PipelineError::stage("infer", e))?;

    let groups = inference
        .groups
        .iter()
        .map(|g| PlanGroup {
            goals: g.goal.conditions.clone(),
            actions: g.actions.clone(),
            worlds: g.goal.demos.iter().filter_map(|id| demos.iter().position(|d| &d.id == id)).collect(),
        })
        .collect();
    let problem = PlanProblem {
        groups,
        worlds: demos.iter().map(|d| d.initial_scene.clone()).collect(),
        tolerances: cfg.tolerances,
        costs: cfg.costs,
        config: cfg.planner.clone(),
    };
    let outcome = plan(&problem).map_err(|e| PipelineError::stage("plan", e))?;

    Ok(Learned {
        tree_id: tree_id(&demos, cfg),
        tree: outcome.tree,
        demos: demos.iter().map(|d| d.id.clone()).collect(),
        clustering,
        inference,
        plan: outcome.trace,
    })
}

#[derive(Serialize)]
struct ActionSummary<'a> {
    id: &'a str,
    frame: Option<String>,
    members: usize,
    score: Option<f64>,
}

impl Learned {
    /// Clustering, constraints and goals, as persisted next to the tree.
    pub fn inference_report(&self) -> Value {
        let actions: Vec<ActionSummary> = self
            .clustering
            .actions
            .iter()
            .map(|a| ActionSummary {
                id: a.id(),
                frame: a.template.frame.as_ref().map(|f| f.to_string()),
                members: a.members.len(),
                score: a.score.filter(|s| s.is_finite()),
            })
            .collect();
        let groups: Vec<Value> = self
            .inference
            .groups
            .iter()
            .map(|g| {
                json!({
                    "demos": g.goal.demos,
                    "goals": g.goal.conditions,
                    "surviving_constraints": g.constraints.surviving,
                    "reduced_constraints": g.constraints.reduced,
                    "removed_conflicts": g.constraints.removed_conflicts,
                    "cycles": g.constraints.cycles,
                    "diagnostics": g.diagnostics,
                })
            })
            .collect();
        json!({
            "tree_id": self.tree_id,
            "demos": self.demos,
            "actions": actions,
            "clusters": self.clustering.groups,
            "sequences": self.inference.sequences,
            "groups": groups,
        })
    }

    pub fn plan_report(&self) -> Value {
        json!({
            "tree_id": self.tree_id,
            "node_count": self.plan.node_count,
            "sound": self.plan.sound,
            "trace": self.plan,
        })
    }
}
