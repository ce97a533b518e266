//! Ordering constraints, precondition propagation, goal inference and
//! grouping of demonstrations by goal.

use std::collections::{BTreeMap, BTreeSet};

use petgraph::algo::tarjan_scc;
use petgraph::graphmap::DiGraphMap;
use serde::{Deserialize, Serialize};

use crate::actions::{ActionTemplate, Condition, Tolerances};
use crate::clustering::ClusteringResult;
use crate::demo::Demonstration;
use crate::error::InferenceError;

/// Positions of goal conditions closer than this are the same goal.
pub const GOAL_EQ_TOL: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Constraint {
    pub before: String,
    pub after: String,
}

impl Constraint {
    pub fn new(before: impl Into<String>, after: impl Into<String>) -> Self {
        Constraint { before: before.into(), after: after.into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    /// Strict partial order left after conflict and cycle removal.
    pub surviving: BTreeSet<Constraint>,
    /// Transitive reduction of `surviving`.
    pub reduced: BTreeSet<Constraint>,
    /// Pairs that occurred in both directions, stored as (a, b) with a < b.
    pub removed_conflicts: BTreeSet<(String, String)>,
    /// Residual cycles; their edges were dropped.
    pub cycles: Vec<Vec<String>>,
}

/// All ordered pairs over every sequence, minus pairs seen both ways and
/// edges inside residual cycles.
pub fn extract_constraints(sequences: &[Vec<String>]) -> ConstraintSet {
    let mut pairs = BTreeSet::new();
    for seq in sequences {
        for i in 0..seq.len() {
            for j in i + 1..seq.len() {
                if seq[i] != seq[j] {
                    pairs.insert(Constraint::new(seq[i].clone(), seq[j].clone()));
                }
            }
        }
    }
    let mut out = ConstraintSet::default();
    for c in &pairs {
        let reverse = Constraint::new(c.after.clone(), c.before.clone());
        if pairs.contains(&reverse) {
            let (a, b) = if c.before < c.after { (&c.before, &c.after) } else { (&c.after, &c.before) };
            out.removed_conflicts.insert((a.clone(), b.clone()));
        } else {
            out.surviving.insert(c.clone());
        }
    }

    let mut g: DiGraphMap<&str, ()> = DiGraphMap::new();
    for c in &out.surviving {
        g.add_edge(c.before.as_str(), c.after.as_str(), ());
    }
    let mut in_cycle: BTreeMap<String, usize> = BTreeMap::new();
    let mut cycles: Vec<Vec<String>> = tarjan_scc(&g)
        .into_iter()
        .filter(|scc| scc.len() > 1)
        .map(|scc| {
            let mut v: Vec<String> = scc.into_iter().map(str::to_string).collect();
            v.sort();
            v
        })
        .collect();
    cycles.sort();
    for (k, cyc) in cycles.iter().enumerate() {
        for n in cyc {
            in_cycle.insert(n.clone(), k);
        }
    }
    out.surviving.retain(|c| match (in_cycle.get(&c.before), in_cycle.get(&c.after)) {
        (Some(a), Some(b)) => a != b,
        _ => true,
    });
    out.cycles = cycles;
    out.reduced = transitive_reduction(&out.surviving);
    out
}

/// Drops every edge implied by a longer path. Input must be acyclic.
pub fn transitive_reduction(edges: &BTreeSet<Constraint>) -> BTreeSet<Constraint> {
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for c in edges {
        succ.entry(&c.before).or_default().push(&c.after);
    }
    let reachable_without = |from: &str, to: &str| {
        let mut stack: Vec<&str> =
            succ.get(from).map(|v| v.iter().copied().filter(|&n| n != to).collect()).unwrap_or_default();
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if seen.insert(n) {
                stack.extend(succ.get(n).into_iter().flatten().copied());
            }
        }
        false
    };
    edges.iter().filter(|c| !reachable_without(&c.before, &c.after)).cloned().collect()
}

/// A condition that was not propagated because it conflicts with an
/// existing precondition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationDiagnostic {
    pub action: String,
    pub condition: Condition,
    pub conflicts_with: Condition,
}

/// For every `A ≺ B`, adds A's ObjectAt postconditions to B's preconditions
/// unless incompatible. Added conditions come before B's own preconditions.
pub fn propagate_preconditions(
    constraints: &BTreeSet<Constraint>,
    actions: &mut [ActionTemplate],
    tol: &Tolerances,
) -> Vec<PropagationDiagnostic> {
    let posts: BTreeMap<String, Vec<Condition>> =
        actions.iter().map(|a| (a.id.clone(), a.post.iter().filter(|c| c.is_object_at()).cloned().collect())).collect();
    let mut diags = Vec::new();
    for a in actions.iter_mut() {
        let mut added: Vec<Condition> = Vec::new();
        for c in constraints.iter().filter(|c| c.after == a.id) {
            for cand in posts.get(&c.before).into_iter().flatten() {
                if added.contains(cand) || a.pre.contains(cand) {
                    continue;
                }
                match added.iter().chain(&a.pre).find(|p| !tol.comp(cand, p)) {
                    Some(p) => diags.push(PropagationDiagnostic {
                        action: a.id.clone(),
                        condition: cand.clone(),
                        conflicts_with: p.clone(),
                    }),
                    None => added.push(cand.clone()),
                }
            }
        }
        if !added.is_empty() {
            added.append(&mut a.pre);
            a.pre = added;
        }
    }
    diags
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub conditions: Vec<Condition>,
    pub demos: Vec<String>,
}

impl GoalSpec {
    /// Same conditions as a multiset, positions within [`GOAL_EQ_TOL`].
    pub fn same_goal(&self, other: &GoalSpec) -> bool {
        if self.conditions.len() != other.conditions.len() {
            return false;
        }
        let mut used = vec![false; other.conditions.len()];
        self.conditions.iter().all(|c| {
            let hit = other.conditions.iter().enumerate().find(|(j, o)| !used[*j] && c.approx_eq(o, GOAL_EQ_TOL));
            match hit {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoalConfig {
    pub include_gripper: bool,
}

/// Scans the demo backwards collecting postconditions: ObjectAt only (plus
/// gripper conditions when configured), at most one per object, each
/// compatible with everything collected so far.
pub fn infer_goals(
    demo: &str,
    sequence: &[&ActionTemplate],
    cfg: &GoalConfig,
    tol: &Tolerances,
) -> Result<GoalSpec, InferenceError> {
    let mut goals: Vec<Condition> = Vec::new();
    for a in sequence.iter().rev() {
        for c in &a.post {
            let wanted = c.is_object_at() || cfg.include_gripper;
            let same_object =
                c.object_at_subject().is_some_and(|o| goals.iter().any(|g| g.object_at_subject() == Some(o)));
            if wanted && !same_object && !goals.contains(c) && goals.iter().all(|g| tol.comp(c, g)) {
                goals.push(c.clone());
            }
        }
    }
    if goals.is_empty() {
        return Err(InferenceError::GoalEmpty(demo.to_string()));
    }
    Ok(GoalSpec { conditions: goals, demos: vec![demo.to_string()] })
}

/// Demonstrations sharing one goal, with constraints and augmented actions
/// inferred from those demonstrations only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoGroup {
    pub goal: GoalSpec,
    pub constraints: ConstraintSet,
    pub actions: Vec<ActionTemplate>,
    pub diagnostics: Vec<PropagationDiagnostic>,
}

/// Groups goal specs by equality, keeping first-seen order. The retained
/// conditions are those of the first member.
pub fn group_demos(specs: Vec<GoalSpec>) -> Vec<GoalSpec> {
    let mut groups: Vec<GoalSpec> = Vec::new();
    for s in specs {
        match groups.iter_mut().find(|g| g.same_goal(&s)) {
            Some(g) => g.demos.extend(s.demos),
            None => groups.push(s),
        }
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub sequences: BTreeMap<String, Vec<String>>,
    pub groups: Vec<DemoGroup>,
}

/// Runs constraint extraction, goal inference and grouping over a
/// clustered corpus.
pub fn infer_task(
    demos: &[Demonstration],
    clustering: &ClusteringResult,
    cfg: &GoalConfig,
    tol: &Tolerances,
) -> Result<InferenceResult, InferenceError> {
    let mut sequences = BTreeMap::new();
    let mut specs = Vec::new();
    for d in demos {
        let seq = clustering.sequence(d);
        let templates = seq
            .iter()
            .map(|id| {
                clustering
                    .action(id)
                    .map(|a| &a.template)
                    .ok_or_else(|| InferenceError::UnknownAction { demo: d.id.clone(), action: id.clone() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        specs.push(infer_goals(&d.id, &templates, cfg, tol)?);
        sequences.insert(d.id.clone(), seq);
    }
    let groups = group_demos(specs)
        .into_iter()
        .map(|goal| {
            let seqs: Vec<Vec<String>> = goal.demos.iter().map(|d| sequences[d].clone()).collect();
            let constraints = extract_constraints(&seqs);
            let mut actions: Vec<ActionTemplate> = clustering.actions.iter().map(|a| a.template.clone()).collect();
            let diagnostics = propagate_preconditions(&constraints.reduced, &mut actions, tol);
            DemoGroup { goal, constraints, actions, diagnostics }
        })
        .collect();
    Ok(InferenceResult { sequences, groups })
}
