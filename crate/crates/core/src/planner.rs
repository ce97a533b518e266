//! Backchaining synthesis of behavior trees.
//!
//! Each goal group starts as a Sequence of its goal conditions. The tree is
//! ticked in simulation from every initial world; the first failing
//! condition that has not been expanded yet is replaced by
//! `Fallback(condition, Sequence(preconditions..., action))` using the
//! cheapest achieving action. When a condition that held earlier in the run
//! was undone by an action in a later sibling branch, that branch is moved
//! one position left instead. Dead ends roll back the latest expansion and
//! try the next-cheapest achiever.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::actions::{achievers_by_cost, ActionTemplate, Condition, Costs, Tolerances};
use crate::bt::{tick, BtNode, ExecutionContext, IdGen, NodeId, NodeKind, TickStatus, TraceKind};
use crate::error::PlanError;
use crate::world::{GripperState, WorldState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub expansion_budget: usize,
    pub tick_budget: u64,
    /// Ticks an action takes during planning simulation.
    pub action_duration: u32,
    /// Stochastic events during planning. Accepted for completeness; the
    /// planner never injects any.
    pub random_events: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { expansion_budget: 200, tick_budget: 10_000, action_duration: 1, random_events: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanGroup {
    pub goals: Vec<Condition>,
    pub actions: Vec<ActionTemplate>,
    /// Indices of the initial worlds this group is planned against; empty
    /// means all of them.
    #[serde(default)]
    pub worlds: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanProblem {
    pub groups: Vec<PlanGroup>,
    pub worlds: Vec<WorldState>,
    pub tolerances: Tolerances,
    pub costs: Costs,
    pub config: PlannerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    pub iteration: usize,
    pub group: usize,
    pub condition_node: NodeId,
    pub condition: Condition,
    pub action: String,
    /// The postcondition of `action` that establishes `condition`.
    pub achieved_by: Condition,
    pub subtree_root: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictMove {
    pub iteration: usize,
    pub group: usize,
    pub clobbered_node: NodeId,
    pub clobbering_action: String,
    pub subtree: NodeId,
    pub parent: NodeId,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollback {
    pub iteration: usize,
    pub group: usize,
    pub condition_node: NodeId,
    pub action: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldResult {
    pub world: usize,
    pub ticks: u64,
    pub success: bool,
}

/// Everything the planner did, in order. Expansions that were later rolled
/// back stay listed; `rollbacks` records which.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanTrace {
    pub iterations: usize,
    pub expansions: Vec<Expansion>,
    pub moves: Vec<ConflictMove>,
    pub rollbacks: Vec<Rollback>,
    pub worlds: Vec<WorldResult>,
    pub node_count: usize,
    /// Whether the final tree reached Success from every initial world.
    pub sound: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub tree: BtNode,
    pub trace: PlanTrace,
}

/// Cheapest action whose postconditions establish `c`.
pub fn select_action<'a>(
    c: &Condition,
    actions: &'a [ActionTemplate],
    tol: &Tolerances,
) -> Result<&'a ActionTemplate, PlanError> {
    achievers_by_cost(c, actions, tol).into_iter().next().ok_or_else(|| PlanError::Unachievable(c.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SimEnd {
    Success,
    Failure,
    Budget,
}

struct Sim {
    end: SimEnd,
    ticks: u64,
    initial: WorldState,
    ctx: ExecutionContext,
}

/// Ticks until the tree reports Success on a tick without action activity,
/// reports Failure, or the budget runs out.
fn simulate(tree: &BtNode, world: &WorldState, tol: &Tolerances, cfg: &PlannerConfig) -> Result<Sim, PlanError> {
    let mut ctx = ExecutionContext::new(world.clone(), *tol, cfg.action_duration).with_trace().with_snapshots();
    let mut ticks = 0;
    while ticks < cfg.tick_budget {
        let before = ctx.trace().len();
        let status = tick(tree, &mut ctx)?;
        ticks += 1;
        let busy = ctx.trace()[before..].iter().any(|e| {
            matches!(e.kind, TraceKind::ActionStarted | TraceKind::ActionCompleted | TraceKind::ActionAborted)
        });
        match status {
            TickStatus::Success if !busy => {
                return Ok(Sim { end: SimEnd::Success, ticks, initial: world.clone(), ctx })
            }
            TickStatus::Failure => return Ok(Sim { end: SimEnd::Failure, ticks, initial: world.clone(), ctx }),
            _ => {}
        }
    }
    Ok(Sim { end: SimEnd::Budget, ticks, initial: world.clone(), ctx })
}

/// Condition nodes already expanded: first children of a Fallback.
fn expanded_conditions(tree: &BtNode) -> BTreeSet<NodeId> {
    tree.iter()
        .filter_map(|n| match &n.kind {
            NodeKind::Fallback(c) => c.first().filter(|f| f.as_condition().is_some()).map(|f| f.id),
            _ => None,
        })
        .collect()
}

/// Conditions being achieved on the path from the root to `node`.
fn ancestor_goals(tree: &BtNode, node: NodeId) -> Vec<Condition> {
    let path = tree.path_to(node).unwrap_or_default();
    path.iter()
        .filter_map(|id| tree.find(*id))
        .filter_map(|n| match &n.kind {
            NodeKind::Fallback(c) => c.first().and_then(|f| f.as_condition()).cloned(),
            _ => None,
        })
        .collect()
}

enum Step {
    Expand { node: NodeId, condition: Condition },
    Move { clobbered: NodeId, action: NodeId, parent: NodeId, from: usize },
    DeadEnd(String),
}

/// Decides what to do about a failed simulation.
fn diagnose(tree: &BtNode, sim: &Sim, tol: &Tolerances) -> Step {
    if sim.end == SimEnd::Budget {
        return Step::DeadEnd("tick budget exhausted".into());
    }
    let trace = sim.ctx.trace();
    let last_tick = trace.last().map_or(0, |e| e.tick);
    let expanded = expanded_conditions(tree);
    let failed = trace
        .iter()
        .filter(|e| e.tick == last_tick && e.kind == TraceKind::ConditionFailure)
        .find(|e| !expanded.contains(&e.node));
    let Some(failed) = failed else {
        return rejected_action_step(tree, sim);
    };
    let node = failed.node;
    let condition = tree.find(node).and_then(BtNode::as_condition).cloned().expect("condition node");

    // Did this condition hold earlier and get undone by an action?
    let last_success = trace.iter().rfind(|e| e.node == node && e.kind == TraceKind::ConditionSuccess);
    if let Some(s) = last_success {
        let clobber = sim
            .ctx
            .snapshots()
            .iter()
            .filter(|(seq, _)| *seq > s.seq)
            .find(|(_, w)| !tol.evaluate(&condition, w).unwrap_or(false))
            .and_then(|(seq, _)| trace.iter().find(|e| e.seq == *seq))
            .map(|e| e.node);
        if let Some(action) = clobber {
            if let Some(step) = conflict_move(tree, node, action) {
                return step;
            }
        }
    }
    Step::Expand { node, condition }
}

/// An action was rejected although its conditions held. If an earlier
/// action in a branch to its left made it infeasible, move the rejected
/// action's branch left.
fn rejected_action_step(tree: &BtNode, sim: &Sim) -> Step {
    let trace = sim.ctx.trace();
    let Some(rejected) = trace.iter().rev().find(|e| e.kind == TraceKind::ActionRejected) else {
        return Step::DeadEnd("failure without a failed condition".into());
    };
    let Some(action) = tree.find(rejected.node).and_then(BtNode::as_action) else {
        return Step::DeadEnd("rejected node is not an action".into());
    };
    let feasible = |w: &WorldState| action.to_primitive(w).and_then(|p| w.check_primitive(&p)).is_ok();
    let mut was_feasible = feasible(&sim.initial);
    let mut blocker = None;
    for (seq, w) in sim.ctx.snapshots().iter().filter(|(seq, _)| *seq < rejected.seq) {
        let now = feasible(w);
        if was_feasible && !now {
            blocker = trace.iter().find(|e| e.seq == *seq).map(|e| e.node);
        }
        was_feasible = now;
    }
    blocker
        .and_then(|b| conflict_move(tree, b, rejected.node))
        .unwrap_or_else(|| Step::DeadEnd(format!("{} rejected with every condition expanded", action.id)))
}

/// If `clobbered` and `action` hang off the same Sequence with the action's
/// branch to the right, move that branch one place left.
fn conflict_move(tree: &BtNode, clobbered: NodeId, action: NodeId) -> Option<Step> {
    let pc = tree.path_to(clobbered)?;
    let pa = tree.path_to(action)?;
    let common = pc.iter().zip(&pa).take_while(|(a, b)| a == b).count();
    if common == 0 || common >= pc.len() || common >= pa.len() {
        return None;
    }
    let lca = tree.find(pc[common - 1])?;
    let NodeKind::Sequence(children) = &lca.kind else { return None };
    let i = children.iter().position(|c| c.id == pc[common])?;
    let j = children.iter().position(|c| c.id == pa[common])?;
    if i >= j || children[j].as_action().is_some() {
        return None;
    }
    Some(Step::Move { clobbered, action, parent: lca.id, from: j })
}

fn expand(tree: &mut BtNode, node: NodeId, action: &ActionTemplate, ids: &IdGen) -> NodeId {
    let target = tree.find_mut(node).expect("node exists");
    let cond = target.clone();
    let mut seq: Vec<BtNode> = action.pre.iter().map(|c| ids.condition(c.clone())).collect();
    seq.push(ids.action(action.clone()));
    let seq = ids.sequence(seq);
    let fb = ids.fallback(vec![cond, seq]);
    let root = fb.id;
    *target = fb;
    root
}

struct Choice {
    tree_before: BtNode,
    moves_before: BTreeSet<(NodeId, usize)>,
    node: NodeId,
    condition: Condition,
    achievers: Vec<ActionTemplate>,
    next: usize,
}

/// The achievers of `c` that do not need a condition already being
/// achieved further up, cheapest first.
fn candidate_achievers(
    tree: &BtNode,
    node: NodeId,
    c: &Condition,
    actions: &[ActionTemplate],
    tol: &Tolerances,
) -> Vec<ActionTemplate> {
    let mut above = ancestor_goals(tree, node);
    above.push(c.clone());
    achievers_by_cost(c, actions, tol)
        .into_iter()
        .filter(|a| !a.pre.iter().any(|p| above.iter().any(|g| p.approx_eq(g, 1e-9))))
        .cloned()
        .collect()
}

struct GroupPlanner<'a> {
    group_index: usize,
    actions: Vec<ActionTemplate>,
    worlds: Vec<&'a WorldState>,
    problem: &'a PlanProblem,
    ids: &'a IdGen,
    trace: &'a mut PlanTrace,
    expansions_used: &'a mut usize,
}

impl GroupPlanner<'_> {
    fn run(&mut self, goals: &[Condition]) -> Result<BtNode, PlanError> {
        let tol = self.problem.tolerances;
        let cfg = &self.problem.config;
        let mut tree = self.ids.sequence(goals.iter().map(|g| self.ids.condition(g.clone())).collect());
        let mut stack: Vec<Choice> = Vec::new();
        let mut moves: BTreeSet<(NodeId, usize)> = BTreeSet::new();
        loop {
            self.trace.iterations += 1;
            let iteration = self.trace.iterations;
            let mut step = None;
            for w in &self.worlds {
                let sim = simulate(&tree, w, &tol, cfg)?;
                if sim.end != SimEnd::Success {
                    step = Some(diagnose(&tree, &sim, &tol));
                    break;
                }
            }
            let Some(step) = step else { return Ok(tree) };

            let dead_end = match step {
                Step::Move { clobbered, action, parent, from } => {
                    let subtree = {
                        let p = tree.find(parent).expect("parent");
                        p.children()[from].id
                    };
                    if moves.insert((subtree, from - 1)) {
                        let p = tree.find_mut(parent).and_then(BtNode::children_mut).expect("parent");
                        p.swap(from - 1, from);
                        let clobbering = tree.find(action).and_then(BtNode::as_action).map(|a| a.id.clone());
                        self.trace.moves.push(ConflictMove {
                            iteration,
                            group: self.group_index,
                            clobbered_node: clobbered,
                            clobbering_action: clobbering.unwrap_or_default(),
                            subtree,
                            parent,
                            from,
                            to: from - 1,
                        });
                        None
                    } else {
                        Some(PlanError::PlanConflictLoop { subtree, to: from - 1 })
                    }
                }
                Step::Expand { node, condition } => {
                    let achievers = candidate_achievers(&tree, node, &condition, &self.actions, &tol);
                    if achievers.is_empty() {
                        Some(PlanError::Unachievable(condition))
                    } else {
                        let choice = Choice {
                            tree_before: tree.clone(),
                            moves_before: moves.clone(),
                            node,
                            condition,
                            achievers,
                            next: 0,
                        };
                        self.apply(&mut tree, choice, &mut stack, iteration)?;
                        None
                    }
                }
                Step::DeadEnd(reason) => Some(PlanError::InvalidProblem(reason)),
            };

            if let Some(err) = dead_end {
                // Undo choices until one has an untried alternative.
                let mut resumed = false;
                while let Some(choice) = stack.pop() {
                    let failed = &choice.achievers[choice.next - 1];
                    self.trace.rollbacks.push(Rollback {
                        iteration,
                        group: self.group_index,
                        condition_node: choice.node,
                        action: failed.id.clone(),
                        reason: err.to_string(),
                    });
                    tree = choice.tree_before.clone();
                    moves = choice.moves_before.clone();
                    if choice.next < choice.achievers.len() {
                        self.apply(&mut tree, choice, &mut stack, iteration)?;
                        resumed = true;
                        break;
                    }
                }
                if !resumed {
                    return Err(match err {
                        PlanError::InvalidProblem(reason) => {
                            PlanError::InvalidProblem(format!("no tree solves every initial world: {reason}"))
                        }
                        e => e,
                    });
                }
            }
        }
    }

    fn apply(
        &mut self,
        tree: &mut BtNode,
        mut choice: Choice,
        stack: &mut Vec<Choice>,
        iteration: usize,
    ) -> Result<(), PlanError> {
        if *self.expansions_used >= self.problem.config.expansion_budget {
            return Err(PlanError::PlanBudgetExceeded(self.problem.config.expansion_budget));
        }
        *self.expansions_used += 1;
        let action = choice.achievers[choice.next].clone();
        choice.next += 1;
        let tol = self.problem.tolerances;
        let achieved_by = action.achieving_post(&choice.condition, &tol).cloned().expect("achiever");
        let subtree_root = expand(tree, choice.node, &action, self.ids);
        self.trace.expansions.push(Expansion {
            iteration,
            group: self.group_index,
            condition_node: choice.node,
            condition: choice.condition.clone(),
            action: action.id.clone(),
            achieved_by,
            subtree_root,
        });
        stack.push(choice);
        Ok(())
    }
}

/// Plans every group and combines them under a root Fallback when there is
/// more than one.
pub fn plan(problem: &PlanProblem) -> Result<PlanOutcome, PlanError> {
    if problem.worlds.is_empty() {
        return Err(PlanError::InvalidProblem("no initial worlds".into()));
    }
    if problem.groups.is_empty() || problem.groups.iter().any(|g| g.goals.is_empty()) {
        return Err(PlanError::InvalidProblem("every group needs at least one goal".into()));
    }
    let ids = IdGen::default();
    let mut trace = PlanTrace::default();
    let mut used = 0;
    let mut subtrees = Vec::new();
    for (gi, g) in problem.groups.iter().enumerate() {
        let mut actions = g.actions.clone();
        for state in [GripperState::Open, GripperState::Closed] {
            let sg = ActionTemplate::set_gripper(state, &problem.costs);
            if !actions.iter().any(|a| a.id == sg.id) {
                actions.push(sg);
            }
        }
        let worlds: Vec<&WorldState> =
            if g.worlds.is_empty() {
                problem.worlds.iter().collect()
            } else {
                let mut v = Vec::new();
                for &i in &g.worlds {
                    v.push(problem.worlds.get(i).ok_or_else(|| {
                        PlanError::InvalidProblem(format!("group {gi} references missing world {i}"))
                    })?);
                }
                v
            };
        let mut gp = GroupPlanner {
            group_index: gi,
            actions,
            worlds,
            problem,
            ids: &ids,
            trace: &mut trace,
            expansions_used: &mut used,
        };
        subtrees.push(gp.run(&g.goals)?);
    }
    let tree = if subtrees.len() == 1 { subtrees.pop().expect("one") } else { ids.fallback(subtrees) };
    tree.validate()?;

    let mut sound = true;
    for (i, w) in problem.worlds.iter().enumerate() {
        let sim = simulate(&tree, w, &problem.tolerances, &problem.config)?;
        let success = sim.end == SimEnd::Success;
        sound &= success;
        trace.worlds.push(WorldResult { world: i, ticks: sim.ticks, success });
    }
    trace.node_count = tree.count_nodes();
    trace.sound = sound;
    Ok(PlanOutcome { tree, trace })
}
