//! Behavior trees with Sequence and Fallback control nodes, action and
//! condition leaves, and tick semantics against a simulated world.
//!
//! No node status is cached between ticks: every tick re-evaluates
//! conditions from the root, so a condition that was undone by a disturbance
//! is noticed on the very next tick. Actions last a configurable number of
//! ticks and return `Running` until then; an action that is not reached on a
//! tick while running is aborted without effects.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::actions::{ActionTemplate, Condition, Tolerances};
use crate::error::{ParseError, TreeError};
use crate::world::WorldState;

pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct BtNode {
    pub id: NodeId,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Sequence(Vec<BtNode>),
    Fallback(Vec<BtNode>),
    Action(ActionTemplate),
    Condition(Condition),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TickStatus {
    Running,
    Success,
    Failure,
}

impl BtNode {
    pub fn sequence(id: NodeId, children: Vec<BtNode>) -> Self {
        BtNode { id, kind: NodeKind::Sequence(children) }
    }

    pub fn fallback(id: NodeId, children: Vec<BtNode>) -> Self {
        BtNode { id, kind: NodeKind::Fallback(children) }
    }

    pub fn action(id: NodeId, action: ActionTemplate) -> Self {
        BtNode { id, kind: NodeKind::Action(action) }
    }

    pub fn condition(id: NodeId, condition: Condition) -> Self {
        BtNode { id, kind: NodeKind::Condition(condition) }
    }

    pub fn children(&self) -> &[BtNode] {
        match &self.kind {
            NodeKind::Sequence(c) | NodeKind::Fallback(c) => c,
            _ => &[],
        }
    }

    pub fn children_mut(&mut self) -> Option<&mut Vec<BtNode>> {
        match &mut self.kind {
            NodeKind::Sequence(c) | NodeKind::Fallback(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_control(&self) -> bool {
        matches!(self.kind, NodeKind::Sequence(_) | NodeKind::Fallback(_))
    }

    pub fn as_condition(&self) -> Option<&Condition> {
        match &self.kind {
            NodeKind::Condition(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_action(&self) -> Option<&ActionTemplate> {
        match &self.kind {
            NodeKind::Action(a) => Some(a),
            _ => None,
        }
    }

    /// Total number of control and execution nodes.
    pub fn count_nodes(&self) -> usize {
        1 + self.children().iter().map(BtNode::count_nodes).sum::<usize>()
    }

    /// Pre-order traversal.
    pub fn iter(&self) -> impl Iterator<Item = &BtNode> {
        let mut stack = vec![self];
        std::iter::from_fn(move || {
            let n = stack.pop()?;
            stack.extend(n.children().iter().rev());
            Some(n)
        })
    }

    pub fn max_id(&self) -> NodeId {
        self.iter().map(|n| n.id).max().unwrap_or(0)
    }

    pub fn find(&self, id: NodeId) -> Option<&BtNode> {
        self.iter().find(|n| n.id == id)
    }

    pub fn find_mut(&mut self, id: NodeId) -> Option<&mut BtNode> {
        if self.id == id {
            return Some(self);
        }
        match &mut self.kind {
            NodeKind::Sequence(c) | NodeKind::Fallback(c) => c.iter_mut().find_map(|n| n.find_mut(id)),
            _ => None,
        }
    }

    /// Ids from the root down to `id` inclusive.
    pub fn path_to(&self, id: NodeId) -> Option<Vec<NodeId>> {
        if self.id == id {
            return Some(vec![id]);
        }
        for c in self.children() {
            if let Some(mut p) = c.path_to(id) {
                p.insert(0, self.id);
                return Some(p);
            }
        }
        None
    }

    /// Parent id and child index of `id`.
    pub fn parent_of(&self, id: NodeId) -> Option<(NodeId, usize)> {
        for (i, c) in self.children().iter().enumerate() {
            if c.id == id {
                return Some((self.id, i));
            }
            if let Some(found) = c.parent_of(id) {
                return Some(found);
            }
        }
        None
    }

    /// Checks structural invariants: control nodes have children and ids are
    /// unique.
    pub fn validate(&self) -> Result<(), TreeError> {
        let mut seen = BTreeSet::new();
        for n in self.iter() {
            if !seen.insert(n.id) {
                return Err(TreeError::TreeInvalid(format!("duplicate node id {}", n.id)));
            }
            if n.is_control() && n.children().is_empty() {
                return Err(TreeError::TreeInvalid(format!("control node {} has no children", n.id)));
            }
        }
        Ok(())
    }

    pub fn to_document(&self) -> Value {
        let mut m = Map::new();
        let kind = match &self.kind {
            NodeKind::Sequence(_) => "sequence",
            NodeKind::Fallback(_) => "fallback",
            NodeKind::Action(_) => "action",
            NodeKind::Condition(_) => "condition",
        };
        m.insert("kind".into(), json!(kind));
        m.insert("id".into(), json!(self.id));
        match &self.kind {
            NodeKind::Sequence(c) | NodeKind::Fallback(c) => {
                m.insert("children".into(), Value::Array(c.iter().map(BtNode::to_document).collect()));
            }
            NodeKind::Action(a) => {
                m.insert("payload".into(), serde_json::to_value(a).expect("action serializes"));
            }
            NodeKind::Condition(c) => {
                m.insert("payload".into(), serde_json::to_value(c).expect("condition serializes"));
            }
        }
        Value::Object(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("tree serializes")
    }

    pub fn from_document(doc: &Value) -> Result<BtNode, TreeError> {
        let node = parse_node(doc, "")?;
        node.validate()?;
        Ok(node)
    }

    pub fn from_json(text: &str) -> Result<BtNode, TreeError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| ParseError::new("/", e.to_string()))?;
        Self::from_document(&doc)
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_document()).expect("tree serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Graphviz rendering: control nodes as boxes (`→` sequence, `?`
    /// fallback), execution nodes as ovals.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph bt {\n  node [fontname=\"Helvetica\"];\n");
        for n in self.iter() {
            let (label, shape, extra) = match &n.kind {
                NodeKind::Sequence(_) => ("→".to_string(), "box", ""),
                NodeKind::Fallback(_) => ("?".to_string(), "box", ""),
                NodeKind::Action(a) => (a.id.clone(), "ellipse", ", style=bold"),
                NodeKind::Condition(c) => (c.to_string(), "ellipse", ""),
            };
            let _ = writeln!(out, "  n{} [label=\"{}\", shape={}{}];", n.id, dot_escape(&label), shape, extra);
        }
        for n in self.iter() {
            for c in n.children() {
                let _ = writeln!(out, "  n{} -> n{};", n.id, c.id);
            }
        }
        out.push_str("}\n");
        out
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn parse_node(doc: &Value, path: &str) -> Result<BtNode, ParseError> {
    let obj = doc.as_object().ok_or_else(|| ParseError::new(path, "expected an object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "kind" | "id" | "payload" | "children") {
            return Err(ParseError::new(format!("{path}/{key}"), "unknown field"));
        }
    }
    let kind = obj
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| ParseError::new(format!("{path}/kind"), "missing or non-string kind"))?;
    let id = obj
        .get("id")
        .and_then(Value::as_u64)
        .and_then(|v| NodeId::try_from(v).ok())
        .ok_or_else(|| ParseError::new(format!("{path}/id"), "missing or invalid id"))?;
    let children = |path: &str| -> Result<Vec<BtNode>, ParseError> {
        let arr = obj
            .get("children")
            .and_then(Value::as_array)
            .ok_or_else(|| ParseError::new(format!("{path}/children"), "control node needs children"))?;
        if arr.is_empty() {
            return Err(ParseError::new(format!("{path}/children"), "control node needs at least one child"));
        }
        arr.iter().enumerate().map(|(i, c)| parse_node(c, &format!("{path}/children/{i}"))).collect()
    };
    let payload = |path: &str| -> Result<&Value, ParseError> {
        if obj.contains_key("children") {
            return Err(ParseError::new(format!("{path}/children"), "execution nodes have no children"));
        }
        obj.get("payload").ok_or_else(|| ParseError::new(format!("{path}/payload"), "missing payload"))
    };
    let kind = match kind {
        "sequence" => NodeKind::Sequence(children(path)?),
        "fallback" => NodeKind::Fallback(children(path)?),
        "action" => NodeKind::Action(decode_payload(payload(path)?, &format!("{path}/payload"))?),
        "condition" => NodeKind::Condition(decode_payload(payload(path)?, &format!("{path}/payload"))?),
        other => return Err(ParseError::new(format!("{path}/kind"), format!("unknown kind {other:?}"))),
    };
    Ok(BtNode { id, kind })
}

fn decode_payload<T: serde::de::DeserializeOwned>(v: &Value, path: &str) -> Result<T, ParseError> {
    serde_path_to_error::deserialize(v.clone()).map_err(|e| {
        let inner = ParseError::from_path_error(e);
        let sub = if inner.path == "/" { String::new() } else { inner.path };
        ParseError::new(format!("{path}{sub}"), inner.message)
    })
}

/// What happened during ticking, in order; used by the planner to find
/// failures and regressions.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub seq: u64,
    pub tick: u64,
    pub node: NodeId,
    pub kind: TraceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    ConditionSuccess,
    ConditionFailure,
    ActionStarted,
    ActionCompleted,
    ActionRejected,
    ActionAborted,
}

#[derive(Debug, Clone, PartialEq)]
struct RunningAction {
    node: NodeId,
    action_id: String,
    elapsed: u32,
}

/// Mutable state threaded through ticks: the world, the running action and
/// its progress, and optional tracing.
#[derive(Debug, Clone)]
pub struct ExecutionContext {
    pub world: WorldState,
    pub tolerances: Tolerances,
    /// Ticks an action takes to complete (>= 1).
    pub action_duration: u32,
    pub activations: u64,
    pub diagnostics: Vec<String>,
    running: Option<RunningAction>,
    ticked_running: bool,
    trace: Option<Vec<TraceEvent>>,
    snapshots: Option<Vec<(u64, WorldState)>>,
    seq: u64,
}

impl ExecutionContext {
    pub fn new(world: WorldState, tolerances: Tolerances, action_duration: u32) -> Self {
        ExecutionContext {
            world,
            tolerances,
            action_duration: action_duration.max(1),
            activations: 0,
            diagnostics: Vec::new(),
            running: None,
            ticked_running: false,
            trace: None,
            snapshots: None,
            seq: 0,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Also keeps the world after every completed action, keyed by the
    /// sequence number of its completion event.
    pub fn with_snapshots(mut self) -> Self {
        self.snapshots = Some(Vec::new());
        self
    }

    pub fn snapshots(&self) -> &[(u64, WorldState)] {
        self.snapshots.as_deref().unwrap_or(&[])
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Id of the action currently in progress.
    pub fn running_action(&self) -> Option<&str> {
        self.running.as_ref().map(|r| r.action_id.as_str())
    }

    pub fn running_node(&self) -> Option<NodeId> {
        self.running.as_ref().map(|r| r.node)
    }

    fn record(&mut self, node: NodeId, kind: TraceKind) {
        if let Some(t) = &mut self.trace {
            t.push(TraceEvent { seq: self.seq, tick: self.world.tick, node, kind });
        }
        self.seq += 1;
    }

    fn abort_running(&mut self) {
        if let Some(r) = self.running.take() {
            self.record(r.node, TraceKind::ActionAborted);
        }
    }
}

/// Ticks the tree once from the root and advances the world clock.
pub fn tick(root: &BtNode, ctx: &mut ExecutionContext) -> Result<TickStatus, TreeError> {
    ctx.ticked_running = false;
    let status = tick_node(root, ctx)?;
    if ctx.running.is_some() && !ctx.ticked_running {
        ctx.abort_running();
    }
    ctx.world.tick += 1;
    Ok(status)
}

fn tick_node(node: &BtNode, ctx: &mut ExecutionContext) -> Result<TickStatus, TreeError> {
    match &node.kind {
        NodeKind::Sequence(children) => {
            if children.is_empty() {
                return Err(TreeError::TreeInvalid(format!("sequence {} has no children", node.id)));
            }
            for c in children {
                let s = tick_node(c, ctx)?;
                if s != TickStatus::Success {
                    return Ok(s);
                }
            }
            Ok(TickStatus::Success)
        }
        NodeKind::Fallback(children) => {
            if children.is_empty() {
                return Err(TreeError::TreeInvalid(format!("fallback {} has no children", node.id)));
            }
            for c in children {
                let s = tick_node(c, ctx)?;
                if s != TickStatus::Failure {
                    return Ok(s);
                }
            }
            Ok(TickStatus::Failure)
        }
        NodeKind::Condition(c) => {
            let ok = match ctx.tolerances.evaluate(c, &ctx.world) {
                Ok(v) => v,
                Err(e) => {
                    ctx.diagnostics.push(format!("condition {} ({c}): {e}", node.id));
                    false
                }
            };
            ctx.record(node.id, if ok { TraceKind::ConditionSuccess } else { TraceKind::ConditionFailure });
            Ok(if ok { TickStatus::Success } else { TickStatus::Failure })
        }
        NodeKind::Action(a) => Ok(tick_action(node.id, a, ctx)),
    }
}

fn tick_action(id: NodeId, a: &ActionTemplate, ctx: &mut ExecutionContext) -> TickStatus {
    let continuing = matches!(&ctx.running, Some(r) if r.node == id);
    if continuing {
        if let Some(r) = &mut ctx.running {
            r.elapsed += 1;
        }
    } else {
        // Another action was running and is preempted by this one.
        ctx.abort_running();
        let feasible = a.to_primitive(&ctx.world).and_then(|p| ctx.world.check_primitive(&p));
        if let Err(e) = feasible {
            ctx.diagnostics.push(format!("action {} rejected: {e}", a.id));
            ctx.record(id, TraceKind::ActionRejected);
            return TickStatus::Failure;
        }
        ctx.running = Some(RunningAction { node: id, action_id: a.id.clone(), elapsed: 1 });
        ctx.activations += 1;
        ctx.record(id, TraceKind::ActionStarted);
    }
    ctx.ticked_running = true;
    let elapsed = ctx.running.as_ref().map_or(0, |r| r.elapsed);
    if elapsed < ctx.action_duration {
        return TickStatus::Running;
    }
    ctx.running = None;
    let applied = a.to_primitive(&ctx.world).and_then(|p| ctx.world.apply_primitive(&p));
    match applied {
        Ok(w) => {
            ctx.world = w;
            let seq = ctx.seq;
            if let Some(s) = &mut ctx.snapshots {
                s.push((seq, ctx.world.clone()));
            }
            ctx.record(id, TraceKind::ActionCompleted);
            TickStatus::Success
        }
        Err(e) => {
            ctx.diagnostics.push(format!("action {} rejected: {e}", a.id));
            ctx.record(id, TraceKind::ActionRejected);
            TickStatus::Failure
        }
    }
}

/// Hands out fresh node ids.
#[derive(Debug, Clone, Default)]
pub struct IdGen {
    next: Cell<NodeId>,
}

impl IdGen {
    pub fn starting_after(tree: &BtNode) -> Self {
        IdGen { next: Cell::new(tree.max_id() + 1) }
    }

    pub fn next(&self) -> NodeId {
        let id = self.next.get();
        self.next.set(id + 1);
        id
    }

    pub fn sequence(&self, children: Vec<BtNode>) -> BtNode {
        BtNode::sequence(self.next(), children)
    }

    pub fn fallback(&self, children: Vec<BtNode>) -> BtNode {
        BtNode::fallback(self.next(), children)
    }

    pub fn action(&self, a: ActionTemplate) -> BtNode {
        BtNode::action(self.next(), a)
    }

    pub fn condition(&self, c: Condition) -> BtNode {
        BtNode::condition(self.next(), c)
    }
}
