//! Recording, validating and persisting demonstrations.
//!
//! A demonstration is an ordered list of primitive actions, each stored with
//! the frames of every object at the moment the action was confirmed. The
//! per-action snapshot lets clustering express each target in every candidate
//! frame as it was at that time, even when reference objects move mid-demo.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::actions::ActionKind;
use crate::error::{DemoError, ParseError};
use crate::geometry::{FrameId, FrameSet, Orientation, Position};
use crate::world::{GripperState, Primitive, WorldState};

pub const SCHEMA_VERSION: u64 = 1;

/// One demonstrated action: type, parameters, object, end-effector pose and
/// the frame snapshot at confirmation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoAction {
    pub t: ActionKind,
    #[serde(default)]
    pub x: Option<GripperState>,
    pub object: String,
    pub p: Position,
    #[serde(default)]
    pub o: Orientation,
    pub frames: FrameSet,
}

impl DemoAction {
    pub fn to_primitive(&self) -> Primitive {
        let object = self.object.clone();
        match self.t {
            ActionKind::Pick => Primitive::Pick { object },
            ActionKind::Place => Primitive::Place { object, target: self.p },
            ActionKind::Drop => Primitive::Drop { object, target: self.p },
            ActionKind::SetGripper => Primitive::SetGripper { state: self.x.unwrap_or(GripperState::Open) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration {
    pub schema: u64,
    pub id: String,
    #[serde(default)]
    pub label: String,
    pub initial_scene: WorldState,
    pub actions: Vec<DemoAction>,
    pub created_at: DateTime<Utc>,
}

/// A validation finding: the violated rule and the action index it concerns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub rule: String,
    pub index: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    fn new(rule: &str, index: Option<usize>, message: impl Into<String>) -> Self {
        Diagnostic { rule: rule.to_string(), index, message: message.into() }
    }

    /// `rule@index`, or `rule@-` for demo-level findings.
    pub fn code(&self) -> String {
        match self.index {
            Some(i) => format!("{}@{i}", self.rule),
            None => format!("{}@-", self.rule),
        }
    }

    pub fn into_error(self) -> DemoError {
        DemoError::DemoInvalid {
            index: self.index.map_or("-".into(), |i| i.to_string()),
            rule: self.rule,
            message: self.message,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code(), self.message)
    }
}

pub fn is_valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn causality_violation(kind: ActionKind, object: &str, held: Option<&str>) -> Option<String> {
    match kind {
        ActionKind::Pick => held.map(|h| format!("pick({object}) while already holding {h}")),
        ActionKind::Place | ActionKind::Drop if held != Some(object) => {
            Some(format!("{kind}({object}) while holding {}", held.unwrap_or("nothing")))
        }
        _ => None,
    }
}

impl Demonstration {
    /// Every rule violation, in action order. Empty iff the demo is well formed.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        if self.schema != SCHEMA_VERSION {
            out.push(Diagnostic::new("schema", None, format!("schema {} != {SCHEMA_VERSION}", self.schema)));
        }
        if !is_valid_id(&self.id) {
            out.push(Diagnostic::new("id", None, format!("invalid id {:?}", self.id)));
        }
        if self.actions.is_empty() {
            out.push(Diagnostic::new("nonempty", None, "demonstration has no actions"));
        }
        let mut held: Option<String> = self.initial_scene.held.clone();
        let mut world = Some(self.initial_scene.clone());
        for (i, a) in self.actions.iter().enumerate() {
            if !a.t.is_demonstrable() {
                out.push(Diagnostic::new("demonstrable", Some(i), format!("{} cannot be demonstrated", a.t)));
                world = None;
                continue;
            }
            if !self.initial_scene.objects.contains_key(&a.object) {
                out.push(Diagnostic::new("object", Some(i), format!("unknown object {}", a.object)));
                world = None;
                continue;
            }
            if !a.p.is_finite() {
                out.push(Diagnostic::new("target", Some(i), "non-finite pose"));
            }
            if !a.frames.contains_key(&FrameId::Base) {
                out.push(Diagnostic::new("frames", Some(i), "snapshot lacks the base frame"));
            }
            if let Some(m) = causality_violation(a.t, &a.object, held.as_deref()) {
                out.push(Diagnostic::new("causality", Some(i), m));
                world = None;
            }
            held = match a.t {
                ActionKind::Pick => Some(a.object.clone()),
                _ => None,
            };
            // Replay: the stored snapshot must match the world reached by
            // applying every earlier action.
            if let Some(w) = world.take() {
                if w.snapshot_frames() != a.frames {
                    out.push(Diagnostic::new("snapshot", Some(i), "frames differ from the replayed world"));
                }
                match w.apply_primitive(&a.to_primitive()) {
                    Ok(next) => world = Some(next),
                    Err(e) => out.push(Diagnostic::new("primitive", Some(i), e.to_string())),
                }
            }
        }
        out
    }

    /// Worlds before each action followed by the final world.
    pub fn replay(&self) -> Result<Vec<WorldState>, DemoError> {
        let mut worlds = vec![self.initial_scene.clone()];
        for (i, a) in self.actions.iter().enumerate() {
            let next = worlds
                .last()
                .expect("non-empty")
                .apply_primitive(&a.to_primitive())
                .map_err(|e| Diagnostic::new("primitive", Some(i), e.to_string()).into_error())?;
            worlds.push(next);
        }
        Ok(worlds)
    }

    pub fn final_world(&self) -> Result<WorldState, DemoError> {
        Ok(self.replay()?.pop().expect("non-empty"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("demonstration serializes")
    }

    /// Parses a demonstration document, checking the schema version first.
    pub fn from_json(text: &str) -> Result<Demonstration, DemoError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| ParseError::new("/", e.to_string()))?;
        let schema = doc
            .get("schema")
            .ok_or_else(|| ParseError::new("/schema", "missing schema version"))?
            .as_u64()
            .ok_or_else(|| ParseError::new("/schema", "schema must be a non-negative integer"))?;
        if schema != SCHEMA_VERSION {
            return Err(DemoError::Migration { found: schema, expected: SCHEMA_VERSION });
        }
        serde_path_to_error::deserialize(doc).map_err(|e| DemoError::Parse(ParseError::from_path_error(e)))
    }

    pub fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.json", self.id))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, DemoError> {
        if !is_valid_id(&self.id) {
            return Err(Diagnostic::new("id", None, format!("invalid id {:?}", self.id)).into_error());
        }
        let path = self.path_in(dir);
        fs::write(&path, self.to_json()).map_err(|source| DemoError::Io { path: path.clone(), source })?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Demonstration, DemoError> {
        let text = fs::read_to_string(path).map_err(|source| DemoError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }
}

/// Loads every `*.json` demonstration in `dir`, sorted by id.
pub fn load_corpus(dir: &Path) -> Result<Vec<Demonstration>, DemoError> {
    let entries = fs::read_dir(dir).map_err(|source| DemoError::Io { path: dir.to_path_buf(), source })?;
    let mut paths = Vec::new();
    for e in entries {
        let e = e.map_err(|source| DemoError::Io { path: dir.to_path_buf(), source })?;
        let p = e.path();
        if p.extension().is_some_and(|x| x == "json") {
            paths.push(p);
        }
    }
    paths.sort();
    let mut demos = Vec::new();
    let mut ids = BTreeSet::new();
    for p in paths {
        let d = Demonstration::load(&p)?;
        if !ids.insert(d.id.clone()) {
            return Err(DemoError::DuplicateId(d.id));
        }
        demos.push(d);
    }
    demos.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(demos)
}

/// An in-progress recording against a live world.
#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub label: String,
    initial: WorldState,
    world: WorldState,
    actions: Vec<DemoAction>,
}

impl Session {
    pub fn start(id: impl Into<String>, label: impl Into<String>, world: WorldState) -> Result<Self, DemoError> {
        let id = id.into();
        if !is_valid_id(&id) {
            return Err(Diagnostic::new("id", None, format!("invalid id {id:?}")).into_error());
        }
        Ok(Session { id, label: label.into(), initial: world.clone(), world, actions: Vec::new() })
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn actions(&self) -> &[DemoAction] {
        &self.actions
    }

    /// Records one action: snapshots frames, then advances the world.
    pub fn record(
        &mut self,
        t: ActionKind,
        object: &str,
        p: Position,
        o: Orientation,
    ) -> Result<&DemoAction, DemoError> {
        let index = Some(self.actions.len());
        if !t.is_demonstrable() {
            return Err(Diagnostic::new("demonstrable", index, format!("{t} cannot be demonstrated")).into_error());
        }
        if !p.is_finite() {
            return Err(Diagnostic::new("target", index, "non-finite pose").into_error());
        }
        self.world.object(object).map_err(|e| Diagnostic::new("object", index, e.to_string()).into_error())?;
        if let Some(m) = causality_violation(t, object, self.world.held.as_deref()) {
            return Err(Diagnostic::new("causality", index, m).into_error());
        }
        let action = DemoAction { t, x: None, object: object.to_string(), p, o, frames: self.world.snapshot_frames() };
        let next = self
            .world
            .apply_primitive(&action.to_primitive())
            .map_err(|e| Diagnostic::new("primitive", index, e.to_string()).into_error())?;
        self.world = next;
        self.actions.push(action);
        Ok(self.actions.last().expect("just pushed"))
    }

    pub fn finish(self, created_at: DateTime<Utc>) -> Result<Demonstration, DemoError> {
        let demo = Demonstration {
            schema: SCHEMA_VERSION,
            id: self.id,
            label: self.label,
            initial_scene: self.initial,
            actions: self.actions,
            created_at,
        };
        if let Some(d) = demo.validate().into_iter().next() {
            return Err(d.into_error());
        }
        Ok(demo)
    }
}

/// Script line for `demo record`: `pick A`, `place A 0.5 0.5 0.05`,
/// `drop A 0.5 0.5 0.3`. Blank lines and `#` comments are skipped.
pub fn parse_script_line(line: &str) -> Result<Option<(ActionKind, String, Option<Position>)>, String> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    let parts: Vec<&str> = line.split_whitespace().collect();
    let kind = match parts[0].to_ascii_lowercase().as_str() {
        "pick" => ActionKind::Pick,
        "place" => ActionKind::Place,
        "drop" => ActionKind::Drop,
        other => return Err(format!("unknown action {other:?}")),
    };
    let object = parts.get(1).ok_or("missing object")?.to_string();
    let coords: Result<Vec<f64>, _> = parts[2..].iter().map(|s| s.parse::<f64>()).collect();
    let coords = coords.map_err(|e| e.to_string())?;
    let p = match (kind, coords.len()) {
        (ActionKind::Pick, 0) => None,
        (_, 3) => Some(Position::new(coords[0], coords[1], coords[2])),
        _ => return Err(format!("{kind} expects {} coordinates", if kind == ActionKind::Pick { 0 } else { 3 })),
    };
    Ok(Some((kind, object, p)))
}
