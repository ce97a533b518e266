//! The simulated tabletop: objects, support surfaces, the gripper, primitive
//! effects, support-stacking gravity and scripted disturbances.
//!
//! Gravity only ever moves a free object straight down onto the highest
//! support under its footprint. Supports are the implicit ground plane at
//! `z = 0`, declared surfaces, the tops of other objects, and the floor of
//! container objects (boxes). There is no bounce, friction or wall
//! collision; a cube dropped into a box lands on the box floor.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::WorldError;
use crate::geometry::{Frame, FrameId, FrameSet, Orientation, Position};

/// Height at which a held object is carried. Held objects never support
/// anything.
pub const CARRY_HEIGHT: f64 = 0.5;

/// Contact and penetration tolerance in meters.
pub const CONTACT_EPS: f64 = 1e-6;

const AREA_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripperState {
    Open,
    Closed,
}

impl fmt::Display for GripperState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GripperState::Open => "open",
            GripperState::Closed => "closed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectState {
    pub position: Position,
    pub orientation: Orientation,
    /// Full box extents `(dx, dy, dz)`.
    pub extents: Position,
    /// Containers support other objects on their floor rather than their top.
    pub container: bool,
}

impl ObjectState {
    pub fn cube(position: Position, edge: f64) -> Self {
        ObjectState {
            position,
            orientation: Orientation::IDENTITY,
            extents: Position::new(edge, edge, edge),
            container: false,
        }
    }

    pub fn container(position: Position, extents: Position) -> Self {
        ObjectState { position, orientation: Orientation::IDENTITY, extents, container: true }
    }

    pub fn half_height(&self) -> f64 {
        self.extents.z / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.position.z - self.half_height()
    }

    pub fn top(&self) -> f64 {
        self.position.z + self.half_height()
    }

    /// Height at which something resting on this object has its bottom.
    pub fn support_top(&self) -> f64 {
        if self.container {
            self.bottom()
        } else {
            self.top()
        }
    }

    fn footprint_at(&self, x: f64, y: f64) -> Rect {
        Rect {
            min: [x - self.extents.x / 2.0, y - self.extents.y / 2.0],
            max: [x + self.extents.x / 2.0, y + self.extents.y / 2.0],
        }
    }

    pub(crate) fn footprint(&self) -> Rect {
        self.footprint_at(self.position.x, self.position.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn overlaps(&self, other: &Rect) -> bool {
        (0..2).all(|i| self.min[i] + AREA_EPS < other.max[i] && other.min[i] + AREA_EPS < self.max[i])
    }

    #[cfg(test)]
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }
}

/// Horizontal support region at height `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub z: f64,
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Surface {
    fn rect(&self) -> Rect {
        Rect { min: self.min, max: self.max }
    }
}

/// One primitive robot command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum Primitive {
    Pick { object: String },
    Place { object: String, target: Position },
    Drop { object: String, target: Position },
    SetGripper { state: GripperState },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    Teleport,
    RemoveFromGripper,
}

/// A scripted change to the world applied at a given tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub at_tick: u64,
    pub kind: DisturbanceKind,
    pub object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Position>,
}

impl Disturbance {
    pub fn teleport(at_tick: u64, object: impl Into<String>, target: Position) -> Self {
        Disturbance { at_tick, kind: DisturbanceKind::Teleport, object: object.into(), target: Some(target) }
    }

    pub fn remove_from_gripper(at_tick: u64, object: impl Into<String>) -> Self {
        Disturbance { at_tick, kind: DisturbanceKind::RemoveFromGripper, object: object.into(), target: None }
    }
}

/// Full simulation state. Values are snapshots: every operation returns a
/// new state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SceneDoc", into = "SceneDoc")]
pub struct WorldState {
    pub objects: BTreeMap<String, ObjectState>,
    pub surfaces: BTreeMap<String, Surface>,
    pub gripper: GripperState,
    pub held: Option<String>,
    pub tick: u64,
}

impl Default for WorldState {
    fn default() -> Self {
        WorldState {
            objects: BTreeMap::new(),
            surfaces: BTreeMap::new(),
            gripper: GripperState::Open,
            held: None,
            tick: 0,
        }
    }
}

impl WorldState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_object(mut self, id: impl Into<String>, object: ObjectState) -> Self {
        self.objects.insert(id.into(), object);
        self
    }

    pub fn with_surface(mut self, id: impl Into<String>, surface: Surface) -> Self {
        self.surfaces.insert(id.into(), surface);
        self
    }

    pub fn object(&self, id: &str) -> Result<&ObjectState, WorldError> {
        self.objects.get(id).ok_or_else(|| WorldError::ObjectNotFound(id.to_string()))
    }

    pub fn position(&self, id: &str) -> Option<Position> {
        self.objects.get(id).map(|o| o.position)
    }

    /// Candidate reference frames at this instant: `base` plus one frame per
    /// object, located at the object's current position.
    pub fn snapshot_frames(&self) -> FrameSet {
        let mut frames = FrameSet::new();
        frames.insert(FrameId::Base, Frame::base());
        for (id, o) in &self.objects {
            let fid = FrameId::object(id.clone());
            frames.insert(fid.clone(), Frame { id: fid, origin: o.position });
        }
        frames
    }

    pub fn frame(&self, id: &FrameId) -> Option<Frame> {
        match id {
            FrameId::Base => Some(Frame::base()),
            FrameId::Object(o) => self.objects.get(o).map(|s| Frame { id: id.clone(), origin: s.position }),
        }
    }

    /// Whether `kind` could be applied right now, without applying it.
    pub fn check_primitive(&self, p: &Primitive) -> Result<(), WorldError> {
        match p {
            Primitive::Pick { object } => {
                self.object(object)?;
                if self.gripper != GripperState::Open || self.held.is_some() {
                    return Err(WorldError::PrimitiveRejected(format!("pick({object}) needs an open, empty gripper")));
                }
                if let Some(top) = self.resting_on(object).first() {
                    return Err(WorldError::PrimitiveRejected(format!("pick({object}) blocked: {top} rests on it")));
                }
                Ok(())
            }
            Primitive::Place { object, target } | Primitive::Drop { object, target } => {
                self.object(object)?;
                if !target.is_finite() {
                    return Err(WorldError::PrimitiveRejected("non-finite target".into()));
                }
                if self.held.as_deref() != Some(object.as_str()) {
                    return Err(WorldError::PrimitiveRejected(format!("{object} is not in the gripper")));
                }
                Ok(())
            }
            Primitive::SetGripper { .. } => Ok(()),
        }
    }

    /// Applies a primitive. A rejected primitive leaves `self` untouched.
    pub fn apply_primitive(&self, p: &Primitive) -> Result<WorldState, WorldError> {
        self.check_primitive(p)?;
        let mut w = self.clone();
        match p {
            Primitive::Pick { object } => {
                let o = w.objects.get_mut(object).expect("checked");
                o.position.z = CARRY_HEIGHT;
                w.held = Some(object.clone());
                w.gripper = GripperState::Closed;
            }
            Primitive::Place { object, target } | Primitive::Drop { object, target } => {
                w.held = None;
                w.gripper = GripperState::Open;
                w.land(object, target.x, target.y);
            }
            Primitive::SetGripper { state } => {
                w.gripper = *state;
                if *state == GripperState::Open {
                    if let Some(held) = w.held.take() {
                        let p = w.objects[&held].position;
                        w.land(&held, p.x, p.y);
                    }
                }
            }
        }
        w.settle_in_place();
        Ok(w)
    }

    pub fn apply_disturbance(&self, d: &Disturbance) -> Result<WorldState, WorldError> {
        self.object(&d.object)?;
        let mut w = self.clone();
        match d.kind {
            DisturbanceKind::Teleport => {
                let target = d
                    .target
                    .filter(Position::is_finite)
                    .ok_or_else(|| WorldError::InvalidScene("teleport needs a finite target".into()))?;
                if w.held.as_deref() == Some(d.object.as_str()) {
                    w.held = None;
                }
                w.land(&d.object, target.x, target.y);
            }
            DisturbanceKind::RemoveFromGripper => {
                if w.held.as_deref() != Some(d.object.as_str()) {
                    return Ok(w);
                }
                w.held = None;
                let p = w.objects[&d.object].position;
                w.land(&d.object, p.x, p.y);
            }
        }
        w.settle_in_place();
        Ok(w)
    }

    /// Objects resting directly on `id` (sorted by id).
    pub fn resting_on(&self, id: &str) -> Vec<String> {
        let Some(base) = self.objects.get(id) else { return Vec::new() };
        if self.held.as_deref() == Some(id) {
            return Vec::new();
        }
        let fp = base.footprint();
        self.objects
            .iter()
            .filter(|(other, o)| {
                other.as_str() != id
                    && self.held.as_deref() != Some(other.as_str())
                    && o.footprint().overlaps(&fp)
                    && (o.bottom() - base.support_top()).abs() <= CONTACT_EPS
            })
            .map(|(other, _)| other.clone())
            .collect()
    }

    // Highest support under the footprint of `id` if it were centered at
    // (x, y), ignoring `id` itself and the held object.
    fn landing_height(&self, id: &str, x: f64, y: f64) -> f64 {
        let o = &self.objects[id];
        let fp = o.footprint_at(x, y);
        let mut h: f64 = 0.0;
        for s in self.surfaces.values() {
            if s.rect().overlaps(&fp) {
                h = h.max(s.z);
            }
        }
        for (other, s) in &self.objects {
            if other == id || self.held.as_deref() == Some(other.as_str()) {
                continue;
            }
            if s.footprint().overlaps(&fp) {
                h = h.max(s.support_top());
            }
        }
        h
    }

    fn land(&mut self, id: &str, x: f64, y: f64) {
        let h = self.landing_height(id, x, y);
        let o = self.objects.get_mut(id).expect("object exists");
        o.position = Position::new(x, y, h + o.half_height());
    }

    /// Drops every unsupported free object onto the highest support below it.
    pub fn settle(&self) -> WorldState {
        let mut w = self.clone();
        w.settle_in_place();
        w
    }

    fn settle_in_place(&mut self) {
        let mut order: Vec<String> =
            self.objects.keys().filter(|id| self.held.as_deref() != Some(id.as_str())).cloned().collect();
        order.sort_by(|a, b| {
            let (oa, ob) = (&self.objects[a], &self.objects[b]);
            oa.bottom().total_cmp(&ob.bottom()).then_with(|| a.cmp(b))
        });
        let mut settled: Vec<String> = Vec::with_capacity(order.len());
        for id in order {
            let o = &self.objects[&id];
            let fp = o.footprint();
            let bottom = o.bottom();
            let mut h: f64 = 0.0;
            for s in self.surfaces.values() {
                if s.z <= bottom + CONTACT_EPS && s.rect().overlaps(&fp) {
                    h = h.max(s.z);
                }
            }
            for other in &settled {
                let s = &self.objects[other];
                let top = s.support_top();
                if top <= bottom + CONTACT_EPS && s.footprint().overlaps(&fp) {
                    h = h.max(top);
                }
            }
            if h < bottom - CONTACT_EPS {
                let o = self.objects.get_mut(&id).expect("object exists");
                o.position.z = h + o.half_height();
            }
            settled.push(id);
        }
    }

    /// Lists violated state invariants; empty when the world is consistent.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.held.is_some() && self.gripper != GripperState::Closed {
            out.push("held object with open gripper".to_string());
        }
        if let Some(h) = &self.held {
            if !self.objects.contains_key(h) {
                out.push(format!("held object {h} does not exist"));
            }
        }
        let free: Vec<(&String, &ObjectState)> =
            self.objects.iter().filter(|(id, _)| self.held.as_deref() != Some(id.as_str())).collect();
        for (i, (a, oa)) in free.iter().enumerate() {
            for (b, ob) in free.iter().skip(i + 1) {
                if oa.container || ob.container {
                    continue;
                }
                if oa.footprint().overlaps(&ob.footprint())
                    && oa.bottom() + CONTACT_EPS < ob.top()
                    && ob.bottom() + CONTACT_EPS < oa.top()
                {
                    out.push(format!("{a} and {b} overlap"));
                }
            }
            let settled_z = self.settle().objects[*a].position.z;
            if (settled_z - oa.position.z).abs() > CONTACT_EPS {
                out.push(format!("{a} is unsupported"));
            }
        }
        out
    }

    /// Short stable digest of the full state.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("world serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn from_yaml(text: &str) -> Result<WorldState, WorldError> {
        serde_yaml::from_str(text).map_err(|e| WorldError::InvalidScene(e.to_string()))
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("world serializes")
    }
}

/// On-disk scene layout, shared by YAML scene files and JSON documents.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    #[serde(default)]
    objects: Vec<ObjectDoc>,
    #[serde(default)]
    surfaces: Vec<SurfaceDoc>,
    #[serde(default = "default_gripper")]
    gripper: GripperState,
    #[serde(default)]
    held: Option<String>,
    #[serde(default)]
    tick: u64,
}

fn default_gripper() -> GripperState {
    GripperState::Open
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDoc {
    id: String,
    position: Position,
    extents: Position,
    #[serde(default, skip_serializing_if = "is_identity")]
    orientation: Option<Orientation>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    container: bool,
}

fn is_identity(o: &Option<Orientation>) -> bool {
    o.is_none_or(|q| q == Orientation::IDENTITY)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurfaceDoc {
    id: String,
    z: f64,
    min: [f64; 2],
    max: [f64; 2],
}

impl TryFrom<SceneDoc> for WorldState {
    type Error = WorldError;

    fn try_from(doc: SceneDoc) -> Result<Self, Self::Error> {
        let mut w = WorldState { gripper: doc.gripper, held: doc.held, tick: doc.tick, ..Default::default() };
        for o in doc.objects {
            if o.extents.x <= 0.0 || o.extents.y <= 0.0 || o.extents.z <= 0.0 {
                return Err(WorldError::InvalidScene(format!("object {} has non-positive extents", o.id)));
            }
            let state = ObjectState {
                position: o.position,
                orientation: o.orientation.unwrap_or_default(),
                extents: o.extents,
                container: o.container,
            };
            if w.objects.insert(o.id.clone(), state).is_some() {
                return Err(WorldError::InvalidScene(format!("duplicate object id {}", o.id)));
            }
        }
        for s in doc.surfaces {
            let surface = Surface { z: s.z, min: s.min, max: s.max };
            if w.surfaces.insert(s.id.clone(), surface).is_some() {
                return Err(WorldError::InvalidScene(format!("duplicate surface id {}", s.id)));
            }
        }
        if let Some(h) = &w.held {
            if !w.objects.contains_key(h) {
                return Err(WorldError::InvalidScene(format!("held object {h} does not exist")));
            }
            if w.gripper != GripperState::Closed {
                return Err(WorldError::InvalidScene("held object requires a closed gripper".into()));
            }
        }
        Ok(w)
    }
}

impl From<WorldState> for SceneDoc {
    fn from(w: WorldState) -> Self {
        SceneDoc {
            objects: w
                .objects
                .into_iter()
                .map(|(id, o)| ObjectDoc {
                    id,
                    position: o.position,
                    extents: o.extents,
                    orientation: Some(o.orientation),
                    container: o.container,
                })
                .collect(),
            surfaces: w.surfaces.into_iter().map(|(id, s)| SurfaceDoc { id, z: s.z, min: s.min, max: s.max }).collect(),
            gripper: w.gripper,
            held: w.held,
            tick: w.tick,
        }
    }
}

/// Loads a YAML list of disturbances.
pub fn disturbances_from_yaml(text: &str) -> Result<Vec<Disturbance>, WorldError> {
    let mut list: Vec<Disturbance> = serde_yaml::from_str(text).map_err(|e| WorldError::InvalidScene(e.to_string()))?;
    list.sort_by_key(|d| d.at_tick);
    Ok(list)
}
