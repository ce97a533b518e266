//! Symbolic conditions, the compatibility predicate over them, and the four
//! action templates with their pre- and postconditions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{TemplateError, WorldError};
use crate::geometry::{FrameId, Orientation, Position};
use crate::world::{GripperState, Primitive, WorldState};

/// Placement tolerance of an `ObjectAt` condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementMode {
    /// Sphere around the target (`ObjectAt`).
    Precise,
    /// Vertical cylinder below the target (`ObjectAt†`).
    Loose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    Gripper { state: GripperState },
    InGripper { object: Option<String> },
    ObjectAt { object: String, target: Position, frame: FrameId, mode: PlacementMode },
}

impl Condition {
    pub fn gripper(state: GripperState) -> Self {
        Condition::Gripper { state }
    }

    pub fn in_gripper(object: Option<&str>) -> Self {
        Condition::InGripper { object: object.map(str::to_string) }
    }

    pub fn object_at(object: impl Into<String>, target: Position, frame: FrameId, mode: PlacementMode) -> Self {
        Condition::ObjectAt { object: object.into(), target, frame, mode }
    }

    pub fn is_object_at(&self) -> bool {
        matches!(self, Condition::ObjectAt { .. })
    }

    pub fn object_at_subject(&self) -> Option<&str> {
        match self {
            Condition::ObjectAt { object, .. } => Some(object),
            _ => None,
        }
    }

    /// Equality with `ObjectAt` targets compared within `tol` meters.
    pub fn approx_eq(&self, other: &Condition, tol: f64) -> bool {
        match (self, other) {
            (
                Condition::ObjectAt { object: o1, target: p1, frame: f1, mode: m1 },
                Condition::ObjectAt { object: o2, target: p2, frame: f2, mode: m2 },
            ) => o1 == o2 && f1 == f2 && m1 == m2 && p1.distance(p2) <= tol,
            _ => self == other,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Gripper { state } => write!(f, "Gripper({state})"),
            Condition::InGripper { object } => write!(f, "InGripper({})", object.as_deref().unwrap_or("none")),
            Condition::ObjectAt { object, target, frame, mode } => {
                let dagger = if *mode == PlacementMode::Loose { "†" } else { "" };
                write!(f, "ObjectAt{dagger}({object}, {target} in {frame})")
            }
        }
    }
}

/// Condition tolerances in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub place_sphere_m: f64,
    pub drop_radius_m: f64,
    /// How far below the recorded release pose a dropped object may rest.
    pub drop_below_m: f64,
    pub drop_above_m: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { place_sphere_m: 0.05, drop_radius_m: 0.10, drop_below_m: 0.30, drop_above_m: 0.05 }
    }
}

impl Tolerances {
    /// Distance beyond which two `ObjectAt` targets count as different.
    pub fn distinct_threshold(&self, a: PlacementMode, b: PlacementMode) -> f64 {
        if a == PlacementMode::Precise && b == PlacementMode::Precise {
            self.place_sphere_m
        } else {
            self.drop_radius_m
        }
    }

    /// Compatibility predicate: `false` when the two conditions cannot hold
    /// at the same time.
    ///
    /// `ObjectAt` conditions on the same object in different frames are
    /// treated as different positions, since no world is available to relate
    /// the frames. Use [`Tolerances::comp_in`] to resolve them first.
    pub fn comp(&self, c1: &Condition, c2: &Condition) -> bool {
        self.comp_impl(c1, c2, None)
    }

    /// Like [`Tolerances::comp`], resolving `ObjectAt` targets to the base
    /// frame through the frames of `world`.
    pub fn comp_in(&self, c1: &Condition, c2: &Condition, world: &WorldState) -> bool {
        self.comp_impl(c1, c2, Some(world))
    }

    fn comp_impl(&self, c1: &Condition, c2: &Condition, world: Option<&WorldState>) -> bool {
        use Condition::*;
        match (c1, c2) {
            (InGripper { object: o1 }, InGripper { object: o2 }) => o1 == o2,
            (Gripper { state: s1 }, Gripper { state: s2 }) => s1 == s2,
            (Gripper { state }, InGripper { object }) | (InGripper { object }, Gripper { state }) => {
                !(*state == GripperState::Open && object.is_some())
            }
            (
                ObjectAt { object: o1, target: p1, frame: f1, mode: m1 },
                ObjectAt { object: o2, target: p2, frame: f2, mode: m2 },
            ) => {
                if o1 != o2 {
                    return true;
                }
                let threshold = self.distinct_threshold(*m1, *m2);
                if f1 == f2 {
                    return p1.distance(p2) <= threshold;
                }
                let Some(w) = world else { return false };
                match (w.frame(f1), w.frame(f2)) {
                    (Some(a), Some(b)) => a.from_frame(*p1).distance(&b.from_frame(*p2)) <= threshold,
                    _ => false,
                }
            }
            _ => true,
        }
    }

    /// Evaluates `c` against the world now. An `ObjectAt` whose object or
    /// frame owner is absent is reported as an error; callers map it to
    /// `false`.
    pub fn evaluate(&self, c: &Condition, w: &WorldState) -> Result<bool, WorldError> {
        match c {
            Condition::Gripper { state } => Ok(w.gripper == *state),
            Condition::InGripper { object } => Ok(w.held == *object),
            Condition::ObjectAt { object, target, frame, mode } => {
                let pos = w.object(object)?.position;
                let frame = w
                    .frame(frame)
                    .ok_or_else(|| WorldError::ObjectNotFound(frame.owner().unwrap_or("base").to_string()))?;
                let goal = frame.from_frame(*target);
                Ok(match mode {
                    PlacementMode::Precise => pos.distance(&goal) <= self.place_sphere_m,
                    PlacementMode::Loose => {
                        let dz = pos.z - goal.z;
                        pos.horizontal_distance(&goal) <= self.drop_radius_m
                            && dz >= -self.drop_below_m
                            && dz <= self.drop_above_m
                    }
                })
            }
        }
    }

    /// Whether a postcondition `post` establishes the condition `c`.
    pub fn unifies(&self, post: &Condition, c: &Condition) -> bool {
        match (post, c) {
            (
                Condition::ObjectAt { object: o1, target: p1, frame: f1, mode: m1 },
                Condition::ObjectAt { object: o2, target: p2, frame: f2, mode: m2 },
            ) => {
                // A loose postcondition cannot guarantee a precise goal.
                let mode_ok = *m1 == PlacementMode::Precise || *m2 == PlacementMode::Loose;
                o1 == o2 && f1 == f2 && mode_ok && p1.distance(p2) <= self.distinct_threshold(*m1, *m2)
            }
            _ => post == c,
        }
    }
}

/// `comp` with default tolerances.
pub fn comp(c1: &Condition, c2: &Condition) -> bool {
    Tolerances::default().comp(c1, c2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Pick,
    Place,
    Drop,
    SetGripper,
}

impl ActionKind {
    /// Only these three can be shown by a demonstrator.
    pub fn is_demonstrable(self) -> bool {
        !matches!(self, ActionKind::SetGripper)
    }

    pub fn has_target(self) -> bool {
        matches!(self, ActionKind::Place | ActionKind::Drop)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Pick => "pick",
            ActionKind::Place => "place",
            ActionKind::Drop => "drop",
            ActionKind::SetGripper => "set_gripper",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-type action costs. The planner prefers cheaper actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Costs {
    pub pick: f64,
    pub place: f64,
    pub drop: f64,
    pub set_gripper: f64,
}

impl Default for Costs {
    fn default() -> Self {
        Costs { pick: 2.0, place: 3.0, drop: 3.0, set_gripper: 1.0 }
    }
}

impl Costs {
    pub fn of(&self, kind: ActionKind) -> f64 {
        match kind {
            ActionKind::Pick => self.pick,
            ActionKind::Place => self.place,
            ActionKind::Drop => self.drop,
            ActionKind::SetGripper => self.set_gripper,
        }
    }
}

/// A parameterized action with its conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTemplate {
    pub id: String,
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gripper: Option<GripperState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Position>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<FrameId>,
    #[serde(default)]
    pub orientation: Orientation,
    pub pre: Vec<Condition>,
    pub post: Vec<Condition>,
    pub cost: f64,
    #[serde(default)]
    pub context: u32,
}

impl ActionTemplate {
    /// Builds a template with the standard conditions for its type.
    pub fn instantiate(
        kind: ActionKind,
        gripper: Option<GripperState>,
        object: Option<&str>,
        target: Option<(Position, FrameId)>,
        context: u32,
        costs: &Costs,
    ) -> Result<ActionTemplate, TemplateError> {
        let err = |m: &str| Err(TemplateError(format!("{kind}: {m}")));
        let (pre, post) = match kind {
            ActionKind::Pick => {
                let Some(o) = object else { return err("needs an object") };
                if target.is_some() || gripper.is_some() {
                    return err("takes only an object");
                }
                (
                    vec![Condition::gripper(GripperState::Open)],
                    vec![Condition::gripper(GripperState::Closed), Condition::in_gripper(Some(o))],
                )
            }
            ActionKind::Place | ActionKind::Drop => {
                let Some(o) = object else { return err("needs an object") };
                let Some((p, frame)) = target.clone() else { return err("needs a target and frame") };
                if gripper.is_some() {
                    return err("takes no gripper parameter");
                }
                if !p.is_finite() {
                    return err("target must be finite");
                }
                let mode = if kind == ActionKind::Place { PlacementMode::Precise } else { PlacementMode::Loose };
                (
                    vec![Condition::in_gripper(Some(o))],
                    vec![
                        Condition::object_at(o, p, frame, mode),
                        Condition::gripper(GripperState::Open),
                        Condition::in_gripper(None),
                    ],
                )
            }
            ActionKind::SetGripper => {
                let Some(state) = gripper else { return err("needs a gripper state") };
                if object.is_some() || target.is_some() {
                    return err("takes only a gripper state");
                }
                let post = match state {
                    GripperState::Open => vec![Condition::gripper(GripperState::Open), Condition::in_gripper(None)],
                    GripperState::Closed => vec![Condition::gripper(GripperState::Closed)],
                };
                (Vec::new(), post)
            }
        };
        let mut a = ActionTemplate {
            id: String::new(),
            kind,
            gripper,
            object: object.map(str::to_string),
            frame: target.as_ref().map(|(_, f)| f.clone()),
            target: target.map(|(p, _)| p),
            orientation: Orientation::IDENTITY,
            pre,
            post,
            cost: costs.of(kind),
            context,
        };
        a.id = a.default_id();
        Ok(a)
    }

    pub fn set_gripper(state: GripperState, costs: &Costs) -> ActionTemplate {
        Self::instantiate(ActionKind::SetGripper, Some(state), None, None, 0, costs).expect("valid template")
    }

    /// `pick(A)`, `drop(A)@object:box#0`, `set_gripper(open)`.
    pub fn default_id(&self) -> String {
        match self.kind {
            ActionKind::SetGripper => format!("set_gripper({})", self.gripper.map_or("?".into(), |g| g.to_string())),
            ActionKind::Pick => format!("pick({})", self.object.as_deref().unwrap_or("?")),
            ActionKind::Place | ActionKind::Drop => format!(
                "{}({})@{}#{}",
                self.kind,
                self.object.as_deref().unwrap_or("?"),
                self.frame.as_ref().map_or("?".into(), |f| f.to_string()),
                self.context
            ),
        }
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    /// Resolves this action into a concrete primitive against `w`.
    pub fn to_primitive(&self, w: &WorldState) -> Result<Primitive, WorldError> {
        let object = || self.object.clone().ok_or_else(|| WorldError::PrimitiveRejected("no object".into()));
        Ok(match self.kind {
            ActionKind::Pick => Primitive::Pick { object: object()? },
            ActionKind::Place | ActionKind::Drop => {
                let frame_id = self.frame.clone().unwrap_or(FrameId::Base);
                let frame = w
                    .frame(&frame_id)
                    .ok_or_else(|| WorldError::PrimitiveRejected(format!("reference frame {frame_id} is absent")))?;
                let target = frame.from_frame(self.target.unwrap_or_default());
                if self.kind == ActionKind::Place {
                    Primitive::Place { object: object()?, target }
                } else {
                    Primitive::Drop { object: object()?, target }
                }
            }
            ActionKind::SetGripper => Primitive::SetGripper { state: self.gripper.unwrap_or(GripperState::Open) },
        })
    }

    /// The postcondition of this action that establishes `c`, if any.
    pub fn achieving_post<'a>(&'a self, c: &Condition, tol: &Tolerances) -> Option<&'a Condition> {
        self.post.iter().find(|p| tol.unifies(p, c))
    }

    pub fn is_internally_compatible(&self, tol: &Tolerances) -> bool {
        let pairwise =
            |set: &[Condition]| set.iter().enumerate().all(|(i, a)| set[i + 1..].iter().all(|b| tol.comp(a, b)));
        pairwise(&self.pre) && pairwise(&self.post) && !self.post.is_empty()
    }
}

impl fmt::Display for ActionTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

/// The cheapest action whose postconditions establish `c`; ties go to the
/// lexicographically smallest id.
pub fn cheapest_achiever<'a>(
    c: &Condition,
    actions: impl IntoIterator<Item = &'a ActionTemplate>,
    tol: &Tolerances,
) -> Option<&'a ActionTemplate> {
    achievers_by_cost(c, actions, tol).into_iter().next()
}

/// All achievers of `c`, cheapest first.
pub fn achievers_by_cost<'a>(
    c: &Condition,
    actions: impl IntoIterator<Item = &'a ActionTemplate>,
    tol: &Tolerances,
) -> Vec<&'a ActionTemplate> {
    let mut found: Vec<&ActionTemplate> = actions.into_iter().filter(|a| a.achieving_post(c, tol).is_some()).collect();
    found.sort_by(|a, b| a.cost.total_cmp(&b.cost).then_with(|| a.id.cmp(&b.id)));
    found
}
