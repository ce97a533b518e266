//! Positions, orientations and the translational reference frames that
//! demonstrated targets are expressed in.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Sub};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::GeometryError;

/// Cartesian position in meters, z up.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const ORIGIN: Position = Position { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Position { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (*self - *other).norm()
    }

    pub fn horizontal_distance(&self, other: &Position) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn approx_eq(&self, other: &Position, tol: f64) -> bool {
        self.distance(other) <= tol
    }

    pub fn scale(&self, k: f64) -> Position {
        Position::new(self.x * k, self.y * k, self.z * k)
    }

    /// Arithmetic mean; `None` for an empty slice.
    pub fn mean(points: &[Position]) -> Option<Position> {
        if points.is_empty() {
            return None;
        }
        let sum = points.iter().fold(Position::ORIGIN, |acc, p| acc + *p);
        Some(sum.scale(1.0 / points.len() as f64))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Position {
    fn from(a: [f64; 3]) -> Self {
        Position::new(a[0], a[1], a[2])
    }
}

impl Add for Position {
    type Output = Position;
    fn add(self, rhs: Position) -> Position {
        Position::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for Position {
    type Output = Position;
    fn sub(self, rhs: Position) -> Position {
        Position::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3}, {:.3})", self.x, self.y, self.z)
    }
}

// Positions travel as `[x, y, z]` in every document format.
impl Serialize for Position {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Position {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        let p = Position::from(a);
        if !p.is_finite() {
            return Err(serde::de::Error::custom("position components must be finite"));
        }
        Ok(p)
    }
}

/// Unit quaternion `(w, x, y, z)`. Recorded with demonstrations but never used
/// for action equality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Orientation {
    pub const IDENTITY: Orientation = Orientation { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let q = Orientation { w, x, y, z };
        let n = q.norm();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            return Err(GeometryError::NotUnitQuaternion(n));
        }
        Ok(q)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation::IDENTITY
    }
}

impl Serialize for Orientation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.w, self.x, self.y, self.z].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Orientation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [w, x, y, z] = <[f64; 4]>::deserialize(d)?;
        Orientation::new(w, x, y, z).map_err(serde::de::Error::custom)
    }
}

/// Identifier of a reference frame: the robot base or an object's frame.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FrameId {
    Base,
    Object(String),
}

impl FrameId {
    pub fn object(id: impl Into<String>) -> Self {
        FrameId::Object(id.into())
    }

    pub fn owner(&self) -> Option<&str> {
        match self {
            FrameId::Base => None,
            FrameId::Object(o) => Some(o),
        }
    }

    /// Tie-break priority used when two frames explain the data equally
    /// well: object frames in lexicographic order, then base.
    pub fn priority_key(&self) -> (u8, &str) {
        match self {
            FrameId::Object(o) => (0, o.as_str()),
            FrameId::Base => (1, ""),
        }
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameId::Base => f.write_str("base"),
            FrameId::Object(o) => write!(f, "object:{o}"),
        }
    }
}

impl FromStr for FrameId {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "base" {
            return Ok(FrameId::Base);
        }
        match s.strip_prefix("object:") {
            Some(o) if !o.is_empty() => Ok(FrameId::Object(o.to_string())),
            _ => Err(GeometryError::BadFrameId(s.to_string())),
        }
    }
}

impl Serialize for FrameId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FrameId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An axis-aligned reference frame; only its origin varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: FrameId,
    pub origin: Position,
}

impl Frame {
    pub fn base() -> Self {
        Frame { id: FrameId::Base, origin: Position::ORIGIN }
    }

    pub fn to_frame(&self, p: Position) -> Position {
        p - self.origin
    }

    pub fn from_frame(&self, p: Position) -> Position {
        p + self.origin
    }
}

/// Frames captured at one instant, keyed by id.
pub type FrameSet = BTreeMap<FrameId, Frame>;

/// Expresses a base-frame position in the frame `id` of `frames`.
pub fn to_frame(p: Position, id: &FrameId, frames: &FrameSet) -> Result<Position, GeometryError> {
    frames.get(id).map(|f| f.to_frame(p)).ok_or_else(|| GeometryError::FrameNotFound(id.clone()))
}

/// Inverse of [`to_frame`].
pub fn from_frame(p: Position, id: &FrameId, frames: &FrameSet) -> Result<Position, GeometryError> {
    frames.get(id).map(|f| f.from_frame(p)).ok_or_else(|| GeometryError::FrameNotFound(id.clone()))
}
