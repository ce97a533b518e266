//! Seeded synthetic demonstration corpora for the tabletop tasks, random
//! start scenes, and independent checks of whether each task is solved.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::actions::ActionKind;
use crate::demo::{Demonstration, Session};
use crate::geometry::{Orientation, Position};
use crate::world::{ObjectState, Surface, WorldState};

pub const CUBE: f64 = 0.05;
pub const DEFAULT_SIGMA: f64 = 0.01;

const HALF: f64 = CUBE / 2.0;
const BOX_EXTENTS: Position = Position::new(0.2, 0.2, 0.1);
const KIT_EXTENTS: Position = Position::new(0.44, 0.24, 0.1);
/// Release pose above the box floor for object-in-box drops.
const BOX_DROP: Position = Position::new(0.0, 0.0, 0.15);
/// Hanoi: where C is parked relative to A, and B's target on the table.
const HANOI_PARK: Position = Position::new(0.25, 0.0, 0.0);
const HANOI_P3: Position = Position::new(0.45, -0.35, HALF);
/// Towers: where E is moved in the demonstration with a relocated base.
const TOWER_Q: Position = Position::new(-0.5, -0.5, HALF);
/// Stacking release pose relative to the lower cube.
const STACK_RELEASE: Position = Position::new(0.0, 0.0, CUBE + 0.01);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Fixture {
    ObjectInBox,
    Towers,
    Hanoi,
    Kitting,
    DropStacking,
    PlaceStacking,
}

impl Fixture {
    pub const ALL: [Fixture; 6] = [
        Fixture::ObjectInBox,
        Fixture::Towers,
        Fixture::Hanoi,
        Fixture::Kitting,
        Fixture::DropStacking,
        Fixture::PlaceStacking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Fixture::ObjectInBox => "object-in-box",
            Fixture::Towers => "towers",
            Fixture::Hanoi => "hanoi",
            Fixture::Kitting => "kitting",
            Fixture::DropStacking => "drop-stacking",
            Fixture::PlaceStacking => "place-stacking",
        }
    }
}

impl fmt::Display for Fixture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fixture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Fixture::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown fixture {s:?}; expected one of {}", names()))
    }
}

fn names() -> String {
    Fixture::ALL.iter().map(|f| f.as_str()).collect::<Vec<_>>().join(", ")
}

pub fn table() -> Surface {
    Surface { z: 0.0, min: [-1.0, -1.0], max: [1.0, 1.0] }
}

pub fn cube_at(x: f64, y: f64) -> ObjectState {
    ObjectState::cube(Position::new(x, y, HALF), CUBE)
}

fn box_at(x: f64, y: f64, extents: Position) -> ObjectState {
    ObjectState::container(Position::new(x, y, extents.z / 2.0), extents)
}

fn epoch() -> DateTime<Utc> {
    DateTime::<Utc>::from_timestamp(0, 0).expect("epoch")
}

/// Where a demonstrated placement goes, resolved against the world at the
/// time of the action.
#[derive(Debug, Clone)]
enum Target {
    Base(Position),
    On(&'static str, Position),
}

#[derive(Debug, Clone)]
enum Step {
    Pick(&'static str),
    Place(&'static str, Target),
    Drop(&'static str, Target),
}

struct Noise {
    rng: ChaCha8Rng,
    normal: Option<Normal<f64>>,
}

impl Noise {
    fn new(seed: u64, sigma: f64) -> Self {
        let normal = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("valid sigma"));
        Noise { rng: ChaCha8Rng::seed_from_u64(seed), normal }
    }

    fn sample(&mut self) -> Position {
        match &self.normal {
            Some(n) => Position::new(n.sample(&mut self.rng), n.sample(&mut self.rng), n.sample(&mut self.rng)),
            None => Position::ORIGIN,
        }
    }
}

fn record(id: &str, world: WorldState, steps: &[Step], noise: &mut Noise) -> Demonstration {
    let mut s = Session::start(id, "synthetic", world).expect("valid id");
    for step in steps {
        let (kind, object, target) = match step {
            Step::Pick(o) => (ActionKind::Pick, *o, None),
            Step::Place(o, t) => (ActionKind::Place, *o, Some(t)),
            Step::Drop(o, t) => (ActionKind::Drop, *o, Some(t)),
        };
        let p = match target {
            None => s.world().position(object).expect("object exists"),
            Some(Target::Base(p)) => *p + noise.sample(),
            Some(Target::On(anchor, off)) => s.world().position(anchor).expect("anchor exists") + *off + noise.sample(),
        };
        s.record(kind, object, p, Orientation::IDENTITY).expect("fixture step is valid");
    }
    s.finish(epoch()).expect("fixture demo is valid")
}

fn scene(objects: &[(&str, ObjectState)]) -> WorldState {
    objects.iter().fold(WorldState::new().with_surface("table", table()), |w, (id, o)| w.with_object(*id, o.clone()))
}

/// Builds the corpus for `fixture`. The same seed and sigma always give
/// identical demonstrations.
pub fn corpus(fixture: Fixture, seed: u64, sigma: f64) -> Vec<Demonstration> {
    let mut noise = Noise::new(seed, sigma);
    match fixture {
        Fixture::ObjectInBox => object_in_box(&mut noise),
        Fixture::Towers => towers(&mut noise),
        Fixture::Hanoi => hanoi(&mut noise),
        Fixture::Kitting => kitting(&mut noise, seed),
        Fixture::DropStacking => stacking(&mut noise, false),
        Fixture::PlaceStacking => stacking(&mut noise, true),
    }
}

fn object_in_box(noise: &mut Noise) -> Vec<Demonstration> {
    let layouts = [((0.45, 0.25), (0.0, 0.0)), ((0.15, -0.45), (-0.3, 0.0)), ((-0.4, 0.35), (0.3, -0.1))];
    let steps = [Step::Pick("A"), Step::Drop("A", Target::On("box", BOX_DROP))];
    layouts
        .iter()
        .enumerate()
        .map(|(i, ((bx, by), (ax, ay)))| {
            let w = scene(&[("A", cube_at(*ax, *ay)), ("box", box_at(*bx, *by, BOX_EXTENTS))]);
            record(&format!("box-{}", i + 1), w, &steps, noise)
        })
        .collect()
}

fn on_top() -> Position {
    Position::new(0.0, 0.0, CUBE)
}

fn towers(noise: &mut Noise) -> Vec<Demonstration> {
    use Step::*;
    let c_on_e = [Pick("C"), Place("C", Target::On("E", on_top()))];
    let d_on_f = [Pick("D"), Place("D", Target::On("F", on_top()))];
    let layouts = [
        [(-0.3, -0.3), (-0.3, 0.3), (0.2, -0.2), (0.2, 0.3)],
        [(0.4, -0.4), (-0.4, -0.1), (-0.1, 0.0), (0.3, 0.05)],
        [(-0.4, 0.0), (-0.2, 0.4), (0.0, -0.3), (0.4, 0.2)],
    ];
    let orders: [Vec<Step>; 3] = [
        [c_on_e.clone(), d_on_f.clone()].concat(),
        [d_on_f.clone(), c_on_e.clone()].concat(),
        [vec![Pick("E"), Place("E", Target::Base(TOWER_Q))], c_on_e.to_vec(), d_on_f.to_vec()].concat(),
    ];
    layouts
        .iter()
        .zip(orders.iter())
        .enumerate()
        .map(|(i, (l, steps))| {
            let w = scene(&[
                ("C", cube_at(l[0].0, l[0].1)),
                ("D", cube_at(l[1].0, l[1].1)),
                ("E", cube_at(l[2].0, l[2].1)),
                ("F", cube_at(l[3].0, l[3].1)),
            ]);
            record(&format!("towers-{}", i + 1), w, steps, noise)
        })
        .collect()
}

/// A three-cube stack A (bottom), B, C at `p1`.
pub fn hanoi_scene(p1: (f64, f64)) -> WorldState {
    let (x, y) = p1;
    scene(&[
        ("A", ObjectState::cube(Position::new(x, y, HALF), CUBE)),
        ("B", ObjectState::cube(Position::new(x, y, HALF + CUBE), CUBE)),
        ("C", ObjectState::cube(Position::new(x, y, HALF + 2.0 * CUBE), CUBE)),
    ])
}

pub const HANOI_STARTS: [(f64, f64); 3] = [(-0.3, -0.2), (-0.1, 0.1), (-0.35, 0.25)];

fn hanoi(noise: &mut Noise) -> Vec<Demonstration> {
    use Step::*;
    let steps = [
        Pick("C"),
        Place("C", Target::On("A", HANOI_PARK)),
        Pick("B"),
        Place("B", Target::Base(HANOI_P3)),
        Pick("C"),
        Place("C", Target::On("B", on_top())),
    ];
    HANOI_STARTS
        .iter()
        .enumerate()
        .map(|(i, p1)| record(&format!("hanoi-{}", i + 1), hanoi_scene(*p1), &steps, noise))
        .collect()
}

pub const KIT_ITEMS: [&str; 8] = ["A", "B", "C", "D", "E", "F", "G", "H"];

/// Slot of kitting item `i` relative to the kit box center.
pub fn kit_slot(i: usize) -> Position {
    let col = (i % 4) as f64;
    let row = (i / 4) as f64;
    Position::new(-0.15 + 0.1 * col, -0.05 + 0.1 * row, HALF - KIT_EXTENTS.z / 2.0)
}

/// Random, well separated positions in the half-plane `y < -0.05`.
fn scatter(rng: &mut ChaCha8Rng, n: usize, min_sep: f64) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    while out.len() < n {
        let p = (rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..-0.05));
        if out.iter().all(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() >= min_sep) {
            out.push(p);
        }
    }
    out
}

pub fn kitting_scene(rng: &mut ChaCha8Rng, box_xy: (f64, f64)) -> WorldState {
    let spots = scatter(rng, KIT_ITEMS.len(), 0.12);
    let mut w = scene(&[("box", box_at(box_xy.0, box_xy.1, KIT_EXTENTS))]);
    for (item, (x, y)) in KIT_ITEMS.iter().zip(spots) {
        w = w.with_object(*item, cube_at(x, y));
    }
    w
}

fn kitting(noise: &mut Noise, seed: u64) -> Vec<Demonstration> {
    let mut layout = ChaCha8Rng::seed_from_u64(seed ^ 0x6b69_7474);
    let boxes = [(0.0, 0.35), (0.25, 0.4), (-0.2, 0.3)];
    let forward: Vec<usize> = (0..8).collect();
    let reversed: Vec<usize> = (0..8).rev().collect();
    let swapped = vec![1, 0, 3, 2, 5, 4, 7, 6];
    [forward, reversed, swapped]
        .iter()
        .zip(boxes)
        .enumerate()
        .map(|(i, (order, b))| {
            let w = kitting_scene(&mut layout, b);
            let steps: Vec<Step> = order
                .iter()
                .flat_map(|&k| [Step::Pick(KIT_ITEMS[k]), Step::Place(KIT_ITEMS[k], Target::On("box", kit_slot(k)))])
                .collect();
            record(&format!("kitting-{}", i + 1), w, &steps, noise)
        })
        .collect()
}

pub const STACK_STARTS: [[(f64, f64); 2]; 3] =
    [[(0.0, 0.0), (0.3, 0.2)], [(0.3, -0.3), (-0.2, -0.1)], [(-0.3, 0.3), (0.1, 0.4)]];

fn stacking(noise: &mut Noise, place: bool) -> Vec<Demonstration> {
    let put = if place {
        Step::Place("D", Target::On("C", STACK_RELEASE))
    } else {
        Step::Drop("D", Target::On("C", STACK_RELEASE))
    };
    let steps = [Step::Pick("D"), put];
    STACK_STARTS
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let w = scene(&[("C", cube_at(l[0].0, l[0].1)), ("D", cube_at(l[1].0, l[1].1))]);
            record(&format!("stack-{}", i + 1), w, &steps, noise)
        })
        .collect()
}

/// Demonstrations with every Drop relabelled as Place.
pub fn relabel_drops_as_place(demos: &[Demonstration]) -> Vec<Demonstration> {
    demos
        .iter()
        .map(|d| {
            let mut d = d.clone();
            for a in &mut d.actions {
                if a.t == ActionKind::Drop {
                    a.t = ActionKind::Place;
                }
            }
            d
        })
        .collect()
}

/// Stacking: cubes next to each other on the table, not stacked.
pub fn adjacent_unstacked() -> WorldState {
    scene(&[("C", cube_at(0.0, 0.0)), ("D", cube_at(0.06, 0.0))])
}

/// A random start scene for `fixture`.
pub fn random_scene(fixture: Fixture, rng: &mut ChaCha8Rng) -> WorldState {
    match fixture {
        Fixture::ObjectInBox => loop {
            let b: (f64, f64) = (rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
            let a = (rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7));
            if (a.0 - b.0).hypot(a.1 - b.1) > 0.25 {
                break scene(&[("A", cube_at(a.0, a.1)), ("box", box_at(b.0, b.1, BOX_EXTENTS))]);
            }
        },
        Fixture::Towers => {
            let s = scatter(rng, 4, 0.12);
            scene(&[
                ("C", cube_at(s[0].0, s[0].1)),
                ("D", cube_at(s[1].0, s[1].1)),
                ("E", cube_at(s[2].0, s[2].1)),
                ("F", cube_at(s[3].0, s[3].1)),
            ])
        }
        Fixture::Hanoi => hanoi_scene((rng.gen_range(-0.4..-0.1), rng.gen_range(-0.1..0.3))),
        Fixture::Kitting => {
            let b = (rng.gen_range(-0.3..0.3), rng.gen_range(0.3..0.5));
            kitting_scene(rng, b)
        }
        Fixture::DropStacking | Fixture::PlaceStacking => {
            let s = scatter(rng, 2, 0.15);
            scene(&[("C", cube_at(s[0].0, s[0].1)), ("D", cube_at(s[1].0, s[1].1))])
        }
    }
}

fn is_on(w: &WorldState, top: &str, bottom: &str) -> bool {
    match (w.position(top), w.position(bottom)) {
        (Some(t), Some(b)) => t.horizontal_distance(&b) < HALF && (t.z - b.z - CUBE).abs() < 1e-6,
        _ => false,
    }
}

fn inside_box(w: &WorldState, item: &str, container: &str) -> bool {
    let (Ok(o), Ok(b)) = (w.object(item), w.object(container)) else { return false };
    (o.position.x - b.position.x).abs() <= (b.extents.x - o.extents.x) / 2.0
        && (o.position.y - b.position.y).abs() <= (b.extents.y - o.extents.y) / 2.0
        && o.top() <= b.top()
        && w.held.as_deref() != Some(item)
}

/// Whether the task the fixture demonstrates is accomplished in `w`,
/// judged geometrically rather than through learned conditions.
pub fn task_solved(fixture: Fixture, w: &WorldState) -> bool {
    match fixture {
        Fixture::ObjectInBox => inside_box(w, "A", "box"),
        Fixture::Towers => is_on(w, "C", "E") && is_on(w, "D", "F"),
        Fixture::Hanoi => {
            is_on(w, "C", "B") && w.position("B").is_some_and(|b| b.horizontal_distance(&HANOI_P3) < 0.05)
        }
        Fixture::Kitting => KIT_ITEMS.iter().enumerate().all(|(i, item)| {
            let (Some(p), Some(b)) = (w.position(item), w.position("box")) else { return false };
            inside_box(w, item, "box") && p.horizontal_distance(&(b + kit_slot(i))) < 0.04
        }),
        Fixture::DropStacking | Fixture::PlaceStacking => is_on(w, "D", "C"),
    }
}
