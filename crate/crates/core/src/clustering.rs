//! Identifying equivalent demonstrated actions, inferring the reference
//! frame of each placement, and splitting repeated placements into contexts.
//!
//! Every Place/Drop target is expressed in each candidate frame using the
//! frames captured when that action was demonstrated. DBSCAN runs per frame,
//! clusters from all frames are pooled and ranked by `|members| / r`, and
//! the best cluster (plus a second disjoint one, when both are dense enough)
//! becomes a symbolic action.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::actions::{ActionKind, ActionTemplate, Costs};
use crate::demo::{DemoAction, Demonstration};
use crate::error::TemplateError;
use crate::geometry::{FrameId, Position};
use crate::world::GripperState;

/// Floor for the cluster radius in the score.
pub const R_MIN: f64 = 1e-4;

/// Relative tolerance under which two scores count as tied.
const SCORE_TIE_REL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub eps_m: f64,
    pub min_pts: usize,
    /// Multiplies the context threshold `n_demos / eps`.
    pub context_threshold_scale: f64,
    pub default_frame: FrameId,
    /// When false, only the best cluster per group is kept.
    pub contexts_enabled: bool,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            eps_m: 0.03,
            min_pts: 2,
            context_threshold_scale: 1.0,
            default_frame: FrameId::Base,
            contexts_enabled: true,
        }
    }
}

impl ClusteringConfig {
    pub fn context_threshold(&self, n_demos: usize) -> f64 {
        n_demos as f64 / self.eps_m * self.context_threshold_scale
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MemberRef {
    pub demo: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidateKey {
    pub kind: ActionKind,
    pub x: Option<GripperState>,
    pub object: String,
}

#[derive(Debug, Clone)]
pub struct CandidateGroup {
    pub key: CandidateKey,
    pub members: Vec<(MemberRef, DemoAction)>,
}

/// Partitions all demonstrated actions by (type, parameters, object).
/// Members are ordered by (demo id, action index) so the result does not
/// depend on corpus order.
pub fn group_candidates(demos: &[Demonstration]) -> Vec<CandidateGroup> {
    let mut groups: BTreeMap<CandidateKey, Vec<(MemberRef, DemoAction)>> = BTreeMap::new();
    for d in demos {
        for (i, a) in d.actions.iter().enumerate() {
            let key = CandidateKey { kind: a.t, x: a.x, object: a.object.clone() };
            groups.entry(key).or_default().push((MemberRef { demo: d.id.clone(), index: i }, a.clone()));
        }
    }
    groups
        .into_iter()
        .map(|(key, mut members)| {
            members.sort_by(|a, b| a.0.cmp(&b.0));
            CandidateGroup { key, members }
        })
        .collect()
}

/// DBSCAN with `dist <= eps` neighborhoods that include the point itself.
/// Clusters are numbered in order of their lowest-index core point; a border
/// point reachable from several clusters joins the lowest-numbered one.
pub fn dbscan(points: &[Position], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let neighbors: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| points[i].distance(&points[j]) <= eps).collect()).collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if labels[i].is_some() || !core[i] {
            continue;
        }
        labels[i] = Some(next);
        let mut queue = VecDeque::from([i]);
        while let Some(q) = queue.pop_front() {
            for &j in &neighbors[q] {
                if labels[j].is_none() {
                    labels[j] = Some(next);
                    if core[j] {
                        queue.push_back(j);
                    }
                }
            }
        }
        next += 1;
    }
    labels
}

/// `|members| / max(r, R_MIN)`, or negative infinity for a singleton.
pub fn score(members: usize, r: f64) -> f64 {
    if members <= 1 {
        f64::NEG_INFINITY
    } else {
        members as f64 / r.max(R_MIN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub frame: FrameId,
    /// Indices into the candidate group's members, ascending.
    pub members: Vec<usize>,
    pub centroid: Position,
    pub r: f64,
    #[serde(serialize_with = "ser_score", deserialize_with = "de_score")]
    pub score: f64,
}

fn ser_score<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_some(v)
    } else {
        s.serialize_none()
    }
}

fn de_score<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
}

impl Cluster {
    pub fn new(frame: FrameId, members: Vec<usize>, points: &[Position]) -> Self {
        let pts: Vec<Position> = members.iter().map(|&i| points[i]).collect();
        let centroid = Position::mean(&pts).unwrap_or_default();
        let r = pts.iter().map(|p| p.distance(&centroid)).fold(0.0, f64::max);
        Cluster { score: score(members.len(), r), frame, members, centroid, r }
    }
}

fn scores_tied(a: f64, b: f64) -> bool {
    if a == b {
        return true;
    }
    if !a.is_finite() || !b.is_finite() {
        return false;
    }
    (a - b).abs() <= SCORE_TIE_REL * a.abs().max(b.abs())
}

/// Ranking: higher score first, near-equal scores broken by frame priority
/// and then by lowest member index.
fn rank(a: &Cluster, b: &Cluster) -> Ordering {
    let by_score = if scores_tied(a.score, b.score) { Ordering::Equal } else { b.score.total_cmp(&a.score) };
    by_score.then_with(|| a.frame.priority_key().cmp(&b.frame.priority_key())).then_with(|| a.members.cmp(&b.members))
}

/// A demonstrated action generalized over the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicAction {
    pub template: ActionTemplate,
    pub members: Vec<MemberRef>,
    /// Score of the cluster this action came from; none for Pick and
    /// singleton actions.
    #[serde(default)]
    pub score: Option<f64>,
}

impl SymbolicAction {
    pub fn id(&self) -> &str {
        &self.template.id
    }
}

/// Per-group diagnostics for the inference report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub key: CandidateKey,
    pub threshold: f64,
    pub clusters: Vec<Cluster>,
    pub kept: Vec<usize>,
    pub merged: Vec<MemberRef>,
    pub singletons: Vec<MemberRef>,
}

/// Clusters one candidate group into symbolic actions.
pub fn infer(
    group: &CandidateGroup,
    n_demos: usize,
    cfg: &ClusteringConfig,
    costs: &Costs,
) -> Result<(Vec<SymbolicAction>, GroupReport), TemplateError> {
    let key = &group.key;
    let refs: Vec<MemberRef> = group.members.iter().map(|(r, _)| r.clone()).collect();
    let threshold = cfg.context_threshold(n_demos);
    let mut report = GroupReport {
        key: key.clone(),
        threshold,
        clusters: Vec::new(),
        kept: Vec::new(),
        merged: Vec::new(),
        singletons: Vec::new(),
    };
    if !key.kind.has_target() {
        let t = ActionTemplate::instantiate(key.kind, key.x, Some(&key.object), None, 0, costs)?;
        return Ok((vec![SymbolicAction { template: t, members: refs, score: None }], report));
    }

    let own = FrameId::object(key.object.clone());
    let frames: BTreeSet<FrameId> =
        group.members.iter().flat_map(|(_, a)| a.frames.keys().cloned()).filter(|f| *f != own).collect();

    let mut clusters = Vec::new();
    for f in &frames {
        // Members whose snapshot lacks this frame cannot join its clusters.
        let present: Vec<usize> =
            (0..group.members.len()).filter(|&i| group.members[i].1.frames.contains_key(f)).collect();
        let mut points = vec![Position::ORIGIN; group.members.len()];
        for &i in &present {
            let a = &group.members[i].1;
            points[i] = a.frames[f].to_frame(a.p);
        }
        let local: Vec<Position> = present.iter().map(|&i| points[i]).collect();
        let labels = dbscan(&local, cfg.eps_m, cfg.min_pts);
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (k, l) in labels.iter().enumerate() {
            if let Some(l) = l {
                by_label.entry(*l).or_default().push(present[k]);
            }
        }
        for members in by_label.into_values() {
            clusters.push(Cluster::new(f.clone(), members, &points));
        }
    }
    clusters.sort_by(rank);

    let mut kept: Vec<usize> = Vec::new();
    if let Some(best) = clusters.first().filter(|c| c.score.is_finite()) {
        kept.push(0);
        if cfg.contexts_enabled && best.score >= threshold {
            let taken: BTreeSet<usize> = best.members.iter().copied().collect();
            let second = clusters
                .iter()
                .enumerate()
                .skip(1)
                .find(|(_, c)| c.score.is_finite() && c.members.iter().all(|m| !taken.contains(m)));
            if let Some((j, c)) = second {
                if c.score >= threshold {
                    kept.push(j);
                }
            }
        }
    }

    // Each member goes to the best kept cluster containing it; members found
    // only in discarded clusters join context 0; the rest are singletons.
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); kept.len()];
    let mut singles = Vec::new();
    for (m, r) in refs.iter().enumerate().take(group.members.len()) {
        if let Some(ctx) = kept.iter().position(|&k| clusters[k].members.contains(&m)) {
            assigned[ctx].push(m);
        } else if !kept.is_empty() && clusters.iter().any(|c| c.score.is_finite() && c.members.contains(&m)) {
            assigned[0].push(m);
            report.merged.push(r.clone());
        } else {
            singles.push(m);
        }
    }

    let mut out = Vec::new();
    for (ctx, &k) in kept.iter().enumerate() {
        let c = &clusters[k];
        let t = ActionTemplate::instantiate(
            key.kind,
            key.x,
            Some(&key.object),
            Some((c.centroid, c.frame.clone())),
            ctx as u32,
            costs,
        )?;
        let members = assigned[ctx].iter().map(|&m| refs[m].clone()).collect();
        out.push(SymbolicAction { template: t, members, score: Some(c.score) });
    }
    for (n, &m) in singles.iter().enumerate() {
        let a = &group.members[m].1;
        let (frame, target) = match a.frames.get(&cfg.default_frame) {
            Some(f) => (cfg.default_frame.clone(), f.to_frame(a.p)),
            None => (FrameId::Base, a.p),
        };
        let ctx = (kept.len() + n) as u32;
        let t = ActionTemplate::instantiate(key.kind, key.x, Some(&key.object), Some((target, frame)), ctx, costs)?;
        out.push(SymbolicAction { template: t, members: vec![refs[m].clone()], score: None });
        report.singletons.push(refs[m].clone());
    }
    report.kept = kept;
    report.clusters = clusters;
    Ok((out, report))
}

/// Symbolic actions for a whole corpus and the mapping from every
/// demonstrated action to its symbolic action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub actions: Vec<SymbolicAction>,
    pub groups: Vec<GroupReport>,
}

impl ClusteringResult {
    pub fn action(&self, id: &str) -> Option<&SymbolicAction> {
        self.actions.iter().find(|a| a.id() == id)
    }

    /// The demonstration rewritten as symbolic action ids.
    pub fn sequence(&self, demo: &Demonstration) -> Vec<String> {
        let mut by_ref: BTreeMap<&MemberRef, &str> = BTreeMap::new();
        for a in &self.actions {
            for m in &a.members {
                by_ref.insert(m, a.id());
            }
        }
        (0..demo.actions.len())
            .filter_map(|i| by_ref.get(&MemberRef { demo: demo.id.clone(), index: i }).map(|s| s.to_string()))
            .collect()
    }
}

pub fn cluster_corpus(
    demos: &[Demonstration],
    cfg: &ClusteringConfig,
    costs: &Costs,
) -> Result<ClusteringResult, TemplateError> {
    let mut actions = Vec::new();
    let mut groups = Vec::new();
    for g in group_candidates(demos) {
        let (a, r) = infer(&g, demos.len(), cfg, costs)?;
        actions.extend(a);
        groups.push(r);
    }
    Ok(ClusteringResult { actions, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Frame, FrameSet, Orientation};
    use proptest::prelude::*;

    /// Independent DBSCAN: core points, connected components of cores by a
    /// reachability closure, borders to the lowest adjacent component.
    pub(crate) fn oracle(points: &[Position], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
        let n = points.len();
        let adj = |i: usize, j: usize| points[i].distance(&points[j]) <= eps;
        let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| adj(i, j)).count() >= min_pts).collect();
        let mut reach = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                reach[i][j] = core[i] && core[j] && adj(i, j);
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        let mut comp = vec![None; n];
        let mut next = 0;
        for i in 0..n {
            if core[i] && comp[i].is_none() {
                for j in 0..n {
                    if j == i || reach[i][j] {
                        comp[j] = Some(next);
                    }
                }
                next += 1;
            }
        }
        (0..n)
            .map(
                |i| {
                    if core[i] {
                        comp[i]
                    } else {
                        (0..n).filter(|&j| core[j] && adj(i, j)).filter_map(|j| comp[j]).min()
                    }
                },
            )
            .collect()
    }

    #[test]
    fn dbscan_examples() {
        let tight = [Position::new(0.0, 0.0, 0.0), Position::new(0.01, 0.0, 0.0), Position::new(0.0, 0.01, 0.0)];
        assert_eq!(dbscan(&tight, 0.03, 2), vec![Some(0); 3]);
        let apart = [Position::new(0.0, 0.0, 0.0), Position::new(1.0, 0.0, 0.0)];
        assert_eq!(dbscan(&apart, 0.03, 2), vec![None, None]);
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(3, 0.02), 150.0);
        assert_eq!(score(1, 0.5), f64::NEG_INFINITY);
        assert_eq!(score(4, 0.0), 4.0 / R_MIN);
    }

    fn member(demo: &str, p: Position, frames: &[(&str, Position)]) -> (MemberRef, DemoAction) {
        let mut fs = FrameSet::new();
        fs.insert(FrameId::Base, Frame::base());
        for (o, origin) in frames {
            let id = FrameId::object(*o);
            fs.insert(id.clone(), Frame { id, origin: *origin });
        }
        (
            MemberRef { demo: demo.into(), index: 1 },
            DemoAction { t: ActionKind::Drop, x: None, object: "A".into(), p, o: Orientation::IDENTITY, frames: fs },
        )
    }

    fn key() -> CandidateKey {
        CandidateKey { kind: ActionKind::Drop, x: None, object: "A".into() }
    }

    #[test]
    fn box_frame_wins_when_box_moves() {
        let offset = Position::new(0.0, 0.0, 0.15);
        let boxes = [Position::new(0.5, 0.2, 0.05), Position::new(0.2, -0.3, 0.05), Position::new(-0.4, 0.4, 0.05)];
        let noise = [Position::new(0.004, -0.002, 0.0), Position::new(-0.003, 0.001, 0.002), Position::ORIGIN];
        let members = (0..3)
            .map(|i| {
                member(&format!("d{i}"), boxes[i] + offset + noise[i], &[("box", boxes[i]), ("A", Position::ORIGIN)])
            })
            .collect();
        let g = CandidateGroup { key: key(), members };
        let (acts, report) = infer(&g, 3, &ClusteringConfig::default(), &Costs::default()).unwrap();
        assert_eq!(acts.len(), 1);
        assert_eq!(acts[0].template.frame, Some(FrameId::object("box")));
        assert!(acts[0].template.target.unwrap().approx_eq(&offset, 0.01));
        assert!(report.clusters.iter().all(|c| c.frame != FrameId::Base));
        assert!(report.clusters.iter().all(|c| c.frame != FrameId::object("A")));
    }

    #[test]
    fn static_scene_ties_go_to_the_object_frame() {
        let b = Position::new(0.3, 0.3, 0.05);
        let p = Position::new(0.3, 0.3, 0.2);
        let members = (0..3).map(|i| member(&format!("d{i}"), p, &[("box", b)])).collect();
        let g = CandidateGroup { key: key(), members };
        let (acts, report) = infer(&g, 3, &ClusteringConfig::default(), &Costs::default()).unwrap();
        assert_eq!(report.clusters.len(), 2);
        assert!(scores_tied(report.clusters[0].score, report.clusters[1].score));
        assert_eq!(acts[0].template.frame, Some(FrameId::object("box")));
    }

    fn two_context_group() -> CandidateGroup {
        let mut members = Vec::new();
        for d in 0..3 {
            let jitter = Position::new(0.002 * d as f64, 0.0, 0.0);
            for (i, p) in [Position::new(0.0, 0.4, 0.025), Position::new(0.3, 0.4, 0.075)].into_iter().enumerate() {
                let (mut r, a) = member(&format!("d{d}"), p + jitter, &[]);
                r.index = i;
                members.push((r, a));
            }
        }
        CandidateGroup { key: key(), members }
    }

    #[test]
    fn two_dense_clusters_become_contexts() {
        let g = two_context_group();
        let (acts, _) = infer(&g, 3, &ClusteringConfig::default(), &Costs::default()).unwrap();
        assert_eq!(acts.len(), 2);
        assert_eq!(acts[0].template.context, 0);
        assert_eq!(acts[1].template.context, 1);
        assert_eq!(acts[0].members.len() + acts[1].members.len(), 6);
        assert_ne!(acts[0].id(), acts[1].id());
    }

    #[test]
    fn disabled_contexts_merge_into_one_action() {
        let g = two_context_group();
        let cfg = ClusteringConfig { contexts_enabled: false, ..Default::default() };
        let (acts, report) = infer(&g, 3, &cfg, &Costs::default()).unwrap();
        assert_eq!(acts.len(), 1);
        assert_eq!(acts[0].members.len(), 6);
        assert_eq!(report.merged.len(), 3);
    }

    #[test]
    fn outliers_become_singletons_in_the_default_frame() {
        let mut g = two_context_group();
        g.members.truncate(2);
        let (acts, report) = infer(&g, 3, &ClusteringConfig::default(), &Costs::default()).unwrap();
        assert_eq!(acts.len(), 2);
        assert_eq!(report.singletons.len(), 2);
        assert!(acts.iter().all(|a| a.template.frame == Some(FrameId::Base)));
        assert_ne!(acts[0].id(), acts[1].id());
    }

    fn arb_points() -> impl Strategy<Value = Vec<Position>> {
        prop::collection::vec((0.0f64..0.12, 0.0f64..0.12, 0.0f64..0.02), 0..=12)
            .prop_map(|v| v.into_iter().map(|(x, y, z)| Position::new(x, y, z)).collect())
    }

    proptest! {
        #[test]
        fn dbscan_matches_oracle(points in arb_points(), min_pts in 1usize..4) {
            prop_assert_eq!(dbscan(&points, 0.03, min_pts), oracle(&points, 0.03, min_pts));
        }

        #[test]
        fn translation_leaves_frames_and_contexts_unchanged(dx in -1.0f64..1.0, dy in -1.0f64..1.0) {
            let g = two_context_group();
            let shift = Position::new(dx, dy, 0.0);
            let moved = CandidateGroup {
                key: g.key.clone(),
                members: g.members.iter().map(|(r, a)| {
                    let mut a = a.clone();
                    a.p = a.p + shift;
                    for f in a.frames.values_mut() {
                        if f.id != FrameId::Base {
                            f.origin = f.origin + shift;
                        }
                    }
                    (r.clone(), a)
                }).collect(),
            };
            let cfg = ClusteringConfig::default();
            let (a, _) = infer(&g, 3, &cfg, &Costs::default()).unwrap();
            let (b, _) = infer(&moved, 3, &cfg, &Costs::default()).unwrap();
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(&x.template.frame, &y.template.frame);
                prop_assert_eq!(&x.members, &y.members);
            }
        }
    }
}
