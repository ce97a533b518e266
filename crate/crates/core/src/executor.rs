//! Runs a tree against a simulated world with scripted disturbances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::actions::Tolerances;
use crate::bt::{tick, BtNode, ExecutionContext, TickStatus};
use crate::error::TreeError;
use crate::world::{Disturbance, WorldState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorConfig {
    pub action_duration: u32,
    pub tick_budget: u64,
    /// Consecutive Success ticks before a run counts as successful.
    pub stable_ticks: u64,
    /// Horizontal noise applied to object positions by `run --repeat`.
    pub repeat_noise_m: f64,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig { action_duration: 5, tick_budget: 10_000, stable_ticks: 10, repeat_noise_m: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickEvent {
    pub tick: u64,
    pub status: TickStatus,
    #[serde(default)]
    pub running: Option<String>,
    pub digest: String,
    pub activations: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub disturbances: Vec<Disturbance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub tree_id: String,
    pub scenario: String,
    pub initial_world: WorldState,
    /// Every disturbance the run was given, including ones injected live,
    /// with the tick at which it took effect.
    pub disturbances: Vec<Disturbance>,
    pub config: ExecutorConfig,
    pub events: Vec<TickEvent>,
    pub outcome: Option<Outcome>,
    pub activations: u64,
    #[serde(default)]
    pub notes: Vec<String>,
    pub final_world: WorldState,
}

impl RunRecord {
    /// Tick of the first Success event, if any.
    pub fn first_success(&self) -> Option<u64> {
        self.events.iter().find(|e| e.status == TickStatus::Success).map(|e| e.tick)
    }
}

/// A run in progress. Drive it with [`Runner::step`]; disturbances can be
/// queued at any time and take effect before the next tick they name (or
/// the next tick, if that one has passed).
pub struct Runner {
    tree: BtNode,
    ctx: ExecutionContext,
    record: RunRecord,
    pending: Vec<Disturbance>,
    stable: u64,
}

impl Runner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        tree_id: impl Into<String>,
        scenario: impl Into<String>,
        tree: BtNode,
        world: WorldState,
        disturbances: Vec<Disturbance>,
        tolerances: Tolerances,
        config: ExecutorConfig,
    ) -> Result<Self, TreeError> {
        tree.validate()?;
        let mut world = world.settle();
        world.tick = 0;
        let ctx = ExecutionContext::new(world.clone(), tolerances, config.action_duration);
        let mut pending = disturbances;
        pending.sort_by_key(|d| d.at_tick);
        let record = RunRecord {
            id: id.into(),
            tree_id: tree_id.into(),
            scenario: scenario.into(),
            initial_world: world.clone(),
            disturbances: Vec::new(),
            config,
            events: Vec::new(),
            outcome: None,
            activations: 0,
            notes: Vec::new(),
            final_world: world,
        };
        Ok(Runner { tree, ctx, record, pending, stable: 0 })
    }

    pub fn is_done(&self) -> bool {
        self.record.outcome.is_some()
    }

    pub fn world(&self) -> &WorldState {
        &self.ctx.world
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    /// Queues a disturbance. Returns false if the run already ended.
    pub fn inject(&mut self, mut d: Disturbance) -> bool {
        if self.is_done() {
            return false;
        }
        d.at_tick = d.at_tick.max(self.ctx.world.tick);
        let at = self.pending.partition_point(|p| p.at_tick <= d.at_tick);
        self.pending.insert(at, d);
        true
    }

    /// Executes one tick. Returns `None` once the run has ended.
    pub fn step(&mut self) -> Result<Option<&TickEvent>, TreeError> {
        if self.is_done() {
            return Ok(None);
        }
        let now = self.ctx.world.tick;
        let due = self.pending.partition_point(|d| d.at_tick <= now);
        let mut applied = Vec::new();
        for d in self.pending.drain(..due) {
            match self.ctx.world.apply_disturbance(&d) {
                Ok(w) => self.ctx.world = w,
                Err(e) => self.record.notes.push(format!("disturbance at tick {now} not applied: {e}")),
            }
            let d = Disturbance { at_tick: now, ..d };
            self.record.disturbances.push(d.clone());
            applied.push(d);
        }
        let status = tick(&self.tree, &mut self.ctx)?;
        self.record.events.push(TickEvent {
            tick: now,
            status,
            running: self.ctx.running_action().map(str::to_string),
            digest: self.ctx.world.digest(),
            activations: self.ctx.activations,
            disturbances: applied,
        });
        self.stable = if status == TickStatus::Success { self.stable + 1 } else { 0 };
        let outcome = match status {
            TickStatus::Failure => Some(Outcome::Failure),
            TickStatus::Success if self.stable >= self.record.config.stable_ticks.max(1) => Some(Outcome::Success),
            _ if self.ctx.world.tick >= self.record.config.tick_budget => Some(Outcome::Budget),
            _ => None,
        };
        if let Some(o) = outcome {
            self.finish(o);
        }
        Ok(self.record.events.last())
    }

    fn finish(&mut self, outcome: Outcome) {
        let last = self.record.events.last().map_or(0, |e| e.tick);
        for d in self.pending.drain(..) {
            self.record.notes.push(format!("disturbance at tick {} ignored: run ended at tick {last}", d.at_tick));
            self.record.disturbances.push(d);
        }
        self.record.notes.append(&mut self.ctx.diagnostics);
        self.record.outcome = Some(outcome);
        self.record.activations = self.ctx.activations;
        self.record.final_world = self.ctx.world.clone();
    }

    /// Runs to completion.
    pub fn finish_run(mut self) -> Result<RunRecord, TreeError> {
        while self.step()?.is_some() {}
        Ok(self.record)
    }
}

/// Ticks `tree` against `world` until it succeeds stably, fails, or
/// exhausts the budget.
pub fn execute_run(
    tree: &BtNode,
    world: &WorldState,
    disturbances: &[Disturbance],
    tolerances: &Tolerances,
    config: &ExecutorConfig,
) -> Result<RunRecord, TreeError> {
    Runner::new("run", "", "", tree.clone(), world.clone(), disturbances.to_vec(), *tolerances, config.clone())?
        .finish_run()
}

/// Re-simulates a record from its initial world and disturbances.
pub fn replay(tree: &BtNode, record: &RunRecord, tolerances: &Tolerances) -> Result<RunRecord, TreeError> {
    Runner::new(
        record.id.clone(),
        record.tree_id.clone(),
        record.scenario.clone(),
        tree.clone(),
        record.initial_world.clone(),
        record.disturbances.clone(),
        *tolerances,
        record.config.clone(),
    )?
    .finish_run()
}

/// Shifts every free object horizontally by Gaussian noise, then lets
/// everything settle. Used to measure success rates over repeated runs.
pub fn perturb(world: &WorldState, sigma: f64, seed: u64) -> WorldState {
    if sigma <= 0.0 {
        return world.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    let mut w = world.clone();
    for (id, o) in w.objects.iter_mut() {
        if w.held.as_deref() != Some(id.as_str()) {
            o.position.x += n.sample(&mut rng);
            o.position.y += n.sample(&mut rng);
        }
    }
    w.settle()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::{ActionKind, ActionTemplate, Condition, Costs, PlacementMode};
    use crate::bt::IdGen;
    use crate::geometry::{FrameId, Position};
    use crate::world::{GripperState, ObjectState, Surface};

    fn scene() -> WorldState {
        WorldState::new()
            .with_surface("table", Surface { z: 0.0, min: [-1.0, -1.0], max: [1.0, 1.0] })
            .with_object("A", ObjectState::cube(Position::new(0.0, 0.0, 0.025), 0.05))
    }

    fn goal() -> Condition {
        Condition::object_at("A", Position::new(0.5, 0.0, 0.025), FrameId::Base, PlacementMode::Precise)
    }

    /// ?(goal, ->(?(InGripper A, ->(?(Gripper open, SetGripper open), Pick A)), Place A))
    fn tree() -> BtNode {
        let c = Costs::default();
        let g = IdGen::default();
        let pick = ActionTemplate::instantiate(ActionKind::Pick, None, Some("A"), None, 0, &c).unwrap();
        let place = ActionTemplate::instantiate(
            ActionKind::Place,
            None,
            Some("A"),
            Some((Position::new(0.5, 0.0, 0.025), FrameId::Base)),
            0,
            &c,
        )
        .unwrap();
        let open = ActionTemplate::set_gripper(GripperState::Open, &c);
        g.fallback(vec![
            g.condition(goal()),
            g.sequence(vec![
                g.fallback(vec![
                    g.condition(Condition::in_gripper(Some("A"))),
                    g.sequence(vec![
                        g.fallback(vec![g.condition(Condition::gripper(GripperState::Open)), g.action(open)]),
                        g.action(pick),
                    ]),
                ]),
                g.action(place),
            ]),
        ])
    }

    fn run(world: &WorldState, d: &[Disturbance]) -> RunRecord {
        execute_run(&tree(), world, d, &Tolerances::default(), &ExecutorConfig::default()).unwrap()
    }

    #[test]
    fn reaches_goal_and_holds_it() {
        let r = run(&scene(), &[]);
        assert_eq!(r.outcome, Some(Outcome::Success));
        assert_eq!(r.activations, 2);
        // pick on ticks 0..=4, place starts in the tick pick completes
        assert_eq!(r.first_success(), Some(8));
        assert_eq!(r.events.len(), 18);
        assert!(r.events.windows(2).all(|w| w[0].tick < w[1].tick));
    }

    #[test]
    fn satisfied_goal_skips_every_action() {
        let w = scene().apply_disturbance(&Disturbance::teleport(0, "A", Position::new(0.5, 0.0, 0.025))).unwrap();
        let r = run(&w, &[]);
        assert_eq!(r.outcome, Some(Outcome::Success));
        assert_eq!(r.activations, 0);
        assert_eq!(r.events.len(), 10);
    }

    #[test]
    fn teleport_after_success_is_redone() {
        let r = run(&scene(), &[Disturbance::teleport(12, "A", Position::new(-0.3, 0.2, 0.1))]);
        assert_eq!(r.outcome, Some(Outcome::Success));
        assert_eq!(r.activations, 4);
        assert!(r.events.iter().any(|e| e.tick > 12 && e.status == TickStatus::Running));
    }

    #[test]
    fn disturbance_after_termination_is_noted() {
        let r = run(&scene(), &[Disturbance::teleport(500, "A", Position::new(-0.3, 0.2, 0.1))]);
        assert_eq!(r.outcome, Some(Outcome::Success));
        assert_eq!(r.disturbances.len(), 1);
        assert_eq!(r.notes, vec!["disturbance at tick 500 ignored: run ended at tick 17".to_string()]);
        assert_eq!(replay(&tree(), &r, &Tolerances::default()).unwrap(), r);
    }

    #[test]
    fn budget_and_failure_outcomes() {
        let cfg = ExecutorConfig { tick_budget: 3, ..Default::default() };
        let r = execute_run(&tree(), &scene(), &[], &Tolerances::default(), &cfg).unwrap();
        assert_eq!(r.outcome, Some(Outcome::Budget));
        assert_eq!(r.events.len(), 3);
        let only = BtNode::condition(0, goal());
        let r = execute_run(&only, &scene(), &[], &Tolerances::default(), &ExecutorConfig::default()).unwrap();
        assert_eq!(r.outcome, Some(Outcome::Failure));
    }

    #[test]
    fn records_replay_exactly() {
        let d = [
            Disturbance::teleport(3, "A", Position::new(0.2, -0.2, 0.3)),
            Disturbance::remove_from_gripper(7, "A"),
            Disturbance::teleport(14, "A", Position::new(-0.4, 0.4, 0.025)),
        ];
        let r = run(&scene(), &d);
        let again = replay(&tree(), &r, &Tolerances::default()).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn live_injection_replays_like_a_script() {
        let mut runner =
            Runner::new("r", "t", "s", tree(), scene(), vec![], Tolerances::default(), ExecutorConfig::default())
                .unwrap();
        for _ in 0..4 {
            runner.step().unwrap();
        }
        assert!(runner.inject(Disturbance::teleport(0, "A", Position::new(0.3, 0.3, 0.025))));
        let r = runner.finish_run().unwrap();
        assert_eq!(r.disturbances[0].at_tick, 4);
        assert_eq!(r, replay(&tree(), &r, &Tolerances::default()).unwrap());
    }

    #[test]
    fn perturbation_is_seeded() {
        let w = scene();
        assert_eq!(perturb(&w, 0.01, 3), perturb(&w, 0.01, 3));
        assert_ne!(perturb(&w, 0.01, 3), perturb(&w, 0.01, 4));
        assert_eq!(perturb(&w, 0.0, 3), w);
    }
}
