//! Workspace configuration, stored as `config.toml` at the workspace root.

use serde::{Deserialize, Serialize};

use crate::actions::{Costs, Tolerances};
use crate::clustering::ClusteringConfig;
use crate::executor::ExecutorConfig;
use crate::inference::GoalConfig;
use crate::planner::PlannerConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub tolerances: Tolerances,
    pub costs: Costs,
    pub clustering: ClusteringConfig,
    pub goals: GoalConfig,
    pub planner: PlannerConfig,
    pub executor: ExecutorConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config, String> {
        let cfg: Config = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Rejects values the algorithms cannot work with.
    pub fn check(&self) -> Result<(), String> {
        let t = &self.tolerances;
        for (name, v) in [
            ("tolerances.place_sphere_m", t.place_sphere_m),
            ("tolerances.drop_radius_m", t.drop_radius_m),
            ("clustering.eps_m", self.clustering.eps_m),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        let c = &self.costs;
        for (name, v) in [("pick", c.pick), ("place", c.place), ("drop", c.drop), ("set_gripper", c.set_gripper)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("costs.{name} must be non-negative, got {v}"));
            }
        }
        if self.clustering.min_pts == 0 {
            return Err("clustering.min_pts must be at least 1".into());
        }
        if self.executor.action_duration == 0 || self.planner.action_duration == 0 {
            return Err("action_duration must be at least 1".into());
        }
        Ok(())
    }
}
