//! Run configuration: one TOML file covering every phase. Unknown keys are
//! rejected and every field has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::RolloutConfig;
use crate::dataset::GoalLabelConfig;
use crate::dynamics::DynamicsConfig;
use crate::env::{layouts, EnvKind, MazeEnv, MazeLayout, State};
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::registry;
use crate::repr::ReprConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvType {
    Grid,
    Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Built-in layout name (`maze-7x7`, `maze-11x11`, `u-maze`) or a path to
    /// a layout file.
    pub maze: String,
    pub kind: EnvType,
    pub step_size: f64,
    pub goal_radius: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { maze: "maze-7x7".into(), kind: EnvType::Grid, step_size: 0.2, goal_radius: 0.5 }
    }
}

pub fn builtin_layout(name: &str) -> Option<&'static str> {
    match name {
        "maze-7x7" => Some(layouts::MAZE_7X7),
        "maze-11x11" => Some(layouts::MAZE_11X11),
        "u-maze" => Some(layouts::U_MAZE),
        _ => None,
    }
}

impl EnvConfig {
    pub fn layout(&self) -> Result<MazeLayout> {
        match builtin_layout(&self.maze) {
            Some(text) => MazeLayout::parse(text),
            None => {
                let text = std::fs::read_to_string(&self.maze)
                    .map_err(|e| Error::InvalidMaze(format!("cannot read maze file {}: {e}", self.maze)))?;
                MazeLayout::parse(&text)
            }
        }
    }

    pub fn build(&self) -> Result<MazeEnv> {
        let kind = match self.kind {
            EnvType::Grid => EnvKind::Grid,
            EnvType::Point => EnvKind::Point { step_size: self.step_size, goal_radius: self.goal_radius },
        };
        MazeEnv::new(self.layout()?, kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Load transitions from here instead of generating them.
    pub path: Option<PathBuf>,
    pub n_trajectories: usize,
    pub horizon: usize,
    /// Random-action probability of the planner behaviour.
    pub epsilon: f64,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    pub labeling: GoalLabelConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, n_trajectories: 200, horizon: 100, epsilon: 0.3, seed: None, labeling: GoalLabelConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub behavior: String,
    pub learner: String,
    pub augmenter: String,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self { behavior: "planner".into(), learner: "weighted-sl".into(), augmenter: "latent".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    /// Defaults to the layout's marked goals.
    pub goals: Option<Vec<[f64; 2]>>,
    /// Episodes per goal for the in-training curve; 0 disables it.
    pub curve_episodes: usize,
    pub curve_every_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 50, horizon: 100, seeds: vec![0, 1, 2], goals: None, curve_episodes: 5, curve_every_fraction: 0.1 }
    }
}

impl EvalConfig {
    pub fn goal_states(&self, env: &MazeEnv) -> Result<Vec<State>> {
        let goals: Vec<State> = match &self.goals {
            Some(g) => g.iter().map(|p| State(*p)).collect(),
            None => env.layout().goals.iter().map(|c| State::from_cell(*c)).collect(),
        };
        if goals.is_empty() {
            return Err(Error::InvalidConfig("no evaluation goals configured and none marked in the maze".into()));
        }
        for g in &goals {
            if !env.is_valid(g) {
                return Err(Error::InvalidState(g.0));
            }
        }
        Ok(goals)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Applied to every hidden width of every network.
    pub width_multiplier: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { width_multiplier: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Loss rows are written every this many steps.
    pub log_every: usize,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub strategies: StrategyConfig,
    pub network: NetworkConfig,
    pub repr: ReprConfig,
    pub dynamics: DynamicsConfig,
    pub policy: PolicyConfig,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let wide = vec![512, 512, 512];
        Self {
            seed: 0,
            log_every: 100,
            env: EnvConfig::default(),
            data: DataConfig::default(),
            strategies: StrategyConfig::default(),
            network: NetworkConfig::default(),
            repr: ReprConfig { hidden: wide.clone(), ..Default::default() },
            dynamics: DynamicsConfig { hidden: wide.clone(), ..Default::default() },
            policy: PolicyConfig { hidden: wide, ..Default::default() },
            rollout: RolloutConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn scale_widths(hidden: &[usize], m: f64) -> Vec<usize> {
    hidden.iter().map(|h| ((*h as f64 * m).round() as usize).max(1)).collect()
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.network.width_multiplier > 0.0) {
            return Err(Error::InvalidConfig("width_multiplier must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be at least 1".into()));
        }
        if self.eval.episodes == 0 || self.eval.seeds.is_empty() {
            return Err(Error::InvalidConfig("evaluation needs at least one episode and one seed".into()));
        }
        if !(self.eval.curve_every_fraction > 0.0 && self.eval.curve_every_fraction <= 1.0) {
            return Err(Error::InvalidConfig("curve_every_fraction outside (0, 1]".into()));
        }
        self.data.labeling.validate()?;
        self.repr_config().validate()?;
        self.dynamics_config().validate()?;
        self.policy_config().validate()?;
        self.rollout.validate()?;
        registry::behaviors().get(&self.strategies.behavior)?;
        registry::learners().get(&self.strategies.learner)?;
        registry::augmenters().get(&self.strategies.augmenter)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn repr_config(&self) -> ReprConfig {
        ReprConfig { hidden: scale_widths(&self.repr.hidden, self.network.width_multiplier), ..self.repr.clone() }
    }

    pub fn dynamics_config(&self) -> DynamicsConfig {
        DynamicsConfig { hidden: scale_widths(&self.dynamics.hidden, self.network.width_multiplier), ..self.dynamics.clone() }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig { hidden: scale_widths(&self.policy.hidden, self.network.width_multiplier), ..self.policy.clone() }
    }

    /// The `--no-rollouts` arm.
    pub fn without_rollouts(mut self) -> Self {
        self.rollout.sigma = 0.0;
        self.strategies.augmenter = "none".into();
        self
    }

    /// The `--naive-state-dynamics` arm.
    pub fn with_naive_dynamics(mut self) -> Self {
        self.strategies.augmenter = "naive-state".into();
        self
    }
}
