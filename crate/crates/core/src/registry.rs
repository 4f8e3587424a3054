//! Name-keyed constructors for the swappable strategies: behaviour policies,
//! policy learners and rollout augmenters.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{Augmenter, LatentRollout, NaiveStateRollout, NoAugmentation};
use crate::dynamics::DynamicsModel;
use crate::env::{BehaviorPolicy, UniformRandom, WaypointPlanner};
use crate::error::{Error, Result};
use crate::policy::{ActorCritic, PolicyConfig, PolicyLearner, PolicyNet, WeightedSl};
use crate::repr::Autoencoder;

pub struct Registry<T> {
    kind: &'static str,
    entries: BTreeMap<&'static str, T>,
}

impl<T> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &'static str, entry: T) -> &mut Self {
        self.entries.insert(name, entry);
        self
    }

    pub fn get(&self, name: &str) -> Result<&T> {
        self.entries.get(name).ok_or_else(|| Error::UnknownStrategy {
            kind: self.kind,
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

pub struct BehaviorParams {
    pub epsilon: f64,
}

pub type BehaviorCtor = fn(&BehaviorParams) -> Box<dyn BehaviorPolicy>;

pub fn behaviors() -> Registry<BehaviorCtor> {
    let mut r: Registry<BehaviorCtor> = Registry::new("behavior policy");
    r.register("uniform-random", |_| Box::new(UniformRandom));
    r.register("planner", |p| Box::new(WaypointPlanner { epsilon: p.epsilon }));
    r
}

pub type LearnerCtor = fn(PolicyNet, PolicyConfig, &mut ChaCha8Rng) -> Box<dyn PolicyLearner>;

pub fn learners() -> Registry<LearnerCtor> {
    let mut r: Registry<LearnerCtor> = Registry::new("policy learner");
    r.register("weighted-sl", |p, c, _| Box::new(WeightedSl::new(p, c)));
    r.register("actor-critic", |p, c, rng| Box::new(ActorCritic::new(p, c, rng)));
    r
}

/// Space the dynamics model is trained in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSpace {
    Latent,
    /// Raw coordinates divided by the maze scale.
    State,
}

pub struct AugmenterEntry {
    pub space: ModelSpace,
    pub build: fn(Autoencoder, DynamicsModel, f64) -> Box<dyn Augmenter>,
}

pub fn augmenters() -> Registry<AugmenterEntry> {
    let mut r = Registry::new("augmenter");
    // "none" still trains latent dynamics so every arm runs the same phases.
    r.register("none", AugmenterEntry { space: ModelSpace::Latent, build: |_, _, _| Box::new(NoAugmentation) });
    r.register(
        "latent",
        AugmenterEntry { space: ModelSpace::Latent, build: |ae, dynamics, _| Box::new(LatentRollout { ae, dynamics }) },
    );
    r.register(
        "naive-state",
        AugmenterEntry { space: ModelSpace::State, build: |_, dynamics, scale| Box::new(NaiveStateRollout { scale, dynamics }) },
    );
    r
}
