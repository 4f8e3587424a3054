//! Versioned checkpoint container.
//!
//! Layout (little-endian): magic `TDRLCKPT`, `u32` version, `u64` header
//! length, JSON header (metadata and array shapes), then every array's `f64`
//! values in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::ByteReader;
use crate::dynamics::{DynamicsModel, Variance};
use crate::env::ActionSpace;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::policy::PolicyNet;
use crate::registry::ModelSpace;
use crate::repr::{Autoencoder, FeatureMap};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TDRLCKPT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Repr,
    Dynamics,
    Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsPart {
    pub space: ModelSpace,
    pub model: DynamicsModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPart {
    pub learner: String,
    pub net: PolicyNet,
    /// Critic networks by name (empty for weighted-sl).
    pub critics: Vec<(String, Mlp)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub phase: Phase,
    pub config_hash: String,
    pub seed: u64,
    pub step: usize,
    pub repr: Option<Autoencoder>,
    pub dynamics: Option<DynamicsPart>,
    pub policy: Option<PolicyPart>,
}

#[derive(Serialize, Deserialize)]
struct NetSpec {
    name: String,
    layer_dims: Vec<usize>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct Header {
    phase: Phase,
    config_hash: String,
    seed: u64,
    step: usize,
    features: Option<FeatureMap>,
    dynamics: Option<(ModelSpace, usize, ActionSpace, Variance)>,
    policy: Option<(String, ActionSpace, FeatureMap, usize, usize)>,
    nets: Vec<NetSpec>,
}

impl Checkpoint {
    fn named_nets(&self) -> Vec<(String, &Mlp)> {
        let mut out = Vec::new();
        if let Some(ae) = &self.repr {
            out.push(("encoder".to_string(), &ae.encoder));
            out.push(("decoder".to_string(), &ae.decoder));
            out.push(("target_encoder".to_string(), &ae.target_encoder));
        }
        if let Some(d) = &self.dynamics {
            out.push(("dynamics".to_string(), &d.model.net));
        }
        if let Some(p) = &self.policy {
            out.push(("policy".to_string(), &p.net.net));
            for (name, net) in &p.critics {
                out.push((format!("critic:{name}"), net));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let nets = self.named_nets();
        let header = Header {
            phase: self.phase,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            step: self.step,
            features: self.repr.as_ref().map(|ae| ae.features),
            dynamics: self.dynamics.as_ref().map(|d| (d.space, d.model.dim, d.model.action_space, d.model.variance)),
            policy: self
                .policy
                .as_ref()
                .map(|p| (p.learner.clone(), p.net.space, p.net.features, p.net.latent_dim, p.net.log_std.len())),
            nets: nets
                .iter()
                .map(|(name, m)| NetSpec { name: name.clone(), layer_dims: m.layer_dims().to_vec(), activation: m.activation() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for (_, m) in &nets {
            put(m.weights());
        }
        if let Some(p) = &self.policy {
            put(&p.net.log_std);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut r = ByteReader::new(buf);
        if r.take(8).map_err(|_| bad("file too short".into()))? != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| bad(format!("bad header: {e}")))?;
        let mut nets = std::collections::BTreeMap::new();
        let mut critic_order = Vec::new();
        for spec in &header.nets {
            let n = crate::nn::param_count(&spec.layer_dims);
            let w = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            nets.insert(spec.name.clone(), Mlp::from_weights(&spec.layer_dims, spec.activation, w)?);
            if let Some(c) = spec.name.strip_prefix("critic:") {
                critic_order.push(c.to_string());
            }
        }
        let mut take = |name: &str| nets.remove(name).ok_or_else(|| bad(format!("missing network {name}")));
        let repr = match header.features {
            Some(features) => Some(Autoencoder {
                encoder: take("encoder")?,
                decoder: take("decoder")?,
                target_encoder: take("target_encoder")?,
                features,
            }),
            None => None,
        };
        let dynamics = match header.dynamics {
            Some((space, dim, action_space, variance)) => {
                Some(DynamicsPart { space, model: DynamicsModel { net: take("dynamics")?, dim, action_space, variance } })
            }
            None => None,
        };
        let policy = match header.policy {
            Some((learner, space, features, latent_dim, n_std)) => {
                let net = take("policy")?;
                let critics = critic_order.iter().map(|c| Ok((c.clone(), take(&format!("critic:{c}"))?))).collect::<Result<Vec<_>>>()?;
                let log_std = (0..n_std).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Some(PolicyPart { learner, net: PolicyNet { net, log_std, space, features, latent_dim }, critics })
            }
            None => None,
        };
        if !r.finished() {
            return Err(bad("trailing bytes after the last array".into()));
        }
        Ok(Self { phase: header.phase, config_hash: header.config_hash, seed: header.seed, step: header.step, repr, dynamics, policy })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Human-readable archival form with every weight inline.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn repr(&self) -> Result<&Autoencoder> {
        self.repr.as_ref().ok_or_else(|| Error::MissingPrerequisite("checkpoint has no representation".into()))
    }

    pub fn dynamics(&self) -> Result<&DynamicsPart> {
        self.dynamics.as_ref().ok_or_else(|| Error::MissingPrerequisite("checkpoint has no dynamics model".into()))
    }

    pub fn policy(&self) -> Result<&PolicyPart> {
        self.policy.as_ref().ok_or_else(|| Error::MissingPrerequisite("checkpoint has no policy".into()))
    }
}
