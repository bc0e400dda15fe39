//! Run configuration: a single JSON document driving every pipeline stage.
//! Unknown keys are rejected so typos in sweeps fail loudly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SteerError};
use crate::schedule::ScheduleConfig;
use crate::scorenet::{NetworkConfig, PretrainConfig};
use crate::steering::TransformKind;
use crate::train::{SteerPolicy, SteerTrainConfig};
use crate::worlds::WorldSpec;

/// Either a builtin world by name or an inline specification.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorldRef {
    Name(String),
    Inline(Box<WorldSpec>),
}

impl WorldRef {
    pub fn resolve(&self) -> Result<WorldSpec> {
        let world = match self {
            WorldRef::Name(name) => crate::worlds::builtin(name)
                .ok_or_else(|| SteerError::Config(format!("unknown builtin world `{name}`")))?,
            WorldRef::Inline(spec) => (**spec).clone(),
        };
        world.validate()?;
        Ok(world)
    }
}

/// Classifier-free guidance settings for chains and generation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSettings {
    pub scale: f64,
    /// Apply guidance inside the training-time reverse chains as well.
    #[serde(default = "default_true")]
    pub chain_cfg: bool,
}

fn default_true() -> bool {
    true
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        GuidanceSettings {
            scale: 1.5,
            chain_cfg: true,
        }
    }
}

/// Per-concept steering hyperparameters (the concept itself, its neutral
/// prompt, and the negative-mode switch are derived from the world at
/// training time).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerSettings {
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub t_max: usize,
    #[serde(default = "default_negative_scale")]
    pub negative_scale: f64,
    pub kind: TransformKind,
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_batch() -> usize {
    1
}

fn default_negative_scale() -> f64 {
    1.0
}

fn default_mlp_hidden() -> usize {
    32
}

fn default_weight_decay() -> f64 {
    1e-4
}

impl Default for SteerSettings {
    fn default() -> Self {
        SteerSettings {
            iterations: 5000,
            batch: 1,
            lr: 1e-2,
            lambda: 0.02,
            t_max: 50,
            negative_scale: 1.0,
            kind: TransformKind::Constant,
            mlp_hidden: 32,
            weight_decay: 1e-4,
        }
    }
}

/// The whole experiment description.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldRef,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub steer: SteerSettings,
    /// Per-concept overrides of the steer block.
    #[serde(default)]
    pub steer_overrides: BTreeMap<String, SteerSettings>,
    #[serde(default)]
    pub guidance: GuidanceSettings,
    #[serde(default)]
    pub policy: SteerPolicy,
    pub seed: u64,
    /// Output directory; defaults to $STEERLAB_OUT/<world> or runs/<world>.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                SteerError::Config(format!("config file not found: {}", path.display()))
            } else {
                SteerError::io(path, e)
            }
        })?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| SteerError::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let world = self.world.resolve()?;
        if world.dimension != self.network.data_dim {
            return Err(SteerError::Config(format!(
                "network data_dim {} != world dimension {}",
                self.network.data_dim, world.dimension
            )));
        }
        if self.schedule.k_steps > self.schedule.t_steps {
            return Err(SteerError::Config(format!(
                "inference steps K={} exceed schedule steps T={}",
                self.schedule.k_steps, self.schedule.t_steps
            )));
        }
        // Builds perform full invariant checks on the tables.
        self.schedule.build()?;
        if !(self.guidance.scale >= 0.0 && self.guidance.scale.is_finite()) {
            return Err(SteerError::Config(format!(
                "guidance scale must be finite and nonnegative, got {}",
                self.guidance.scale
            )));
        }
        let check_steer = |name: &str, s: &SteerSettings| -> Result<()> {
            if s.batch != 1 {
                return Err(SteerError::Config(format!(
                    "steer[{name}]: the procedure is defined at batch size 1, got {}",
                    s.batch
                )));
            }
            if s.lambda < 0.0 {
                return Err(SteerError::Config(format!("steer[{name}]: lambda must be >= 0")));
            }
            if s.t_max == 0 || s.t_max > self.schedule.k_steps {
                return Err(SteerError::Config(format!(
                    "steer[{name}]: t_max must lie in 1..={}",
                    self.schedule.k_steps
                )));
            }
            if s.kind == TransformKind::Mlp && s.mlp_hidden == 0 {
                return Err(SteerError::Config(format!(
                    "steer[{name}]: mlp kind needs mlp_hidden >= 1"
                )));
            }
            Ok(())
        };
        check_steer("default", &self.steer)?;
        for (concept, s) in &self.steer_overrides {
            if !world.concept_modes.contains_key(concept) {
                return Err(SteerError::Config(format!(
                    "steer override references unknown concept `{concept}`"
                )));
            }
            check_steer(concept, s)?;
        }
        if [
            self.network.bottleneck,
            self.network.hidden,
            self.network.prompt_dim,
            self.network.time_dim,
        ]
        .iter()
        .any(|d| *d == 0)
        {
            return Err(SteerError::Config("network dimensions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn world(&self) -> Result<WorldSpec> {
        self.world.resolve()
    }

    /// Settings for one concept, with overrides applied.
    pub fn steer_settings_for(&self, concept: &str) -> SteerSettings {
        self.steer_overrides
            .get(concept)
            .cloned()
            .unwrap_or_else(|| self.steer.clone())
    }

    /// Complete per-concept training config. The training seed derives from
    /// the run seed and the concept's stable index so per-concept runs are
    /// reproducible independent of training order.
    pub fn steer_train_config(&self, concept: &str) -> Result<SteerTrainConfig> {
        let world = self.world()?;
        if !world.concept_modes.contains_key(concept) {
            return Err(SteerError::UnknownConcept(concept.to_string()));
        }
        let index = world
            .concept_modes
            .keys()
            .position(|c| c == concept)
            .expect("checked above");
        let s = self.steer_settings_for(concept);
        Ok(SteerTrainConfig {
            iterations: s.iterations,
            batch: s.batch,
            lr: s.lr,
            lambda: s.lambda,
            t_max: s.t_max,
            neutral: world.neutral.clone(),
            target: concept.to_string(),
            negative_mode: world.unsafe_attributes.iter().any(|a| a == concept),
            negative_scale: s.negative_scale,
            kind: s.kind,
            mlp_hidden: s.mlp_hidden,
            weight_decay: s.weight_decay,
            seed: self.seed.wrapping_add(1000 + index as u64),
        })
    }

    /// Resolve the output directory: explicit field, then $STEERLAB_OUT
    /// root, then ./runs.
    pub fn resolve_out_dir(&self) -> Result<PathBuf> {
        if let Some(dir) = &self.out_dir {
            return Ok(dir.clone());
        }
        let world = self.world()?;
        let root = std::env::var_os("STEERLAB_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        Ok(root.join(&world.name))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "world": "gauss2d_gender",
            "seed": 7
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config: RunConfig = serde_json::from_str(&minimal_json()).unwrap();
        config.validate().unwrap();
        assert_eq!(config.schedule.t_steps, 200);
        assert_eq!(config.steer.iterations, 5000);
        assert!(config.guidance.chain_cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = r#"{ "world": "gauss2d_gender", "seed": 7, "learning_rate": 0.1 }"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
        let bad_nested =
            r#"{ "world": "gauss2d_gender", "seed": 7, "steer": { "iterations": 5, "lr": 0.01, "lambda": 1.0, "t_max": 50, "kind": "constant", "type": "x" } }"#;
        assert!(serde_json::from_str::<RunConfig>(bad_nested).is_err());
    }

    #[test]
    fn invalid_grid_is_rejected() {
        let bad = r#"{
            "world": "gauss2d_gender",
            "seed": 7,
            "schedule": { "t_steps": 40, "beta_start": 1e-4, "beta_end": 0.05, "k_steps": 50 }
        }"#;
        let config: RunConfig = serde_json::from_str(bad).unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn steer_train_config_derives_negative_mode() {
        let json = r#"{ "world": "scene_safety", "seed": 3 }"#;
        let config: RunConfig = serde_json::from_str(json).unwrap();
        let violent = config.steer_train_config("violent").unwrap();
        assert!(violent.negative_mode);
        assert_eq!(violent.neutral, "scene");
        let calm = config.steer_train_config("calm").unwrap();
        assert!(!calm.negative_mode);
        assert!(config.steer_train_config("nonsense").is_err());
        // Stable per-concept seeds.
        assert_ne!(violent.seed, calm.seed);
    }

    #[test]
    fn config_roundtrip_is_stable() {
        let config: RunConfig = serde_json::from_str(&minimal_json()).unwrap();
        let a = config.to_json();
        let b: RunConfig = serde_json::from_str(&a).unwrap();
        assert_eq!(a, b.to_json());
    }
}
