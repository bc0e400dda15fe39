//! Run-directory orchestration: each command validates the configuration
//! fully, then reads and writes artifacts under one output directory.
//!
//! Layout:
//!   config.json                         resolved config snapshot
//!   base.ckpt                           pretrained score network
//!   pretrain_log.csv                    per-epoch loss
//!   transformations/<variant>/<concept>.<role>.trf
//!   steer_<concept>[_<variant>].csv     per-iteration training log
//!   safety_manifest.json                bundle file listing per variant
//!   samples/<tag>.csv                   generated sample sets
//!   report.json / report.csv / report.svg

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Result, SteerError};
use crate::numerics::Rng;
use crate::persist;
use crate::report::{build_report, Report, ReportPaths};
use crate::schedule::{GuidanceConfig, InferenceGrid, NoiseSchedule};
use crate::scorenet::{pretrain_base, ScoreNetwork};
use crate::steering::{Role, SafetyBundle, SteerModules, Transformation};
use crate::train::{
    generate, train_concept_only, train_shared, train_steering, GenerateMode, GenerationAssets,
    SteerVariant,
};
use crate::worlds::{make_dataset, OracleClassifier, WorldSpec};

/// Which trained transformation set generation draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssetVariant {
    Dual,
    ConceptOnly,
    Shared,
}

impl AssetVariant {
    pub fn dir_name(&self) -> &'static str {
        match self {
            AssetVariant::Dual => "dual",
            AssetVariant::ConceptOnly => "concept_only",
            AssetVariant::Shared => "shared",
        }
    }

    fn suffix(&self) -> &'static str {
        match self {
            AssetVariant::Dual => "",
            AssetVariant::ConceptOnly => "_concept_only",
            AssetVariant::Shared => "_shared",
        }
    }
}

/// Generation request.
#[derive(Clone, Debug)]
pub enum GenerateSpec {
    Base,
    Fair(AssetVariant),
    Fixed(String, AssetVariant),
    Safety(AssetVariant),
}

#[derive(Serialize, Deserialize, Default)]
struct SafetyManifest {
    /// Variant directory name → transformation files (run-dir relative).
    files: BTreeMap<String, Vec<String>>,
}

pub struct Pipeline {
    config: RunConfig,
    world: WorldSpec,
    out: PathBuf,
}

impl Pipeline {
    /// Load and fully validate a configuration file.
    pub fn from_config_path(path: &Path) -> Result<Self> {
        Self::from_config(RunConfig::from_path(path)?)
    }

    /// Build from an already-parsed configuration.
    pub fn from_config(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let world = config.world()?;
        let out = config.resolve_out_dir()?;
        Ok(Pipeline { config, world, out })
    }

    /// Open an existing run directory through its config snapshot.
    pub fn from_run_dir(dir: &Path) -> Result<Self> {
        let snapshot = dir.join("config.json");
        if !snapshot.exists() {
            return Err(SteerError::MissingArtifact(format!(
                "{} (not a run directory)",
                snapshot.display()
            )));
        }
        let config = RunConfig::from_path(&snapshot)?;
        let world = config.world()?;
        Ok(Pipeline {
            config,
            world,
            out: dir.to_path_buf(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn world(&self) -> &WorldSpec {
        &self.world
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out.join("base.ckpt")
    }

    fn samples_dir(&self) -> PathBuf {
        self.out.join("samples")
    }

    /// Create the layout and write (or verify) the config snapshot, so a run
    /// directory never mixes two configurations. The snapshot drops the
    /// `out_dir` field: the directory it sits in is its location.
    fn ensure_layout(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| SteerError::io(&self.out, e))?;
        let snapshot = self.out.join("config.json");
        let mut normalized = self.config.clone();
        normalized.out_dir = None;
        let rendered = normalized.to_json();
        if snapshot.exists() {
            let existing = std::fs::read_to_string(&snapshot)
                .map_err(|e| SteerError::io(&snapshot, e))?;
            if existing != rendered {
                return Err(SteerError::Config(format!(
                    "run directory {} was created with a different config",
                    self.out.display()
                )));
            }
        } else {
            std::fs::write(&snapshot, rendered).map_err(|e| SteerError::io(&snapshot, e))?;
        }
        Ok(())
    }

    fn build_tables(&self) -> Result<(NoiseSchedule, InferenceGrid)> {
        self.config.schedule.build()
    }

    fn guidance_for_chains(&self, net: &ScoreNetwork) -> Result<Option<GuidanceConfig>> {
        if !self.config.guidance.chain_cfg {
            return Ok(None);
        }
        Ok(Some(GuidanceConfig::new(
            self.config.guidance.scale,
            net.vocab().uncond().0,
        )?))
    }

    /// Pretrain the base model on the world's biased dataset; writes the
    /// checkpoint and the per-epoch loss log.
    pub fn pretrain(&self) -> Result<PathBuf> {
        self.ensure_layout()?;
        let (sched, _) = self.build_tables()?;
        let vocab = crate::scorenet::ConceptVocabulary::from_world(&self.world)?;
        let mut rng = Rng::seed_from(self.config.seed);
        let mut net = ScoreNetwork::new(self.config.network, vocab, &mut rng);
        let dataset = make_dataset(&self.world, self.config.pretrain.dataset_size, &mut rng)?;
        let log = pretrain_base(&mut net, &dataset, &sched, &self.config.pretrain, &mut rng)?;

        let ckpt = self.checkpoint_path();
        persist::save_network(&net, &self.config.schedule, &ckpt)?;
        let log_path = self.out.join("pretrain_log.csv");
        let mut csv = String::from("epoch,loss\n");
        for (epoch, loss) in log.epoch_losses.iter().enumerate() {
            csv.push_str(&format!("{epoch},{loss}\n"));
        }
        std::fs::write(&log_path, csv).map_err(|e| SteerError::io(&log_path, e))?;
        Ok(ckpt)
    }

    /// Load the pretrained network, checking it matches this config.
    pub fn load_network(&self) -> Result<ScoreNetwork> {
        let ckpt = self.checkpoint_path();
        if !ckpt.exists() {
            return Err(SteerError::MissingArtifact(format!(
                "{} (run `steerlab pretrain` first)",
                ckpt.display()
            )));
        }
        let (net, sched) = persist::load_network(&ckpt)?;
        if sched != self.config.schedule {
            return Err(SteerError::Config(
                "checkpoint schedule differs from the run config".into(),
            ));
        }
        if *net.config() != self.config.network {
            return Err(SteerError::Config(
                "checkpoint architecture differs from the run config".into(),
            ));
        }
        Ok(net)
    }

    fn transformation_path(&self, variant: AssetVariant, concept: &str, role: Role) -> PathBuf {
        self.out
            .join("transformations")
            .join(variant.dir_name())
            .join(format!("{concept}.{}.trf", role.as_str()))
    }

    /// Train steering transformations for one concept and persist them.
    /// Returns the written transformation files.
    pub fn steer_concept(&self, concept: &str, variant: SteerVariant) -> Result<Vec<PathBuf>> {
        self.ensure_layout()?;
        let net = self.load_network()?;
        let (sched, grid) = self.build_tables()?;
        let guidance = self.guidance_for_chains(&net)?;
        let cfg = self.config.steer_train_config(concept)?;
        let policy = self.config.policy;

        let (asset_variant, outputs, log) = match variant {
            SteerVariant::DualModule => {
                let (c, s, log) = train_steering(&net, &sched, &grid, guidance, policy, &cfg)?;
                (AssetVariant::Dual, vec![c, s], log)
            }
            SteerVariant::ConceptOnly => {
                let (c, log) = train_concept_only(&net, &sched, &grid, guidance, policy, &cfg)?;
                (AssetVariant::ConceptOnly, vec![c], log)
            }
            SteerVariant::Shared => {
                let (sh, log) = train_shared(&net, &sched, &grid, guidance, policy, &cfg)?;
                (AssetVariant::Shared, vec![sh], log)
            }
        };

        let dir = self
            .out
            .join("transformations")
            .join(asset_variant.dir_name());
        std::fs::create_dir_all(&dir).map_err(|e| SteerError::io(&dir, e))?;
        let mut written = Vec::new();
        for t in &outputs {
            let path = self.transformation_path(asset_variant, concept, t.role());
            persist::save_transformation(t, &path)?;
            written.push(path);
        }
        let log_path = self
            .out
            .join(format!("steer_{concept}{}.csv", asset_variant.suffix()));
        log.write_csv(&log_path)?;

        if self.world.unsafe_attributes.iter().any(|a| a == concept) {
            self.update_safety_manifest(asset_variant, &written)?;
        }
        Ok(written)
    }

    /// Train every sensitive concept of the world's category.
    pub fn steer_all(&self, variant: SteerVariant) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for concept in self.world.sensitive_concepts() {
            written.extend(self.steer_concept(&concept, variant)?);
        }
        Ok(written)
    }

    fn manifest_path(&self) -> PathBuf {
        self.out.join("safety_manifest.json")
    }

    fn update_safety_manifest(&self, variant: AssetVariant, files: &[PathBuf]) -> Result<()> {
        let path = self.manifest_path();
        let mut manifest: SafetyManifest = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| SteerError::io(&path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| SteerError::Format(format!("safety manifest: {e}")))?
        } else {
            SafetyManifest::default()
        };
        let entry = manifest
            .files
            .entry(variant.dir_name().to_string())
            .or_default();
        for f in files {
            let rel = f
                .strip_prefix(&self.out)
                .unwrap_or(f)
                .to_string_lossy()
                .replace('\\', "/");
            if !entry.contains(&rel) {
                entry.push(rel);
            }
        }
        entry.sort();
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )
        .map_err(|e| SteerError::io(&path, e))?;
        Ok(())
    }

    fn load_transformation_checked(&self, path: &Path) -> Result<Transformation> {
        persist::load_transformation(path, Some(self.config.network.bottleneck))
    }

    fn assets_for(&self, variant: AssetVariant, concepts: &[String]) -> Result<GenerationAssets> {
        let mut assets = GenerationAssets::default();
        for concept in concepts {
            let modules = match variant {
                AssetVariant::Dual => {
                    let c = self.load_transformation_checked(&self.transformation_path(
                        variant,
                        concept,
                        Role::Concept,
                    ))?;
                    let s = self.load_transformation_checked(&self.transformation_path(
                        variant,
                        concept,
                        Role::Semantic,
                    ))?;
                    SteerModules::Pair {
                        concept: c,
                        semantic: s,
                    }
                }
                AssetVariant::ConceptOnly => SteerModules::ConceptOnly {
                    concept: self.load_transformation_checked(&self.transformation_path(
                        variant,
                        concept,
                        Role::Concept,
                    ))?,
                },
                AssetVariant::Shared => SteerModules::Shared {
                    shared: self.load_transformation_checked(&self.transformation_path(
                        variant,
                        concept,
                        Role::Shared,
                    ))?,
                },
            };
            assets.per_concept.insert(concept.clone(), modules);
        }
        Ok(assets)
    }

    fn safety_bundle(&self, variant: AssetVariant) -> Result<SafetyBundle> {
        let path = self.manifest_path();
        if !path.exists() {
            return Err(SteerError::MissingArtifact(format!(
                "{} (steer the safety concepts first)",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| SteerError::io(&path, e))?;
        let manifest: SafetyManifest = serde_json::from_str(&text)
            .map_err(|e| SteerError::Format(format!("safety manifest: {e}")))?;
        let files = manifest.files.get(variant.dir_name()).ok_or_else(|| {
            SteerError::MissingArtifact(format!(
                "safety manifest has no `{}` entries",
                variant.dir_name()
            ))
        })?;
        let mut members = Vec::new();
        for rel in files {
            members.push(self.load_transformation_checked(&self.out.join(rel))?);
        }
        SafetyBundle::new(members)
    }

    /// Tag (and output file stem) for a generation request.
    pub fn tag_for(spec: &GenerateSpec) -> String {
        match spec {
            GenerateSpec::Base => "base".to_string(),
            GenerateSpec::Fair(v) => format!("fair{}", v.suffix()),
            GenerateSpec::Fixed(c, v) => format!("fixed_{c}{}", v.suffix()),
            GenerateSpec::Safety(v) => format!("safety{}", v.suffix()),
        }
    }

    /// Generate `n` samples and write samples/<tag>.csv with columns
    /// x…, drawn_concept, oracle_label.
    pub fn generate(&self, spec: &GenerateSpec, n: usize, seed: Option<u64>) -> Result<PathBuf> {
        self.ensure_layout()?;
        let net = self.load_network()?;
        let (sched, grid) = self.build_tables()?;
        let oracle = OracleClassifier::new(&self.world)?;
        // Generation always guides; `chain_cfg` only gates training chains.
        let guidance = Some(GuidanceConfig::new(
            self.config.guidance.scale,
            net.vocab().uncond().0,
        )?);

        let concepts: Vec<String> = self.world.sensitive_concepts();
        let (mode, assets) = match spec {
            GenerateSpec::Base => (GenerateMode::Base, GenerationAssets::default()),
            GenerateSpec::Fair(v) => (GenerateMode::FairRandom, self.assets_for(*v, &concepts)?),
            GenerateSpec::Fixed(concept, v) => {
                if !self.world.concept_modes.contains_key(concept) {
                    return Err(SteerError::UnknownConcept(concept.clone()));
                }
                (
                    GenerateMode::FixedConcept(concept.clone()),
                    self.assets_for(*v, std::slice::from_ref(concept))?,
                )
            }
            GenerateSpec::Safety(v) => {
                let bundle = self.safety_bundle(*v)?;
                (
                    GenerateMode::Safety,
                    GenerationAssets {
                        per_concept: BTreeMap::new(),
                        bundle: Some(bundle),
                    },
                )
            }
        };

        let rng = Rng::seed_from(seed.unwrap_or(self.config.seed));
        let samples = generate(
            &net,
            &self.world.category,
            &assets,
            &mode,
            n,
            guidance,
            self.config.policy,
            &grid,
            &sched,
            &rng,
        )?;

        let dir = self.samples_dir();
        std::fs::create_dir_all(&dir).map_err(|e| SteerError::io(&dir, e))?;
        let path = dir.join(format!("{}.csv", Self::tag_for(spec)));
        let mut csv = String::new();
        for d in 0..self.world.dimension {
            csv.push_str(&format!("x{d},"));
        }
        csv.push_str("drawn_concept,oracle_label\n");
        for s in &samples {
            for v in &s.x {
                csv.push_str(&format!("{v},"));
            }
            let label = oracle.classify(&s.x)?;
            csv.push_str(&format!("{},{label}\n", s.concept.as_deref().unwrap_or("")));
        }
        std::fs::write(&path, csv).map_err(|e| SteerError::io(&path, e))?;
        Ok(path)
    }

    /// Audit every generated sample set and write the report files.
    pub fn evaluate(&self) -> Result<(Report, ReportPaths)> {
        build_report(&self.world, &self.samples_dir(), &self.out, self.config.seed)
    }
}
