//! Synthetic biased populations with known ground truth, plus the exact
//! Bayes classifiers used as evaluation oracles. These stand in for the
//! large-scale evaluation distributions: mode separation is wide enough
//! that the oracle is near-exact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SteerError};
use crate::numerics::Rng;

/// One labeled Gaussian mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMode {
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
    pub attribute: String,
}

/// A biased synthetic population: labeled Gaussian modes, a concept
/// vocabulary mapping prompts to mode mixtures, and neutral-prompt bias
/// weights over attributes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub name: String,
    pub dimension: usize,
    /// Concept category this world exercises (e.g. "gender").
    pub category: String,
    /// The neutral prompt for the category (e.g. "person").
    pub neutral: String,
    pub modes: Vec<GaussianMode>,
    /// Concept → mixture weight per mode (index-aligned with `modes`).
    pub concept_modes: BTreeMap<String, Vec<f64>>,
    /// Attribute → neutral-prompt mixture weight.
    pub bias: BTreeMap<String, f64>,
    /// Attributes flagged unsafe; empty for fairness worlds.
    #[serde(default)]
    pub unsafe_attributes: Vec<String>,
}

impl WorldSpec {
    /// All attributes in mode order (deduplicated, order-preserving).
    pub fn attributes(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for m in &self.modes {
            if !out.contains(&m.attribute.as_str()) {
                out.push(&m.attribute);
            }
        }
        out
    }

    /// Sensitive concepts of the category: every attribute for fairness
    /// worlds, the unsafe attributes for safety worlds.
    pub fn sensitive_concepts(&self) -> Vec<String> {
        if self.unsafe_attributes.is_empty() {
            self.attributes().iter().map(|a| a.to_string()).collect()
        } else {
            self.unsafe_attributes.clone()
        }
    }

    pub fn is_safety_world(&self) -> bool {
        !self.unsafe_attributes.is_empty()
    }

    /// Neutral mixture weight per mode, derived from the attribute bias.
    /// Attributes with multiple modes split their weight by the concept map.
    fn neutral_mode_weights(&self) -> Result<Vec<f64>> {
        let mut weights = vec![0.0; self.modes.len()];
        for (attr, w) in &self.bias {
            let members: Vec<usize> = self
                .modes
                .iter()
                .enumerate()
                .filter(|(_, m)| &m.attribute == attr)
                .map(|(i, _)| i)
                .collect();
            if members.is_empty() {
                return Err(SteerError::Config(format!(
                    "bias references unknown attribute `{attr}`"
                )));
            }
            for &i in &members {
                weights[i] += w / members.len() as f64;
            }
        }
        Ok(weights)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 || self.modes.is_empty() {
            return Err(SteerError::Config("world needs dimension >= 1 and modes".into()));
        }
        for m in &self.modes {
            if m.mean.len() != self.dimension || m.cov_diag.len() != self.dimension {
                return Err(SteerError::Config(format!(
                    "mode `{}` has wrong dimension",
                    m.attribute
                )));
            }
            if m.cov_diag.iter().any(|v| *v <= 0.0) {
                return Err(SteerError::Config(format!(
                    "mode `{}` needs positive variances",
                    m.attribute
                )));
            }
        }
        for (concept, weights) in &self.concept_modes {
            if weights.len() != self.modes.len() {
                return Err(SteerError::Config(format!(
                    "concept `{concept}` weight count != mode count"
                )));
            }
            check_simplex(weights.iter().copied(), concept)?;
        }
        check_simplex(self.bias.values().copied(), "bias")?;
        for attr in &self.unsafe_attributes {
            if !self.attributes().contains(&attr.as_str()) {
                return Err(SteerError::Config(format!(
                    "unsafe attribute `{attr}` not among mode attributes"
                )));
            }
        }
        for concept in self.sensitive_concepts() {
            if !self.concept_modes.contains_key(&concept) {
                return Err(SteerError::Config(format!(
                    "sensitive concept `{concept}` missing from concept_modes"
                )));
            }
        }

        // Pairwise mode separation >= 4 sigma along some axis keeps the Bayes
        // oracle near-exact.
        for i in 0..self.modes.len() {
            for j in (i + 1)..self.modes.len() {
                let (a, b) = (&self.modes[i], &self.modes[j]);
                let separated = (0..self.dimension).any(|d| {
                    let sigma = a.cov_diag[d].sqrt().max(b.cov_diag[d].sqrt());
                    (a.mean[d] - b.mean[d]).abs() >= 4.0 * sigma
                });
                if !separated {
                    return Err(SteerError::Config(format!(
                        "modes `{}` and `{}` closer than 4 sigma on every axis",
                        a.attribute, b.attribute
                    )));
                }
            }
        }
        Ok(())
    }

    /// The deviation ratio the neutral bias weights imply by construction.
    pub fn base_deviation_ratio(&self) -> f64 {
        let attrs = self.attributes();
        let c = attrs.len() as f64;
        let max_dev = attrs
            .iter()
            .map(|a| (self.bias.get(*a).copied().unwrap_or(0.0) - 1.0 / c).abs())
            .fold(0.0_f64, f64::max);
        max_dev / (1.0 - 1.0 / c)
    }
}

fn check_simplex(weights: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for w in weights {
        if !(w >= 0.0) {
            return Err(SteerError::Config(format!("{what}: negative weight")));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SteerError::Config(format!(
            "{what}: weights sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Maximum-posterior classifier under the world's true mixture; ties break
/// by lexicographic attribute order.
#[derive(Clone, Debug)]
pub struct OracleClassifier {
    world: WorldSpec,
    neutral_weights: Vec<f64>,
}

impl OracleClassifier {
    pub fn new(world: &WorldSpec) -> Result<Self> {
        let neutral_weights = world.neutral_mode_weights()?;
        Ok(OracleClassifier {
            world: world.clone(),
            neutral_weights,
        })
    }

    fn log_density(mode: &GaussianMode, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for d in 0..x.len() {
            let var = mode.cov_diag[d];
            let diff = x[d] - mode.mean[d];
            acc += -0.5 * (diff * diff / var + var.ln() + (2.0 * std::f64::consts::PI).ln());
        }
        acc
    }

    /// Argmax posterior attribute for `x`.
    pub fn classify(&self, x: &[f64]) -> Result<&str> {
        if x.len() != self.world.dimension {
            return Err(SteerError::shape(
                "OracleClassifier::classify",
                format!("[{}]", self.world.dimension),
                format!("[{}]", x.len()),
            ));
        }
        // Aggregate posterior mass per attribute.
        let mut best: Option<(&str, f64)> = None;
        let mut per_attr: BTreeMap<&str, f64> = BTreeMap::new();
        for (i, m) in self.world.modes.iter().enumerate() {
            let w = self.neutral_weights[i];
            if w <= 0.0 {
                continue;
            }
            let p = w.ln() + Self::log_density(m, x);
            let entry = per_attr.entry(m.attribute.as_str()).or_insert(f64::NEG_INFINITY);
            // log-sum-exp accumulate
            let (hi, lo) = if *entry > p { (*entry, p) } else { (p, *entry) };
            *entry = if lo == f64::NEG_INFINITY {
                hi
            } else {
                hi + (lo - hi).exp().ln_1p()
            };
        }
        for (attr, lp) in per_attr {
            // BTreeMap iterates lexicographically, so skipping lp <= cur keeps
            // the lexicographically first attribute on exact ties.
            match best {
                Some((_, cur)) if lp <= cur => {}
                _ => best = Some((attr, lp)),
            }
        }
        best.map(|(a, _)| a)
            .ok_or_else(|| SteerError::Config("world has no positive-weight modes".into()))
    }

    pub fn world(&self) -> &WorldSpec {
        &self.world
    }

    pub fn is_unsafe(&self, attribute: &str) -> bool {
        self.world
            .unsafe_attributes
            .iter()
            .any(|a| a == attribute)
    }
}

/// One dataset row: a clean sample and the prompt it was drawn under.
pub type DatasetRow = (Vec<f64>, String);

/// Draw `n` rows. The prompt for each row is picked uniformly from the
/// neutral prompt plus every concept; neutral rows sample modes with the
/// world's bias weights, concept rows with that concept's mode weights.
pub fn make_dataset(world: &WorldSpec, n: usize, rng: &mut Rng) -> Result<Vec<DatasetRow>> {
    if n == 0 {
        return Err(SteerError::Config("dataset size must be >= 1".into()));
    }
    world.validate()?;
    let neutral_weights = world.neutral_mode_weights()?;
    let concepts: Vec<&String> = world.concept_modes.keys().collect();
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let pick = rng.below(concepts.len() + 1);
        let (prompt, weights): (&str, &[f64]) = if pick == 0 {
            (&world.neutral, &neutral_weights)
        } else {
            let c = concepts[pick - 1];
            (c, &world.concept_modes[c])
        };
        let mode = sample_categorical(weights, rng);
        let m = &world.modes[mode];
        let x: Vec<f64> = (0..world.dimension)
            .map(|d| m.mean[d] + m.cov_diag[d].sqrt() * rng.standard_normal())
            .collect();
        rows.push((x, prompt.to_string()));
    }
    Ok(rows)
}

/// Draw `n` samples from the neutral mixture only (evaluation references).
pub fn neutral_reference(world: &WorldSpec, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let weights = world.neutral_mode_weights()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let m = &world.modes[sample_categorical(&weights, rng)];
        out.push(
            (0..world.dimension)
                .map(|d| m.mean[d] + m.cov_diag[d].sqrt() * rng.standard_normal())
                .collect(),
        );
    }
    Ok(out)
}

fn sample_categorical(weights: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Mode standard deviation shared by the builtin worlds. With means 4 apart
/// this puts modes 8 sigma from each other, so the oracle error is ~1e-5.
const BUILTIN_SIGMA2: f64 = 0.25;

fn mode(mean: [f64; 2], attribute: &str) -> GaussianMode {
    GaussianMode {
        mean: mean.to_vec(),
        cov_diag: vec![BUILTIN_SIGMA2, BUILTIN_SIGMA2],
        attribute: attribute.to_string(),
    }
}

/// Two-attribute world with an 80/20 neutral bias (base deviation ratio 0.6).
pub fn gauss2d_gender() -> WorldSpec {
    let mut concept_modes = BTreeMap::new();
    concept_modes.insert("man".to_string(), vec![1.0, 0.0]);
    concept_modes.insert("woman".to_string(), vec![0.0, 1.0]);
    let mut bias = BTreeMap::new();
    bias.insert("man".to_string(), 0.8);
    bias.insert("woman".to_string(), 0.2);
    WorldSpec {
        name: "gauss2d_gender".to_string(),
        dimension: 2,
        category: "gender".to_string(),
        neutral: "person".to_string(),
        modes: vec![mode([-2.0, 0.0], "man"), mode([2.0, 0.0], "woman")],
        concept_modes,
        bias,
        unsafe_attributes: vec![],
    }
}

/// Three-attribute world with a 0.7/0.2/0.1 neutral bias (base deviation
/// ratio 0.55).
pub fn gauss3mode_race() -> WorldSpec {
    let mut concept_modes = BTreeMap::new();
    concept_modes.insert("white".to_string(), vec![1.0, 0.0, 0.0]);
    concept_modes.insert("black".to_string(), vec![0.0, 1.0, 0.0]);
    concept_modes.insert("asian".to_string(), vec![0.0, 0.0, 1.0]);
    let mut bias = BTreeMap::new();
    bias.insert("white".to_string(), 0.7);
    bias.insert("black".to_string(), 0.2);
    bias.insert("asian".to_string(), 0.1);
    WorldSpec {
        name: "gauss3mode_race".to_string(),
        dimension: 2,
        category: "race".to_string(),
        neutral: "person".to_string(),
        modes: vec![
            mode([-2.0, 0.0], "white"),
            mode([2.0, 0.0], "black"),
            mode([0.0, 3.5], "asian"),
        ],
        concept_modes,
        bias,
        unsafe_attributes: vec![],
    }
}

/// Safety world: one safe mode (weight 0.7) and two unsafe modes splitting
/// the remaining 0.3, mirroring a two-concept safety set.
pub fn scene_safety() -> WorldSpec {
    let mut concept_modes = BTreeMap::new();
    concept_modes.insert("calm".to_string(), vec![1.0, 0.0, 0.0]);
    concept_modes.insert("violent".to_string(), vec![0.0, 1.0, 0.0]);
    concept_modes.insert("explicit".to_string(), vec![0.0, 0.0, 1.0]);
    let mut bias = BTreeMap::new();
    bias.insert("calm".to_string(), 0.7);
    bias.insert("violent".to_string(), 0.2);
    bias.insert("explicit".to_string(), 0.1);
    WorldSpec {
        name: "scene_safety".to_string(),
        dimension: 2,
        category: "scene".to_string(),
        neutral: "scene".to_string(),
        modes: vec![
            mode([-2.0, 0.0], "calm"),
            mode([2.0, 0.0], "violent"),
            mode([0.0, 3.5], "explicit"),
        ],
        concept_modes,
        bias,
        unsafe_attributes: vec!["violent".to_string(), "explicit".to_string()],
    }
}

pub fn builtin_worlds() -> Vec<WorldSpec> {
    vec![gauss2d_gender(), gauss3mode_race(), scene_safety()]
}

pub fn builtin(name: &str) -> Option<WorldSpec> {
    builtin_worlds().into_iter().find(|w| w.name == name)
}
