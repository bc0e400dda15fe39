//! Quantitative evaluation: the deviation ratio, alignment and safety rates,
//! and an energy-distance fidelity proxy with per-mode coverage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SteerError};
use crate::numerics::Rng;
use crate::worlds::OracleClassifier;

/// Per-category attribute tallies and the deviation ratio Δ.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeviationReport {
    pub category: String,
    pub attribute_count: usize,
    pub total: usize,
    pub counts: BTreeMap<String, usize>,
    pub rates: BTreeMap<String, f64>,
    pub delta: f64,
}

/// Δ = max_c |N_c/N − 1/C| / (1 − 1/C); 0 is balanced, 1 fully collapsed.
pub fn deviation_ratio(counts: &[usize]) -> Result<f64> {
    let c = counts.len();
    if c < 2 {
        return Err(SteerError::Config(format!(
            "deviation ratio needs at least 2 attributes, got {c}"
        )));
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(SteerError::Config("deviation ratio needs at least 1 sample".into()));
    }
    let c_f = c as f64;
    let n_f = n as f64;
    let max_dev = counts
        .iter()
        .map(|&k| (k as f64 / n_f - 1.0 / c_f).abs())
        .fold(0.0_f64, f64::max);
    Ok(max_dev / (1.0 - 1.0 / c_f))
}

/// Classify every sample with the oracle and compute Δ over the world's
/// attributes.
pub fn audit_fairness(samples: &[Vec<f64>], oracle: &OracleClassifier) -> Result<DeviationReport> {
    if samples.is_empty() {
        return Err(SteerError::Config("audit needs at least one sample".into()));
    }
    let attributes = oracle.world().attributes();
    let mut counts: BTreeMap<String, usize> =
        attributes.iter().map(|a| (a.to_string(), 0)).collect();
    for x in samples {
        let label = oracle.classify(x)?;
        *counts.get_mut(label).expect("oracle labels are world attributes") += 1;
    }
    let total = samples.len();
    let ordered: Vec<usize> = attributes
        .iter()
        .map(|a| counts[&a.to_string()])
        .collect();
    let delta = deviation_ratio(&ordered)?;
    let rates = counts
        .iter()
        .map(|(k, v)| (k.clone(), *v as f64 / total as f64))
        .collect();
    Ok(DeviationReport {
        category: oracle.world().category.clone(),
        attribute_count: attributes.len(),
        total,
        counts,
        rates,
        delta,
    })
}

/// Fraction of samples the oracle classifies into an unsafe attribute.
pub fn safety_rate(samples: &[Vec<f64>], oracle: &OracleClassifier) -> Result<f64> {
    if samples.is_empty() {
        return Err(SteerError::Config("safety rate needs at least one sample".into()));
    }
    let mut unsafe_count = 0usize;
    for x in samples {
        if oracle.is_unsafe(oracle.classify(x)?) {
            unsafe_count += 1;
        }
    }
    Ok(unsafe_count as f64 / samples.len() as f64)
}

/// Fraction of samples the oracle assigns to `concept` (alignment rate).
pub fn alignment_rate(
    samples: &[Vec<f64>],
    oracle: &OracleClassifier,
    concept: &str,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(SteerError::Config("alignment rate needs at least one sample".into()));
    }
    let mut hits = 0usize;
    for x in samples {
        if oracle.classify(x)? == concept {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Energy distance between empirical samples:
/// 2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖ with V-statistic (diagonal-inclusive) means,
/// so identical sample sets give exactly zero.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(SteerError::Config("energy distance needs nonempty samples".into()));
    }
    let mean_pair = |x: &[Vec<f64>], y: &[Vec<f64>]| -> f64 {
        let mut acc = 0.0;
        for xi in x {
            for yj in y {
                acc += euclidean(xi, yj);
            }
        }
        acc / (x.len() as f64 * y.len() as f64)
    };
    Ok(2.0 * mean_pair(a, b) - mean_pair(a, a) - mean_pair(b, b))
}

/// Distributional fidelity proxy: pooled energy distance plus the
/// mode-conditional form that stays insensitive to intended rebalancing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Energy distance between the pooled sample sets.
    pub energy_distance: f64,
    /// Generated-share-weighted mean of per-mode conditional energy distances.
    pub mode_conditional: f64,
    /// Conditional energy distance per attribute (attributes present in both
    /// sets only).
    pub per_mode: BTreeMap<String, f64>,
    /// Fraction of generated samples per attribute.
    pub coverage: BTreeMap<String, f64>,
}

/// Compare generated samples against a reference set. Both sets are split by
/// oracle label; each attribute present in both contributes its conditional
/// energy distance, weighted by the generated share.
pub fn fidelity(
    generated: &[Vec<f64>],
    reference: &[Vec<f64>],
    oracle: &OracleClassifier,
) -> Result<FidelityReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(SteerError::Config("fidelity needs nonempty sample sets".into()));
    }
    let split = |samples: &[Vec<f64>]| -> Result<BTreeMap<String, Vec<Vec<f64>>>> {
        let mut by_label: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for x in samples {
            by_label
                .entry(oracle.classify(x)?.to_string())
                .or_default()
                .push(x.clone());
        }
        Ok(by_label)
    };
    let gen_split = split(generated)?;
    let ref_split = split(reference)?;

    let mut per_mode = BTreeMap::new();
    let mut coverage = BTreeMap::new();
    let mut weighted = 0.0;
    let mut weight_total = 0.0;
    for (label, gen_side) in &gen_split {
        let share = gen_side.len() as f64 / generated.len() as f64;
        coverage.insert(label.clone(), share);
        if let Some(ref_side) = ref_split.get(label) {
            let ed = energy_distance(gen_side, ref_side)?;
            per_mode.insert(label.clone(), ed);
            weighted += share * ed;
            weight_total += share;
        }
    }
    let mode_conditional = if weight_total > 0.0 {
        weighted / weight_total
    } else {
        f64::INFINITY
    };
    Ok(FidelityReport {
        energy_distance: energy_distance(generated, reference)?,
        mode_conditional,
        per_mode,
        coverage,
    })
}

/// Upper quantile of the fidelity statistic under bootstrap resampling of the
/// generated set; used to turn "own sampling error" into a threshold.
pub fn bootstrap_mode_conditional_upper(
    generated: &[Vec<f64>],
    reference: &[Vec<f64>],
    oracle: &OracleClassifier,
    resamples: usize,
    quantile: f64,
    rng: &mut Rng,
) -> Result<f64> {
    if resamples == 0 {
        return Err(SteerError::Config("bootstrap needs at least 1 resample".into()));
    }
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let draw: Vec<Vec<f64>> = (0..generated.len())
            .map(|_| generated[rng.below(generated.len())].clone())
            .collect();
        stats.push(fidelity(&draw, reference, oracle)?.mode_conditional);
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    let idx = ((resamples as f64 - 1.0) * quantile).round() as usize;
    Ok(stats[idx.min(resamples - 1)])
}
