//! Report assembly: collect sample sets from a run directory, audit them
//! against the world's oracle, and emit report.json / report.csv plus an
//! SVG scatter for two-dimensional worlds. Output bytes are deterministic
//! for identical inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SteerError};
use crate::eval::{
    alignment_rate, audit_fairness, bootstrap_mode_conditional_upper, fidelity, safety_rate,
    FidelityReport,
};
use crate::numerics::Rng;
use crate::worlds::{neutral_reference, OracleClassifier, WorldSpec};

pub const REPORT_VERSION: u32 = 1;
/// Held-out world samples drawn as the fidelity reference.
pub const REFERENCE_SIZE: usize = 2000;
/// Bootstrap resamples for the base model's own sampling error.
pub const BOOTSTRAP_RESAMPLES: usize = 200;
/// Upper quantile reported for the bootstrap statistic.
pub const BOOTSTRAP_QUANTILE: f64 = 0.975;

/// One parsed samples.csv.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub tag: String,
    pub points: Vec<Vec<f64>>,
    pub drawn_concepts: Vec<Option<String>>,
}

impl SampleSet {
    /// Parse the samples.csv layout: x0,..,x{d-1},drawn_concept,oracle_label.
    pub fn read_csv(path: &Path, dimension: usize) -> Result<Self> {
        let tag = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("samples")
            .to_string();
        let text = std::fs::read_to_string(path).map_err(|e| SteerError::io(path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| SteerError::Format(format!("{}: empty file", path.display())))?;
        let expected_cols = dimension + 2;
        if header.split(',').count() != expected_cols {
            return Err(SteerError::Format(format!(
                "{}: expected {expected_cols} columns",
                path.display()
            )));
        }
        let mut points = Vec::new();
        let mut drawn = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != expected_cols {
                return Err(SteerError::Format(format!(
                    "{}: row {} has {} fields",
                    path.display(),
                    i + 2,
                    fields.len()
                )));
            }
            let mut x = Vec::with_capacity(dimension);
            for f in &fields[..dimension] {
                x.push(f.parse::<f64>().map_err(|_| {
                    SteerError::Format(format!("{}: bad float `{f}`", path.display()))
                })?);
            }
            points.push(x);
            drawn.push(match fields[dimension] {
                "" => None,
                c => Some(c.to_string()),
            });
        }
        Ok(SampleSet {
            tag,
            points,
            drawn_concepts: drawn,
        })
    }
}

/// Metrics for one sample set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SetReport {
    pub n: usize,
    pub counts: BTreeMap<String, usize>,
    pub rates: BTreeMap<String, f64>,
    pub deviation_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment_concept: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub safety_rate: Option<f64>,
    pub fidelity: FidelityReport,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub drawn_counts: BTreeMap<String, usize>,
}

/// The assembled run report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub world: String,
    pub category: String,
    pub reference_size: usize,
    /// Bootstrap upper quantile of the base set's mode-conditional energy
    /// distance (present when a `base` sample set exists).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_fidelity_upper: Option<f64>,
    pub sets: BTreeMap<String, SetReport>,
}

/// Paths written by [`build_report`].
#[derive(Clone, Debug)]
pub struct ReportPaths {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub svg: Option<PathBuf>,
}

fn analyze_set(
    set: &SampleSet,
    oracle: &OracleClassifier,
    reference: &[Vec<f64>],
) -> Result<SetReport> {
    let audit = audit_fairness(&set.points, oracle)?;
    let fid = fidelity(&set.points, reference, oracle)?;
    let is_safety = oracle.world().is_safety_world();

    let mut report = SetReport {
        n: set.points.len(),
        counts: audit.counts,
        rates: audit.rates,
        deviation_ratio: audit.delta,
        alignment_concept: None,
        alignment_rate: None,
        safety_rate: is_safety.then(|| safety_rate(&set.points, oracle)).transpose()?,
        fidelity: fid,
        drawn_counts: BTreeMap::new(),
    };

    for concept in set.drawn_concepts.iter().flatten() {
        *report.drawn_counts.entry(concept.clone()).or_insert(0) += 1;
    }

    if let Some(concept) = set.tag.strip_prefix("fixed_") {
        // Tag layout: fixed_<concept>[ _variantsuffix handled upstream ].
        let concept = concept.split("__").next().unwrap_or(concept).to_string();
        if oracle.world().concept_modes.contains_key(&concept) {
            report.alignment_rate = Some(alignment_rate(&set.points, oracle, &concept)?);
            report.alignment_concept = Some(concept);
        }
    }
    Ok(report)
}

/// Assemble and write report.json / report.csv / report.svg from every
/// samples CSV in `samples_dir`. `seed` drives the reference draw and the
/// bootstrap, so reports are reproducible.
pub fn build_report(
    world: &WorldSpec,
    samples_dir: &Path,
    out_dir: &Path,
    seed: u64,
) -> Result<(Report, ReportPaths)> {
    let oracle = OracleClassifier::new(world)?;
    let mut sample_files: Vec<PathBuf> = std::fs::read_dir(samples_dir)
        .map_err(|_| missing_artifacts_error(samples_dir))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    sample_files.sort();
    if sample_files.is_empty() {
        return Err(missing_artifacts_error(samples_dir));
    }

    let mut ref_rng = Rng::seed_from(seed.wrapping_add(777));
    let reference = neutral_reference(world, REFERENCE_SIZE, &mut ref_rng)?;

    let mut sets = BTreeMap::new();
    let mut base_points: Option<Vec<Vec<f64>>> = None;
    for path in &sample_files {
        let set = SampleSet::read_csv(path, world.dimension)?;
        if set.points.is_empty() {
            continue;
        }
        if set.tag == "base" {
            base_points = Some(set.points.clone());
        }
        let report = analyze_set(&set, &oracle, &reference)?;
        sets.insert(set.tag.clone(), report);
    }
    if sets.is_empty() {
        return Err(missing_artifacts_error(samples_dir));
    }

    let base_fidelity_upper = match &base_points {
        Some(points) => {
            let mut boot_rng = Rng::seed_from(seed.wrapping_add(778));
            Some(bootstrap_mode_conditional_upper(
                points,
                &reference,
                &oracle,
                BOOTSTRAP_RESAMPLES,
                BOOTSTRAP_QUANTILE,
                &mut boot_rng,
            )?)
        }
        None => None,
    };

    let report = Report {
        version: REPORT_VERSION,
        world: world.name.clone(),
        category: world.category.clone(),
        reference_size: REFERENCE_SIZE,
        base_fidelity_upper,
        sets,
    };

    std::fs::create_dir_all(out_dir).map_err(|e| SteerError::io(out_dir, e))?;
    let json_path = out_dir.join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report).expect("serializable"))
        .map_err(|e| SteerError::io(&json_path, e))?;

    let csv_path = out_dir.join("report.csv");
    std::fs::write(&csv_path, report_csv(&report)).map_err(|e| SteerError::io(&csv_path, e))?;

    let svg_path = if world.dimension == 2 {
        let path = out_dir.join("report.svg");
        let chosen = ["fair", "safety", "base"]
            .iter()
            .find(|t| report.sets.contains_key(**t))
            .map(|t| t.to_string())
            .or_else(|| report.sets.keys().next().cloned());
        if let Some(tag) = chosen {
            let set_points = SampleSet::read_csv(
                &samples_dir.join(format!("{tag}.csv")),
                world.dimension,
            )?;
            std::fs::write(&path, scatter_svg(world, &oracle, &reference, &set_points)?)
                .map_err(|e| SteerError::io(&path, e))?;
            Some(path)
        } else {
            None
        }
    } else {
        None
    };

    Ok((
        report,
        ReportPaths {
            json: json_path,
            csv: csv_path,
            svg: svg_path,
        },
    ))
}

fn missing_artifacts_error(samples_dir: &Path) -> SteerError {
    SteerError::MissingArtifact(format!(
        "no sample sets found; expected CSV files under {} (run `steerlab generate` first; \
         a full run needs at least samples/base.csv plus one steered set)",
        samples_dir.display()
    ))
}

fn report_csv(report: &Report) -> String {
    let mut out = String::from(
        "set,n,deviation_ratio,alignment_rate,safety_rate,pooled_energy_distance,mode_conditional_energy_distance\n",
    );
    for (tag, set) in &report.sets {
        out.push_str(&format!(
            "{tag},{},{},{},{},{},{}\n",
            set.n,
            set.deviation_ratio,
            set.alignment_rate.map_or(String::new(), |v| v.to_string()),
            set.safety_rate.map_or(String::new(), |v| v.to_string()),
            set.fidelity.energy_distance,
            set.fidelity.mode_conditional,
        ));
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn scatter_svg(
    world: &WorldSpec,
    oracle: &OracleClassifier,
    reference: &[Vec<f64>],
    set: &SampleSet,
) -> Result<String> {
    let width = 640.0;
    let height = 640.0;
    let all: Vec<&Vec<f64>> = reference.iter().chain(set.points.iter()).collect();
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &all {
        min_x = min_x.min(p[0]);
        max_x = max_x.max(p[0]);
        min_y = min_y.min(p[1]);
        max_y = max_y.max(p[1]);
    }
    let pad = 0.5;
    let sx = |x: f64| (x - min_x + pad) / (max_x - min_x + 2.0 * pad) * width;
    let sy = |y: f64| height - (y - min_y + pad) / (max_y - min_y + 2.0 * pad) * height;

    let attributes = world.attributes();
    let color_of = |label: &str| {
        PALETTE[attributes.iter().position(|a| *a == label).unwrap_or(0) % PALETTE.len()]
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n<!-- grey: world reference; colored: generated set `{}` by oracle label -->\n",
        set.tag
    ));
    for p in reference {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\" fill=\"#bbbbbb\" fill-opacity=\"0.5\"/>\n",
            sx(p[0]),
            sy(p[1])
        ));
    }
    for p in &set.points {
        let label = oracle.classify(p)?;
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.8\" fill=\"{}\" fill-opacity=\"0.6\"/>\n",
            sx(p[0]),
            sy(p[1]),
            color_of(label)
        ));
    }
    for (i, attr) in attributes.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"12\" y=\"{}\" font-family=\"monospace\" font-size=\"13\" fill=\"{}\">{attr}</text>\n",
            20 + 16 * i,
            PALETTE[i % PALETTE.len()]
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
