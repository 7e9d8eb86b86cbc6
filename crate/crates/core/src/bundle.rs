//! On-disk dataset bundles: a normalized series, its scoring targets, the
//! road graph, the scale sidecar and a manifest.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    make_windows, normalize, read_graph, read_series, split_ranges, write_graph, write_series, PredefinedGraph,
    ScaleSidecar, TrafficSeries, KERNEL_THRESHOLD, SPLIT_RATIOS,
};
use crate::error::{Error, Result};
use crate::masking::{inject_splits, MissingScenario, ScenarioKind};
use crate::model::ModelConfig;

pub const SERIES_FILE: &str = "series.csv";
pub const TARGETS_FILE: &str = "targets.csv";
pub const GRAPH_FILE: &str = "graph.csv";
pub const SCALE_FILE: &str = "scale.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionInfo {
    pub kind: ScenarioKind,
    pub rate: f64,
    pub seed: u64,
    pub realized_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub nodes: usize,
    pub timestamps: usize,
    pub step_minutes: u32,
    pub scale_factor: f64,
    /// Chronological `[start, end)` timestamp ranges of train/val/test.
    pub split_ranges: [[usize; 2]; 3],
    /// Window counts under the default model configuration, if it fits.
    pub default_windows: Option<SplitSizes>,
    pub missing_fraction: f64,
    pub injection: Option<InjectionInfo>,
    /// SHA-256 of every data file.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    /// Normalized model inputs.
    pub series: TrafficSeries,
    /// Normalized scoring targets; differs from `series` on the test range
    /// after injection.
    pub targets: TrafficSeries,
    pub graph: PredefinedGraph,
    pub injection: Option<InjectionInfo>,
}

/// Hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Schema(e.to_string()))
}

impl Bundle {
    /// Ingests raw CSVs and scales by the training-range maximum.
    pub fn prepare(series_file: &Path, graph_file: &Path) -> Result<Self> {
        for p in [series_file, graph_file] {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        let raw = read_series(series_file)?;
        let graph = read_graph(graph_file, &raw.node_ids, KERNEL_THRESHOLD)?;
        let series = normalize(&raw, SPLIT_RATIOS[0])?;
        Ok(Self {
            targets: series.clone(),
            series,
            graph,
            injection: None,
        })
    }

    pub fn ranges(&self) -> [std::ops::Range<usize>; 3] {
        split_ranges(self.series.len(), SPLIT_RATIOS)
    }

    /// Injects a missing-value scenario into every split of the inputs;
    /// test targets keep their observations.
    pub fn inject(&self, scenario: &MissingScenario, tau: usize) -> Result<Self> {
        let ranges = self.ranges();
        let mut inj = inject_splits(&self.series, scenario, tau, &ranges)?;
        // targets keep any earlier restoration of the test range
        inj.targets.splice_time(ranges[2].start, &self.targets.slice_time(ranges[2].clone()));
        Ok(Self {
            series: inj.inputs,
            targets: inj.targets,
            graph: self.graph.clone(),
            injection: Some(InjectionInfo {
                kind: scenario.kind,
                rate: scenario.rate,
                seed: scenario.seed,
                realized_rate: inj.realized_rate,
            }),
        })
    }

    /// Scenario label and rate used in metric reports.
    pub fn condition(&self) -> (String, f64) {
        match &self.injection {
            Some(i) => (i.kind.name().to_string(), i.rate),
            None => ("none".to_string(), 0.0),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<BundleManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_series(&self.series, &dir.join(SERIES_FILE))?;
        write_series(&self.targets, &dir.join(TARGETS_FILE))?;
        write_graph(&self.graph, &self.series.node_ids, &dir.join(GRAPH_FILE))?;
        let scale = ScaleSidecar {
            scale_factor: self.series.scale_factor,
        };
        std::fs::write(dir.join(SCALE_FILE), to_json(&scale)?).map_err(|e| Error::io(dir.join(SCALE_FILE), e))?;
        let mut files = BTreeMap::new();
        for f in [SERIES_FILE, TARGETS_FILE, GRAPH_FILE, SCALE_FILE] {
            files.insert(f.to_string(), sha256_file(&dir.join(f))?);
        }
        let ranges = self.ranges();
        let default_windows = make_windows(
            Arc::new(self.series.clone()),
            Arc::new(self.targets.clone()),
            ModelConfig::default().window_spec(),
            SPLIT_RATIOS,
        )
        .ok()
        .map(|s| SplitSizes {
            train: s.train.len(),
            val: s.val.len(),
            test: s.test.len(),
        });
        let manifest = BundleManifest {
            nodes: self.series.num_nodes(),
            timestamps: self.series.len(),
            step_minutes: self.series.step_minutes,
            scale_factor: self.series.scale_factor,
            split_ranges: ranges.map(|r| [r.start, r.end]),
            default_windows,
            missing_fraction: self.series.missing_fraction(),
            injection: self.injection.clone(),
            files,
        };
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, to_json(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(Error::Config(format!(
                "{} is not a bundle (no {MANIFEST_FILE})",
                dir.display()
            )));
        }
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: BundleManifest =
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", manifest_path.display())))?;
        let scale_path = dir.join(SCALE_FILE);
        let text = std::fs::read_to_string(&scale_path).map_err(|e| Error::io(&scale_path, e))?;
        let scale: ScaleSidecar =
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", scale_path.display())))?;
        let load = |name: &str| -> Result<TrafficSeries> {
            let mut s = read_series(&dir.join(name))?;
            s.scale_factor = scale.scale_factor;
            s.normalized = true;
            Ok(s)
        };
        let series = load(SERIES_FILE)?;
        let targets = load(TARGETS_FILE)?;
        if targets.values.dim() != series.values.dim() {
            return Err(Error::Shape("bundle targets and series differ in shape".into()));
        }
        let graph = read_graph(&dir.join(GRAPH_FILE), &series.node_ids, KERNEL_THRESHOLD)?;
        Ok(Self {
            series,
            targets,
            graph,
            injection: manifest.injection,
        })
    }
}
