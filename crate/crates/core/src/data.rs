//! Series and graph ingestion, normalization, chronological splits, and
//! window enumeration with multi-scale history indices.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, NaiveDateTime};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node × feature × time observations with an aligned 0/1 mask.
///
/// Missing entries are stored as exactly 0 with mask 0; an observed zero has
/// mask 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficSeries {
    /// Shape `(N, F, T)`.
    pub values: Array3<f64>,
    /// Shape `(N, F, T)`, entries 0.0 or 1.0.
    pub mask: Array3<f64>,
    pub node_ids: Vec<String>,
    pub timestamps: Vec<String>,
    /// Label of the first CSV column.
    pub time_header: String,
    pub step_minutes: u32,
    /// Divisor applied by [`normalize`]; 1.0 for raw data.
    pub scale_factor: f64,
    pub normalized: bool,
}

impl TrafficSeries {
    /// Builds a series from values and mask, zeroing values where the mask is 0.
    pub fn new(values: Array3<f64>, mask: Array3<f64>, node_ids: Vec<String>) -> Result<Self> {
        if values.dim() != mask.dim() {
            return Err(Error::Shape(format!(
                "values {:?} vs mask {:?}",
                values.dim(),
                mask.dim()
            )));
        }
        let (n, _, t) = values.dim();
        if node_ids.len() != n {
            return Err(Error::Shape(format!("{} node ids for {n} nodes", node_ids.len())));
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Schema("mask entries must be 0 or 1".into()));
        }
        let mut values = values;
        ndarray::Zip::from(&mut values).and(&mask).for_each(|v, &m| {
            if m == 0.0 {
                *v = 0.0
            }
        });
        Ok(Self {
            values,
            mask,
            node_ids,
            timestamps: (0..t).map(|i| i.to_string()).collect(),
            time_header: "timestamp".into(),
            step_minutes: 5,
            scale_factor: 1.0,
            normalized: false,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.values.dim().0
    }

    pub fn num_features(&self) -> usize {
        self.values.dim().1
    }

    pub fn len(&self) -> usize {
        self.values.dim().2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn missing_fraction(&self) -> f64 {
        1.0 - self.mask.mean().unwrap_or(1.0)
    }

    /// Fraction of cells that are missing or observed as exactly zero.
    pub fn zero_or_missing_fraction(&self) -> f64 {
        let total = self.values.len();
        if total == 0 {
            return 0.0;
        }
        let zeros = self.values.iter().filter(|&&v| v == 0.0).count();
        zeros as f64 / total as f64
    }

    /// Copy restricted to the timestamps in `range`.
    pub fn slice_time(&self, range: Range<usize>) -> Self {
        use ndarray::s;
        Self {
            values: self.values.slice(s![.., .., range.clone()]).to_owned(),
            mask: self.mask.slice(s![.., .., range.clone()]).to_owned(),
            node_ids: self.node_ids.clone(),
            timestamps: self.timestamps[range].to_vec(),
            time_header: self.time_header.clone(),
            step_minutes: self.step_minutes,
            scale_factor: self.scale_factor,
            normalized: self.normalized,
        }
    }

    /// Overwrites timestamps `offset ..` with `part`.
    pub fn splice_time(&mut self, offset: usize, part: &TrafficSeries) {
        use ndarray::s;
        let len = part.len();
        self.values
            .slice_mut(s![.., .., offset..offset + len])
            .assign(&part.values);
        self.mask
            .slice_mut(s![.., .., offset..offset + len])
            .assign(&part.mask);
    }

    /// Converts a normalized value back to original units.
    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.scale_factor
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub distance: f64,
}

/// Directed weighted road graph over the sensor nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct PredefinedGraph {
    pub adjacency: Array2<f64>,
    pub edges: Vec<Edge>,
    /// Kernel width: population standard deviation of all edge distances.
    pub sigma: f64,
    pub kappa: f64,
}

/// Default sparsity threshold of the distance kernel.
pub const KERNEL_THRESHOLD: f64 = 0.1;

impl PredefinedGraph {
    /// Gaussian-kernel adjacency `exp(-dist²/σ²)`, entries below `kappa`
    /// dropped, unit diagonal.
    pub fn from_edges(num_nodes: usize, edges: Vec<Edge>, kappa: f64) -> Result<Self> {
        for e in &edges {
            if e.from >= num_nodes || e.to >= num_nodes {
                return Err(Error::Schema(format!(
                    "edge {} -> {} references a node outside 0..{num_nodes}",
                    e.from, e.to
                )));
            }
            if !(e.distance >= 0.0) || !e.distance.is_finite() {
                return Err(Error::Schema(format!(
                    "edge {} -> {} has invalid distance {}",
                    e.from, e.to, e.distance
                )));
            }
        }
        let sigma = population_std(edges.iter().map(|e| e.distance));
        let mut adjacency = Array2::zeros((num_nodes, num_nodes));
        for e in &edges {
            let w = if e.distance == 0.0 {
                1.0
            } else if sigma == 0.0 {
                // every edge has the same length
                1.0
            } else {
                (-(e.distance * e.distance) / (sigma * sigma)).exp()
            };
            adjacency[[e.from, e.to]] = if w < kappa { 0.0 } else { w };
        }
        for i in 0..num_nodes {
            adjacency[[i, i]] = 1.0;
        }
        Ok(Self {
            adjacency,
            edges,
            sigma,
            kappa,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    /// Row-normalized transition matrix `A / rowsum(A)`.
    pub fn transition(&self) -> Result<Array2<f64>> {
        let mut p = self.adjacency.clone();
        for (i, mut row) in p.rows_mut().into_iter().enumerate() {
            let s = row.sum();
            if s <= 0.0 {
                return Err(Error::ZeroRowSum { row: i });
            }
            row.mapv_inplace(|v| v / s);
        }
        Ok(p)
    }

    /// Neighbors of every node sorted by road distance (either edge
    /// direction, shortest distance kept, self excluded).
    pub fn spatial_neighbors(&self) -> SpatialNeighbors {
        let n = self.num_nodes();
        let mut best: Vec<HashMap<usize, f64>> = vec![HashMap::new(); n];
        for e in &self.edges {
            if e.from == e.to {
                continue;
            }
            for (a, b) in [(e.from, e.to), (e.to, e.from)] {
                let d = best[a].entry(b).or_insert(f64::INFINITY);
                *d = d.min(e.distance);
            }
        }
        let lists = best
            .into_iter()
            .map(|m| {
                let mut v: Vec<(usize, f64)> = m.into_iter().collect();
                v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                v
            })
            .collect();
        let max_distance = self
            .edges
            .iter()
            .filter(|e| e.from != e.to)
            .map(|e| e.distance)
            .fold(0.0, f64::max);
        SpatialNeighbors {
            lists,
            max_distance,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialNeighbors {
    /// Per node: `(neighbor, distance)` in increasing distance.
    pub lists: Vec<Vec<(usize, f64)>>,
    /// Largest finite edge distance; the saturated spatial distance.
    pub max_distance: f64,
}

fn population_std(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    (xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt()
}

fn parse_time(s: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    None
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads a dense series CSV: header `time,<node ids...>`, one row per
/// timestamp, empty cell = missing.
pub fn read_series(path: &Path) -> Result<TrafficSeries> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 2 {
        return Err(Error::Schema(format!(
            "{}: expected a timestamp column and at least one node column",
            path.display()
        )));
    }
    let time_header = header[0].to_string();
    let node_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut seen = HashMap::new();
    for (i, id) in node_ids.iter().enumerate() {
        if let Some(j) = seen.insert(id.clone(), i) {
            return Err(Error::Schema(format!(
                "duplicate node id {id} in columns {} and {}",
                j + 1,
                i + 1
            )));
        }
    }
    let n = node_ids.len();
    let mut timestamps = Vec::new();
    let mut cells: Vec<Option<f64>> = Vec::new();
    let mut prev: Option<i64> = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != n + 1 {
            return Err(Error::Schema(format!(
                "{} row {}: {} fields, expected {}",
                path.display(),
                row + 2,
                rec.len(),
                n + 1
            )));
        }
        let ts = rec[0].to_string();
        let secs = parse_time(&ts).ok_or_else(|| {
            Error::Schema(format!("{} row {}: unparseable timestamp {ts:?}", path.display(), row + 2))
        })?;
        if let Some(p) = prev {
            if secs <= p {
                return Err(Error::Ordering {
                    row: row + 2,
                    previous: timestamps.last().cloned().unwrap_or_default(),
                    current: ts,
                });
            }
        }
        prev = Some(secs);
        timestamps.push(ts);
        for field in rec.iter().skip(1) {
            let field = field.trim();
            if field.is_empty() {
                cells.push(None);
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Schema(format!("{} row {}: bad number {field:?}", path.display(), row + 2))
                })?;
                if !v.is_finite() {
                    return Err(Error::Schema(format!(
                        "{} row {}: non-finite value {field:?}",
                        path.display(),
                        row + 2
                    )));
                }
                cells.push(Some(v));
            }
        }
    }
    let t = timestamps.len();
    let mut values = Array3::zeros((n, 1, t));
    let mut mask = Array3::zeros((n, 1, t));
    for ti in 0..t {
        for ni in 0..n {
            if let Some(v) = cells[ti * n + ni] {
                values[[ni, 0, ti]] = v;
                mask[[ni, 0, ti]] = 1.0;
            }
        }
    }
    let step_minutes = if t >= 2 {
        let a = parse_time(&timestamps[0]).unwrap_or(0);
        let b = parse_time(&timestamps[1]).unwrap_or(300);
        (((b - a) / 60).max(1)) as u32
    } else {
        5
    };
    Ok(TrafficSeries {
        values,
        mask,
        node_ids,
        timestamps,
        time_header,
        step_minutes,
        scale_factor: 1.0,
        normalized: false,
    })
}

/// Writes the series in the format read by [`read_series`], feature 0 only,
/// masked cells empty.
pub fn write_series(series: &TrafficSeries, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&csv_field(&series.time_header));
    for id in &series.node_ids {
        out.push(',');
        out.push_str(&csv_field(id));
    }
    out.push('\n');
    for (t, ts) in series.timestamps.iter().enumerate() {
        out.push_str(&csv_field(ts));
        for n in 0..series.num_nodes() {
            out.push(',');
            if series.mask[[n, 0, t]] == 1.0 {
                out.push_str(&format!("{}", series.values[[n, 0, t]]));
            }
        }
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Reads a `from,to,distance` edge list keyed by node id.
pub fn read_graph(path: &Path, node_ids: &[String], kappa: f64) -> Result<PredefinedGraph> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols != ["from", "to", "distance"] {
        return Err(Error::Schema(format!(
            "{}: expected header from,to,distance, got {}",
            path.display(),
            cols.join(",")
        )));
    }
    let index: HashMap<&str, usize> = node_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut edges = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let lookup = |s: &str| {
            index.get(s.trim()).copied().ok_or_else(|| {
                Error::Schema(format!(
                    "{} row {}: node {s:?} is not a series column",
                    path.display(),
                    row + 2
                ))
            })
        };
        let from = lookup(&rec[0])?;
        let to = lookup(&rec[1])?;
        let distance: f64 = rec[2].trim().parse().map_err(|_| {
            Error::Schema(format!("{} row {}: bad distance {:?}", path.display(), row + 2, &rec[2]))
        })?;
        edges.push(Edge { from, to, distance });
    }
    PredefinedGraph::from_edges(node_ids.len(), edges, kappa)
}

pub fn write_graph(graph: &PredefinedGraph, node_ids: &[String], path: &Path) -> Result<()> {
    let mut out = String::from("from,to,distance\n");
    for e in &graph.edges {
        out.push_str(&format!(
            "{},{},{}\n",
            csv_field(&node_ids[e.from]),
            csv_field(&node_ids[e.to]),
            e.distance
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a series and its road graph.
pub fn ingest(series_file: &Path, graph_file: &Path) -> Result<(TrafficSeries, PredefinedGraph)> {
    let series = read_series(series_file)?;
    let graph = read_graph(graph_file, &series.node_ids, KERNEL_THRESHOLD)?;
    Ok((series, graph))
}

/// Scale metadata written next to a normalized bundle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSidecar {
    pub scale_factor: f64,
}

/// Divides by the maximum observed value of the leading `train_fraction`
/// of timestamps.
pub fn normalize(series: &TrafficSeries, train_fraction: f64) -> Result<TrafficSeries> {
    if series.normalized {
        return Err(Error::Config("series is already normalized".into()));
    }
    let train_len = ((series.len() as f64) * train_fraction).floor() as usize;
    let mut max = f64::NEG_INFINITY;
    for n in 0..series.num_nodes() {
        for f in 0..series.num_features() {
            for t in 0..train_len.min(series.len()) {
                if series.mask[[n, f, t]] == 1.0 {
                    max = max.max(series.values[[n, f, t]]);
                }
            }
        }
    }
    if !max.is_finite() {
        return Err(Error::EmptyTrainingSplit);
    }
    if max <= 0.0 {
        return Err(Error::Config(format!(
            "training maximum {max} is not positive; cannot scale"
        )));
    }
    Ok(normalize_with(series, max))
}

/// Divides by a known scale factor (e.g. the training maximum of another copy).
pub fn normalize_with(series: &TrafficSeries, scale_factor: f64) -> TrafficSeries {
    let mut out = series.clone();
    out.values.mapv_inplace(|v| v / scale_factor);
    out.scale_factor = scale_factor;
    out.normalized = true;
    out
}

/// Inverse of [`normalize`] for observed entries.
pub fn denormalize(series: &TrafficSeries) -> TrafficSeries {
    let mut out = series.clone();
    let k = series.scale_factor;
    out.values.mapv_inplace(|v| v * k);
    out.scale_factor = 1.0;
    out.normalized = false;
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Train/validation/test fractions.
pub const SPLIT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

/// Contiguous chronological ranges covering `0..len` in the given ratios.
pub fn split_ranges(len: usize, ratios: [f64; 3]) -> [Range<usize>; 3] {
    let a = ((len as f64) * ratios[0]).round() as usize;
    let b = (((len as f64) * (ratios[0] + ratios[1])).round() as usize).max(a);
    let (a, b) = (a.min(len), b.min(len));
    [0..a, a..b, b..len]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentParams {
    pub n_h: usize,
    pub n_d: usize,
    pub n_w: usize,
    /// Samples per day (288 at 5-minute resolution).
    pub steps_per_day: usize,
    /// Samples per week (2016 at 5-minute resolution).
    pub steps_per_week: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            n_h: 2,
            n_d: 2,
            n_w: 2,
            steps_per_day: 288,
            steps_per_week: 2016,
        }
    }
}

impl SegmentParams {
    pub fn num_slots(&self, tau: usize) -> usize {
        (self.n_h + self.n_d + self.n_w) * tau
    }
}

/// Historical indices feeding the attention memory for one anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentIndex {
    pub hourly: Vec<usize>,
    pub daily: Vec<usize>,
    pub weekly: Vec<usize>,
    pub steps_per_day: usize,
    pub steps_per_week: usize,
}

impl SegmentIndex {
    /// Indices for anchor `t` (the first predicted step). `None` when any
    /// index would fall before the start of the series.
    ///
    /// Periodic segments take `tau` consecutive samples starting at
    /// `t - j*period - tau/2`, oldest period first.
    pub fn for_anchor(t: usize, tau: usize, p: &SegmentParams) -> Option<Self> {
        let hourly_len = p.n_h * tau;
        let hourly = (t.checked_sub(hourly_len)?..t).collect();
        let half = tau / 2;
        let periodic = |n: usize, period: usize| -> Option<Vec<usize>> {
            let mut idx = Vec::with_capacity(n * tau);
            for j in (1..=n).rev() {
                let start = t.checked_sub(j * period + half)?;
                idx.extend(start..start + tau);
            }
            Some(idx)
        };
        Some(Self {
            hourly,
            daily: periodic(p.n_d, p.steps_per_day)?,
            weekly: periodic(p.n_w, p.steps_per_week)?,
            steps_per_day: p.steps_per_day,
            steps_per_week: p.steps_per_week,
        })
    }

    /// Slots in memory order: recent, daily, weekly.
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.hourly
            .iter()
            .chain(self.daily.iter())
            .chain(self.weekly.iter())
            .copied()
    }

    pub fn len(&self) -> usize {
        self.hourly.len() + self.daily.len() + self.weekly.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Window geometry shared by every model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub tau: usize,
    pub horizon: usize,
    /// Temporal look-back of the local statistics.
    pub lookback: usize,
    pub segments: SegmentParams,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 || self.horizon == 0 || self.lookback == 0 {
            return Err(Error::Config("tau, horizon and lookback must be positive".into()));
        }
        let half = self.tau / 2;
        let p = &self.segments;
        if (p.n_d > 0 && p.steps_per_day <= half) || (p.n_w > 0 && p.steps_per_week <= half) {
            return Err(Error::Config(format!(
                "periods must exceed tau/2 = {half} so periodic segments stay historical"
            )));
        }
        if p.num_slots(self.tau) == 0 {
            return Err(Error::Config("memory needs at least one of n_h, n_d, n_w".into()));
        }
        Ok(())
    }

    /// Earliest anchor whose history (segments and local look-back) fits.
    pub fn min_anchor(&self) -> usize {
        let p = &self.segments;
        let half = self.tau / 2;
        let mut m = self.tau + self.lookback;
        m = m.max(p.n_h * self.tau);
        if p.n_d > 0 {
            m = m.max(p.n_d * p.steps_per_day + half);
        }
        if p.n_w > 0 {
            m = m.max(p.n_w * p.steps_per_week + half);
        }
        m
    }

    pub fn is_admissible(&self, anchor: usize, series_len: usize) -> bool {
        anchor >= self.min_anchor()
            && anchor + self.horizon <= series_len
            && SegmentIndex::for_anchor(anchor, self.tau, &self.segments).is_some()
    }
}

/// One forecasting window, node/time laid out time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub anchor: usize,
    /// `(tau·N) × F`, row `t*N + n` for input step `t`.
    pub input: Array2<f64>,
    pub mask: Array2<f64>,
    /// `N × horizon` on feature 0.
    pub target: Array2<f64>,
    pub target_mask: Array2<f64>,
}

/// Windows of one chronological split.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    pub inputs: Arc<TrafficSeries>,
    pub targets: Arc<TrafficSeries>,
    pub spec: WindowSpec,
    pub split: Split,
    pub anchors: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn window(&self, k: usize) -> Window {
        let t0 = self.anchors[k];
        let s = &self.inputs;
        let (n, f, _) = s.values.dim();
        let tau = self.spec.tau;
        let mut input = Array2::zeros((tau * n, f));
        let mut mask = Array2::zeros((tau * n, f));
        for (step, t) in (t0 - tau..t0).enumerate() {
            for node in 0..n {
                for feat in 0..f {
                    let m = s.mask[[node, feat, t]];
                    mask[[step * n + node, feat]] = m;
                    input[[step * n + node, feat]] = m * s.values[[node, feat, t]];
                }
            }
        }
        let h = self.spec.horizon;
        let mut target = Array2::zeros((n, h));
        let mut target_mask = Array2::zeros((n, h));
        for node in 0..n {
            for j in 0..h {
                target[[node, j]] = self.targets.values[[node, 0, t0 + j]];
                target_mask[[node, j]] = self.targets.mask[[node, 0, t0 + j]];
            }
        }
        Window {
            anchor: t0,
            input,
            mask,
            target,
            target_mask,
        }
    }

    pub fn segment_index(&self, k: usize) -> SegmentIndex {
        SegmentIndex::for_anchor(self.anchors[k], self.spec.tau, &self.spec.segments)
            .expect("anchors are admissible by construction")
    }

    /// Dataset over explicit anchors; every anchor must be admissible.
    pub fn from_anchors(
        inputs: Arc<TrafficSeries>,
        targets: Arc<TrafficSeries>,
        spec: WindowSpec,
        split: Split,
        anchors: Vec<usize>,
    ) -> Result<Self> {
        spec.validate()?;
        check_pair(&inputs, &targets)?;
        if let Some(&a) = anchors.iter().find(|&&a| !spec.is_admissible(a, inputs.len())) {
            return Err(Error::InsufficientHistory {
                split: split.name().into(),
                reason: format!("anchor {a} lacks full history or target"),
            });
        }
        Ok(Self {
            inputs,
            targets,
            spec,
            split,
            anchors,
        })
    }
}

fn check_pair(inputs: &TrafficSeries, targets: &TrafficSeries) -> Result<()> {
    if inputs.values.dim() != targets.values.dim() {
        return Err(Error::Shape(format!(
            "input series {:?} vs target series {:?}",
            inputs.values.dim(),
            targets.values.dim()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SplitDatasets {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub ranges: [Range<usize>; 3],
}

impl SplitDatasets {
    pub fn get(&self, split: Split) -> &WindowedDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Enumerates admissible anchors chronologically and assigns each window to
/// the split whose timestamp range contains its whole input and target.
///
/// `inputs` feed the model (and the memory); `targets` supply `Y` and its
/// mask.
pub fn make_windows(
    inputs: Arc<TrafficSeries>,
    targets: Arc<TrafficSeries>,
    spec: WindowSpec,
    ratios: [f64; 3],
) -> Result<SplitDatasets> {
    spec.validate()?;
    check_pair(&inputs, &targets)?;
    let len = inputs.len();
    let ranges = split_ranges(len, ratios);
    let mut sets = Vec::with_capacity(3);
    for (split, range) in Split::ALL.into_iter().zip(ranges.iter()) {
        let lo = (range.start + spec.tau).max(spec.min_anchor());
        let hi = range.end.saturating_sub(spec.horizon);
        let anchors: Vec<usize> = (lo..=hi)
            .filter(|&t| spec.is_admissible(t, len))
            .collect();
        if anchors.is_empty() {
            return Err(Error::InsufficientHistory {
                split: split.name().into(),
                reason: format!(
                    "range {range:?} has no anchor with full history (earliest admissible anchor {}, horizon {})",
                    spec.min_anchor(),
                    spec.horizon
                ),
            });
        }
        sets.push(WindowedDataset {
            inputs: inputs.clone(),
            targets: targets.clone(),
            spec,
            split,
            anchors,
        });
    }
    let test = sets.pop().unwrap();
    let val = sets.pop().unwrap();
    let train = sets.pop().unwrap();
    Ok(SplitDatasets {
        train,
        val,
        test,
        ranges,
    })
}
