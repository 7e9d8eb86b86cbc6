//! Fixtures and oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::sync::Arc;

use gcnm::eval::metrics::MetricValues;
use gcnm::eval::stats::average_ranks;
use gcnm::data::{make_windows, normalize, split_ranges, PredefinedGraph, SplitDatasets, TrafficSeries, SPLIT_RATIOS};
use gcnm::graph::{GraphConfig, GraphMode};
use gcnm::masking::{inject_splits, MissingScenario, ScenarioKind};
use gcnm::model::{Forecaster, ModelConfig, Sample};
use gcnm::synthetic::{generate, SyntheticConfig};
use gcnm::tape::Tape;

/// Seed of the gradient checks; every parameter tensor receives gradient.
pub const GRADIENT_SEED: u64 = 2;

/// 4 nodes, d = 4, tau = 5, one block, short periods.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        tau: 5,
        horizon: 3,
        d: 4,
        blocks: 1,
        lookback: 5,
        spatial_neighbors: 2,
        n_h: 1,
        n_d: 1,
        n_w: 1,
        steps_per_day: 8,
        steps_per_week: 16,
        head_hidden: 6,
        ..ModelConfig::default()
    }
}

/// Normalized toy data with 30% mix-range gaps.
pub fn toy_data(cfg: &ModelConfig, nodes: usize, len: usize, seed: u64) -> (SplitDatasets, PredefinedGraph) {
    let (series, graph) = generate(&SyntheticConfig {
        nodes,
        len,
        steps_per_day: cfg.steps_per_day,
        noise: 0.5,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let series = normalize(&series, SPLIT_RATIOS[0]).unwrap();
    let ranges = split_ranges(series.len(), SPLIT_RATIOS);
    let sc = MissingScenario::new(ScenarioKind::MixRange, 0.3, seed).unwrap();
    let inj = inject_splits(&series, &sc, cfg.tau, &ranges).unwrap();
    let sets = make_windows(
        Arc::new(inj.inputs),
        Arc::new(inj.targets),
        cfg.window_spec(),
        SPLIT_RATIOS,
    )
    .unwrap();
    (sets, graph)
}

pub fn toy_model(mode: GraphMode, seed: u64) -> (Forecaster, SplitDatasets) {
    let cfg = toy_config();
    let (sets, graph) = toy_data(&cfg, 4, 200, seed);
    let gcfg = GraphConfig {
        mode,
        ..GraphConfig::default()
    };
    let model = Forecaster::new(cfg, gcfg, &graph, 1, seed).unwrap();
    (model, sets)
}

/// Pushes the decay parameters into their active region so the decay
/// gradients are exercised.
pub fn activate_decay(model: &mut Forecaster) {
    let ids = model.ids.memory;
    for (id, v) in [
        (ids.decay_tw, 0.4),
        (ids.decay_tb, 0.1),
        (ids.decay_sw, 0.3),
        (ids.decay_sb, 0.05),
    ] {
        model.params.get_mut(id).fill(v);
    }
}

/// First training window where both decay paths influence the local
/// features.
pub fn gappy_sample(model: &Forecaster, sets: &SplitDatasets) -> Sample {
    for k in 0..sets.train.len() {
        let s = model.sample(&sets.train, k);
        let st = &s.stats;
        let hit = |a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>| {
            ndarray::Zip::from(a)
                .and(b)
                .and(&st.mask)
                .fold(false, |acc, &x, &y, &m| acc || (m == 0.0 && (x - y).abs() > 1e-3))
        };
        if hit(&st.x_last, &st.t_mean) && hit(&st.x_near, &st.s_mean) {
            return s;
        }
    }
    panic!("no window exercises both decay paths");
}

pub fn sample_loss(model: &Forecaster, sample: &Sample) -> f64 {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let l = model.loss_on_tape(&mut tape, &bound, sample).unwrap();
    tape.value(l)[[0, 0]]
}

/// Worst relative error per parameter tensor between the analytic gradient
/// and central differences with step `h`.
pub fn gradient_errors(model: &Forecaster, sample: &Sample, h: f64) -> Vec<(String, f64)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let l = model.loss_on_tape(&mut tape, &bound, sample).unwrap();
    let mut grads = tape.backward(l);
    let analytic = bound.collect(&mut grads, &model.params);
    let mut out = Vec::new();
    let mut probe = model.clone();
    for id in model.params.ids() {
        let mut worst: f64 = 0.0;
        for idx in ndarray::indices(model.params.get(id).dim()) {
            let orig = model.params.get(id)[idx];
            probe.params.get_mut(id)[idx] = orig + h;
            let up = sample_loss(&probe, sample);
            probe.params.get_mut(id)[idx] = orig - h;
            let down = sample_loss(&probe, sample);
            probe.params.get_mut(id)[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[id.index()][idx];
            let diff = (fd - an).abs();
            let scale = fd.abs().max(an.abs());
            let rel = if scale < 1e-8 { diff } else { diff / scale };
            worst = worst.max(rel);
        }
        out.push((model.params.name(id).to_string(), worst));
    }
    out
}

/// Series with the node order permuted by `perm` (new node `i` is old
/// node `perm[i]`).
pub fn permute_series(s: &TrafficSeries, perm: &[usize]) -> TrafficSeries {
    let mut out = s.clone();
    for (i, &p) in perm.iter().enumerate() {
        out.values.index_axis_mut(ndarray::Axis(0), i).assign(&s.values.index_axis(ndarray::Axis(0), p));
        out.mask.index_axis_mut(ndarray::Axis(0), i).assign(&s.mask.index_axis(ndarray::Axis(0), p));
        out.node_ids[i] = s.node_ids[p].clone();
    }
    out
}

/// Brute-force metrics on plain vectors, written independently of the
/// accumulator.
pub fn metrics_oracle(p: &[f64], y: &[f64], m: &[f64]) -> MetricValues {
    let idx: Vec<usize> = (0..p.len()).filter(|&i| m[i] == 1.0).collect();
    let nz: Vec<usize> = idx.iter().copied().filter(|&i| y[i] != 0.0).collect();
    let mean = |xs: Vec<f64>| {
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    };
    MetricValues {
        mae: mean(idx.iter().map(|&i| (p[i] - y[i]).abs()).collect()),
        rmse: mean(idx.iter().map(|&i| (p[i] - y[i]).powi(2)).collect()).map(f64::sqrt),
        mape: mean(nz.iter().map(|&i| (p[i] - y[i]).abs() / y[i].abs()).collect()).map(|v| 100.0 * v),
        n: idx.len(),
    }
}

/// Two-sided p by listing all 2^n sign patterns of the ranked differences.
pub fn wilcoxon_enumerated(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let total: f64 = ranks.iter().sum();
    let center = total / 2.0;
    let observed: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let mut extreme = 0u64;
    for pattern in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| pattern >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (w - center).abs() >= (observed - center).abs() - 1e-9 {
            extreme += 1;
        }
    }
    extreme as f64 / (1u64 << n) as f64
}

/// Parameter tensors whose analytic gradient on `sample` is exactly zero,
/// e.g. behind dead ReLU units. A gradient check over them proves nothing.
pub fn dead_gradients(model: &Forecaster, sample: &Sample) -> Vec<String> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let l = model.loss_on_tape(&mut tape, &bound, sample).unwrap();
    let mut grads = tape.backward(l);
    let analytic = bound.collect(&mut grads, &model.params);
    model
        .params
        .ids()
        .filter(|id| analytic[id.index()].iter().all(|&g| g == 0.0))
        .map(|id| model.params.name(id).to_string())
        .collect()
}
