//! End-to-end runs: data preparation per method, model construction,
//! training and scoring.

use std::sync::Arc;

use ndarray::Array2;

use crate::baselines::{impute, GruModel};
use crate::config::{Method, RunConfig};
use crate::data::{make_windows, split_ranges, PredefinedGraph, SplitDatasets, TrafficSeries, WindowedDataset, SPLIT_RATIOS};
use crate::error::Result;
use crate::eval::{horizon_metrics, Horizon, MetricReport, MetricValues};
use crate::model::Forecaster;
use crate::params::ParamSet;
use crate::train::{predict_dataset, train_from, Control, TrainReport, TrainState};

/// Inputs as seen by `method`: two-step pipelines impute each chronological
/// split separately and mark everything observed.
pub fn method_inputs(method: Method, inputs: &TrafficSeries) -> TrafficSeries {
    let Some(imputer) = method.imputer() else {
        return inputs.clone();
    };
    let mut out = inputs.clone();
    for range in split_ranges(inputs.len(), SPLIT_RATIOS) {
        if range.is_empty() {
            continue;
        }
        let (part, _) = impute(&inputs.slice_time(range.clone()), imputer);
        out.splice_time(range.start, &part);
    }
    out
}

/// Keeps `max` evenly spaced windows.
pub fn thin(ds: &mut WindowedDataset, max: Option<usize>) {
    if let Some(max) = max {
        let n = ds.anchors.len();
        if n > max {
            ds.anchors = (0..max).map(|i| ds.anchors[i * n / max]).collect();
        }
    }
}

pub fn build_datasets(cfg: &RunConfig, inputs: &TrafficSeries, targets: &TrafficSeries) -> Result<SplitDatasets> {
    let inputs = method_inputs(cfg.method, inputs);
    let mut sets = make_windows(
        Arc::new(inputs),
        Arc::new(targets.clone()),
        cfg.model.window_spec(),
        SPLIT_RATIOS,
    )?;
    thin(&mut sets.train, cfg.data.max_train_windows);
    thin(&mut sets.val, cfg.data.max_val_windows);
    Ok(sets)
}

#[derive(Clone, Debug)]
pub enum AnyModel {
    Graph(Forecaster),
    Recurrent(GruModel),
}

impl AnyModel {
    pub fn build(cfg: &RunConfig, graph: &PredefinedGraph, features: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.method {
            Method::Gru | Method::GruI => AnyModel::Recurrent(GruModel::new(
                graph.num_nodes(),
                features,
                cfg.model.tau,
                cfg.model.horizon,
                cfg.gru_hidden,
                cfg.method == Method::GruI,
                cfg.seed,
            )?),
            _ => AnyModel::Graph(Forecaster::new(
                cfg.model.clone(),
                cfg.graph,
                graph,
                features,
                cfg.seed,
            )?),
        })
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            AnyModel::Graph(m) => &m.params,
            AnyModel::Recurrent(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            AnyModel::Graph(m) => &mut m.params,
            AnyModel::Recurrent(m) => &mut m.params,
        }
    }

    /// Trains from `state`; `on_epoch` sees the current parameters after
    /// every epoch.
    pub fn fit<F>(
        &mut self,
        sets: &SplitDatasets,
        cfg: &RunConfig,
        state: &mut TrainState,
        mut on_epoch: F,
    ) -> Result<TrainReport>
    where
        F: FnMut(&ParamSet, &TrainState) -> Result<Control>,
    {
        match self {
            AnyModel::Graph(m) => train_from(m, &sets.train, &sets.val, &cfg.train, cfg.seed, state, |m, s| {
                on_epoch(&m.params, s)
            }),
            AnyModel::Recurrent(m) => train_from(m, &sets.train, &sets.val, &cfg.train, cfg.seed, state, |m, s| {
                on_epoch(&m.params, s)
            }),
        }
    }

    pub fn predict_dataset(&self, ds: &WindowedDataset) -> Result<Vec<(Array2<f64>, Array2<f64>, Array2<f64>)>> {
        match self {
            AnyModel::Graph(m) => predict_dataset(m, ds),
            AnyModel::Recurrent(m) => predict_dataset(m, ds),
        }
    }

    /// Per-step and averaged metrics in original units.
    pub fn score(&self, ds: &WindowedDataset) -> Result<Vec<(Horizon, MetricValues)>> {
        let forecasts = self.predict_dataset(ds)?;
        Ok(horizon_metrics(&forecasts, ds.targets.scale_factor))
    }
}

pub fn reports(label: &str, scenario: &str, rate: f64, scores: &[(Horizon, MetricValues)]) -> Vec<MetricReport> {
    scores
        .iter()
        .map(|(h, v)| MetricReport::new(label, scenario, rate, *h, *v))
        .collect()
}

/// Outcome of [`fit_and_score`].
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: AnyModel,
    pub report: TrainReport,
    pub test: Vec<(Horizon, MetricValues)>,
}

impl RunOutcome {
    pub fn test_mae(&self) -> Option<f64> {
        self.test
            .iter()
            .find(|(h, _)| *h == Horizon::Average)
            .and_then(|(_, v)| v.mae)
    }
}

/// Trains `cfg.method` from scratch on the given series and scores the
/// best-validation parameters on the test split.
pub fn fit_and_score(
    cfg: &RunConfig,
    inputs: &TrafficSeries,
    targets: &TrafficSeries,
    graph: &PredefinedGraph,
) -> Result<RunOutcome> {
    let sets = build_datasets(cfg, inputs, targets)?;
    let mut model = AnyModel::build(cfg, graph, inputs.num_features())?;
    let mut state = TrainState::new(model.params(), &cfg.train);
    let report = model.fit(&sets, cfg, &mut state, |_, _| Ok(Control::Continue))?;
    let test = model.score(&sets.test)?;
    Ok(RunOutcome { model, report, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{inject_splits, MissingScenario, ScenarioKind};
    use crate::model::ModelConfig;
    use crate::synthetic::{generate, SyntheticConfig};
    use crate::train::TrainConfig;

    fn small() -> (RunConfig, TrafficSeries, TrafficSeries, PredefinedGraph) {
        let (s, g) = generate(&SyntheticConfig {
            nodes: 4,
            len: 240,
            steps_per_day: 8,
            noise: 0.3,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let s = crate::data::normalize(&s, SPLIT_RATIOS[0]).unwrap();
        let sc = MissingScenario::new(ScenarioKind::MixRange, 0.3, 1).unwrap();
        let inj = inject_splits(&s, &sc, 5, &split_ranges(s.len(), SPLIT_RATIOS)).unwrap();
        let cfg = RunConfig {
            model: ModelConfig {
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
            },
            train: TrainConfig {
                max_epochs: 2,
                batch_size: 16,
                ..TrainConfig::default()
            },
            gru_hidden: 5,
            data: crate::config::DataConfig {
                max_train_windows: Some(40),
                ..Default::default()
            },
            ..RunConfig::default()
        };
        (cfg, inj.inputs, inj.targets, g)
    }

    #[test]
    fn every_method_trains_and_scores() {
        let (base, inputs, targets, graph) = small();
        for method in Method::ALL {
            let cfg = RunConfig { method, ..base.clone() };
            let out = fit_and_score(&cfg, &inputs, &targets, &graph).unwrap();
            assert_eq!(out.report.history.len(), 2, "{method}");
            assert!(out.test_mae().unwrap().is_finite());
            assert_eq!(out.test.len(), 4);
        }
    }

    #[test]
    fn two_step_inputs_are_complete_and_keep_observations() {
        let (_, inputs, _, _) = small();
        let filled = method_inputs(Method::KnnImpute, &inputs);
        assert_eq!(filled.missing_fraction(), 0.0);
        ndarray::Zip::from(&filled.values)
            .and(&inputs.values)
            .and(&inputs.mask)
            .for_each(|&f, &v, &m| {
                if m == 1.0 {
                    assert_eq!(f, v);
                }
            });
        assert_eq!(method_inputs(Method::Gcnm, &inputs), inputs);
    }

    #[test]
    fn thinning_is_even() {
        let (cfg, inputs, targets, _) = small();
        let sets = build_datasets(&cfg, &inputs, &targets).unwrap();
        assert_eq!(sets.train.len(), 40);
        let d: Vec<usize> = sets.train.anchors.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(d.iter().max().unwrap() - d.iter().min().unwrap() <= 1);
    }
}
