//! Run configuration: one JSON document describing a training run.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::Imputer;
use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::masking::ScenarioKind;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Model family trained by a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The graph forecaster fed the masked series directly.
    #[default]
    Gcnm,
    /// Node-shared GRU on zero-filled inputs.
    Gru,
    /// GRU that substitutes its own predictions for missing inputs.
    GruI,
    /// Mean imputation, then the graph forecaster.
    MeanImpute,
    /// Linear interpolation, then the graph forecaster.
    KnnImpute,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Gcnm,
        Method::Gru,
        Method::GruI,
        Method::MeanImpute,
        Method::KnnImpute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gcnm => "gcnm",
            Method::Gru => "gru",
            Method::GruI => "gru_i",
            Method::MeanImpute => "mean_impute",
            Method::KnnImpute => "knn_impute",
        }
    }

    /// Imputer applied before the forecaster in two-step pipelines.
    pub fn imputer(self) -> Option<Imputer> {
        match self {
            Method::MeanImpute => Some(Imputer::Mean),
            Method::KnnImpute => Some(Imputer::Knn),
            _ => None,
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, Method::Gru | Method::GruI)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown method {s:?}; expected gcnm, gru, gru_i, mean_impute or knn_impute"
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub series: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    /// Keeps at most this many training windows, evenly spaced.
    pub max_train_windows: Option<usize>,
    /// Same for validation windows.
    pub max_val_windows: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Label used in metric reports; defaults to the method name.
    pub name: Option<String>,
    pub method: Method,
    pub model: ModelConfig,
    pub graph: GraphConfig,
    pub train: TrainConfig,
    /// Hidden width of the recurrent baselines.
    pub gru_hidden: usize,
    pub data: DataConfig,
    pub scenarios: Vec<ScenarioSpec>,
    pub baselines: Vec<Method>,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: None,
            method: Method::Gcnm,
            model: ModelConfig::default(),
            graph: GraphConfig::default(),
            train: TrainConfig::default(),
            gru_hidden: 64,
            data: DataConfig::default(),
            scenarios: Vec::new(),
            baselines: Vec::new(),
            output_dir: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.graph.validate()?;
        self.train.validate()?;
        if self.gru_hidden == 0 {
            return Err(Error::Config("gru_hidden must be positive".into()));
        }
        for (name, v) in [
            ("data.max_train_windows", self.data.max_train_windows),
            ("data.max_val_windows", self.data.max_val_windows),
        ] {
            if v == Some(0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(s) = self.scenarios.iter().find(|s| !(s.rate > 0.0 && s.rate < 1.0)) {
            return Err(Error::Config(format!(
                "scenario rate must lie strictly between 0 and 1, got {}",
                s.rate
            )));
        }
        Ok(())
    }

    /// Parses JSON, naming the offending path on failure, then validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
