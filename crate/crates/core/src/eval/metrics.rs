//! Masked error metrics in original units.

use std::fmt;

use ndarray::Array2;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

/// Errors over the entries that survive the target mask. A metric over an
/// empty set is `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    /// Percent, over observed nonzero targets only.
    pub mape: Option<f64>,
    pub n: usize,
}

/// Running sums behind [`MetricValues`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    abs: f64,
    sq: f64,
    pct: f64,
    n: usize,
    n_nonzero: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, y_hat: f64, y: f64, mask: f64) {
        if mask == 0.0 {
            return;
        }
        let e = (y_hat - y).abs();
        self.abs += e;
        self.sq += e * e;
        self.n += 1;
        if y != 0.0 {
            self.pct += e / y.abs();
            self.n_nonzero += 1;
        }
    }

    pub fn finish(&self) -> MetricValues {
        let n = self.n as f64;
        MetricValues {
            mae: (self.n > 0).then(|| self.abs / n),
            rmse: (self.n > 0).then(|| (self.sq / n).sqrt()),
            mape: (self.n_nonzero > 0).then(|| 100.0 * (self.pct / self.n_nonzero as f64)),
            n: self.n,
        }
    }
}

/// MAE, RMSE and MAPE of `y_hat` against `y` over entries with mask 1.
pub fn masked_metrics(y_hat: &[f64], y: &[f64], mask: &[f64]) -> MetricValues {
    assert!(y_hat.len() == y.len() && y.len() == mask.len(), "metric inputs differ in length");
    let mut acc = MetricAccumulator::default();
    for ((&p, &t), &m) in y_hat.iter().zip(y).zip(mask) {
        acc.push(p, t, m);
    }
    acc.finish()
}

/// A forecast step (1-based) or the average over all steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Horizon {
    Step(usize),
    Average,
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Step(h) => write!(f, "{h}"),
            Horizon::Average => f.write_str("avg"),
        }
    }
}

impl Serialize for Horizon {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Horizon::Step(h) => s.serialize_u64(*h as u64),
            Horizon::Average => s.serialize_str("avg"),
        }
    }
}

impl<'de> Deserialize<'de> for Horizon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Horizon;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive step number or \"avg\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Horizon, E> {
                if v == 0 {
                    return Err(E::custom("horizon steps start at 1"));
                }
                Ok(Horizon::Step(v as usize))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Horizon, E> {
                u64::try_from(v)
                    .map_err(|_| E::custom("negative horizon"))
                    .and_then(|v| self.visit_u64(v))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Horizon, E> {
                if v == "avg" {
                    Ok(Horizon::Average)
                } else {
                    Err(E::custom(format!("unknown horizon {v:?}")))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// One line of a metric report file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub model: String,
    pub scenario: String,
    pub rate: f64,
    pub horizon: Horizon,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub mape: Option<f64>,
    pub n: usize,
}

impl MetricReport {
    pub fn new(model: &str, scenario: &str, rate: f64, horizon: Horizon, v: MetricValues) -> Self {
        Self {
            model: model.into(),
            scenario: scenario.into(),
            rate,
            horizon,
            mae: v.mae,
            rmse: v.rmse,
            mape: v.mape,
            n: v.n,
        }
    }
}

/// Per-step and averaged metrics of `N × H` forecasts, scaled by `scale`
/// back to original units.
pub fn horizon_metrics(
    forecasts: &[(Array2<f64>, Array2<f64>, Array2<f64>)],
    scale: f64,
) -> Vec<(Horizon, MetricValues)> {
    let h = forecasts.first().map_or(0, |(p, _, _)| p.ncols());
    let mut steps = vec![MetricAccumulator::default(); h];
    let mut all = MetricAccumulator::default();
    for (p, t, m) in forecasts {
        for ((idx, &yh), (&y, &mk)) in p.indexed_iter().zip(t.iter().zip(m.iter())) {
            let (yh, y) = (yh * scale, y * scale);
            steps[idx.1].push(yh, y, mk);
            all.push(yh, y, mk);
        }
    }
    let mut out: Vec<_> = steps
        .iter()
        .enumerate()
        .map(|(j, a)| (Horizon::Step(j + 1), a.finish()))
        .collect();
    out.push((Horizon::Average, all.finish()));
    out
}
