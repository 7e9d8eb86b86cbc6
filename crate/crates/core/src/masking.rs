//! Missing-value scenario injection and mask statistics.
//!
//! A scenario removes blocks of `n` nodes × all features × `t` consecutive
//! steps until the realized missing rate first reaches the requested rate.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrafficSeries;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// One-step blocks.
    #[serde(rename = "short", alias = "short_range")]
    ShortRange,
    /// Blocks spanning a full input window.
    #[serde(rename = "long", alias = "long_range")]
    LongRange,
    /// Block length uniform in `1..=tau`.
    #[serde(rename = "mix", alias = "mix_range")]
    MixRange,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::ShortRange => "short",
            ScenarioKind::LongRange => "long",
            ScenarioKind::MixRange => "mix",
        }
    }

    fn extent<R: Rng>(self, tau: usize, rng: &mut R) -> usize {
        match self {
            ScenarioKind::ShortRange => 1,
            ScenarioKind::LongRange => tau,
            ScenarioKind::MixRange => rng.gen_range(1..=tau),
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" | "short_range" => Ok(ScenarioKind::ShortRange),
            "long" | "long_range" => Ok(ScenarioKind::LongRange),
            "mix" | "mix_range" => Ok(ScenarioKind::MixRange),
            other => Err(Error::Config(format!(
                "unknown scenario {other:?}; expected short, long or mix"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingScenario {
    pub kind: ScenarioKind,
    pub rate: f64,
    pub seed: u64,
}

impl MissingScenario {
    pub fn new(kind: ScenarioKind, rate: f64, seed: u64) -> Result<Self> {
        let s = Self { kind, rate, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config(format!(
                "missing rate must lie strictly between 0 and 1, got {}",
                self.rate
            )));
        }
        Ok(())
    }
}

/// One removed block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub nodes: Vec<usize>,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InjectionReport {
    pub blocks: Vec<Block>,
    pub realized_rate: f64,
}

pub fn inject(series: &TrafficSeries, scenario: &MissingScenario, tau: usize) -> Result<TrafficSeries> {
    inject_with_report(series, scenario, tau).map(|(s, _)| s)
}

/// Injects the scenario and reports every sampled block. Existing gaps are
/// kept and count toward the rate.
pub fn inject_with_report(
    series: &TrafficSeries,
    scenario: &MissingScenario,
    tau: usize,
) -> Result<(TrafficSeries, InjectionReport)> {
    scenario.validate()?;
    if tau == 0 {
        return Err(Error::Config("tau must be positive".into()));
    }
    let (n, f, t) = series.values.dim();
    let total = (n * f * t) as f64;
    if total == 0.0 {
        return Err(Error::Shape("cannot inject into an empty series".into()));
    }
    let existing = series.missing_fraction();
    if scenario.rate <= existing {
        return Err(Error::RateBelowExisting {
            requested: scenario.rate,
            existing,
        });
    }
    let mut out = series.clone();
    let mut missing = out.mask.iter().filter(|&&m| m == 0.0).count();
    let target = scenario.rate * total;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut blocks = Vec::new();
    while (missing as f64) < target {
        let count = rng.gen_range(1..=n);
        let mut nodes = sample(&mut rng, n, count).into_vec();
        nodes.sort_unstable();
        let len = scenario.kind.extent(tau, &mut rng).min(t);
        let start = rng.gen_range(0..=t - len);
        for &node in &nodes {
            for feat in 0..f {
                for step in start..start + len {
                    let m = &mut out.mask[[node, feat, step]];
                    if *m == 1.0 {
                        *m = 0.0;
                        out.values[[node, feat, step]] = 0.0;
                        missing += 1;
                    }
                }
            }
        }
        blocks.push(Block { nodes, start, len });
    }
    let realized_rate = missing as f64 / total;
    Ok((
        out,
        InjectionReport {
            blocks,
            realized_rate,
        },
    ))
}

/// Model inputs after injection, plus the targets they are scored against.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectedData {
    pub inputs: TrafficSeries,
    /// Equal to `inputs` except on the test range, which keeps the
    /// pre-injection observations.
    pub targets: TrafficSeries,
    pub realized_rate: f64,
}

/// Injects each chronological split independently (seed offset per split)
/// and restores the test range in the target copy.
pub fn inject_splits(
    series: &TrafficSeries,
    scenario: &MissingScenario,
    tau: usize,
    ranges: &[Range<usize>; 3],
) -> Result<InjectedData> {
    let mut inputs = series.clone();
    for (i, range) in ranges.iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let part = series.slice_time(range.clone());
        let sc = MissingScenario {
            seed: scenario.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64)),
            ..*scenario
        };
        let injected = inject(&part, &sc, tau)?;
        inputs.splice_time(range.start, &injected);
    }
    let mut targets = inputs.clone();
    let test = &ranges[2];
    if !test.is_empty() {
        targets.splice_time(test.start, &series.slice_time(test.clone()));
    }
    let realized_rate = inputs.missing_fraction();
    Ok(InjectedData {
        inputs,
        targets,
        realized_rate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub missing_fraction: f64,
    /// Maximal run length of consecutive missing steps → number of runs,
    /// counted per node and feature.
    pub block_length_histogram: BTreeMap<usize, usize>,
}

pub fn mask_stats(series: &TrafficSeries) -> MaskStats {
    let (n, f, t) = series.mask.dim();
    let mut hist = BTreeMap::new();
    for node in 0..n {
        for feat in 0..f {
            let mut run = 0;
            for step in 0..t {
                if series.mask[[node, feat, step]] == 0.0 {
                    run += 1;
                } else if run > 0 {
                    *hist.entry(run).or_insert(0) += 1;
                    run = 0;
                }
            }
            if run > 0 {
                *hist.entry(run).or_insert(0) += 1;
            }
        }
    }
    MaskStats {
        missing_fraction: series.missing_fraction(),
        block_length_histogram: hist,
    }
}
