//! The full forecaster: memory → ST blocks → skip connections → output head.

use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PredefinedGraph, SegmentParams, SpatialNeighbors, WindowSpec, WindowedDataset};
use crate::error::{Error, Result};
use crate::graph::{variant_graph, FilterBanks, GraphConfig, GraphMode, GraphSet, NodeEmbeddings};
use crate::memory::{memory_slots, LocalStats, LocalWeights, MemoryParams};
use crate::params::{fan_in_bound, Bound, ParamId, ParamSet};
use crate::stblock::{conv_output_len, st_block, GraphConvParams, TcnParams};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tau: usize,
    pub horizon: usize,
    /// Embedding width.
    pub d: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    /// Temporal look-back of the local statistics.
    #[serde(rename = "L")]
    pub lookback: usize,
    /// Spatial neighbors averaged by the local statistics.
    #[serde(rename = "S")]
    pub spatial_neighbors: usize,
    pub n_h: usize,
    pub n_d: usize,
    pub n_w: usize,
    pub steps_per_day: usize,
    pub steps_per_week: usize,
    /// Width of the hidden dense layer of the output head.
    pub head_hidden: usize,
    pub local_weights: LocalWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tau: 12,
            horizon: 12,
            d: 32,
            blocks: 4,
            kernel: 2,
            dilations: vec![1, 2],
            lookback: 12,
            spatial_neighbors: 5,
            n_h: 2,
            n_d: 2,
            n_w: 2,
            steps_per_day: 288,
            steps_per_week: 2016,
            head_hidden: 64,
            local_weights: LocalWeights::Literal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("horizon", self.horizon),
            ("d", self.d),
            ("blocks", self.blocks),
            ("kernel", self.kernel),
            ("L", self.lookback),
            ("S", self.spatial_neighbors),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::Config("model.dilations must be non-empty and positive".into()));
        }
        if self.dilations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("model.dilations must be increasing".into()));
        }
        self.window_spec().validate()
    }

    pub fn segments(&self) -> SegmentParams {
        SegmentParams {
            n_h: self.n_h,
            n_d: self.n_d,
            n_w: self.n_w,
            steps_per_day: self.steps_per_day,
            steps_per_week: self.steps_per_week,
        }
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            tau: self.tau,
            horizon: self.horizon,
            lookback: self.lookback,
            segments: self.segments(),
        }
    }

    /// Temporal shrinkage of one block.
    pub fn block_shrink(&self) -> usize {
        self.dilations.iter().map(|d| d * (self.kernel - 1)).sum()
    }

    /// Sequence length entering the first block: the window left-padded with
    /// zeros so the last block ends at length one (never shorter than `tau`).
    pub fn padded_len(&self) -> usize {
        self.tau.max(self.blocks * self.block_shrink() + 1)
    }

    /// Lengths `τ_0, τ_1, …, τ_l`.
    pub fn block_lengths(&self) -> Vec<usize> {
        let mut out = vec![self.padded_len()];
        for _ in 0..self.blocks {
            let last = *out.last().unwrap();
            out.push(conv_output_len(last, self.kernel, &self.dilations).expect("padded length suffices"));
        }
        out
    }

    /// Width of the skip concatenation `O`.
    pub fn skip_width(&self) -> usize {
        (self.blocks + 1) * self.d
    }
}

/// Tensor shapes recorded during a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShapeTrace {
    /// Timestamps of the memory output before padding.
    pub input_len: usize,
    /// Temporal length entering the first block, then after each block.
    pub lengths: Vec<usize>,
    /// Rows and columns of the skip concatenation.
    pub skip: (usize, usize),
    pub output: (usize, usize),
}

/// Inputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Sample {
    pub stats: LocalStats,
    /// Memory slot values, `(N·S) × F`.
    pub slots: Array2<f64>,
    /// `N × horizon`.
    pub target: Array2<f64>,
    pub target_mask: Array2<f64>,
}

#[derive(Clone, Debug)]
struct BlockParams {
    tcn: TcnParams,
    gconv: GraphConvParams,
    filters: Option<FilterBanks>,
    skip_w: ParamId,
    skip_b: ParamId,
}

#[derive(Clone, Debug)]
struct HeadParams {
    final_w: Option<(ParamId, ParamId)>,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

/// Parameter handles of the whole network.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub memory: MemoryParams,
    obs_proj: Option<(ParamId, ParamId)>,
    pub embeddings: Option<NodeEmbeddings>,
    blocks: Vec<BlockParams>,
    head: HeadParams,
}

impl ModelParams {
    pub fn fc2_bias(&self) -> ParamId {
        self.head.fc2_b
    }
}

/// A configured network bound to one road graph.
#[derive(Clone, Debug)]
pub struct Forecaster {
    pub config: ModelConfig,
    pub graph: GraphConfig,
    pub params: ParamSet,
    pub ids: ModelParams,
    pub nodes: usize,
    pub features: usize,
    adjacency: Arc<Array2<f64>>,
    transition: Arc<Array2<f64>>,
    neighbors: SpatialNeighbors,
}

impl Forecaster {
    pub fn new(
        config: ModelConfig,
        graph: GraphConfig,
        predefined: &PredefinedGraph,
        features: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        graph.validate()?;
        let nodes = predefined.num_nodes();
        let transition = Arc::new(predefined.transition()?);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = config.d;
        let mut memory = MemoryParams::register(&mut ps, nodes, features, d, &mut rng);
        memory.weights = config.local_weights;
        let obs_proj = (graph.mode == GraphMode::Obs).then(|| {
            let b = fan_in_bound(features);
            (
                ps.add_uniform("obs.w", (features, d), b, &mut rng),
                ps.add_uniform("obs.b", (1, d), b, &mut rng),
            )
        });
        let embeddings = graph
            .mode
            .uses_embeddings()
            .then(|| NodeEmbeddings::register(&mut ps, nodes, d, &mut rng));
        let lengths = config.block_lengths();
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let prefix = format!("block{i}");
            let tcn = TcnParams::register(&mut ps, &prefix, config.kernel, &config.dilations, d, &mut rng);
            let gconv = GraphConvParams::register(&mut ps, &prefix, graph.mode.num_graphs(), graph.k, d, &mut rng);
            let filters = graph
                .mode
                .is_dynamic()
                .then(|| FilterBanks::register(&mut ps, &prefix, graph.k, d, &mut rng));
            let width = lengths[i + 1] * d;
            let b = fan_in_bound(width);
            let skip_w = ps.add_uniform(format!("{prefix}.skip_w"), (width, d), b, &mut rng);
            let skip_b = ps.add_uniform(format!("{prefix}.skip_b"), (1, d), b, &mut rng);
            blocks.push(BlockParams {
                tcn,
                gconv,
                filters,
                skip_w,
                skip_b,
            });
        }
        let last = *lengths.last().unwrap();
        let final_w = (last > 1).then(|| {
            let b = fan_in_bound(last * d);
            (
                ps.add_uniform("head.final_w", (last * d, d), b, &mut rng),
                ps.add_uniform("head.final_b", (1, d), b, &mut rng),
            )
        });
        let width = config.skip_width();
        let b1 = fan_in_bound(width);
        let b2 = fan_in_bound(config.head_hidden);
        let head = HeadParams {
            final_w,
            fc1_w: ps.add_uniform("head.fc1_w", (width, config.head_hidden), b1, &mut rng),
            fc1_b: ps.add_uniform("head.fc1_b", (1, config.head_hidden), b1, &mut rng),
            fc2_w: ps.add_uniform("head.fc2_w", (config.head_hidden, config.horizon), b2, &mut rng),
            fc2_b: ps.add_uniform("head.fc2_b", (1, config.horizon), b2, &mut rng),
        };
        Ok(Self {
            config,
            graph,
            params: ps,
            ids: ModelParams {
                memory,
                obs_proj,
                embeddings,
                blocks,
                head,
            },
            nodes,
            features,
            adjacency: Arc::new(predefined.adjacency.clone()),
            transition,
            neighbors: predefined.spatial_neighbors(),
        })
    }

    pub fn neighbors(&self) -> &SpatialNeighbors {
        &self.neighbors
    }

    /// Forward inputs for window `k` of `ds`.
    pub fn sample(&self, ds: &WindowedDataset, k: usize) -> Sample {
        let w = ds.window(k);
        let stats = LocalStats::compute(
            &ds.inputs,
            w.anchor,
            self.config.tau,
            self.config.lookback,
            self.config.spatial_neighbors,
            &self.neighbors,
        );
        let slots = memory_slots(&ds.inputs, &ds.segment_index(k));
        Sample {
            stats,
            slots,
            target: w.target,
            target_mask: w.target_mask,
        }
    }

    fn left_pad(&self, tape: &mut Tape, x: Var) -> Var {
        let n = self.nodes;
        let pad = self.config.padded_len() - self.config.tau;
        if pad == 0 {
            return x;
        }
        let zeros = tape.constant(Array2::zeros((pad * n, tape.shape(x).1)));
        tape.concat_rows(&[zeros, x])
    }

    /// Prediction `Ŷ` (`N × horizon`) for one sample, recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, sample: &Sample) -> Result<Var> {
        self.forward_traced(tape, bound, sample, None)
    }

    /// Shapes seen by one forward pass on `sample`.
    pub fn shape_trace(&self, sample: &Sample) -> Result<ShapeTrace> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut trace = ShapeTrace::default();
        self.forward_traced(&mut tape, &bound, sample, Some(&mut trace))?;
        Ok(trace)
    }

    fn forward_traced(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        sample: &Sample,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Var> {
        let n = self.nodes;
        let cfg = &self.config;
        let z = self.ids.memory.local_features(tape, bound, &sample.stats);
        check(tape, z, "local features")?;
        let h = self.ids.memory.attend(tape, bound, z, &sample.slots, n)?;
        check(tape, h, "memory attention")?;
        let mut state = self.left_pad(tape, h);
        if let Some(t) = trace.as_deref_mut() {
            t.input_len = tape.shape(h).0 / n;
            t.lengths.push(tape.shape(state).0 / n);
        }

        let obs = match self.ids.obs_proj {
            Some((w, b)) => {
                let x = tape.constant(sample.stats.x.clone());
                let p = tape.matmul(x, bound.var(w));
                let p = tape.add_row(p, bound.var(b));
                Some(self.left_pad(tape, p))
            }
            None => None,
        };
        let static_graphs = if self.graph.mode.is_dynamic() {
            None
        } else {
            Some(variant_graph(
                tape,
                bound,
                &self.graph,
                None,
                &self.adjacency,
                &self.transition,
                self.ids.embeddings.as_ref(),
                None,
                n,
            )?)
        };

        let lengths = cfg.block_lengths();
        let mut skips = Vec::with_capacity(cfg.blocks + 1);
        for (i, bp) in self.ids.blocks.iter().enumerate() {
            let (len_in, len_out) = (lengths[i], lengths[i + 1]);
            let graphs: GraphSet = match &static_graphs {
                Some(g) => g.clone(),
                None => {
                    let full = obs.unwrap_or(state);
                    let full_len = tape.shape(full).0 / n;
                    let source = tape.row_slice(full, (full_len - len_out) * n, len_out * n);
                    variant_graph(
                        tape,
                        bound,
                        &self.graph,
                        Some(source),
                        &self.adjacency,
                        &self.transition,
                        self.ids.embeddings.as_ref(),
                        bp.filters.as_ref(),
                        n,
                    )?
                }
            };
            if let GraphSet::PerStep(a) = &graphs {
                check(tape, *a, &format!("block {i} graph"))?;
            }
            debug_assert_eq!(tape.shape(state).0, len_in * n);
            let out = st_block(tape, bound, state, &graphs, &bp.tcn, &bp.gconv, n)?;
            check(tape, out.next, &format!("block {i}"))?;
            if let Some(t) = trace.as_deref_mut() {
                t.lengths.push(tape.shape(out.next).0 / n);
            }
            let cols = tape.time_to_cols(out.gated, len_out);
            let s = tape.matmul(cols, bound.var(bp.skip_w));
            skips.push(tape.add_row(s, bound.var(bp.skip_b)));
            state = out.next;
        }
        let last = *lengths.last().unwrap();
        let final_state = match self.ids.head.final_w {
            Some((w, b)) => {
                let cols = tape.time_to_cols(state, last);
                let p = tape.matmul(cols, bound.var(w));
                tape.add_row(p, bound.var(b))
            }
            None => state,
        };
        skips.push(final_state);
        let o = tape.concat_cols(&skips);
        if let Some(t) = trace.as_deref_mut() {
            t.skip = tape.shape(o);
        }
        let hd = &self.ids.head;
        let y = tape.matmul(o, bound.var(hd.fc1_w));
        let y = tape.add_row(y, bound.var(hd.fc1_b));
        let y = tape.relu(y);
        let y = tape.matmul(y, bound.var(hd.fc2_w));
        let y = tape.add_row(y, bound.var(hd.fc2_b));
        check(tape, y, "output head")?;
        if let Some(t) = trace {
            t.output = tape.shape(y);
        }
        Ok(y)
    }

    pub fn predict(&self, sample: &Sample) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let y = self.forward(&mut tape, &bound, sample)?;
        Ok(tape.value(y).clone())
    }

    /// Summed masked absolute error of one sample, its number of scored
    /// entries, and the gradient of the summed error.
    pub fn error_and_grad(&self, sample: &Sample) -> Result<(f64, f64, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let y = self.forward(&mut tape, &bound, sample)?;
        let err = masked_abs_sum(&mut tape, y, &sample.target, &sample.target_mask);
        let value = tape.value(err)[[0, 0]];
        let count = sample.target_mask.sum();
        let mut grads = tape.backward(err);
        Ok((value, count, bound.collect(&mut grads, &self.params)))
    }

    /// Masked MAE of one sample as a differentiable scalar.
    pub fn loss_on_tape(&self, tape: &mut Tape, bound: &Bound, sample: &Sample) -> Result<Var> {
        let y = self.forward(tape, bound, sample)?;
        let err = masked_abs_sum(tape, y, &sample.target, &sample.target_mask);
        let count = sample.target_mask.sum();
        Ok(tape.scale(err, if count > 0.0 { 1.0 / count } else { 0.0 }))
    }
}

fn check(tape: &Tape, v: Var, stage: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: stage.to_string(),
        })
    }
}

/// `Σ mask ⊙ |Ŷ − Y|` on the tape.
pub fn masked_abs_sum(tape: &mut Tape, y_hat: Var, target: &Array2<f64>, mask: &Array2<f64>) -> Var {
    let y = tape.constant(target.clone());
    let m = tape.constant(mask.clone());
    let diff = tape.sub(y_hat, y);
    let a = tape.abs(diff);
    let masked = tape.mul(a, m);
    tape.sum(masked)
}

/// Mean absolute error over entries with `mask = 1`; `None` when no entry is
/// scored.
pub fn masked_mae(y_hat: &Array2<f64>, target: &Array2<f64>, mask: &Array2<f64>) -> Result<Option<f64>> {
    if y_hat.dim() != target.dim() || mask.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?}, target {:?}, mask {:?}",
            y_hat.dim(),
            target.dim(),
            mask.dim()
        )));
    }
    let count = mask.sum();
    if count == 0.0 {
        return Ok(None);
    }
    let total: f64 = ndarray::Zip::from(y_hat)
        .and(target)
        .and(mask)
        .fold(0.0, |acc, &p, &y, &m| acc + m * (p - y).abs());
    Ok(Some(total / count))
}

/// Plain MAE over all entries.
pub fn loss(y_hat: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    let mask = Array2::ones(target.dim());
    Ok(masked_mae(y_hat, target, &mask)?.unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn loss_examples() {
        let y = array![[1.0, 3.0]];
        assert_eq!(loss(&y, &y).unwrap(), 0.0);
        assert_eq!(loss(&(&y + 1.0), &y).unwrap(), 1.0);
        assert_eq!(loss(&array![[2.0, 5.0]], &y).unwrap(), 1.5);
        assert!(loss(&array![[2.0]], &y).is_err());
        assert_eq!(masked_mae(&y, &y, &Array2::zeros((1, 2))).unwrap(), None);
    }

    #[test]
    fn default_lengths() {
        let c = ModelConfig::default();
        assert_eq!(c.padded_len(), 13);
        assert_eq!(c.block_lengths(), vec![13, 10, 7, 4, 1]);
        assert_eq!(c.skip_width(), 5 * 32);
        let small = ModelConfig {
            tau: 5,
            blocks: 1,
            ..ModelConfig::default()
        };
        assert_eq!(small.block_lengths(), vec![5, 2]);
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            dilations: vec![2, 1],
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            d: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
