//! Per-timestamp dynamic adjacency from enriched embeddings, plus the
//! observation/adaptive/predefined/combined variants.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_bound, Bound, ParamId, ParamSet};
use crate::tape::{CustomOp, Tape, Var};

/// Largest `f64` below one; keeps saturated `tanh` strictly inside `[0, 1)`.
pub const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    /// Graphs from enriched embeddings at every timestamp.
    #[default]
    Dynamic,
    /// Graphs from projected raw observations at every timestamp.
    Obs,
    /// One learned static graph.
    Adp,
    /// The predefined distance graph only.
    Pre,
    /// Predefined and learned static graphs, convolved separately and summed.
    Com,
}

impl GraphMode {
    pub const ALL: [GraphMode; 5] = [
        GraphMode::Dynamic,
        GraphMode::Obs,
        GraphMode::Adp,
        GraphMode::Pre,
        GraphMode::Com,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GraphMode::Dynamic => "dynamic",
            GraphMode::Obs => "obs",
            GraphMode::Adp => "adp",
            GraphMode::Pre => "pre",
            GraphMode::Com => "com",
        }
    }

    /// Number of graphs (and graph-convolution weight banks) per block.
    pub fn num_graphs(self) -> usize {
        if self == GraphMode::Com {
            2
        } else {
            1
        }
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, GraphMode::Dynamic | GraphMode::Obs)
    }

    pub fn uses_embeddings(self) -> bool {
        self != GraphMode::Pre
    }
}

impl fmt::Display for GraphMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraphMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GraphMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown graph mode {s:?}; expected dynamic, obs, adp, pre or com"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub mode: GraphMode,
    /// Diffusion depth.
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f64,
    /// Use the first filter bank for both embeddings (the literal reading
    /// with a single filter).
    pub shared_filter: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            mode: GraphMode::Dynamic,
            k: 2,
            alpha: 3.0,
            shared_filter: false,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("graph.alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `F = Σ_k P^k h W_k` for every timestamp block of `h` (`(steps·N) × d`).
pub fn dynamic_filter(tape: &mut Tape, transition: &Arc<Array2<f64>>, h: Var, w: &[Var]) -> Var {
    let mut hk = h;
    let mut f = tape.matmul(hk, w[0]);
    for &wk in &w[1..] {
        hk = tape.const_block_mul(transition.clone(), hk);
        let term = tape.matmul(hk, wk);
        f = tape.add(f, term);
    }
    f
}

struct AntisymGraphOp {
    nodes: usize,
    alpha: f64,
}

impl CustomOp for AntisymGraphOp {
    fn name(&self) -> &'static str {
        "antisym_graph"
    }

    fn backward(&self, inputs: &[&Array2<f64>], output: &Array2<f64>, grad: &Array2<f64>) -> Vec<Array2<f64>> {
        let (e1, e2) = (inputs[0], inputs[1]);
        let n = self.nodes;
        let mut d1 = Array2::zeros(e1.dim());
        let mut d2 = Array2::zeros(e2.dim());
        for b in 0..e1.nrows() / n {
            let rows = s![b * n..(b + 1) * n, ..];
            let a = output.slice(rows);
            let g = grad.slice(rows);
            // d/dS of relu(tanh(alpha S)); zero where the relu is inactive
            let ds = Array2::from_shape_fn((n, n), |(i, j)| {
                let y = a[[i, j]];
                if y > 0.0 {
                    g[[i, j]] * self.alpha * (1.0 - y * y)
                } else {
                    0.0
                }
            });
            let dm = &ds - &ds.t();
            let (b1, b2) = (e1.slice(rows), e2.slice(rows));
            d1.slice_mut(rows).assign(&dm.dot(&b2));
            d2.slice_mut(rows).assign(&dm.t().dot(&b1));
        }
        vec![d1, d2]
    }
}

/// `A = ReLU(tanh(α(Ê¹Ê²ᵀ − Ê²Ê¹ᵀ)))` for every `N`-row block of the stacked
/// embeddings; returns the stacked `(steps·N) × N` adjacencies.
pub fn antisym_graph(tape: &mut Tape, e1: Var, e2: Var, nodes: usize, alpha: f64) -> Var {
    let (a, b) = (tape.value(e1), tape.value(e2));
    let rows = a.nrows();
    let mut out = Array2::zeros((rows, nodes));
    for blk in 0..rows / nodes {
        let sl = s![blk * nodes..(blk + 1) * nodes, ..];
        let m = a.slice(sl).dot(&b.slice(sl).t());
        let mut o = out.slice_mut(sl);
        for i in 0..nodes {
            for j in 0..nodes {
                let v = (alpha * (m[[i, j]] - m[[j, i]])).tanh();
                o[[i, j]] = if v > 0.0 { v.min(BELOW_ONE) } else { 0.0 };
            }
        }
    }
    tape.custom(&[e1, e2], out, Box::new(AntisymGraphOp { nodes, alpha }))
}

/// Node embeddings shared by all blocks.
#[derive(Clone, Copy, Debug)]
pub struct NodeEmbeddings {
    pub e1: ParamId,
    pub e2: ParamId,
}

impl NodeEmbeddings {
    pub fn register<R: Rng>(ps: &mut ParamSet, nodes: usize, d: usize, rng: &mut R) -> Self {
        let b = fan_in_bound(d);
        Self {
            e1: ps.add_uniform("graph.e1", (nodes, d), b, rng),
            e2: ps.add_uniform("graph.e2", (nodes, d), b, rng),
        }
    }
}

/// Two filter banks `W¹_k`, `W²_k` (`k = 0..=K`) of one block.
#[derive(Clone, Debug)]
pub struct FilterBanks {
    pub w1: Vec<ParamId>,
    pub w2: Vec<ParamId>,
}

impl FilterBanks {
    pub fn register<R: Rng>(ps: &mut ParamSet, prefix: &str, k: usize, d: usize, rng: &mut R) -> Self {
        let b = fan_in_bound(d);
        let mut bank = |name: &str, rng: &mut R| -> Vec<ParamId> {
            (0..=k)
                .map(|i| ps.add_uniform(format!("{prefix}.graph_{name}_{i}"), (d, d), b, rng))
                .collect()
        };
        let w1 = bank("filter1", rng);
        let w2 = bank("filter2", rng);
        Self { w1, w2 }
    }
}

/// Dynamic adjacencies built from `source` (`(steps·N) × d`).
#[allow(clippy::too_many_arguments)]
pub fn build_dynamic_graph(
    tape: &mut Tape,
    bound: &Bound,
    source: Var,
    transition: &Arc<Array2<f64>>,
    emb: &NodeEmbeddings,
    banks: &FilterBanks,
    cfg: &GraphConfig,
    nodes: usize,
) -> Var {
    let steps = tape.shape(source).0 / nodes;
    let w1: Vec<Var> = banks.w1.iter().map(|&p| bound.var(p)).collect();
    let w2: Vec<Var> = if cfg.shared_filter {
        w1.clone()
    } else {
        banks.w2.iter().map(|&p| bound.var(p)).collect()
    };
    let f1 = dynamic_filter(tape, transition, source, &w1);
    let f2 = if cfg.shared_filter { f1 } else { dynamic_filter(tape, transition, source, &w2) };
    let e1 = tape.tile_rows(bound.var(emb.e1), steps);
    let e2 = tape.tile_rows(bound.var(emb.e2), steps);
    let p1 = tape.mul(f1, e1);
    let p1 = tape.scale(p1, cfg.alpha);
    let h1 = tape.tanh(p1);
    let p2 = tape.mul(f2, e2);
    let p2 = tape.scale(p2, cfg.alpha);
    let h2 = tape.tanh(p2);
    antisym_graph(tape, h1, h2, nodes, cfg.alpha)
}

/// Learned static graph `softmax(ReLU(E¹E²ᵀ))`, row-wise.
pub fn adaptive_graph(tape: &mut Tape, bound: &Bound, emb: &NodeEmbeddings) -> Var {
    let e1 = bound.var(emb.e1);
    let e2 = bound.var(emb.e2);
    let e2t = transpose(tape, e2);
    let m = tape.matmul(e1, e2t);
    let r = tape.relu(m);
    tape.row_softmax(r)
}

struct TransposeOp;

impl CustomOp for TransposeOp {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(&self, _: &[&Array2<f64>], _: &Array2<f64>, grad: &Array2<f64>) -> Vec<Array2<f64>> {
        vec![grad.t().to_owned()]
    }
}

pub fn transpose(tape: &mut Tape, x: Var) -> Var {
    let v = tape.value(x).t().to_owned();
    tape.custom(&[x], v, Box::new(TransposeOp))
}

/// Graphs consumed by one block's graph convolution.
#[derive(Clone)]
pub enum GraphSet {
    /// Stacked `(steps·N) × N` adjacencies, one per surviving timestamp.
    PerStep(Var),
    /// One learned `N × N` graph for all timestamps.
    Static(Var),
    /// The fixed predefined adjacency.
    Predefined(Arc<Array2<f64>>),
    /// Predefined and learned graphs; one weight bank each.
    Combined {
        predefined: Arc<Array2<f64>>,
        learned: Var,
    },
}

impl GraphSet {
    pub fn num_graphs(&self) -> usize {
        match self {
            GraphSet::Combined { .. } => 2,
            _ => 1,
        }
    }
}

/// Graphs of a variant for `steps` timestamps. `source` is the per-step
/// graph input (enriched embeddings, or projected observations for `obs`)
/// and is ignored by the static variants.
#[allow(clippy::too_many_arguments)]
pub fn variant_graph(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &GraphConfig,
    source: Option<Var>,
    adjacency: &Arc<Array2<f64>>,
    transition: &Arc<Array2<f64>>,
    emb: Option<&NodeEmbeddings>,
    banks: Option<&FilterBanks>,
    nodes: usize,
) -> Result<GraphSet> {
    let need = |what: &str| Error::Config(format!("graph mode {} needs {what}", cfg.mode));
    Ok(match cfg.mode {
        GraphMode::Dynamic | GraphMode::Obs => {
            let source = source.ok_or_else(|| need("a source sequence"))?;
            let emb = emb.ok_or_else(|| need("node embeddings"))?;
            let banks = banks.ok_or_else(|| need("filter banks"))?;
            GraphSet::PerStep(build_dynamic_graph(
                tape, bound, source, transition, emb, banks, cfg, nodes,
            ))
        }
        GraphMode::Adp => {
            let emb = emb.ok_or_else(|| need("node embeddings"))?;
            GraphSet::Static(adaptive_graph(tape, bound, emb))
        }
        GraphMode::Pre => GraphSet::Predefined(adjacency.clone()),
        GraphMode::Com => {
            let emb = emb.ok_or_else(|| need("node embeddings"))?;
            GraphSet::Combined {
                predefined: adjacency.clone(),
                learned: adaptive_graph(tape, bound, emb),
            }
        }
    })
}

/// Plain-matrix evaluation of the dynamic graphs for one `N × d` embedding
/// matrix per timestamp, given explicit weights.
pub fn dynamic_graph_values(
    h: &Array2<f64>,
    transition: &Array2<f64>,
    e1: &Array2<f64>,
    e2: &Array2<f64>,
    w1: &[Array2<f64>],
    w2: &[Array2<f64>],
    alpha: f64,
) -> Array2<f64> {
    let mut ps = ParamSet::new();
    let emb = NodeEmbeddings {
        e1: ps.add("graph.e1", e1.clone()),
        e2: ps.add("graph.e2", e2.clone()),
    };
    let banks = FilterBanks {
        w1: w1.iter().enumerate().map(|(i, w)| ps.add(format!("w1_{i}"), w.clone())).collect(),
        w2: w2.iter().enumerate().map(|(i, w)| ps.add(format!("w2_{i}"), w.clone())).collect(),
    };
    let cfg = GraphConfig {
        k: w1.len() - 1,
        alpha,
        ..GraphConfig::default()
    };
    let mut tape = Tape::new();
    let bound = ps.bind(&mut tape);
    let src = tape.constant(h.clone());
    let p = Arc::new(transition.clone());
    let a = build_dynamic_graph(&mut tape, &bound, src, &p, &emb, &banks, &cfg, e1.nrows());
    tape.value(a).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn eye(n: usize) -> Array2<f64> {
        Array2::eye(n)
    }

    fn filter_values(h: &Array2<f64>, p: &Array2<f64>, w: &[Array2<f64>]) -> Array2<f64> {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let ws: Vec<Var> = w.iter().map(|w| tape.constant(w.clone())).collect();
        let f = dynamic_filter(&mut tape, &Arc::new(p.clone()), hv, &ws);
        tape.value(f).clone()
    }

    #[test]
    fn filter_identity_cases() {
        let h = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]];
        let p = array![[0.5, 0.5, 0.0], [0.2, 0.3, 0.5], [0.0, 0.0, 1.0]];
        assert_eq!(filter_values(&h, &p, &[eye(2)]), h);
        let f = filter_values(&h, &eye(3), &[eye(2), eye(2), eye(2)]);
        assert_eq!(f, &h * 3.0);
    }

    #[test]
    fn filter_two_node_chain() {
        let h = array![[1.0], [3.0]];
        let p = array![[0.5, 0.5], [0.0, 1.0]];
        let f = filter_values(&h, &p, &[array![[2.0]], array![[10.0]]]);
        // h W0 + P h W1 = [2, 6] + [20, 30]
        assert_eq!(f, array![[22.0], [36.0]]);
    }

    fn graph_of(e1: Array2<f64>, e2: Array2<f64>, alpha: f64) -> Array2<f64> {
        let mut tape = Tape::new();
        let n = e1.nrows();
        let a = tape.constant(e1);
        let b = tape.constant(e2);
        let g = antisym_graph(&mut tape, a, b, n, alpha);
        tape.value(g).clone()
    }

    #[test]
    fn two_node_hand_computation() {
        let g = graph_of(array![[1.0], [0.0]], array![[0.0], [1.0]], 1.0);
        assert_eq!(g, array![[0.0, 1f64.tanh()], [0.0, 0.0]]);
    }

    #[test]
    fn equal_factors_give_empty_graph() {
        let e = array![[0.3, -0.2], [0.9, 0.1], [-0.5, 0.7]];
        assert_eq!(graph_of(e.clone(), e, 3.0), Array2::<f64>::zeros((3, 3)));
    }

    #[test]
    fn saturation_stays_below_one() {
        let g = graph_of(array![[50.0], [0.0]], array![[0.0], [50.0]], 3.0);
        assert!(g[[0, 1]] < 1.0 && g[[0, 1]] > 0.99);
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in GraphMode::ALL {
            assert_eq!(m.name().parse::<GraphMode>().unwrap(), m);
        }
        assert!(matches!("mixed".parse::<GraphMode>(), Err(Error::Config(_))));
    }

    #[test]
    fn transpose_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(array![[1.0, 2.0, 3.0]]);
        let t = transpose(&mut tape, x);
        let w = tape.constant(array![[1.0], [10.0], [100.0]]);
        let p = tape.mul(t, w);
        let l = tape.sum(p);
        let g = tape.backward(l);
        assert_eq!(g.wrt(x).unwrap(), &array![[1.0, 10.0, 100.0]]);
    }

    #[test]
    fn adaptive_graph_is_row_stochastic() {
        let mut ps = ParamSet::new();
        let emb = NodeEmbeddings {
            e1: ps.add("e1", array![[0.3, -0.2], [0.9, 0.1], [-0.5, 0.7]]),
            e2: ps.add("e2", array![[0.1, 0.4], [-0.3, 0.2], [0.6, -0.8]]),
        };
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let a = adaptive_graph(&mut tape, &bound, &emb);
        for row in tape.value(a).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
    }
}
