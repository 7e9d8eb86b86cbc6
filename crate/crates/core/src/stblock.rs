//! Spatio-temporal block: gated dilated causal convolution, graph
//! convolution over the surviving timestamps, and a residual connection.
//!
//! Sequences are time-major `(steps·N) × d` matrices (see [`crate::tape`]).

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::GraphSet;
use crate::params::{fan_in_bound, Bound, ParamId, ParamSet};
use crate::tape::{Tape, Var};

/// Output length of a stack of dilated convolutions.
pub fn conv_output_len(len: usize, kernel: usize, dilations: &[usize]) -> Option<usize> {
    let shrink: usize = dilations.iter().map(|d| d * (kernel - 1)).sum();
    len.checked_sub(shrink).filter(|&l| l > 0)
}

/// Taps `W(s)` (`s = 0..kernel`, `W(0)` on the current step) and a bias.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub taps: Vec<ParamId>,
    pub bias: ParamId,
    pub dilation: usize,
}

impl ConvParams {
    pub fn register<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        kernel: usize,
        dilation: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let b = fan_in_bound(kernel * d);
        Self {
            taps: (0..kernel)
                .map(|s| ps.add_uniform(format!("{prefix}.tap{s}"), (d, d), b, rng))
                .collect(),
            bias: ps.add_uniform(format!("{prefix}.bias"), (1, d), b, rng),
            dilation,
        }
    }
}

/// `out(t) = Σ_s x(t - dilation·s) W(s) + b` over the valid range.
pub fn dilated_causal_conv(
    tape: &mut Tape,
    x: Var,
    nodes: usize,
    taps: &[Var],
    bias: Option<Var>,
    dilation: usize,
) -> Result<Var> {
    let len = tape.shape(x).0 / nodes;
    let reach = dilation * (taps.len() - 1);
    if len <= reach {
        return Err(Error::SequenceTooShort {
            length: len,
            required: reach,
        });
    }
    let out_len = len - reach;
    let mut acc: Option<Var> = None;
    for (s, &w) in taps.iter().enumerate() {
        let shifted = tape.row_slice(x, (reach - dilation * s) * nodes, out_len * nodes);
        let term = tape.matmul(shifted, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let out = acc.expect("at least one tap");
    Ok(match bias {
        Some(b) => tape.add_row(out, b),
        None => out,
    })
}

fn conv_stack(tape: &mut Tape, bound: &Bound, x: Var, nodes: usize, stack: &[ConvParams]) -> Result<Var> {
    let mut h = x;
    for c in stack {
        let taps: Vec<Var> = c.taps.iter().map(|&p| bound.var(p)).collect();
        h = dilated_causal_conv(tape, h, nodes, &taps, Some(bound.var(c.bias)), c.dilation)?;
    }
    Ok(h)
}

/// Filter and gate branches of a block.
#[derive(Clone, Debug)]
pub struct TcnParams {
    pub filter: Vec<ConvParams>,
    pub gate: Vec<ConvParams>,
}

impl TcnParams {
    pub fn register<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        kernel: usize,
        dilations: &[usize],
        d: usize,
        rng: &mut R,
    ) -> Self {
        let filter = dilations
            .iter()
            .enumerate()
            .map(|(i, &dil)| ConvParams::register(ps, &format!("{prefix}.filter{i}"), kernel, dil, d, rng))
            .collect();
        let gate = dilations
            .iter()
            .enumerate()
            .map(|(i, &dil)| ConvParams::register(ps, &format!("{prefix}.gate{i}"), kernel, dil, d, rng))
            .collect();
        Self { filter, gate }
    }
}

/// `tanh(filter ⋆ H) ⊙ sigmoid(gate ⋆ H)`.
pub fn gated_tcn(tape: &mut Tape, bound: &Bound, h: Var, nodes: usize, p: &TcnParams) -> Result<Var> {
    let f = conv_stack(tape, bound, h, nodes, &p.filter)?;
    let g = conv_stack(tape, bound, h, nodes, &p.gate)?;
    let f = tape.tanh(f);
    let g = tape.sigmoid(g);
    Ok(tape.mul(f, g))
}

fn diffuse_const(tape: &mut Tape, a: &Arc<Array2<f64>>, h: Var, w: &[Var]) -> Var {
    let mut hk = h;
    let mut out = tape.matmul(hk, w[0]);
    for &wk in &w[1..] {
        hk = tape.const_block_mul(a.clone(), hk);
        let t = tape.matmul(hk, wk);
        out = tape.add(out, t);
    }
    out
}

fn diffuse_stacked(tape: &mut Tape, a: Var, h: Var, w: &[Var]) -> Var {
    let mut hk = h;
    let mut out = tape.matmul(hk, w[0]);
    for &wk in &w[1..] {
        hk = tape.block_mul(a, hk);
        let t = tape.matmul(hk, wk);
        out = tape.add(out, t);
    }
    out
}

fn row_normalized(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let z = row.sum();
        if z != 0.0 {
            row.mapv_inplace(|v| v / z);
        }
    }
    out
}

/// `Σ_k Â_t^k h(t) W_k` with row-normalized `Â_t`; `weights` holds one bank
/// of `K + 1` matrices per graph in `graphs`, and the banks' results are
/// summed.
pub fn dynamic_graph_conv(
    tape: &mut Tape,
    h: Var,
    graphs: &GraphSet,
    weights: &[Vec<Var>],
    nodes: usize,
) -> Result<Var> {
    if weights.len() != graphs.num_graphs() {
        return Err(Error::Shape(format!(
            "{} weight banks for {} graphs",
            weights.len(),
            graphs.num_graphs()
        )));
    }
    let steps = tape.shape(h).0 / nodes;
    Ok(match graphs {
        GraphSet::PerStep(a) => {
            let graph_steps = tape.shape(*a).0 / nodes;
            if graph_steps != steps {
                return Err(Error::Alignment {
                    graphs: graph_steps,
                    steps,
                });
            }
            let an = tape.row_normalize(*a);
            diffuse_stacked(tape, an, h, &weights[0])
        }
        GraphSet::Static(a) => {
            let tiled = tape.tile_rows(*a, steps);
            let an = tape.row_normalize(tiled);
            diffuse_stacked(tape, an, h, &weights[0])
        }
        GraphSet::Predefined(a) => {
            let p = Arc::new(row_normalized(a));
            diffuse_const(tape, &p, h, &weights[0])
        }
        GraphSet::Combined { predefined, learned } => {
            let p = Arc::new(row_normalized(predefined));
            let x = diffuse_const(tape, &p, h, &weights[0]);
            let tiled = tape.tile_rows(*learned, steps);
            let an = tape.row_normalize(tiled);
            let y = diffuse_stacked(tape, an, h, &weights[1]);
            tape.add(x, y)
        }
    })
}

/// Graph-convolution banks of one block, one per graph.
#[derive(Clone, Debug)]
pub struct GraphConvParams {
    pub banks: Vec<Vec<ParamId>>,
}

impl GraphConvParams {
    pub fn register<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        graphs: usize,
        k: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let b = fan_in_bound((k + 1) * d);
        let banks = (0..graphs)
            .map(|g| {
                (0..=k)
                    .map(|i| ps.add_uniform(format!("{prefix}.gconv{g}_{i}"), (d, d), b, rng))
                    .collect()
            })
            .collect();
        Self { banks }
    }

    pub fn bind(&self, bound: &Bound) -> Vec<Vec<Var>> {
        self.banks
            .iter()
            .map(|bank| bank.iter().map(|&p| bound.var(p)).collect())
            .collect()
    }
}

/// Result of one block.
pub struct BlockOutput {
    /// `H_{i+1}`, `(τ_{i+1}·N) × d`.
    pub next: Var,
    /// Gated convolution output `h_i`, tapped by the skip connections.
    pub gated: Var,
    pub out_len: usize,
}

/// One block on `h_in` (`(τ_i·N) × d`) with graphs for its surviving
/// timestamps.
pub fn st_block(
    tape: &mut Tape,
    bound: &Bound,
    h_in: Var,
    graphs: &GraphSet,
    tcn: &TcnParams,
    gconv: &GraphConvParams,
    nodes: usize,
) -> Result<BlockOutput> {
    let in_len = tape.shape(h_in).0 / nodes;
    let gated = gated_tcn(tape, bound, h_in, nodes, tcn)?;
    let out_len = tape.shape(gated).0 / nodes;
    let conv = dynamic_graph_conv(tape, gated, graphs, &gconv.bind(bound), nodes)?;
    let tail = tape.row_slice(h_in, (in_len - out_len) * nodes, out_len * nodes);
    let next = tape.add(tail, conv);
    Ok(BlockOutput {
        next,
        gated,
        out_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_lengths() {
        assert_eq!(conv_output_len(12, 2, &[1, 2]), Some(9));
        assert_eq!(conv_output_len(13, 2, &[1, 2]), Some(10));
        assert_eq!(conv_output_len(3, 2, &[1, 2]), None);
        let mut len = 13;
        for _ in 0..4 {
            len = conv_output_len(len, 2, &[1, 2]).unwrap();
        }
        assert_eq!(len, 1);
    }

    fn conv1(input: &[f64], kernel: &[f64], dilation: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_shape_vec((input.len(), 1), input.to_vec()).unwrap());
        let taps: Vec<Var> = kernel.iter().map(|&k| tape.constant(array![[k]])).collect();
        let y = dilated_causal_conv(&mut tape, x, 1, &taps, None, dilation)?;
        Ok(tape.value(y).iter().copied().collect())
    }

    #[test]
    fn scalar_convolutions() {
        assert_eq!(conv1(&[1.0, 3.0], &[0.5, 0.5], 1).unwrap(), vec![2.0]);
        // kernel [1, 0] keeps the current step
        assert_eq!(conv1(&[4.0, 5.0, 6.0, 7.0], &[1.0, 0.0], 2).unwrap(), vec![6.0, 7.0]);
        // tap 1 reaches dilation steps back
        assert_eq!(conv1(&[4.0, 5.0, 6.0, 7.0], &[0.0, 1.0], 2).unwrap(), vec![4.0, 5.0]);
        assert!(matches!(
            conv1(&[1.0, 2.0], &[1.0, 1.0], 2),
            Err(Error::SequenceTooShort { length: 2, required: 2 })
        ));
    }

    fn setup(d: usize) -> (ParamSet, TcnParams, GraphConvParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let tcn = TcnParams::register(&mut ps, "b0", 2, &[1, 2], d, &mut rng);
        let gc = GraphConvParams::register(&mut ps, "b0", 1, 1, d, &mut rng);
        (ps, tcn, gc)
    }

    fn gated_values(ps: &ParamSet, tcn: &TcnParams, x: &Array2<f64>, nodes: usize) -> Array2<f64> {
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let h = gated_tcn(&mut tape, &bound, xv, nodes, tcn).unwrap();
        tape.value(h).clone()
    }

    #[test]
    fn gate_and_filter_limits() {
        let (ps, tcn, _) = setup(3);
        let x = Array2::from_shape_fn((12 * 2, 3), |(i, j)| ((i + 2 * j) as f64 * 0.7).sin());
        let full = gated_values(&ps, &tcn, &x, 2);
        assert_eq!(full.nrows(), 9 * 2);
        assert!(full.iter().all(|v| v.abs() < 1.0));

        let mut half = ps.clone();
        for c in &tcn.gate {
            for &t in &c.taps {
                half.get_mut(t).fill(0.0);
            }
            half.get_mut(c.bias).fill(0.0);
        }
        let gated = gated_values(&half, &tcn, &x, 2);
        let mut filt = half.clone();
        // gate = sigmoid(0) = 1/2
        let mut tape = Tape::new();
        let bound = filt.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let f = conv_stack(&mut tape, &bound, xv, 2, &tcn.filter).unwrap();
        let expect = tape.value(f).mapv(|v| 0.5 * v.tanh());
        for (a, b) in gated.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }

        for c in &tcn.filter {
            for &t in &c.taps {
                filt.get_mut(t).fill(0.0);
            }
            filt.get_mut(c.bias).fill(0.0);
        }
        assert!(gated_values(&filt, &tcn, &x, 2).iter().all(|&v| v == 0.0));
    }

    fn gconv_values(h: &Array2<f64>, graphs: &Array2<f64>, w: &[Array2<f64>], nodes: usize) -> Array2<f64> {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let a = tape.constant(graphs.clone());
        let ws: Vec<Var> = w.iter().map(|w| tape.constant(w.clone())).collect();
        let y = dynamic_graph_conv(&mut tape, hv, &GraphSet::PerStep(a), &[ws], nodes).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn graph_conv_cases() {
        let h = array![[1.0, 2.0], [3.0, 4.0]];
        let zero = Array2::zeros((2, 2));
        let i2 = Array2::eye(2);
        let w1 = array![[0.5, 1.0], [-1.0, 2.0]];
        assert_eq!(gconv_values(&h, &zero, &[i2.clone(), w1.clone()], 2), h);
        assert_eq!(gconv_values(&h, &array![[0.0, 0.7], [0.0, 0.0]], &[i2.clone()], 2), h);
        // 2-node graph, K = 1: row-normalized A = [[0, 1], [0, 0]]
        let a = array![[0.0, 0.4], [0.0, 0.0]];
        let w0 = array![[2.0, 0.0], [0.0, 3.0]];
        let got = gconv_values(&h, &a, &[w0.clone(), w1.clone()], 2);
        let an = array![[0.0, 1.0], [0.0, 0.0]];
        let expect = an.dot(&h).dot(&w1) + h.dot(&w0);
        assert_eq!(got, expect);
    }

    #[test]
    fn misaligned_graphs_error() {
        let mut tape = Tape::new();
        let h = tape.constant(Array2::zeros((6, 2)));
        let a = tape.constant(Array2::zeros((4, 2)));
        let w = vec![vec![tape.constant(Array2::eye(2))]];
        let r = dynamic_graph_conv(&mut tape, h, &GraphSet::PerStep(a), &w, 2);
        assert!(matches!(r, Err(Error::Alignment { graphs: 2, steps: 3 })));
    }

    #[test]
    fn zero_graph_conv_leaves_residual_tail() {
        let (mut ps, tcn, gc) = setup(2);
        for bank in &gc.banks {
            for &w in bank {
                ps.get_mut(w).fill(0.0);
            }
        }
        let x = Array2::from_shape_fn((12 * 2, 2), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let a = tape.constant(Array2::zeros((9 * 2, 2)));
        let out = st_block(&mut tape, &bound, xv, &GraphSet::PerStep(a), &tcn, &gc, 2).unwrap();
        assert_eq!(out.out_len, 9);
        assert_eq!(tape.value(out.next), &x.slice(ndarray::s![3 * 2.., ..]).to_owned());
    }

    #[test]
    fn block_is_causal() {
        let (ps, tcn, gc) = setup(2);
        let run = |x: &Array2<f64>| {
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let a = tape.constant(array![[0.0, 0.5], [0.0, 0.0]]);
            let g = tape.tile_rows(a, 9);
            let out = st_block(&mut tape, &bound, xv, &GraphSet::PerStep(g), &tcn, &gc, 2).unwrap();
            tape.value(out.next).clone()
        };
        let x = Array2::from_shape_fn((12 * 2, 2), |(i, j)| ((i * 5 + j) as f64).cos());
        let base = run(&x);
        for t in 0..12 {
            let mut y = x.clone();
            y[[t * 2 + 1, 0]] += 1.0;
            let out = run(&y);
            // output step j corresponds to input step j + 3
            for j in 0..9 {
                let same = (0..2).all(|n| out.row(j * 2 + n) == base.row(j * 2 + n));
                if j + 3 < t {
                    assert!(same, "step {j} changed by perturbing input {t}");
                }
            }
        }
    }
}
