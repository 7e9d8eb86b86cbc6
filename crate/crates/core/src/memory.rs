//! Local spatio-temporal statistics, learnable decay, and the multi-scale
//! attention memory that turns a window into enriched embeddings `h_t`.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SegmentIndex, SpatialNeighbors, TrafficSeries};
use crate::error::{Error, Result};
use crate::params::{fan_in_bound, Bound, ParamId, ParamSet};
use crate::tape::{CustomOp, Tape, Var};

/// Mean of the observed values among the `lookback` steps before `t`.
/// Returns `(0, true)` when none is observed.
pub fn temporal_mean(values: &[f64], mask: &[f64], t: usize, lookback: usize) -> (f64, bool) {
    let lo = t.saturating_sub(lookback);
    let (mut num, mut den) = (0.0, 0.0);
    for l in lo..t {
        num += mask[l] * values[l];
        den += mask[l];
    }
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

/// Last observed value before `t` within `lookback` steps and its distance in
/// steps; `(0, lookback)` when nothing is observed.
pub fn last_temporal(values: &[f64], mask: &[f64], t: usize, lookback: usize) -> (f64, f64) {
    for dist in 1..=lookback.min(t) {
        let l = t - dist;
        if mask[l] == 1.0 {
            return (mask[l] * values[l], dist as f64);
        }
    }
    (0.0, lookback as f64)
}

/// Mean of the observed readings among the `s` nearest neighbors of `node`
/// in one snapshot. The flag is set when no neighbor reading is observed
/// (including isolated nodes).
pub fn spatial_mean(
    snapshot: &[f64],
    mask: &[f64],
    node: usize,
    s: usize,
    neighbors: &SpatialNeighbors,
) -> (f64, bool) {
    let (mut num, mut den) = (0.0, 0.0);
    for &(j, _) in neighbors.lists[node].iter().take(s) {
        num += mask[j] * snapshot[j];
        den += mask[j];
    }
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

/// Reading of the closest neighbor observed in the snapshot and its road
/// distance; `(0, max_distance)` when none is observed.
pub fn nearest_spatial(
    snapshot: &[f64],
    mask: &[f64],
    node: usize,
    neighbors: &SpatialNeighbors,
) -> (f64, f64) {
    for &(j, d) in &neighbors.lists[node] {
        if mask[j] == 1.0 {
            return (mask[j] * snapshot[j], d);
        }
    }
    (0.0, neighbors.max_distance)
}

/// Exponentiated negative rectifier `exp(-max(0, w·δ + b))`, in `(0, 1]`.
pub fn decay(delta: f64, w: f64, b: f64) -> f64 {
    (-(w * delta + b).max(0.0)).exp()
}

/// Observed values pass through; missing ones blend the last/nearest
/// observations with the temporal/spatial means by the decay rates.
#[allow(clippy::too_many_arguments)]
pub fn local_feature(
    x: f64,
    m: f64,
    x_last: f64,
    x_near: f64,
    t_mean: f64,
    s_mean: f64,
    gamma_t: f64,
    gamma_s: f64,
) -> f64 {
    m * x
        + (1.0 - m)
            * (gamma_t * x_last + gamma_s * x_near + (1.0 - gamma_t) * t_mean + (1.0 - gamma_s) * s_mean)
}

/// How the four estimates of a missing value are weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalWeights {
    /// `γt, γs, 1−γt, 1−γs` as they stand; they sum to 2.
    #[default]
    Literal,
    /// The same weights halved so they sum to 1.
    Normalized,
}

impl LocalWeights {
    fn missing_scale(self) -> f64 {
        match self {
            LocalWeights::Literal => 1.0,
            LocalWeights::Normalized => 0.5,
        }
    }
}

/// Precomputed local statistics of one window, each `(tau·N) × F`
/// time-major like [`crate::data::Window::input`].
#[derive(Clone, Debug, PartialEq)]
pub struct LocalStats {
    pub x: Array2<f64>,
    pub mask: Array2<f64>,
    pub t_mean: Array2<f64>,
    pub x_last: Array2<f64>,
    pub delta_t: Array2<f64>,
    pub s_mean: Array2<f64>,
    pub x_near: Array2<f64>,
    pub delta_s: Array2<f64>,
    /// Entries whose temporal neighborhood was entirely missing.
    pub temporal_fallbacks: usize,
    /// Entries whose spatial neighborhood was entirely missing or empty.
    pub spatial_fallbacks: usize,
}

impl LocalStats {
    /// Statistics for input steps `anchor - tau .. anchor`.
    ///
    /// Raw values enter only through `mask * value`, so whatever is stored at
    /// missing positions cannot reach the result.
    pub fn compute(
        series: &TrafficSeries,
        anchor: usize,
        tau: usize,
        lookback: usize,
        spatial_k: usize,
        neighbors: &SpatialNeighbors,
    ) -> Self {
        let (n, f, _) = series.values.dim();
        let rows = tau * n;
        let mut out = Self {
            x: Array2::zeros((rows, f)),
            mask: Array2::zeros((rows, f)),
            t_mean: Array2::zeros((rows, f)),
            x_last: Array2::zeros((rows, f)),
            delta_t: Array2::zeros((rows, f)),
            s_mean: Array2::zeros((rows, f)),
            x_near: Array2::zeros((rows, f)),
            delta_s: Array2::zeros((rows, f)),
            temporal_fallbacks: 0,
            spatial_fallbacks: 0,
        };
        let mut snap = vec![0.0; n];
        let mut snap_mask = vec![0.0; n];
        for feat in 0..f {
            for (step, t) in (anchor - tau..anchor).enumerate() {
                for node in 0..n {
                    snap_mask[node] = series.mask[[node, feat, t]];
                    snap[node] = snap_mask[node] * series.values[[node, feat, t]];
                }
                for node in 0..n {
                    let lane = series.values.slice(s![node, feat, ..]);
                    let lane_mask = series.mask.slice(s![node, feat, ..]);
                    let (vals, msk) = (lane.as_slice().unwrap(), lane_mask.as_slice().unwrap());
                    let r = step * n + node;
                    out.x[[r, feat]] = snap[node];
                    out.mask[[r, feat]] = snap_mask[node];
                    let (tm, t_fallback) = temporal_mean(vals, msk, t, lookback);
                    let (xl, dl) = last_temporal(vals, msk, t, lookback);
                    let (sm, s_fallback) = spatial_mean(&snap, &snap_mask, node, spatial_k, neighbors);
                    let (xn, dn) = nearest_spatial(&snap, &snap_mask, node, neighbors);
                    out.t_mean[[r, feat]] = tm;
                    out.x_last[[r, feat]] = xl;
                    out.delta_t[[r, feat]] = dl;
                    out.s_mean[[r, feat]] = sm;
                    out.x_near[[r, feat]] = xn;
                    out.delta_s[[r, feat]] = dn;
                    out.temporal_fallbacks += t_fallback as usize;
                    out.spatial_fallbacks += s_fallback as usize;
                }
            }
        }
        out
    }
}

/// Memory slot values `(N·S) × F`, node-major (row `n*S + i`), in the slot
/// order of [`SegmentIndex::all`]. Missing entries read as 0.
pub fn memory_slots(series: &TrafficSeries, index: &SegmentIndex) -> Array2<f64> {
    let (n, f, _) = series.values.dim();
    let slots: Vec<usize> = index.all().collect();
    let s = slots.len();
    let mut out = Array2::zeros((n * s, f));
    for node in 0..n {
        for (i, &t) in slots.iter().enumerate() {
            for feat in 0..f {
                out[[node * s + i, feat]] =
                    series.mask[[node, feat, t]] * series.values[[node, feat, t]];
            }
        }
    }
    out
}

struct DecayOp {
    delta: Array2<f64>,
}

impl CustomOp for DecayOp {
    fn name(&self) -> &'static str {
        "decay"
    }

    fn backward(&self, inputs: &[&Array2<f64>], output: &Array2<f64>, grad: &Array2<f64>) -> Vec<Array2<f64>> {
        let (w, b) = (inputs[0][[0, 0]], inputs[1][[0, 0]]);
        let (mut dw, mut db) = (0.0, 0.0);
        ndarray::Zip::from(&self.delta)
            .and(output)
            .and(grad)
            .for_each(|&d, &y, &g| {
                if w * d + b > 0.0 {
                    let dpre = -y * g;
                    dw += dpre * d;
                    db += dpre;
                }
            });
        vec![Array2::from_elem((1, 1), dw), Array2::from_elem((1, 1), db)]
    }
}

/// Elementwise decay of the distances `delta` with scalar parameters.
pub fn decay_op(tape: &mut Tape, delta: &Array2<f64>, w: Var, b: Var) -> Var {
    let (wv, bv) = (tape.value(w)[[0, 0]], tape.value(b)[[0, 0]]);
    let value = delta.mapv(|d| decay(d, wv, bv));
    tape.custom(&[w, b], value, Box::new(DecayOp { delta: delta.clone() }))
}

struct LocalFeatureOp {
    /// `(1 - m)(x_last - t_mean)` and `(1 - m)(x_near - s_mean)`.
    sens_t: Array2<f64>,
    sens_s: Array2<f64>,
}

impl CustomOp for LocalFeatureOp {
    fn name(&self) -> &'static str {
        "local_feature"
    }

    fn backward(&self, _: &[&Array2<f64>], _: &Array2<f64>, grad: &Array2<f64>) -> Vec<Array2<f64>> {
        vec![grad * &self.sens_t, grad * &self.sens_s]
    }
}

/// `Z` for a whole window given the decay rates `gamma_t`, `gamma_s`.
pub fn local_feature_op(
    tape: &mut Tape,
    stats: &LocalStats,
    gamma_t: Var,
    gamma_s: Var,
    weights: LocalWeights,
) -> Var {
    let k = weights.missing_scale();
    let gt = tape.value(gamma_t);
    let gs = tape.value(gamma_s);
    let mut value = Array2::zeros(stats.x.dim());
    let mut sens_t = Array2::zeros(stats.x.dim());
    let mut sens_s = Array2::zeros(stats.x.dim());
    for idx in ndarray::indices(stats.x.dim()) {
        let m = stats.mask[idx];
        let fill = local_feature(
            0.0,
            0.0,
            stats.x_last[idx],
            stats.x_near[idx],
            stats.t_mean[idx],
            stats.s_mean[idx],
            gt[idx],
            gs[idx],
        );
        value[idx] = m * stats.x[idx] + (1.0 - m) * (k * fill);
        sens_t[idx] = k * (1.0 - m) * (stats.x_last[idx] - stats.t_mean[idx]);
        sens_s[idx] = k * (1.0 - m) * (stats.x_near[idx] - stats.s_mean[idx]);
    }
    tape.custom(
        &[gamma_t, gamma_s],
        value,
        Box::new(LocalFeatureOp { sens_t, sens_s }),
    )
}

struct NodeAttentionOp {
    nodes: usize,
    slots: usize,
    probs: Array2<f64>,
}

impl CustomOp for NodeAttentionOp {
    fn name(&self) -> &'static str {
        "node_attention"
    }

    fn backward(&self, inputs: &[&Array2<f64>], _: &Array2<f64>, grad: &Array2<f64>) -> Vec<Array2<f64>> {
        let (q, keys, vals) = (inputs[0], inputs[1], inputs[2]);
        let (n, s) = (self.nodes, self.slots);
        let mut dq = Array2::zeros(q.dim());
        let mut dk = Array2::zeros(keys.dim());
        let mut dv = Array2::zeros(vals.dim());
        for r in 0..q.nrows() {
            let node = r % n;
            let kb = keys.slice(s![node * s..(node + 1) * s, ..]);
            let vb = vals.slice(s![node * s..(node + 1) * s, ..]);
            let p = self.probs.row(r);
            let g = grad.row(r);
            let dp = vb.dot(&g);
            let mean = p.dot(&dp);
            let ds = &p * &(dp - mean);
            dq.row_mut(r).assign(&kb.t().dot(&ds));
            let mut dkb = dk.slice_mut(s![node * s..(node + 1) * s, ..]);
            for i in 0..s {
                dkb.row_mut(i).scaled_add(ds[i], &q.row(r));
            }
            let mut dvb = dv.slice_mut(s![node * s..(node + 1) * s, ..]);
            for i in 0..s {
                dvb.row_mut(i).scaled_add(p[i], &g);
            }
        }
        vec![dq, dk, dv]
    }
}

/// Attention probabilities of every query row over its node's memory slots.
///
/// `q` is `(B·N) × d` (row `r` belongs to node `r % N`), `keys` is
/// `(N·S) × d` node-major.
pub fn attention_weights(q: &Array2<f64>, keys: &Array2<f64>, nodes: usize) -> Array2<f64> {
    let slots = keys.nrows() / nodes;
    let mut probs = Array2::zeros((q.nrows(), slots));
    for r in 0..q.nrows() {
        let node = r % nodes;
        let kb = keys.slice(s![node * slots..(node + 1) * slots, ..]);
        let mut scores = kb.dot(&q.row(r));
        let mx = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        scores.mapv_inplace(|v| (v - mx).exp());
        let z = scores.sum();
        probs.row_mut(r).assign(&(scores / z));
    }
    probs
}

/// Per-node attention read-out `o[r] = Σ_i p[r,i] · values[node(r), i]`.
pub fn node_attention(tape: &mut Tape, q: Var, keys: Var, values: Var, nodes: usize) -> Result<Var> {
    let (kr, _) = tape.shape(keys);
    if kr == 0 || nodes == 0 {
        return Err(Error::NoMemorySlots);
    }
    if kr % nodes != 0 || tape.shape(values) != tape.shape(keys) || tape.shape(q).0 % nodes != 0 {
        return Err(Error::Shape(format!(
            "attention: q {:?}, keys {:?}, values {:?}, {nodes} nodes",
            tape.shape(q),
            tape.shape(keys),
            tape.shape(values)
        )));
    }
    let slots = kr / nodes;
    let probs = attention_weights(tape.value(q), tape.value(keys), nodes);
    let qv = tape.value(q);
    let vv = tape.value(values);
    let mut out = Array2::zeros((qv.nrows(), vv.ncols()));
    for r in 0..qv.nrows() {
        let node = r % nodes;
        let vb = vv.slice(s![node * slots..(node + 1) * slots, ..]);
        out.row_mut(r).assign(&probs.row(r).dot(&vb));
    }
    Ok(tape.custom(
        &[q, keys, values],
        out,
        Box::new(NodeAttentionOp {
            nodes,
            slots,
            probs,
        }),
    ))
}

/// Parameter handles of the memory module.
#[derive(Clone, Copy, Debug)]
pub struct MemoryParams {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_m: ParamId,
    pub b_m: ParamId,
    pub w_c: ParamId,
    pub b_c: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    /// Temporal decay `(w, b)`, shared across nodes.
    pub decay_tw: ParamId,
    pub decay_tb: ParamId,
    /// Spatial decay `(w, b)`, shared across nodes.
    pub decay_sw: ParamId,
    pub decay_sb: ParamId,
    pub weights: LocalWeights,
}

impl MemoryParams {
    pub fn register<R: Rng>(ps: &mut ParamSet, nodes: usize, features: usize, d: usize, rng: &mut R) -> Self {
        let bf = fan_in_bound(features);
        let bh = fan_in_bound(2 * d);
        let one = fan_in_bound(1);
        Self {
            w_q: ps.add_uniform("memory.w_q", (features, d), bf, rng),
            b_q: ps.add_uniform("memory.b_q", (nodes, d), bf, rng),
            w_m: ps.add_uniform("memory.w_m", (features, d), bf, rng),
            b_m: ps.add_uniform("memory.b_m", (nodes, d), bf, rng),
            w_c: ps.add_uniform("memory.w_c", (features, d), bf, rng),
            b_c: ps.add_uniform("memory.b_c", (nodes, d), bf, rng),
            w_h: ps.add_uniform("memory.w_h", (2 * d, d), bh, rng),
            b_h: ps.add_uniform("memory.b_h", (1, d), bh, rng),
            decay_tw: ps.add_uniform("decay.temporal_w", (1, 1), one, rng),
            decay_tb: ps.add_uniform("decay.temporal_b", (1, 1), one, rng),
            decay_sw: ps.add_uniform("decay.spatial_w", (1, 1), one, rng),
            decay_sb: ps.add_uniform("decay.spatial_b", (1, 1), one, rng),
            weights: LocalWeights::default(),
        }
    }

    /// Local features `Z` of every input step, `(tau·N) × F`.
    pub fn local_features(&self, tape: &mut Tape, bound: &Bound, stats: &LocalStats) -> Var {
        let gt = decay_op(tape, &stats.delta_t, bound.var(self.decay_tw), bound.var(self.decay_tb));
        let gs = decay_op(tape, &stats.delta_s, bound.var(self.decay_sw), bound.var(self.decay_sb));
        local_feature_op(tape, stats, gt, gs, self.weights)
    }

    /// Enriched embeddings `h_t = (q_t ‖ o_t) W_h + b_h` for every row of
    /// `z`, `(steps·N) × d`.
    pub fn attend(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        slots: &Array2<f64>,
        nodes: usize,
    ) -> Result<Var> {
        let steps = tape.shape(z).0 / nodes;
        let n_slots = slots.nrows() / nodes.max(1);
        if n_slots == 0 {
            return Err(Error::NoMemorySlots);
        }
        let zq = tape.matmul(z, bound.var(self.w_q));
        let bq = tape.tile_rows(bound.var(self.b_q), steps);
        let q = tape.add(zq, bq);
        let mem = tape.constant(slots.clone());
        let km = tape.matmul(mem, bound.var(self.w_m));
        let bm = tape.repeat_rows(bound.var(self.b_m), n_slots);
        let keys = tape.add(km, bm);
        let vm = tape.matmul(mem, bound.var(self.w_c));
        let bc = tape.repeat_rows(bound.var(self.b_c), n_slots);
        let values = tape.add(vm, bc);
        let o = node_attention(tape, q, keys, values, nodes)?;
        let qo = tape.concat_cols(&[q, o]);
        let h = tape.matmul(qo, bound.var(self.w_h));
        Ok(tape.add_row(h, bound.var(self.b_h)))
    }
}

/// Stand-alone evaluation of the attention memory for one local-feature
/// matrix `z` (`N × F`) against slot values (`(N·S) × F`).
pub fn memory_attend(
    params: &ParamSet,
    ids: &MemoryParams,
    z: &Array2<f64>,
    slots: &Array2<f64>,
) -> Result<Array2<f64>> {
    let nodes = z.nrows();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let zv = tape.constant(z.clone());
    let h = ids.attend(&mut tape, &bound, zv, slots, nodes)?;
    Ok(tape.value(h).clone())
}

/// Row sums of the attention probabilities, for invariant checks.
pub fn attention_row_sums(probs: &Array2<f64>) -> Vec<f64> {
    probs.sum_axis(Axis(1)).to_vec()
}
