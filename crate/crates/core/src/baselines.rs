//! Reference models: a node-shared GRU, its self-imputing variant, and the
//! mean / linear-interpolation imputers of the two-step pipelines.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{TrafficSeries, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::masked_abs_sum;
use crate::params::{fan_in_bound, Bound, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::train::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Imputer {
    Mean,
    Knn,
}

/// Nodes/features whose every value was missing and got the fallback.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ImputeReport {
    pub fallbacks: Vec<(usize, usize)>,
}

fn global_mean(series: &TrafficSeries) -> f64 {
    let count = series.mask.sum();
    if count == 0.0 {
        0.0
    } else {
        (&series.values * &series.mask).sum() / count
    }
}

/// Missing entries become the mean of the node's observed values (per
/// feature); completely missing lanes take the global mean. The returned
/// mask is all ones.
pub fn impute_mean(series: &TrafficSeries) -> (TrafficSeries, ImputeReport) {
    let (n, f, t) = series.values.dim();
    let global = global_mean(series);
    let mut out = series.clone();
    let mut report = ImputeReport::default();
    for node in 0..n {
        for feat in 0..f {
            let (mut sum, mut cnt) = (0.0, 0.0);
            for step in 0..t {
                let m = series.mask[[node, feat, step]];
                sum += m * series.values[[node, feat, step]];
                cnt += m;
            }
            let fill = if cnt > 0.0 {
                sum / cnt
            } else {
                report.fallbacks.push((node, feat));
                global
            };
            for step in 0..t {
                if series.mask[[node, feat, step]] == 0.0 {
                    out.values[[node, feat, step]] = fill;
                }
            }
        }
    }
    out.mask.fill(1.0);
    (out, report)
}

/// Linear interpolation between the previous and next observed values on
/// the same lane; leading/trailing gaps copy the nearest observation and
/// completely missing lanes take the global mean. The returned mask
/// is all ones.
pub fn impute_knn(series: &TrafficSeries) -> (TrafficSeries, ImputeReport) {
    let (n, f, t) = series.values.dim();
    let global = global_mean(series);
    let mut out = series.clone();
    let mut report = ImputeReport::default();
    for node in 0..n {
        for feat in 0..f {
            let observed: Vec<usize> = (0..t).filter(|&s| series.mask[[node, feat, s]] == 1.0).collect();
            if observed.is_empty() {
                report.fallbacks.push((node, feat));
                for s in 0..t {
                    out.values[[node, feat, s]] = global;
                }
                continue;
            }
            let v = |s: usize| series.values[[node, feat, s]];
            let (first, last) = (observed[0], *observed.last().unwrap());
            for s in 0..first {
                out.values[[node, feat, s]] = v(first);
            }
            for s in last + 1..t {
                out.values[[node, feat, s]] = v(last);
            }
            for pair in observed.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                for s in a + 1..b {
                    let w = (s - a) as f64 / (b - a) as f64;
                    out.values[[node, feat, s]] = v(a) + w * (v(b) - v(a));
                }
            }
        }
    }
    out.mask.fill(1.0);
    (out, report)
}

pub fn impute(series: &TrafficSeries, imputer: Imputer) -> (TrafficSeries, ImputeReport) {
    match imputer {
        Imputer::Mean => impute_mean(series),
        Imputer::Knn => impute_knn(series),
    }
}

/// Inputs of a recurrent baseline.
#[derive(Clone, Debug)]
pub struct SeqSample {
    /// `(tau·N) × F`, time-major, missing as 0.
    pub x: Array2<f64>,
    pub mask: Array2<f64>,
    pub target: Array2<f64>,
    pub target_mask: Array2<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Gate {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct GruIds {
    update: Gate,
    reset: Gate,
    cand: Gate,
    out_w: ParamId,
    out_b: ParamId,
    pred_w: Option<ParamId>,
    pred_b: Option<ParamId>,
}

/// Recurrent cell shared by all nodes; `imputing` selects the variant that
/// replaces missing inputs with its own one-step predictions.
#[derive(Clone, Debug)]
pub struct GruModel {
    pub params: ParamSet,
    ids: GruIds,
    pub hidden: usize,
    pub horizon: usize,
    pub tau: usize,
    pub nodes: usize,
    pub features: usize,
    pub imputing: bool,
}

impl GruModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        nodes: usize,
        features: usize,
        tau: usize,
        horizon: usize,
        hidden: usize,
        imputing: bool,
        seed: u64,
    ) -> Result<Self> {
        if hidden == 0 || tau == 0 || horizon == 0 {
            return Err(Error::Config("GRU hidden size, tau and horizon must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let b = fan_in_bound(hidden);
        let mut gate = |name: &str, ps: &mut ParamSet| Gate {
            w: ps.add_uniform(format!("gru.{name}.w"), (features, hidden), b, &mut rng),
            u: ps.add_uniform(format!("gru.{name}.u"), (hidden, hidden), b, &mut rng),
            b: ps.add_uniform(format!("gru.{name}.b"), (1, hidden), b, &mut rng),
        };
        let update = gate("update", &mut ps);
        let reset = gate("reset", &mut ps);
        let cand = gate("candidate", &mut ps);
        let out_w = ps.add_uniform("gru.out.w", (hidden, horizon), b, &mut rng);
        let out_b = ps.add_uniform("gru.out.b", (1, horizon), b, &mut rng);
        let (pred_w, pred_b) = if imputing {
            (
                Some(ps.add_uniform("gru.pred.w", (hidden, features), b, &mut rng)),
                Some(ps.add_uniform("gru.pred.b", (1, features), b, &mut rng)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            params: ps,
            ids: GruIds {
                update,
                reset,
                cand,
                out_w,
                out_b,
                pred_w,
                pred_b,
            },
            hidden,
            horizon,
            tau,
            nodes,
            features,
            imputing,
        })
    }

    pub fn output_bias(&self) -> ParamId {
        self.ids.out_b
    }

    pub fn seq_sample(&self, ds: &WindowedDataset, k: usize) -> SeqSample {
        let w = ds.window(k);
        SeqSample {
            x: w.input,
            mask: w.mask,
            target: w.target,
            target_mask: w.target_mask,
        }
    }

    fn affine(tape: &mut Tape, bound: &Bound, g: &Gate, x: Var, h: Var) -> Var {
        let a = tape.matmul(x, bound.var(g.w));
        let c = tape.matmul(h, bound.var(g.u));
        let s = tape.add(a, c);
        tape.add_row(s, bound.var(g.b))
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, s: &SeqSample) -> Result<Var> {
        let n = self.nodes;
        if s.x.nrows() != self.tau * n || s.x.ncols() != self.features {
            return Err(Error::Shape(format!(
                "GRU input {:?}, expected ({}, {})",
                s.x.dim(),
                self.tau * n,
                self.features
            )));
        }
        let x_all = tape.constant(s.x.clone());
        let mut h = tape.constant(Array2::zeros((n, self.hidden)));
        for t in 0..self.tau {
            let mut x = tape.row_slice(x_all, t * n, n);
            if let (Some(pw), Some(pb)) = (self.ids.pred_w, self.ids.pred_b) {
                let m = s.mask.slice(ndarray::s![t * n..(t + 1) * n, ..]).to_owned();
                let missing = tape.constant(m.mapv(|v| 1.0 - v));
                let p = tape.matmul(h, bound.var(pw));
                let p = tape.add_row(p, bound.var(pb));
                let fill = tape.mul(missing, p);
                x = tape.add(x, fill);
            }
            let z = Self::affine(tape, bound, &self.ids.update, x, h);
            let z = tape.sigmoid(z);
            let r = Self::affine(tape, bound, &self.ids.reset, x, h);
            let r = tape.sigmoid(r);
            let rh = tape.mul(r, h);
            let c = Self::affine(tape, bound, &self.ids.cand, x, rh);
            let c = tape.tanh(c);
            // h' = h + z (c - h)
            let delta = tape.sub(c, h);
            let step = tape.mul(z, delta);
            h = tape.add(h, step);
        }
        let y = tape.matmul(h, bound.var(self.ids.out_w));
        let y = tape.add_row(y, bound.var(self.ids.out_b));
        if tape.value(y).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "gru output".into(),
            });
        }
        Ok(y)
    }
}

impl Model for GruModel {
    type Sample = SeqSample;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn make_sample(&self, ds: &WindowedDataset, k: usize) -> SeqSample {
        self.seq_sample(ds, k)
    }

    fn error_and_grad(&self, s: &SeqSample) -> Result<(f64, f64, Vec<Array2<f64>>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let y = self.forward(&mut tape, &bound, s)?;
        let err = masked_abs_sum(&mut tape, y, &s.target, &s.target_mask);
        let value = tape.value(err)[[0, 0]];
        let mut grads = tape.backward(err);
        Ok((value, s.target_mask.sum(), bound.collect(&mut grads, &self.params)))
    }

    fn predict(&self, s: &SeqSample) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let y = self.forward(&mut tape, &bound, s)?;
        Ok(tape.value(y).clone())
    }

    fn target<'a>(&self, s: &'a SeqSample) -> (&'a Array2<f64>, &'a Array2<f64>) {
        (&s.target, &s.target_mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn lane(vals: &[Option<f64>]) -> TrafficSeries {
        let t = vals.len();
        let values = Array3::from_shape_fn((1, 1, t), |(_, _, s)| vals[s].unwrap_or(0.0));
        let mask = Array3::from_shape_fn((1, 1, t), |(_, _, s)| vals[s].map_or(0.0, |_| 1.0));
        TrafficSeries::new(values, mask, vec!["a".into()]).unwrap()
    }

    fn filled(s: &TrafficSeries) -> Vec<f64> {
        s.values.iter().copied().collect()
    }

    #[test]
    fn mean_imputation() {
        let (out, rep) = impute_mean(&lane(&[Some(10.0), None, Some(20.0)]));
        assert_eq!(filled(&out), vec![10.0, 15.0, 20.0]);
        assert!(rep.fallbacks.is_empty());
        assert!(out.mask.iter().all(|&m| m == 1.0));
        let full = lane(&[Some(1.0), Some(2.0)]);
        assert_eq!(impute_mean(&full).0, full);
    }

    #[test]
    fn mean_fallback_uses_global_mean() {
        let values = Array3::from_shape_vec((2, 1, 2), vec![6.0, 8.0, 0.0, 0.0]).unwrap();
        let mask = Array3::from_shape_vec((2, 1, 2), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let s = TrafficSeries::new(values, mask, vec!["a".into(), "b".into()]).unwrap();
        let (out, rep) = impute_mean(&s);
        assert_eq!(out.values[[1, 0, 0]], 7.0);
        assert_eq!(rep.fallbacks, vec![(1, 0)]);
    }

    #[test]
    fn linear_interpolation() {
        assert_eq!(filled(&impute_knn(&lane(&[Some(10.0), None, Some(20.0)])).0), vec![10.0, 15.0, 20.0]);
        assert_eq!(
            filled(&impute_knn(&lane(&[Some(10.0), None, None, Some(16.0)])).0),
            vec![10.0, 12.0, 14.0, 16.0]
        );
        assert_eq!(filled(&impute_knn(&lane(&[None, Some(5.0)])).0), vec![5.0, 5.0]);
        assert_eq!(filled(&impute_knn(&lane(&[Some(5.0), None])).0), vec![5.0, 5.0]);
        let (_, rep) = impute_knn(&lane(&[None, None]));
        assert_eq!(rep.fallbacks, vec![(0, 0)]);
    }

    #[test]
    fn imputers_keep_observed_values() {
        let s = lane(&[Some(3.0), None, Some(0.0), None, None, Some(9.0), None]);
        for imp in [Imputer::Mean, Imputer::Knn] {
            let (out, _) = impute(&s, imp);
            for k in 0..s.len() {
                if s.mask[[0, 0, k]] == 1.0 {
                    assert_eq!(out.values[[0, 0, k]], s.values[[0, 0, k]]);
                }
            }
            assert_eq!(impute(&out, imp).0, out);
        }
    }

    fn seq(nodes: usize, tau: usize, missing: &[(usize, usize)]) -> SeqSample {
        let mut x = Array2::from_shape_fn((tau * nodes, 1), |(r, _)| (r as f64 * 0.37).sin());
        let mut mask = Array2::ones((tau * nodes, 1));
        for &(t, n) in missing {
            x[[t * nodes + n, 0]] = 0.0;
            mask[[t * nodes + n, 0]] = 0.0;
        }
        SeqSample {
            x,
            mask,
            target: Array2::zeros((nodes, 3)),
            target_mask: Array2::ones((nodes, 3)),
        }
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let mut m = GruModel::new(2, 1, 4, 3, 5, false, 1).unwrap();
        let bias = array![[0.5, -1.0, 2.0]];
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            m.params.get_mut(id).fill(0.0);
        }
        *m.params.get_mut(m.output_bias()) = bias.clone();
        let y = m.predict(&seq(2, 4, &[])).unwrap();
        assert_eq!(y, array![[0.5, -1.0, 2.0], [0.5, -1.0, 2.0]]);
    }

    #[test]
    fn imputing_variant_matches_plain_on_complete_windows() {
        let plain = GruModel::new(3, 1, 5, 3, 4, false, 2).unwrap();
        let mut imp = GruModel::new(3, 1, 5, 3, 4, true, 2).unwrap();
        for (name, v) in plain.params.iter() {
            let id = imp.params.id(name).unwrap();
            *imp.params.get_mut(id) = v.clone();
        }
        let s = seq(3, 5, &[]);
        assert_eq!(plain.predict(&s).unwrap(), imp.predict(&s).unwrap());
        // with a gap the substitution changes the output
        let g = seq(3, 5, &[(2, 1)]);
        assert_ne!(plain.predict(&g).unwrap(), imp.predict(&g).unwrap());
    }
}
