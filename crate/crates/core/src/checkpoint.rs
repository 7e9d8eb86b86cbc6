//! Versioned binary checkpoints.
//!
//! Layout: the 5-byte magic `GCNM1`, a little-endian `u64` header length,
//! a JSON header (model kind, configuration, tensor directory, training
//! state), then every tensor as little-endian `f64` in directory order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Adam, ParamSet};
use crate::train::{EpochRecord, StopReason, TrainConfig, TrainState};

pub const MAGIC: &[u8; 5] = b"GCNM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    /// `None` while no finite validation score was seen.
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub adam_step: u64,
    pub learning_rate: f64,
    pub history: Vec<EpochRecord>,
    pub stop: Option<StopReason>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    training: Option<TrainingMeta>,
    tensors: Vec<TensorEntry>,
}

/// Optimizer state and last-epoch parameters, for resuming.
#[derive(Clone, Debug, PartialEq)]
pub struct Resume {
    pub meta: TrainingMeta,
    pub last: ParamSet,
    pub adam_m: Vec<Array2<f64>>,
    pub adam_v: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `gcnm` or `gru`.
    pub kind: String,
    pub config: serde_json::Value,
    /// Parameters to predict with (the best-validation ones after training).
    pub params: ParamSet,
    pub resume: Option<Resume>,
}

impl Checkpoint {
    /// Snapshot of a run in progress: `current` are the parameters after the
    /// last completed epoch.
    pub fn from_state(kind: &str, config: serde_json::Value, current: &ParamSet, state: &TrainState) -> Self {
        Self {
            kind: kind.to_string(),
            config,
            params: state.best_params.clone(),
            resume: Some(Resume {
                meta: TrainingMeta {
                    epoch: state.epoch,
                    best_val: state.best_val.is_finite().then_some(state.best_val),
                    best_epoch: state.best_epoch,
                    bad_epochs: state.bad_epochs,
                    adam_step: state.optimizer.step,
                    learning_rate: state.optimizer.lr,
                    history: state.history.clone(),
                    stop: state.stop.clone(),
                },
                last: current.clone(),
                adam_m: state.optimizer.m.clone(),
                adam_v: state.optimizer.v.clone(),
            }),
        }
    }

    /// Training state to continue from, and the parameters to continue with.
    pub fn train_state(&self, cfg: &TrainConfig) -> Option<(TrainState, ParamSet)> {
        let r = self.resume.as_ref()?;
        let mut optimizer = Adam::new(&r.last, cfg.learning_rate);
        optimizer.step = r.meta.adam_step;
        optimizer.m = r.adam_m.clone();
        optimizer.v = r.adam_v.clone();
        Some((
            TrainState {
                epoch: r.meta.epoch,
                best_val: r.meta.best_val.unwrap_or(f64::INFINITY),
                best_epoch: r.meta.best_epoch,
                bad_epochs: r.meta.bad_epochs,
                optimizer,
                best_params: self.params.clone(),
                history: r.meta.history.clone(),
                stop: r.meta.stop.clone(),
            },
            r.last.clone(),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut data: Vec<&Array2<f64>> = Vec::new();
        let mut push = |group: &str, ps: &ParamSet| {
            for (name, v) in ps.iter() {
                tensors.push(TensorEntry {
                    group: group.into(),
                    name: name.into(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                });
            }
        };
        push("params", &self.params);
        data.extend(self.params.values());
        if let Some(r) = &self.resume {
            push("last", &r.last);
            data.extend(r.last.values());
            for (group, arrays) in [("adam_m", &r.adam_m), ("adam_v", &r.adam_v)] {
                for ((name, _), v) in r.last.iter().zip(arrays.iter()) {
                    tensors.push(TensorEntry {
                        group: group.into(),
                        name: name.into(),
                        rows: v.nrows(),
                        cols: v.ncols(),
                    });
                    data.push(v);
                }
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            training: self.resume.as_ref().map(|r| r.meta.clone()),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + json.len() + data.iter().map(|a| a.len() * 8).sum::<usize>());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for a in data {
            for x in a.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 13 || &bytes[..5] != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint (missing GCNM1 header)",
                path.display()
            )));
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let body = bytes
            .get(13..13 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut offset = 13 + hlen;
        let mut groups: std::collections::BTreeMap<String, Vec<(String, Array2<f64>)>> = Default::default();
        for t in &header.tensors {
            let n = t.rows * t.cols;
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor {}", t.name)))?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = Array2::from_shape_vec((t.rows, t.cols), vals).expect("sizes agree");
            groups.entry(t.group.clone()).or_default().push((t.name.clone(), arr));
            offset += 8 * n;
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        let to_set = |items: Vec<(String, Array2<f64>)>| {
            let mut ps = ParamSet::new();
            for (name, v) in items {
                ps.add(name, v);
            }
            ps
        };
        let params = to_set(groups.remove("params").unwrap_or_default());
        let resume = match header.training {
            Some(meta) => {
                let last = to_set(groups.remove("last").unwrap_or_default());
                let take = |g: Option<Vec<(String, Array2<f64>)>>| -> Vec<Array2<f64>> {
                    g.unwrap_or_default().into_iter().map(|(_, a)| a).collect()
                };
                Some(Resume {
                    meta,
                    last,
                    adam_m: take(groups.remove("adam_m")),
                    adam_v: take(groups.remove("adam_v")),
                })
            }
            None => None,
        };
        Ok(Self {
            kind: header.kind,
            config: header.config,
            params,
            resume,
        })
    }
}

/// Copies `src` into `dst` by name; every parameter of `dst` must be present
/// with the same shape.
pub fn restore_params(dst: &mut ParamSet, src: &ParamSet) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            src.len(),
            dst.len()
        )));
    }
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let name = dst.name(id).to_string();
        let sid = src
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let v = src.get(sid);
        if v.dim() != dst.get(id).dim() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?}, model expects {:?}",
                v.dim(),
                dst.get(id).dim()
            )));
        }
        *dst.get_mut(id) = v.clone();
    }
    Ok(())
}
