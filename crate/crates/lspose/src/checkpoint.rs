//! Binary checkpoint format.
//!
//! Layout: 8-byte magic `LSPCKPT1`, a little-endian u64 header length, a
//! UTF-8 JSON header, then a flat blob of little-endian f64 values. The
//! header lists every parameter (name, shape, blob offset) and, when
//! present, per-optimizer first/second moment buffers with their step
//! counts, so a load restores training state exactly. Offsets and
//! lengths are in f64 counts from the start of the blob area.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::nn::{ParamShape, ParamStore};

const MAGIC: &[u8; 8] = b"LSPCKPT1";

/// One optimizer's adaptive-moment state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptSnapshot {
    /// Which module this optimizer owns (e.g. "translation").
    pub label: String,
    /// Global step count for bias correction.
    pub step: u64,
    /// (parameter name, first moment, second moment).
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

/// A fully materialized checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Epochs completed when this was written.
    pub epoch: usize,
    /// Training regime tag, self-describing for resumed runs.
    pub regime: String,
    pub seed: u64,
    /// Learning rate in effect after `epoch` epochs.
    pub lr: f64,
    pub initial_lr: f64,
    /// Plateau scheduler state: best objective seen, consecutive
    /// non-improving epochs.
    pub sched_best: Option<f64>,
    pub sched_bad: usize,
    /// Every parameter tensor in store order.
    pub params: Vec<(String, ParamShape, Vec<f64>)>,
    /// Optimizer states; empty for inference-only checkpoints.
    pub optimizers: Vec<OptSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: ParamShape,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    len: usize,
    m_offset: usize,
    v_offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    label: String,
    step: u64,
    moments: Vec<MomentEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    epoch: usize,
    regime: String,
    seed: u64,
    lr: f64,
    initial_lr: f64,
    sched_best: Option<f64>,
    sched_bad: usize,
    params: Vec<ParamEntry>,
    optimizers: Vec<OptHeader>,
}

impl Checkpoint {
    /// Snapshot of a parameter store plus run state.
    #[allow(clippy::too_many_arguments)]
    pub fn from_store(
        store: &ParamStore,
        model: ModelConfig,
        epoch: usize,
        regime: &str,
        seed: u64,
        lr: f64,
        initial_lr: f64,
        sched_best: Option<f64>,
        sched_bad: usize,
        optimizers: Vec<OptSnapshot>,
    ) -> Checkpoint {
        let params = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.shape, p.data.clone()))
            .collect();
        Checkpoint {
            model,
            epoch,
            regime: regime.to_string(),
            seed,
            lr,
            initial_lr,
            sched_best,
            sched_bad,
            params,
            optimizers,
        }
    }

    /// Writes every stored parameter into `store`, which must contain
    /// exactly the same names and shapes.
    pub fn apply_params(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters but the model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, shape, data) in &self.params {
            let id = store.id_of(name).ok_or_else(|| {
                Error::Config(format!("checkpoint parameter {name} is absent from the model"))
            })?;
            let p = store.get_mut(id);
            if p.shape != *shape {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name} has shape {shape:?}, model expects {:?}",
                    p.shape
                )));
            }
            p.data.copy_from_slice(data);
        }
        Ok(())
    }

    /// Rebuilds a named parameter store, e.g. as a donor for encoder
    /// weight adaptation.
    pub fn param_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::default();
        for (name, shape, data) in &self.params {
            store.add(name, *shape, data.clone())?;
        }
        Ok(store)
    }

    /// Looks up one optimizer snapshot by label.
    pub fn optimizer(&self, label: &str) -> Option<&OptSnapshot> {
        self.optimizers.iter().find(|o| o.label == label)
    }
}

/// Serializes a checkpoint to `path` (atomically via a sibling temp file).
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut offset = 0usize;
    let params: Vec<ParamEntry> = ckpt
        .params
        .iter()
        .map(|(name, shape, data)| {
            debug_assert_eq!(shape.len(), data.len(), "{name}");
            let e = ParamEntry { name: name.clone(), shape: *shape, offset };
            offset += data.len();
            e
        })
        .collect();
    let optimizers: Vec<OptHeader> = ckpt
        .optimizers
        .iter()
        .map(|o| OptHeader {
            label: o.label.clone(),
            step: o.step,
            moments: o
                .moments
                .iter()
                .map(|(name, m, v)| {
                    debug_assert_eq!(m.len(), v.len(), "{name}");
                    let e = MomentEntry {
                        name: name.clone(),
                        len: m.len(),
                        m_offset: offset,
                        v_offset: offset + m.len(),
                    };
                    offset += 2 * m.len();
                    e
                })
                .collect(),
        })
        .collect();
    let header = Header {
        version: 1,
        model: ckpt.model.clone(),
        epoch: ckpt.epoch,
        regime: ckpt.regime.clone(),
        seed: ckpt.seed,
        lr: ckpt.lr,
        initial_lr: ckpt.initial_lr,
        sched_best: ckpt.sched_best,
        sched_bad: ckpt.sched_bad,
        params,
        optimizers,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Contract(format!("checkpoint header serialization: {e}")))?;

    let mut buf =
        Vec::with_capacity(MAGIC.len() + 8 + header_json.len() + offset * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, _, data) in &ckpt.params {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for o in &ckpt.optimizers {
        for (_, m, v) in &o.moments {
            for x in m {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Deserializes a checkpoint written by [`save`].
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |what: &str| {
        Error::Data(format!("checkpoint {}: {what}", path.display()))
    };
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fail("missing LSPCKPT1 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16 + hlen;
    if bytes.len() < header_end {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| fail(&format!("malformed header: {e}")))?;
    if header.version != 1 {
        return Err(fail(&format!("unsupported version {}", header.version)));
    }
    let blob = &bytes[header_end..];
    let read_f64s = |offset: usize, len: usize| -> Result<Vec<f64>> {
        let start = offset * 8;
        let end = start + len * 8;
        if end > blob.len() {
            return Err(fail("blob area shorter than the header declares"));
        }
        Ok(blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };

    let mut params = Vec::with_capacity(header.params.len());
    for e in &header.params {
        params.push((e.name.clone(), e.shape, read_f64s(e.offset, e.shape.len())?));
    }
    let mut optimizers = Vec::with_capacity(header.optimizers.len());
    for o in &header.optimizers {
        let mut moments = Vec::with_capacity(o.moments.len());
        for m in &o.moments {
            moments.push((
                m.name.clone(),
                read_f64s(m.m_offset, m.len)?,
                read_f64s(m.v_offset, m.len)?,
            ));
        }
        optimizers.push(OptSnapshot { label: o.label.clone(), step: o.step, moments });
    }
    Ok(Checkpoint {
        model: header.model,
        epoch: header.epoch,
        regime: header.regime,
        seed: header.seed,
        lr: header.lr,
        initial_lr: header.initial_lr,
        sched_best: header.sched_best,
        sched_bad: header.sched_bad,
        params,
        optimizers,
    })
}

/// Convenience: the parameters of `store` restored from `path`.
pub fn restore_into(path: &Path, store: &mut ParamStore) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    ckpt.apply_params(store)?;
    Ok(ckpt)
}
