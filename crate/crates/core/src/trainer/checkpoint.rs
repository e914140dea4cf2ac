//! Binary checkpoints: magic, little-endian header length, JSON header, then
//! every tensor as raw little-endian f64 in header order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamSlot;
use super::{DualBranchState, TrainConfig};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DSTCKPT1";

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// u128 does not survive every JSON reader, so it travels as a string.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamEntry {
    name: String,
    steps: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    rng: RngState,
    adam_betas: (f64, f64),
    adam_eps: f64,
    /// Parameters and buffers, then first and second moments of each `adam` entry.
    params: Vec<TensorEntry>,
    adam: Vec<AdamEntry>,
}

fn push_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n * 8)?;
        let vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::from_shape_vec(shape, vals).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl DualBranchState {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let ids: Vec<_> = self.store.ids().collect();
        let params = ids
            .iter()
            .map(|&id| TensorEntry { name: self.store.name(id).to_string(), shape: self.store.get(id).shape().to_vec() })
            .collect();
        let slots: Vec<_> = ids
            .iter()
            .filter_map(|&id| self.adam.slots.get(id.0).and_then(Option::as_ref).map(|s| (id, s)))
            .collect();
        let adam = slots.iter().map(|(id, s)| AdamEntry { name: self.store.name(*id).to_string(), steps: s.t }).collect();
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            adam_betas: (self.adam.beta1, self.adam.beta2),
            adam_eps: self.adam.eps,
            params,
            adam,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for &id in &ids {
            push_tensor(&mut out, self.store.get(id));
        }
        for (_, s) in &slots {
            push_tensor(&mut out, &s.m);
            push_tensor(&mut out, &s.v);
        }
        Ok(out)
    }

    /// Rebuilds the networks from the stored config and overwrites every tensor.
    pub fn from_checkpoint_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a dualstereo checkpoint".into()));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut state = Self::init(&header.config)?;
        if header.params.len() != state.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, network has {}",
                header.params.len(),
                state.store.len()
            )));
        }
        let lookup = |store: &crate::autograd::ParamStore, name: &str| {
            store.id(name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))
        };
        for e in &header.params {
            let id = lookup(&state.store, &e.name)?;
            if state.store.get(id).shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!("{}: shape {:?} does not match network", e.name, e.shape)));
            }
            let t = r.tensor(&e.shape)?;
            state.store.set(id, t);
        }
        state.adam.beta1 = header.adam_betas.0;
        state.adam.beta2 = header.adam_betas.1;
        state.adam.eps = header.adam_eps;
        state.adam.slots = vec![None; state.store.len()];
        for e in &header.adam {
            let id = lookup(&state.store, &e.name)?;
            let shape = state.store.get(id).shape().to_vec();
            let m = r.tensor(&shape)?;
            let v = r.tensor(&shape)?;
            state.adam.slots[id.0] = Some(AdamSlot { m, v, t: e.steps });
        }
        if r.pos != data.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", data.len() - r.pos)));
        }
        let word_pos: u128 =
            header.rng.word_pos.parse().map_err(|_| Error::Checkpoint("bad rng word position".into()))?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(header.rng.seed);
        rng.set_stream(header.rng.stream);
        rng.set_word_pos(word_pos);
        state.rng = rng;
        state.epoch = header.epoch;
        Ok(state)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.to_checkpoint_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}
