//! Binary checkpoint: versioned header, config snapshot, named parameter
//! tensors, EMA copies and AdamW moments.
//!
//! Layout (little endian): magic `ATTSCKPT`, `u32` version, `u32` JSON length
//! and the JSON snapshot `{model, training}`, `u64` step, `u64` optimizer step,
//! `u32` tensor count, then per tensor `u32` name length, name bytes, `u32`
//! rank, `u32` dims and `f32` values. EMA values and the first and second
//! moments follow as three more blocks of raw `f32` in the same tensor order.

use std::fs;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, TrainState, TrainingConfig};
use crate::error::{Error, Result};
use crate::model::{ArchiTts, ModelConfig};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"ATTSCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    model: ModelConfig,
    training: TrainingConfig,
}

pub struct Checkpoint {
    pub model: ArchiTts,
    pub model_config: ModelConfig,
    pub training: TrainingConfig,
    pub state: TrainState,
}

pub fn save_checkpoint(path: &Path, model: &ModelConfig, training: &TrainingConfig, state: &TrainState) -> Result<()> {
    let json = serde_json::to_vec(&Snapshot {
        model: model.clone(),
        training: training.clone(),
    })
    .expect("config serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(state.step as u64).to_le_bytes());
    buf.extend_from_slice(&state.optimizer.t.to_le_bytes());
    buf.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for (_, name, t) in state.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_floats(&mut buf, t.data());
    }
    for (_, _, t) in state.ema.iter() {
        put_floats(&mut buf, t.data());
    }
    for block in [&state.optimizer.m, &state.optimizer.v] {
        for values in block {
            put_floats(&mut buf, values);
        }
    }
    // write-then-rename so an interrupted save never clobbers the last good checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn put_floats(buf: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut read = |n: usize| -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        Ok(b)
    };
    if read(8)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let u64_of = |b: Vec<u8>| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    let version = u32_of(read(4)?);
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let json_len = u32_of(read(4)?) as usize;
    let snap: Snapshot = serde_json::from_slice(&read(json_len)?).map_err(|e| bad(e.to_string()))?;
    let step = u64_of(read(8)?) as usize;
    let opt_t = u64_of(read(8)?);
    let count = u32_of(read(4)?) as usize;

    let (model, mut params) = ArchiTts::build::<f32>(&snap.model, 0)?;
    if count != params.len() {
        return Err(bad(format!("{count} tensors, model has {}", params.len())));
    }
    let floats = |b: Vec<u8>| -> Vec<f32> { b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect() };
    let ids: Vec<_> = params.ids().collect();
    for &id in &ids {
        let name_len = u32_of(read(4)?) as usize;
        let name = String::from_utf8(read(name_len)?).map_err(|e| bad(e.to_string()))?;
        if name != params.name(id) {
            return Err(bad(format!("tensor {name} where {} expected", params.name(id))));
        }
        let rank = u32_of(read(4)?) as usize;
        let shape: Vec<usize> = (0..rank).map(|_| read(4).map(|b| u32_of(b) as usize)).collect::<Result<_>>()?;
        if shape != params.get(id).shape() {
            return Err(bad(format!("tensor {name} has shape {shape:?}, model expects {:?}", params.get(id).shape())));
        }
        let n = params.get(id).len();
        *params.get_mut(id) = Tensor::new(shape, floats(read(4 * n)?))?;
    }
    let mut ema = params.clone();
    let mut optimizer = AdamW::new(&params);
    for (i, t) in ema.tensors_mut().enumerate() {
        let n = t.len();
        t.data_mut().copy_from_slice(&floats(read(4 * n)?));
        debug_assert_eq!(n, optimizer.m[i].len());
    }
    for block in [&mut optimizer.m, &mut optimizer.v] {
        for values in block.iter_mut() {
            let n = values.len();
            values.copy_from_slice(&floats(read(4 * n)?));
        }
    }
    optimizer.t = opt_t;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes".into()));
    }
    Ok(Checkpoint {
        model,
        model_config: snap.model,
        training: snap.training,
        state: TrainState {
            params,
            ema,
            optimizer,
            step,
        },
    })
}
