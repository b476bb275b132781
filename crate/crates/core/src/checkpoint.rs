//! Checkpoint container.
//!
//! ```text
//! "COG1"
//! u64 len | JSON { model, train, prompt_texts }
//! u64 epoch | u64 adam step
//! u64 n | f64[n] loss history
//! u64 blobs | blobs × (u64 name_len | name | u64 rank | u64[rank] dims | f32[numel])
//! ```
//!
//! Blob names are `param/<name>`, `adam.m/<name>`, `adam.v/<name>` and
//! `prompts`. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::dataio::{put_f32s, Cursor, FormatError};
use crate::error::{at_path, Error, Result};
use crate::gvr::GesturePromptBank;
use crate::model::CogModel;
use crate::tensor::Tensor;
use crate::trainer::{AdamState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"COG1";

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    prompt_texts: Vec<String>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, name: &str, t: &Tensor<f64>) -> Result<()> {
    put_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
    put_u64(out, t.rank() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    let payload: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
    if payload
        .iter()
        .zip(t.data())
        .any(|(&a, &b)| f64::from(a).to_bits() != b.to_bits())
    {
        return Err(Error::Numeric(format!(
            "`{name}` is not representable in 32 bits"
        )));
    }
    put_f32s(out, &payload);
    Ok(())
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let header = Header {
        model: state.model.config.clone(),
        train: state.train.clone(),
        prompt_texts: state.model.prompt_texts.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Usage(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    put_u64(&mut out, state.epoch as u64);
    put_u64(&mut out, state.adam.step);
    put_u64(&mut out, state.losses.len() as u64);
    for l in &state.losses {
        out.extend_from_slice(&l.to_le_bytes());
    }
    let params = &state.model.params;
    put_u64(&mut out, 3 * params.len() as u64 + 1);
    for (id, (name, t)) in params.iter().enumerate() {
        put_blob(&mut out, &format!("param/{name}"), t)?;
        put_blob(&mut out, &format!("adam.m/{name}"), &state.adam.m[id])?;
        put_blob(&mut out, &format!("adam.v/{name}"), &state.adam.v[id])?;
    }
    put_blob(&mut out, "prompts", &state.model.prompts)?;
    Ok(out)
}

fn invalid(msg: impl Into<String>) -> Error {
    FormatError::Invalid(msg.into()).into()
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Cursor::new(bytes);
    r.magic(MAGIC)?;
    let len = r.u64("config length")?;
    let json = r.take(len, "config")?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| invalid(format!("config block: {e}")))?;
    let epoch = r.u64("epoch")? as usize;
    let step = r.u64("optimizer step")?;
    let n = r.u64("loss count")?;
    if n > bytes.len() as u64 {
        return Err(FormatError::Truncated {
            what: "loss history",
            needed: n.saturating_mul(8),
            available: bytes.len() as u64,
        }
        .into());
    }
    let losses = (0..n)
        .map(|_| r.f64("loss history"))
        .collect::<Result<Vec<_>, _>>()?;

    let blobs = r.u64("blob count")?;
    let mut named: Vec<(String, Tensor<f64>)> = Vec::new();
    for _ in 0..blobs {
        let name_len = r.u64("blob name")?;
        let name = std::str::from_utf8(r.take(name_len, "blob name")?)
            .map_err(|_| invalid("blob name is not utf-8"))?
            .to_owned();
        let rank = r.u64("blob rank")?;
        if rank > 8 {
            return Err(invalid(format!("blob `{name}` has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| r.u64("blob shape").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| invalid(format!("blob `{name}` is too large")))?;
        let data = r.f32s(numel, "blob payload")?;
        let t = Tensor::new(dims, data.into_iter().map(f64::from).collect())?;
        named.push((name, t));
    }
    r.finish()?;

    let take = |key: &str| -> Result<&Tensor<f64>> {
        named
            .iter()
            .find(|(n, _)| n == key)
            .map(|(_, t)| t)
            .ok_or_else(|| invalid(format!("missing blob `{key}`")))
    };
    let prompts = take("prompts")?;
    let bank = GesturePromptBank::new(header.prompt_texts.clone(), prompts.cast())?;
    let params = named
        .iter()
        .filter_map(|(n, t)| n.strip_prefix("param/").map(|n| (n, t)));
    let model = CogModel::with_params(header.model, &bank, params)?;
    let mut m = Vec::with_capacity(model.params.len());
    let mut v = Vec::with_capacity(model.params.len());
    for (name, p) in model.params.iter() {
        for (key, dst) in [("adam.m", &mut m), ("adam.v", &mut v)] {
            let t = take(&format!("{key}/{name}"))?;
            if t.shape() != p.shape() {
                return Err(invalid(format!("{key}/{name} has the wrong shape")));
            }
            dst.push(t.clone());
        }
    }
    if named.len() != 3 * model.params.len() + 1 {
        return Err(invalid("unexpected extra blobs"));
    }
    Ok(TrainState {
        model,
        train: header.train,
        adam: AdamState { step, m, v },
        epoch,
        losses,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, encode(state)?).map_err(at_path(path))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    decode(&fs::read(path).map_err(at_path(path))?)
}
