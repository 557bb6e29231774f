//! Binary checkpoints.
//!
//! Layout: 8-byte magic, one schema version byte, a little-endian `u64`
//! header length, the JSON header, then every parameter followed by the
//! Adam first and second moments, all as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use moelab_lm::{AdamW, Model, ModelConfig, Param, ParamGroup, RouterState, Scalar, TrainPlan, Trainer};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"MOELABCK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    plan: TrainPlan,
    step: u64,
    adam_step: u64,
    routers: Vec<RouterState>,
    params: Vec<ParamMeta>,
    stream_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
}

fn put<S: Scalar>(out: &mut Vec<u8>, xs: &[S]) {
    for x in xs {
        out.extend_from_slice(&x.as_f64().to_le_bytes());
    }
}

pub fn encode<S: Scalar>(trainer: &Trainer<S>, stream_hash: &str) -> Result<Vec<u8>> {
    let m = &trainer.model;
    let header = Header {
        model: m.config().clone(),
        plan: trainer.plan.clone(),
        step: trainer.step,
        adam_step: trainer.opt.step,
        routers: m.routers().to_vec(),
        params: m
            .params()
            .iter()
            .map(|p| ParamMeta { name: p.name.clone(), shape: p.shape.clone(), group: p.group })
            .collect(),
        stream_hash: stream_hash.to_string(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in m.params() {
        put(&mut out, &p.data);
    }
    for moments in [&trainer.opt.m, &trainer.opt.v] {
        for x in moments {
            put(&mut out, x);
        }
    }
    Ok(out)
}

pub struct Restored<S> {
    pub trainer: Trainer<S>,
    pub stream_hash: String,
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Restored<S>> {
    let bad = |d: &str| HarnessError::Format { path: "<checkpoint>".into(), detail: d.to_string() };
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("not a moelab checkpoint"));
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver).map_err(|_| bad("truncated version"))?;
    if ver[0] != CHECKPOINT_VERSION {
        return Err(bad(&format!("checkpoint version {} unsupported", ver[0])));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header length overflow"))?;
    if r.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&r[..len])?;
    r = &r[len..];

    let mut take = |n: usize| -> Result<Vec<S>> {
        if r.len() < n * 8 {
            return Err(bad("truncated payload"));
        }
        let (head, rest) = r.split_at(n * 8);
        r = rest;
        Ok(head.chunks_exact(8).map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect())
    };
    let mut params = Vec::with_capacity(header.params.len());
    for meta in &header.params {
        let n = meta.shape.iter().product();
        params.push(Param { name: meta.name.clone(), shape: meta.shape.clone(), data: take(n)?, group: meta.group });
    }
    let sizes: Vec<usize> = params.iter().map(|p| p.data.len()).collect();
    let mut opt = AdamW::new(&sizes, header.plan.adam);
    for moments in [&mut opt.m, &mut opt.v] {
        for (slot, &n) in moments.iter_mut().zip(&sizes) {
            *slot = take(n)?;
        }
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    opt.step = header.adam_step;
    let model = Model::from_parts(header.model, params, header.routers)?;
    let mut trainer = Trainer::from_model(header.plan, model);
    trainer.opt = opt;
    trainer.step = header.step;
    Ok(Restored { trainer, stream_hash: header.stream_hash })
}

pub fn save<S: Scalar>(path: &Path, trainer: &Trainer<S>, stream_hash: &str) -> Result<()> {
    let bytes = encode(trainer, stream_hash)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load<S: Scalar>(path: &Path) -> Result<Restored<S>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes).map_err(|e| match e {
        HarnessError::Format { detail, .. } => HarnessError::Format { path: path.display().to_string(), detail },
        other => other,
    })
}
