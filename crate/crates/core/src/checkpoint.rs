//! Self-describing model files.
//!
//! ```text
//! "DCNW" | u32 version=1 | u32 len | config text (key=value lines) | u64 step
//! records: u32 name len | name | u32 rank | u32 dims[rank] | f32 values
//! ```
//!
//! Records hold the parameters, then the running batch-norm statistics,
//! then (when saved) the ADAM moments as `adam.m.<name>` / `adam.v.<name>`.
//! Integers and reals are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::{read_all, write_atomic, Reader};
use crate::model::{DcnConfig, DcnModel};
use crate::optim::{AdamParams, AdamState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DCNW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DcnModel<f32>,
    /// Optimizer steps taken when the file was written.
    pub step: u64,
    pub optimizer: Option<AdamState<f32>>,
    /// Free-form string pairs stored alongside the config (pipeline
    /// settings, normalization ranges). Keys must not contain `=` or line
    /// breaks; values must not contain line breaks.
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: DcnModel<f32>) -> Self {
        Self {
            model,
            step: 0,
            optimizer: None,
            metadata: BTreeMap::new(),
        }
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn push_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut text = ck.model.config().to_text();
    if let Some(opt) = &ck.optimizer {
        let p = opt.params;
        text.push_str(&format!(
            "\nadam.lr={:?}\nadam.beta1={:?}\nadam.beta2={:?}\nadam.epsilon={:?}\nadam.t={}",
            p.lr, p.beta1, p.beta2, p.epsilon, opt.t
        ));
    }
    for (k, v) in &ck.metadata {
        if k.is_empty() || k.contains(['=', '\n', '\r']) || v.contains(['\n', '\r']) {
            return Err(crate::error::param_err!("metadata entry {k:?} cannot be stored"));
        }
        text.push_str(&format!("\nmeta.{k}={v}"));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&ck.step.to_le_bytes());
    let params = ck.model.params();
    for (name, t) in &params {
        push_record(&mut out, name, t);
    }
    for (name, t) in ck.model.buffers() {
        push_record(&mut out, &name, t);
    }
    if let Some(opt) = &ck.optimizer {
        if opt.m.len() != params.len() || opt.v.len() != params.len() {
            return Err(crate::error::shape_err!("optimizer state does not match the model"));
        }
        for ((name, _), m) in params.iter().zip(&opt.m) {
            push_record(&mut out, &format!("adam.m.{name}"), m);
        }
        for ((name, _), v) in params.iter().zip(&opt.v) {
            push_record(&mut out, &format!("adam.v.{name}"), v);
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(4)? != MAGIC {
        return Err(format_err("not a model checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| format_err("checkpoint config is not UTF-8"))?;
    let pairs = text
        .lines()
        .map(|l| l.split_once('=').ok_or_else(|| format_err(format!("bad config line {l:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let config = DcnConfig::from_pairs(pairs.iter().copied())?;
    let lookup = |key: &str| pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
    let metadata: BTreeMap<String, String> = pairs
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.to_string())))
        .collect();
    let step = r.u64()?;

    let mut model = DcnModel::<f32>::build(config)?;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let buffer_names: Vec<String> = model.buffers().into_iter().map(|(n, _)| n).collect();

    let read_into = |r: &mut Reader, name: &str, target: &mut Tensor<f32>| -> Result<()> {
        let n = r.u32()? as usize;
        let got = r.take(n)?;
        if got != name.as_bytes() {
            return Err(format_err(format!(
                "expected record {name:?}, found {:?}",
                String::from_utf8_lossy(got)
            )));
        }
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(format_err(format!("record {name}: rank {rank} is implausible")));
        }
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != target.shape() {
            return Err(format_err(format!(
                "record {name}: shape {dims:?} does not match the config's {:?}",
                target.shape()
            )));
        }
        let data = r.f32s(target.len())?;
        target.data_mut().copy_from_slice(&data);
        Ok(())
    };

    for (name, t) in names.iter().zip(model.params_mut()) {
        read_into(&mut r, name, t)?;
    }
    for (name, t) in buffer_names.iter().zip(model.buffers_mut()) {
        read_into(&mut r, name, t)?;
    }

    let optimizer = match lookup("adam.t") {
        None => None,
        Some(t) => {
            let real = |k: &str| -> Result<f64> {
                lookup(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| format_err(format!("missing or bad {k}")))
            };
            let params = AdamParams {
                lr: real("adam.lr")?,
                beta1: real("adam.beta1")?,
                beta2: real("adam.beta2")?,
                epsilon: real("adam.epsilon")?,
            };
            let mut state = AdamState::new(params, model.params().into_iter().map(|(_, t)| t.shape()));
            state.t = t.parse().map_err(|_| format_err("bad adam.t"))?;
            for (name, m) in names.iter().zip(&mut state.m) {
                read_into(&mut r, &format!("adam.m.{name}"), m)?;
            }
            for (name, v) in names.iter().zip(&mut state.v) {
                read_into(&mut r, &format!("adam.v.{name}"), v)?;
            }
            Some(state)
        }
    };
    if r.remaining() != 0 {
        return Err(format_err(format!("checkpoint has {} trailing bytes", r.remaining())));
    }
    Ok(Checkpoint {
        model,
        step,
        optimizer,
        metadata,
    })
}

/// Writes atomically: the destination is either untouched or complete.
pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(ck)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode(&read_all(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}
