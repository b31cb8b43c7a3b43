//! SGAD checkpoint container.
//!
//! ```text
//! "SGAD" | version u32 | header_len u32 | header (TOML) | record_count u32
//! record*: name_len u32 | name | dtype u8 | rank u32 | extents u64* | values LE
//! sha256 of everything before it (32 bytes)
//! ```
//!
//! All integers are little-endian. Batchnorm statistics are stored as
//! `{layer}.running_mean` / `{layer}.running_var` records and optimizer
//! moments as `adam.m:{param}` / `adam.v:{param}`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::weights::{Layout, ModelWeights, Provenance};
use crate::autodiff::RunningStats;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState, Moments};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SGAD";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// Where an interrupted training run stands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub stage: String,
    pub next_epoch: u64,
    pub best_score: Option<f64>,
    pub best_epoch: Option<u64>,
    pub epochs_without_improvement: u64,
}

/// Weights plus optional optimizer state and training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub weights: ModelWeights<T>,
    pub optimizer: Option<AdamState<T>>,
    pub progress: Option<Progress>,
}

impl<T: Real> Checkpoint<T> {
    pub fn weights_only(weights: ModelWeights<T>) -> Self {
        Self {
            weights,
            optimizer: None,
            progress: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    checkpoint: Meta,
    model: ModelConfig,
    optimizer: Option<OptimizerHeader>,
    progress: Option<Progress>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    put_u32(out, t.rank() as u32);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

/// Serialize a checkpoint to bytes.
pub fn encode_checkpoint<T: Real>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    ckpt.weights.validate()?;
    let header = Header {
        checkpoint: Meta {
            provenance: ckpt.weights.provenance,
        },
        model: ckpt.weights.config.clone(),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            lr: o.config.lr,
            beta1: o.config.beta1,
            beta2: o.config.beta2,
            eps: o.config.eps,
            step: o.step_count(),
        }),
        progress: ckpt.progress.clone(),
    };
    let header = toml::to_string(&header).map_err(|e| Error::config(e.to_string()))?;

    let mut records: Vec<(String, &Tensor<T>)> = Vec::new();
    for (name, t) in &ckpt.weights.params {
        records.push((name.clone(), t));
    }
    for (name, st) in &ckpt.weights.running {
        records.push((format!("{name}.running_mean"), &st.mean));
        records.push((format!("{name}.running_var"), &st.var));
    }
    if let Some(opt) = &ckpt.optimizer {
        for (name, mo) in opt.moments() {
            records.push((format!("adam.m:{name}"), &mo.m));
            records.push((format!("adam.v:{name}"), &mo.v));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(header.as_bytes());
    put_u32(&mut out, records.len() as u32);
    for (name, t) in records {
        put_record(&mut out, &name, t);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format("checkpoint", format!("truncated while reading {field}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

fn read_record<T: Real>(r: &mut Reader<'_>) -> Result<(String, Tensor<T>)> {
    let len = r.u32("record name length")? as usize;
    let name = std::str::from_utf8(r.take(len, "record name")?)
        .map_err(|_| Error::format("checkpoint", "record name is not UTF-8"))?
        .to_string();
    let tag = r.take(1, "dtype tag")?[0];
    let dtype = DType::from_tag(tag)
        .ok_or_else(|| Error::format("checkpoint", format!("record `{name}` has unknown dtype tag {tag}")))?;
    if dtype != T::DTYPE {
        return Err(Error::format(
            "checkpoint",
            format!("record `{name}` is {dtype:?}, reader expects {:?}", T::DTYPE),
        ));
    }
    let rank = r.u32("rank")? as usize;
    if rank > 8 {
        return Err(Error::format("checkpoint", format!("record `{name}` has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u64("extent")? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::format("checkpoint", format!("record `{name}` is too large")))?;
    let size = dtype.size();
    let raw = r.take(count.saturating_mul(size), &format!("values of `{name}`"))?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    let t = Tensor::new(shape, data).map_err(|e| Error::format("checkpoint", format!("record `{name}`: {e}")))?;
    Ok((name, t))
}

/// Parse a checkpoint; nothing is returned unless the whole file is valid.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format("checkpoint", "bad magic, expected \"SGAD\""));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    if bytes.len() < 8 + CHECKSUM_LEN {
        return Err(Error::format("checkpoint", "truncated before checksum"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::format(
            "checkpoint",
            "checksum mismatch, file is corrupted or truncated",
        ));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let hlen = r.u32("header length")? as usize;
    let header =
        std::str::from_utf8(r.take(hlen, "header")?).map_err(|_| Error::format("checkpoint", "header is not UTF-8"))?;
    let header: Header = toml::from_str(header).map_err(|e| Error::format("checkpoint header", e.to_string()))?;
    header.model.validate()?;

    let n = r.u32("record count")? as usize;
    let mut records: IndexMap<String, Tensor<T>> = IndexMap::new();
    for _ in 0..n {
        let (name, t) = read_record(&mut r)?;
        if records.insert(name.clone(), t).is_some() {
            return Err(Error::format("checkpoint", format!("duplicate record `{name}`")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::format("checkpoint", "trailing bytes after last record"));
    }

    let layout = Layout::of(&header.model)?;
    let mut take = |name: &str| {
        records
            .shift_remove(name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing record `{name}`")))
    };
    let mut params = IndexMap::new();
    for spec in &layout.params {
        params.insert(spec.name.clone(), take(&spec.name)?);
    }
    let mut running = IndexMap::new();
    for (bn, _) in &layout.batchnorms {
        let mean = take(&format!("{bn}.running_mean"))?;
        let var = take(&format!("{bn}.running_var"))?;
        running.insert(
            bn.clone(),
            RunningStats {
                mean,
                var,
                initialized: true,
            },
        );
    }
    let weights = ModelWeights {
        config: header.model,
        params,
        running,
        provenance: header.checkpoint.provenance,
    };
    weights
        .validate()
        .map_err(|e| Error::format("checkpoint", e.to_string()))?;

    let optimizer = match header.optimizer {
        None => None,
        Some(h) => {
            let mut moments = IndexMap::new();
            for name in weights.params.keys() {
                let m = records.shift_remove(&format!("adam.m:{name}"));
                let v = records.shift_remove(&format!("adam.v:{name}"));
                match (m, v) {
                    (Some(m), Some(v)) => {
                        moments.insert(name.clone(), Moments { m, v });
                    }
                    (None, None) => {}
                    _ => {
                        return Err(Error::format(
                            "checkpoint",
                            format!("optimizer moments of `{name}` are incomplete"),
                        ))
                    }
                }
            }
            let config = AdamConfig {
                lr: h.lr,
                beta1: h.beta1,
                beta2: h.beta2,
                eps: h.eps,
            };
            Some(AdamState::from_parts(config, h.step, moments)?)
        }
    };
    if let Some(name) = records.keys().next() {
        return Err(Error::format("checkpoint", format!("unexpected record `{name}`")));
    }
    Ok(Checkpoint {
        weights,
        optimizer,
        progress: header.progress,
    })
}

/// Write via a temporary file and rename, so readers never see a partial file.
pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("sgad.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
