//! Binary tensor container shared by generator and critic checkpoints.
//!
//! Layout (little-endian): `"NEPF"`, `u32` version, `u64` JSON length, JSON header,
//! then tensors sorted by name, each `u16` name length, name bytes, `u8` rank,
//! `u32` dims, `f32` data.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NepError, Result};
use crate::model::{config_hash, ModelConfig, Transformer};
use crate::nn::ParamStore;
use crate::tokenizer::TokenizerConfig;

pub const MAGIC: &[u8; 4] = b"NEPF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_tensor_file(header: &serde_json::Value, tensors: &[RawTensor]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut sorted: Vec<&RawTensor> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    for t in sorted {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| NepError::Config(format!("tensor name too long: {}", t.name)))?;
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(NepError::Config(format!("tensor {} dims disagree with data", t.name)));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(NepError::Corruption(format!("truncated file at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses the whole container; nothing is returned unless every byte is accounted for.
pub fn decode_tensor_file(bytes: &[u8]) -> Result<(serde_json::Value, Vec<RawTensor>)> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(NepError::Corruption("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NepError::Corruption(format!("unsupported version {version}")));
    }
    let json_len = r.u64()? as usize;
    if json_len > bytes.len() {
        return Err(NepError::Corruption("header length exceeds file".into()));
    }
    let header: serde_json::Value = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| NepError::Corruption(format!("header json: {e}")))?;
    let mut tensors = Vec::new();
    while r.at < bytes.len() {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| NepError::Corruption("tensor name is not utf-8".into()))?;
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| NepError::Corruption(format!("tensor {name} extent overflows file")))?;
        let raw = r.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if tensors.iter().any(|t: &RawTensor| t.name == name) {
            return Err(NepError::Corruption(format!("tensor {name} repeated")));
        }
        tensors.push(RawTensor { name, dims, data });
    }
    Ok((header, tensors))
}

/// Places raw tensors into a store with the expected specs, verifying names, shapes and counts.
pub fn store_from_raw(specs: &[(String, Vec<usize>)], raw: Vec<RawTensor>) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::<f32>::zeros(specs)?;
    if raw.len() != specs.len() {
        return Err(NepError::Corruption(format!("{} tensors where {} were expected", raw.len(), specs.len())));
    }
    for t in raw {
        let e = store
            .entry(&t.name)
            .ok_or_else(|| NepError::Corruption(format!("unexpected tensor {}", t.name)))?
            .clone();
        if e.dims != t.dims {
            return Err(NepError::Corruption(format!("tensor {} is {:?}, expected {:?}", t.name, t.dims, e.dims)));
        }
        store.data_mut()[e.range()].copy_from_slice(&t.data);
    }
    Ok(store)
}

pub fn raw_from_store(store: &ParamStore<f32>) -> Vec<RawTensor> {
    store
        .entries()
        .iter()
        .map(|e| RawTensor { name: e.name.clone(), dims: e.dims.clone(), data: store.data()[e.range()].to_vec() })
        .collect()
}

/// JSON header of a generator checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorHeader {
    pub kind: String,
    pub model: ModelConfig,
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub training: serde_json::Value,
    pub config_hash: String,
    pub param_count: usize,
}

impl GeneratorHeader {
    pub const KIND: &'static str = "generator";
}

pub fn encode_checkpoint(model: &Transformer<f32>, tok: &TokenizerConfig, training: serde_json::Value) -> Result<Vec<u8>> {
    model.config().check_tokenizer(tok)?;
    let header = GeneratorHeader {
        kind: GeneratorHeader::KIND.into(),
        model: *model.config(),
        tokenizer: tok.clone(),
        training,
        config_hash: config_hash(model.config(), tok),
        param_count: model.count_params().total,
    };
    encode_tensor_file(&serde_json::to_value(&header)?, &raw_from_store(model.store()))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Transformer<f32>, GeneratorHeader)> {
    let (header, raw) = decode_tensor_file(bytes)?;
    let header: GeneratorHeader =
        serde_json::from_value(header).map_err(|e| NepError::Corruption(format!("generator header: {e}")))?;
    if header.kind != GeneratorHeader::KIND {
        return Err(NepError::Corruption(format!("checkpoint kind {:?} is not a generator", header.kind)));
    }
    if header.config_hash != config_hash(&header.model, &header.tokenizer) {
        return Err(NepError::Corruption("config hash does not match header".into()));
    }
    let specs = Transformer::<f32>::param_specs(&header.model);
    let store = store_from_raw(&specs, raw)?;
    let model = Transformer::from_store(header.model, store)?;
    if model.count_params().total != header.param_count {
        return Err(NepError::Corruption("parameter count differs from header".into()));
    }
    Ok((model, header))
}

pub fn save_checkpoint(
    model: &Transformer<f32>,
    tok: &TokenizerConfig,
    training: serde_json::Value,
    path: &Path,
) -> Result<()> {
    let bytes = encode_checkpoint(model, tok, training)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Transformer<f32>, GeneratorHeader)> {
    decode_checkpoint(&std::fs::read(path)?)
}
