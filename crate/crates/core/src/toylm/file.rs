//! Model files: `DYFM`, u32 version, u64 header length, JSON header, then
//! every tensor as little-endian f64 in header order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DecoderConfig, DecoderModel, LmError, Param, Vocabulary, SPECIALS};

pub const MODEL_MAGIC: &[u8; 4] = b"DYFM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: DecoderConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    name: String,
    shape: [usize; 2],
    trainable: bool,
}

pub fn write_model<W: Write>(model: &DecoderModel, mut w: W) -> Result<(), LmError> {
    let header = Header {
        config: model.config,
        vocab: model.vocab.tokens()[SPECIALS.len()..].to_vec(),
        tensors: model
            .params
            .iter()
            .map(|p| TensorInfo { name: p.name.clone(), shape: [p.value.nrows(), p.value.ncols()], trainable: p.trainable })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| LmError::Format(e.to_string()))?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in &model.params {
        for v in p.value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<DecoderModel, LmError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(LmError::Format("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != MODEL_VERSION {
        return Err(LmError::Format(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8);
    if len > 1 << 30 {
        return Err(LmError::Format("header too large".into()));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| LmError::Format(e.to_string()))?;
    let vocab = Vocabulary::from_words(&header.vocab)?;
    // a fresh model fixes the expected tensor layout
    let template = DecoderModel::new(header.config, vocab.clone(), 0)?;
    if template.params.len() != header.tensors.len() {
        return Err(LmError::Format(format!("expected {} tensors, header lists {}", template.params.len(), header.tensors.len())));
    }
    let mut params = Vec::with_capacity(header.tensors.len());
    for (t, info) in template.params.iter().zip(header.tensors) {
        let shape = (info.shape[0], info.shape[1]);
        if info.name != t.name || shape != t.value.dim() {
            return Err(LmError::Format(format!("tensor {} {:?} does not fit the configuration", info.name, info.shape)));
        }
        let mut data = vec![0.0; shape.0 * shape.1];
        for v in data.iter_mut() {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        let value = Array2::from_shape_vec(shape, data).map_err(|e| LmError::Format(e.to_string()))?;
        params.push(Param { name: info.name, value, trainable: info.trainable });
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(LmError::Format("trailing bytes after tensors".into()));
    }
    Ok(DecoderModel { config: header.config, vocab, params })
}

pub fn save_model(model: &DecoderModel, path: &Path) -> Result<(), LmError> {
    let f = std::fs::File::create(path)?;
    write_model(model, std::io::BufWriter::new(f))
}

pub fn load_model(path: &Path) -> Result<DecoderModel, LmError> {
    let f = std::fs::File::open(path)?;
    read_model(std::io::BufReader::new(f))
}
