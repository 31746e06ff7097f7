//! `KDCKPT01` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "KDCKPT01"
//! count    u32
//! entry*   u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64),
//!          u8 rank, u32 extents[rank], row-major values
//! ```
//!
//! Model checkpoints carry one extra entry, [`CONFIG_ENTRY`], holding the
//! architecture as a rank-1 f64 vector so a file is self-describing.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelConfig, TransformerModel};
use crate::tensor::{Activation, Tensor};

pub const MAGIC: &[u8; 8] = b"KDCKPT01";
pub const CONFIG_ENTRY: &str = "__config__";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

pub fn encode(entries: &IndexMap<String, Tensor>, dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype as u8);
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent too large: {name}")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        match dtype {
            DType::F32 => t
                .data()
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<IndexMap<String, Tensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic, not a KDCKPT01 file".into()));
    }
    let count = r.u32()?;
    let mut out = IndexMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            0 => r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            1 => r
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => return Err(Error::Format(format!("unknown dtype {other} for {name}"))),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate entry {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(out)
}

pub fn write_entries(path: impl AsRef<Path>, entries: &IndexMap<String, Tensor>) -> Result<()> {
    let bytes = encode(entries, DType::F64)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_entries(path: impl AsRef<Path>) -> Result<IndexMap<String, Tensor>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn config_vector(c: &ModelConfig) -> Tensor {
    let labels = match c.num_labels {
        HeadKind::Classification(n) => n as f64,
        HeadKind::Regression => 0.0,
    };
    let activation = match c.activation {
        Activation::Relu => 0.0,
        Activation::Gelu => 1.0,
        Activation::Tanh => 2.0,
    };
    let v = vec![
        c.num_layers as f64,
        c.hidden_dim as f64,
        c.num_heads as f64,
        c.ffn_dim as f64,
        c.vocab_size as f64,
        c.max_seq_len as f64,
        labels,
        activation,
        c.layer_norm_eps,
        c.dropout,
    ];
    Tensor::new([v.len()], v).expect("non-empty")
}

fn config_from_vector(t: &Tensor) -> Result<ModelConfig> {
    let v = t.data();
    if v.len() != 10 {
        return Err(Error::Format(format!(
            "config entry has {} values, expected 10",
            v.len()
        )));
    }
    let int = |x: f64| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(Error::Format(format!("non-integer config value {x}")))
        }
    };
    let activation = match int(v[7])? {
        0 => Activation::Relu,
        1 => Activation::Gelu,
        2 => Activation::Tanh,
        a => return Err(Error::Format(format!("unknown activation code {a}"))),
    };
    let num_labels = match int(v[6])? {
        0 => HeadKind::Regression,
        n => HeadKind::Classification(n),
    };
    let config = ModelConfig {
        num_layers: int(v[0])?,
        hidden_dim: int(v[1])?,
        num_heads: int(v[2])?,
        ffn_dim: int(v[3])?,
        vocab_size: int(v[4])?,
        max_seq_len: int(v[5])?,
        num_labels,
        activation,
        layer_norm_eps: v[8],
        dropout: v[9],
    };
    config.validate()?;
    Ok(config)
}

/// Model parameters plus any extra named tensors (e.g. an MLM bias).
pub fn save_model(path: impl AsRef<Path>, model: &TransformerModel, extras: &IndexMap<String, Tensor>) -> Result<()> {
    write_entries(path, &model_entries(model, extras))
}

pub fn model_entries(model: &TransformerModel, extras: &IndexMap<String, Tensor>) -> IndexMap<String, Tensor> {
    let mut entries = IndexMap::new();
    entries.insert(CONFIG_ENTRY.to_string(), config_vector(model.config()));
    for (name, t) in model.params() {
        entries.insert(name.clone(), t.clone());
    }
    for (name, t) in extras {
        entries.insert(name.clone(), t.clone());
    }
    entries
}

/// Loads a model checkpoint; entries that are not model parameters are
/// returned alongside.
pub fn load_model(path: impl AsRef<Path>) -> Result<(TransformerModel, IndexMap<String, Tensor>)> {
    model_from_entries(read_entries(path)?)
}

pub fn model_from_entries(
    mut entries: IndexMap<String, Tensor>,
) -> Result<(TransformerModel, IndexMap<String, Tensor>)> {
    let config_t = entries
        .shift_remove(CONFIG_ENTRY)
        .ok_or_else(|| Error::Format(format!("missing {CONFIG_ENTRY} entry")))?;
    let config = config_from_vector(&config_t)?;
    let names: Vec<String> = crate::model::parameter_shapes(&config)
        .into_iter()
        .map(|(n, _, _)| n)
        .collect();
    let mut params = IndexMap::new();
    for n in &names {
        if let Some(t) = entries.shift_remove(n) {
            params.insert(n.clone(), t);
        }
    }
    let model = TransformerModel::from_params(config, params)?;
    Ok((model, entries))
}
