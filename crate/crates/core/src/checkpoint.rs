//! Binary checkpoint files.
//!
//! ```text
//! "TDSTCKPT"  u32 version  u32 header_len  header (JSON)
//! u32 param_count
//! per param: u32 name_len  name  u32 ndim  u64 dims[ndim]  values (little endian)
//! ```
//!
//! The header carries the model config, value precision, the reserved token
//! ids, the full vocabulary and schema, the reuse spec and an opaque manifest.
//! Nothing time- or path-dependent is written, so identical models produce
//! identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::schema::Schema;
use crate::data::vocab::{Vocab, RESERVED};
use crate::error::{Error, Result};
use crate::model::{DstModel, ReuseSpec};
use crate::param::ParamSet;
use crate::tensor::{Scalar, Tensor};
use crate::transformer::ModelConfig;

pub const MAGIC: &[u8; 8] = b"TDSTCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    precision: String,
    config: ModelConfig,
    reserved_tokens: Vec<String>,
    vocab: Vec<String>,
    schema: serde_json::Value,
    reuse: String,
    max_value_len: usize,
    manifest: serde_json::Value,
}

pub fn encode_checkpoint<F: Scalar>(model: &DstModel<F>, manifest: &serde_json::Value) -> Vec<u8> {
    let header = Header {
        precision: F::NAME.to_string(),
        config: model.config().clone(),
        reserved_tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
        vocab: model.vocab().tokens().to_vec(),
        schema: serde_json::from_str(&model.schema().to_json()).expect("schema json"),
        reuse: model.reuse().to_string(),
        max_value_len: model.max_value_len(),
        manifest: manifest.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(header.len() + 64 + model.params().num_scalars() * F::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (_, p) in model.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value().data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    model: &DstModel<F>,
    manifest: &serde_json::Value,
) -> Result<()> {
    fs::write(path, encode_checkpoint(model, manifest)).map_err(|e| Error::io(path, e))
}

/// A decoded checkpoint: the model in the requested precision plus the manifest.
pub struct Checkpoint<F> {
    pub model: DstModel<F>,
    pub manifest: serde_json::Value,
    /// Precision the values were stored in.
    pub stored_precision: String,
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.reserved_tokens != RESERVED {
        return Err(Error::Checkpoint("reserved token ids differ".into()));
    }
    let width = match header.precision.as_str() {
        "f32" => 4,
        "f64" => 8,
        p => return Err(Error::Checkpoint(format!("unknown precision {p:?}"))),
    };

    let count = r.u32()? as usize;
    let mut params = ParamSet::<F>::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(width).ok_or_else(|| {
            Error::Checkpoint(format!("{name}: shape {shape:?} too large"))
        })?)?;
        let data: Vec<F> = raw
            .chunks_exact(width)
            .map(|c| match width {
                4 => F::lit(f32::read_le(c) as f64),
                _ => F::lit(f64::read_le(c)),
            })
            .collect();
        params.add(name, Tensor::new(&shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }

    let vocab = Vocab::from_lines(header.vocab.iter().map(String::as_str))?;
    let schema = Schema::from_json(&header.schema.to_string())?;
    let reuse: ReuseSpec = header.reuse.parse()?;
    let model = DstModel::from_params(header.config, vocab, schema, reuse, header.max_value_len, params)?;
    Ok(Checkpoint {
        model,
        manifest: header.manifest,
        stored_precision: header.precision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::SlotKey;

    fn model() -> DstModel<f32> {
        let vocab = Vocab::new(["hotel", "area", "north"]);
        let schema = Schema::from_pairs(vec![SlotKey::new("hotel", "area")]).unwrap();
        let mut c = ModelConfig::toy(vocab.len());
        c.hidden_dim = 8;
        c.ffn_dim = 16;
        c.max_positions = 32;
        DstModel::new(c, vocab, schema, ReuseSpec::best(), 4, 9).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let manifest = serde_json::json!({"seed": 9});
        let bytes = encode_checkpoint(&m, &manifest);
        let ck = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(ck.manifest, manifest);
        assert_eq!(ck.stored_precision, "f32");
        assert_eq!(ck.model.vocab(), m.vocab());
        assert_eq!(ck.model.schema(), m.schema());
        for ((_, a), (_, b)) in ck.model.params().iter().zip(m.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value(), b.value());
        }
        assert_eq!(encode_checkpoint(&ck.model, &manifest), bytes);
    }

    #[test]
    fn loads_into_other_precision() {
        let m = model();
        let bytes = encode_checkpoint(&m, &serde_json::Value::Null);
        let ck = decode_checkpoint::<f64>(&bytes).unwrap();
        let (_, a) = ck.model.params().iter().next().unwrap();
        let (_, b) = m.params().iter().next().unwrap();
        assert_eq!(a.value().to_f64_vec(), b.value().to_f64_vec());
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode_checkpoint(&model(), &serde_json::Value::Null);
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint::<f32>(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::Checkpoint(_))));
    }
}
