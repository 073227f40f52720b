//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XGPA" | version u16 | header_len u32 | header JSON
//! | record_count u32 | records... | crc32 u32
//! record = name_len u16 | name | rank u8 | dims u64 × rank | f64 × numel
//! ```
//!
//! The CRC covers every byte before it. The JSON header carries the model
//! config, window layout and node ids; normalization statistics travel as the records
//! `norm.mean` and `norm.std`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use xgpa_core::{Tensor, XgpaConfig, XgpaModel};

use crate::data::{Normalizer, TrafficDataset, WindowSpec};
use crate::error::{Result, XgpaError};

pub const MAGIC: &[u8; 4] = b"XGPA";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: XgpaConfig,
    window: WindowSpec,
    node_ids: Vec<String>,
}

/// A trained model with the statistics needed to serve it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: XgpaModel,
    pub normalizer: Normalizer,
    pub node_ids: Vec<String>,
    /// Input layout the model was trained with.
    pub window: WindowSpec,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.model.config.clone(),
            window: self.window.clone(),
            node_ids: self.node_ids.clone(),
        })?;
        let mut records = self.model.store.to_records();
        let n = self.normalizer.n();
        records.push(("norm.mean".into(), Tensor::new([n], self.normalizer.mean.clone())?));
        records.push(("norm.std".into(), Tensor::new([n], self.normalizer.std.clone())?));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in &records {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(XgpaError::Format("not an XGPA checkpoint (bad magic)".into()));
        }
        if bytes.len() < 10 {
            return Err(XgpaError::Integrity("checkpoint truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let want = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let version = u16::from_le_bytes([body[4], body[5]]);
        if crc32fast::hash(body) != want {
            return Err(XgpaError::Integrity("checkpoint checksum mismatch".into()));
        }
        if version != VERSION {
            return Err(XgpaError::Format(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let mut r = Reader { buf: body, pos: 6 };
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| XgpaError::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| XgpaError::Format("shape overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            records.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(XgpaError::Format("trailing bytes after parameter records".into()));
        }
        let take = |records: &mut Vec<(String, Tensor)>, name: &str| -> Result<Vec<f64>> {
            let i = records
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| XgpaError::Format(format!("checkpoint lacks {name}")))?;
            Ok(records.remove(i).1.into_data())
        };
        let mean = take(&mut records, "norm.mean")?;
        let std = take(&mut records, "norm.std")?;
        if mean.len() != header.node_ids.len() || std.len() != mean.len() {
            return Err(XgpaError::Format("normalizer does not match node ids".into()));
        }
        let mut model = XgpaModel::new(header.config)?;
        model.store.load_records(records)?;
        Ok(Checkpoint {
            model,
            normalizer: Normalizer { mean, std },
            node_ids: header.node_ids,
            window: header.window,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| XgpaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| XgpaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checks that `ds` carries the node ids and feature width this model
    /// was trained on.
    pub fn check_dataset(&self, ds: &TrafficDataset) -> Result<()> {
        // datasets carry speed only
        let width = 1;
        if self.model.config.d_in != width {
            return Err(XgpaError::Model(xgpa_core::Error::Contract(format!(
                "model expects D_in = {} but the dataset provides D_in = {width}",
                self.model.config.d_in
            ))));
        }
        if ds.ids() != self.node_ids.as_slice() {
            return Err(XgpaError::Model(xgpa_core::Error::Contract(format!(
                "dataset nodes {:?} differ from checkpoint nodes {:?}",
                ds.ids(),
                self.node_ids
            ))));
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| XgpaError::Integrity("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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
