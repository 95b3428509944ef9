//! Flat binary checkpoint container.
//!
//! ```text
//! "HARMA1"  version:u32  count:u32
//! count × { name_len:u16  name  rank:u8  extents:u32×rank  values:f64×numel }
//! trainable bitmap, ceil(count/8) bytes, bit i of byte i/8 (LSB first)
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::adapters::{attach_adapters, AdapterConfig, AdapterKind, AttachPolicy};
use crate::encoders::{DualEncoder, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 6] = b"HARMA1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.value.shape().len() as u8])?;
        for &e in p.value.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let mut bitmap = vec![0u8; store.len().div_ceil(8)];
    for (id, p) in store.iter() {
        if p.trainable {
            bitmap[id.index() / 8] |= 1 << (id.index() % 8);
        }
    }
    w.write_all(&bitmap)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf).expect("write to Vec");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(6, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected HARMA1".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("parameter count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("non-UTF-8 name before byte {}", r.pos)))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(CheckpointEntry {
            name,
            value: Tensor::new(shape, data)?,
            trainable: false,
        });
    }
    let bitmap = r.take(count.div_ceil(8), "trainable bitmap")?;
    for (i, e) in entries.iter_mut().enumerate() {
        e.trainable = bitmap[i / 8] & (1 << (i % 8)) != 0;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after bitmap",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

/// Adapter depths and kind implied by parameter names.
fn adapter_layout(entries: &[CheckpointEntry]) -> Result<(AdapterKind, Vec<usize>)> {
    let mut kind = AdapterKind::None;
    let mut layers = BTreeSet::new();
    for e in entries {
        let (k, rest) = if let Some(rest) = e.name.strip_prefix("mga.") {
            (AdapterKind::Mga, rest)
        } else if let Some(rest) = e.name.strip_prefix("adapter.") {
            (AdapterKind::Vanilla, rest)
        } else {
            continue;
        };
        if kind != AdapterKind::None && kind != k {
            return Err(Error::Checkpoint("mixed adapter kinds".into()));
        }
        kind = k;
        let layer = rest
            .split('.')
            .next()
            .and_then(|l| l.parse::<usize>().ok())
            .ok_or_else(|| Error::Checkpoint(format!("bad adapter parameter name {}", e.name)))?;
        layers.insert(layer);
    }
    Ok((kind, layers.into_iter().collect()))
}

impl DualEncoder {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.store, path)
    }

    /// Rebuilds a model from checkpoint entries. Adapter depths and kind come from the
    /// parameter names; adapter widths come from `adapter_cfg`.
    pub fn from_entries(
        config: ModelConfig,
        adapter_cfg: &AdapterConfig,
        entries: &[CheckpointEntry],
    ) -> Result<Self> {
        let mut model = DualEncoder::new(config, 0)?;
        let (kind, layers) = adapter_layout(entries)?;
        if kind != AdapterKind::None {
            let cfg = AdapterConfig {
                kind,
                policy: AttachPolicy::Layers(layers),
                ..adapter_cfg.clone()
            };
            attach_adapters(&mut model, &cfg, 0)?;
        }
        if entries.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, configured model has {}",
                entries.len(),
                model.store.len()
            )));
        }
        for e in entries {
            let id = model.store.id(&e.name).ok_or_else(|| {
                Error::Checkpoint(format!("unexpected parameter {} for this config", e.name))
            })?;
            let p = model.store.get_mut(id);
            if p.value.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint shape {:?}, configured {:?}",
                    e.name,
                    e.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = e.value.clone();
            p.trainable = e.trainable;
        }
        Ok(model)
    }

    pub fn load(path: &Path, config: ModelConfig, adapter_cfg: &AdapterConfig) -> Result<Self> {
        let entries = load_checkpoint(path)?;
        Self::from_entries(config, adapter_cfg, &entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut s = ParamStore::new();
        let id = s.add("ab", Tensor::vector(vec![1.5])).unwrap();
        s.get_mut(id).trainable = true;
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        let mut expect = b"HARMA1".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u16.to_le_bytes());
        expect.extend(b"ab");
        expect.push(1);
        expect.extend(1u32.to_le_bytes());
        expect.extend(1.5f64.to_le_bytes());
        expect.push(1);
        assert_eq!(buf, expect);
        let back = read_checkpoint(&buf).unwrap();
        assert_eq!(back[0].name, "ab");
        assert!(back[0].trainable);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2, 2])).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(Error::Checkpoint(_))));
        buf[0] = b'X';
        assert!(matches!(read_checkpoint(&buf), Err(Error::Checkpoint(_))));
    }
}
