//! Binary weight file.
//!
//! ```text
//! magic "CSPC" | version u32 | config (9 × u32)
//! n_entries u32 | entries: name_len u16, name utf8, layer i32 (-1 = global), offset u64, length u64
//! zero padding to 64 bytes | tensor data (little-endian f32)
//! ```
//!
//! Tensors of one layer are packed back to back and the block starts on a
//! 64-byte boundary, so each layer is a single contiguous extent. Global
//! tensors and adapter tensors are individually 64-byte aligned. All integers
//! are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::ModelConfig;
use super::runtime::Model;
use super::weights::{adapter_tensor_specs, target_tensor_specs, TensorSpec, Weights};
use crate::adapter::{AdapterPair, DM_PREFIX, SV_PREFIX};
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"CSPC";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: u64 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorEntry {
    pub name: String,
    /// 1-based owning layer, or -1 for global and adapter tensors.
    pub layer: i32,
    pub offset: u64,
    pub length: u64,
}

/// Byte range inside the weight file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Extent {
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightLayout {
    pub version: u32,
    pub config: ModelConfig,
    pub entries: Vec<TensorEntry>,
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(ALIGN) * ALIGN
}

fn all_specs(config: &ModelConfig, with_adapters: bool) -> Vec<TensorSpec> {
    let mut specs = target_tensor_specs(config);
    if with_adapters {
        specs.extend(adapter_tensor_specs(config, DM_PREFIX));
        specs.extend(adapter_tensor_specs(config, SV_PREFIX));
    }
    specs
}

impl WeightLayout {
    /// The deterministic layout for a config, with or without adapter records.
    pub fn plan(config: &ModelConfig, with_adapters: bool) -> Self {
        let specs = all_specs(config, with_adapters);
        let header_len = 4 + 4 + 36 + 4 + specs.iter().map(|s| 2 + s.name.len() as u64 + 4 + 8 + 8).sum::<u64>();
        let mut cursor = align_up(header_len);
        let mut entries = Vec::with_capacity(specs.len());
        let mut prev_layer: Option<usize> = None;
        for s in &specs {
            // Inside a layer block tensors are packed; everything else starts aligned.
            let continues_block = s.layer.is_some() && s.layer == prev_layer;
            if !continues_block {
                cursor = align_up(cursor);
            }
            let length = 4 * s.numel() as u64;
            entries.push(TensorEntry {
                name: s.name.clone(),
                layer: s.layer.map_or(-1, |l| l as i32),
                offset: cursor,
                length,
            });
            cursor += length;
            prev_layer = s.layer;
        }
        Self { version: FORMAT_VERSION, config: *config, entries }
    }

    pub fn has_adapters(&self) -> bool {
        self.entries.iter().any(|e| e.name.starts_with(DM_PREFIX))
    }

    /// Contiguous file extent of 1-based layer `l`.
    pub fn layer_extent(&self, l: usize) -> Extent {
        let mut lo = u64::MAX;
        let mut hi = 0;
        for e in self.entries.iter().filter(|e| e.layer == l as i32) {
            lo = lo.min(e.offset);
            hi = hi.max(e.offset + e.length);
        }
        Extent { offset: lo, length: hi.saturating_sub(lo) }
    }

    /// Bytes layer `l` occupies at the accounted storage width (`bytes_per_param`).
    pub fn accounted_layer_bytes(&self, l: usize) -> u64 {
        self.layer_extent(l).length / 4 * self.config.bytes_per_param as u64
    }

    pub fn accounted_adapter_bytes(&self) -> u64 {
        (self.config.adapter_params() * self.config.bytes_per_param) as u64
    }

    pub fn header_len(&self) -> u64 {
        4 + 4 + 36 + 4 + self.entries.iter().map(|e| 2 + e.name.len() as u64 + 4 + 8 + 8).sum::<u64>()
    }

    pub fn file_len(&self) -> u64 {
        self.entries.iter().map(|e| e.offset + e.length).max().unwrap_or_else(|| align_up(self.header_len()))
    }

    fn encode_header(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(self.header_len() as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        for v in [
            c.n_layers,
            c.d_model,
            c.n_heads,
            c.vocab_size,
            c.max_seq,
            c.l_dm,
            c.l_sv,
            c.bytes_per_param,
            c.d_ff,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&e.layer.to_le_bytes());
            out.extend_from_slice(&e.offset.to_le_bytes());
            out.extend_from_slice(&e.length.to_le_bytes());
        }
        out
    }

    fn decode_header(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.bad("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.bad(&format!("unsupported version {version}")));
        }
        let mut f = [0usize; 9];
        for v in f.iter_mut() {
            *v = r.u32()? as usize;
        }
        let config = ModelConfig {
            n_layers: f[0],
            d_model: f[1],
            n_heads: f[2],
            vocab_size: f[3],
            max_seq: f[4],
            l_dm: f[5],
            l_sv: f[6],
            bytes_per_param: f[7],
            d_ff: f[8],
        };
        config.validate().map_err(|e| r.bad(&e.to_string()))?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.bad("tensor name is not utf-8"))?;
            let layer = i32::from_le_bytes(r.take(4)?.try_into().unwrap());
            let offset = r.u64()?;
            let length = r.u64()?;
            entries.push(TensorEntry { name, layer, offset, length });
        }
        Ok(Self { version, config, entries })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn bad(&self, reason: &str) -> Error {
        Error::Format { path: self.path.to_path_buf(), reason: reason.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(self.bad("truncated header"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Serializes the model (and adapters, if given) to bytes.
pub fn encode(model: &Model, adapters: Option<&AdapterPair>) -> (WeightLayout, Vec<u8>) {
    let layout = WeightLayout::plan(model.config(), adapters.is_some());
    let mut tensors: HashMap<String, &[f32]> = model.weights().named_tensors().into_iter().collect();
    if let Some(a) = adapters {
        tensors.extend(a.dm.named_tensors(DM_PREFIX));
        tensors.extend(a.sv.named_tensors(SV_PREFIX));
    }
    let mut buf = vec![0u8; layout.file_len() as usize];
    let header = layout.encode_header();
    buf[..header.len()].copy_from_slice(&header);
    for e in &layout.entries {
        let data = tensors[&e.name];
        let dst = &mut buf[e.offset as usize..(e.offset + e.length) as usize];
        for (chunk, v) in dst.chunks_exact_mut(4).zip(data) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
    }
    (layout, buf)
}

/// Writes through a temporary sibling and renames over `path`, so readers
/// never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_model(path: &Path, model: &Model, adapters: Option<&AdapterPair>) -> Result<WeightLayout> {
    let (layout, bytes) = encode(model, adapters);
    write_atomic(path, &bytes)?;
    Ok(layout)
}

pub fn read_layout(path: &Path) -> Result<WeightLayout> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    WeightLayout::decode_header(&bytes, path)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Model, Option<AdapterPair>)> {
    let layout = WeightLayout::decode_header(bytes, path)?;
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let mut map = HashMap::with_capacity(layout.entries.len());
    for e in &layout.entries {
        let end = e.offset.checked_add(e.length).filter(|&end| end <= bytes.len() as u64);
        let end = end.ok_or_else(|| bad(format!("tensor {} extends past end of file", e.name)))?;
        let raw = &bytes[e.offset as usize..end as usize];
        let vals: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        map.insert(e.name.clone(), vals);
    }
    let config = layout.config;
    let weights = Weights::from_named(&config, &mut map).map_err(|e| bad(e.to_string()))?;
    let model = Model::new(config, weights).map_err(|e| bad(e.to_string()))?;
    let adapters = if layout.has_adapters() {
        Some(AdapterPair::from_named(&config, &mut map).map_err(|e| bad(e.to_string()))?)
    } else {
        None
    };
    Ok((model, adapters))
}

pub fn read_model(path: &Path) -> Result<(Model, Option<AdapterPair>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_are_aligned_contiguous_and_ordered() {
        let c = ModelConfig::default();
        let layout = WeightLayout::plan(&c, true);
        let mut prev_end = 0;
        for l in 1..=c.n_layers {
            let e = layout.layer_extent(l);
            assert_eq!(e.offset % 64, 0);
            assert_eq!(e.length, 4 * c.layer_params() as u64);
            assert!(e.offset >= prev_end);
            prev_end = e.offset + e.length;
        }
        assert_eq!(layout.accounted_layer_bytes(1), 2 * c.layer_params() as u64);
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let c = ModelConfig { n_layers: 4, d_model: 16, n_heads: 2, vocab_size: 32, l_dm: 1, l_sv: 2, d_ff: 24, ..ModelConfig::default() };
        let m = Model::random(c, 3).unwrap();
        let a = AdapterPair::init(&c, 4);
        let (layout, bytes) = encode(&m, Some(&a));
        assert_eq!(bytes.len() as u64, layout.file_len());
        let (m2, a2) = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(m, m2);
        assert_eq!(Some(a), a2);

        let (_, bytes) = encode(&m, None);
        assert!(decode(&bytes, Path::new("mem")).unwrap().1.is_none());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let c = ModelConfig { n_layers: 3, d_model: 8, n_heads: 2, vocab_size: 16, l_dm: 1, l_sv: 2, d_ff: 8, ..ModelConfig::default() };
        let m = Model::random(c, 1).unwrap();
        let (_, mut bytes) = encode(&m, None);
        assert!(matches!(decode(&bytes[..bytes.len() - 8], Path::new("x")), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::Format { .. })));
    }
}
