//! Binary checkpoint: `SLTM` magic, version, JSON header, named `f32` tensors.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ParamLayout, Seq2SeqModel};

const MAGIC: &[u8; 4] = b"SLTM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A model plus free-form metadata (run configuration, seed, step).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Seq2SeqModel,
    pub meta: serde_json::Value,
}

fn u32_bytes(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn write_checkpoint(
    model: &Seq2SeqModel,
    meta: &serde_json::Value,
    mut w: impl Write,
) -> std::io::Result<()> {
    let header = serde_json::to_vec(&Header { config: model.config.clone(), meta: meta.clone() })
        .map_err(std::io::Error::other)?;
    let mut buf = Vec::with_capacity(16 + header.len() + model.params.len() * 4);
    buf.extend_from_slice(MAGIC);
    u32_bytes(&mut buf, VERSION as usize);
    u32_bytes(&mut buf, header.len());
    buf.extend_from_slice(&header);
    u32_bytes(&mut buf, model.layout.entries.len());
    for e in &model.layout.entries {
        u32_bytes(&mut buf, e.name.len());
        buf.extend_from_slice(e.name.as_bytes());
        u32_bytes(&mut buf, 2);
        u32_bytes(&mut buf, e.span.rows);
        u32_bytes(&mut buf, e.span.cols);
        for p in &model.params[e.span.range()] {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    w.write_all(&buf)
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.at + n > self.data.len() {
            return Err("truncated file".into());
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn read_checkpoint(data: &[u8]) -> Result<Checkpoint, String> {
    let mut c = Cursor { data, at: 0 };
    if c.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u32()?;
    if version != VERSION as usize {
        return Err(format!("unsupported version {version}"));
    }
    let hlen = c.u32()?;
    let header: Header =
        serde_json::from_slice(c.take(hlen)?).map_err(|e| format!("bad header: {e}"))?;
    header.config.validate().map_err(|e| e.to_string())?;
    let layout = ParamLayout::new(&header.config);
    let n = c.u32()?;
    if n != layout.entries.len() {
        return Err(format!("expected {} tensors, found {n}", layout.entries.len()));
    }
    let mut params = vec![0f32; layout.total];
    for e in &layout.entries {
        let name_len = c.u32()?;
        let name = std::str::from_utf8(c.take(name_len)?).map_err(|_| "tensor name not utf-8")?;
        if name != e.name {
            return Err(format!("expected tensor {}, found {name}", e.name));
        }
        let ndim = c.u32()?;
        let dims = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
        if dims != [e.span.rows, e.span.cols] {
            return Err(format!("tensor {name}: shape {dims:?} != [{}, {}]", e.span.rows, e.span.cols));
        }
        let raw = c.take(e.span.len() * 4)?;
        for (p, b) in params[e.span.range()].iter_mut().zip(raw.chunks_exact(4)) {
            *p = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    if c.at != data.len() {
        return Err("trailing bytes".into());
    }
    let model = Seq2SeqModel::from_params(header.config, params).map_err(|e| e.to_string())?;
    Ok(Checkpoint { model, meta: header.meta })
}

pub fn save_checkpoint(
    path: &Path,
    model: &Seq2SeqModel,
    meta: &serde_json::Value,
) -> Result<(), ModelError> {
    let io = |source| ModelError::Io { path: path.display().to_string(), source };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
    }
    let file = std::fs::File::create(path).map_err(io)?;
    write_checkpoint(model, meta, std::io::BufWriter::new(file)).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    read_checkpoint(&data)
        .map_err(|reason| ModelError::Checkpoint { path: path.display().to_string(), reason })
}
