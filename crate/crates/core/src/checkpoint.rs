//! Binary checkpoint of an extractor and head.
//!
//! ```text
//! "ERIC"  u32 version
//! u32 config length, config bytes (UTF-8 key=value)
//! u32 parameter count
//! per parameter: u32 name length, name, u32 rank, u32 dims…, u8 flags
//! per parameter: f32 values, row-major
//! u32 CRC32 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian. Flag bit 0 marks a frozen
//! parameter, bit 1 a non-trainable buffer.

use std::fs;
use std::path::Path;

use crate::autodiff::{Module, Parameter, Tensor};
use crate::config::RunConfig;
use crate::eri_head::EriHead;
use crate::error::{Error, Result};
use crate::mtl_dan::MtlDanModel;

pub const MAGIC: &[u8; 4] = b"ERIC";
pub const VERSION: u32 = 1;

const FLAG_FROZEN: u8 = 1;
const FLAG_BUFFER: u8 = 2;

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub extractor: MtlDanModel,
    pub head: EriHead,
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    flags: u8,
    values: Vec<f64>,
}

fn collect(extractor: &MtlDanModel, head: &EriHead) -> Vec<Entry> {
    let mut out = Vec::new();
    let mut push = |p: &Parameter| {
        let mut flags = 0;
        if p.is_frozen() {
            flags |= FLAG_FROZEN;
        }
        if p.is_buffer() {
            flags |= FLAG_BUFFER;
        }
        out.push(Entry {
            name: p.name().to_string(),
            shape: p.tensor.shape().to_vec(),
            flags,
            values: p.tensor.data().to_vec(),
        });
    };
    extractor.visit(&mut push);
    head.visit(&mut push);
    out
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serializes the models and config to bytes.
pub fn encode(config: &RunConfig, extractor: &MtlDanModel, head: &EriHead) -> Vec<u8> {
    let entries = collect(extractor, head);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let blob = config.to_string();
    put_u32(&mut buf, blob.len());
    buf.extend_from_slice(blob.as_bytes());
    put_u32(&mut buf, entries.len());
    for e in &entries {
        put_u32(&mut buf, e.name.len());
        buf.extend_from_slice(e.name.as_bytes());
        put_u32(&mut buf, e.shape.len());
        for &d in &e.shape {
            put_u32(&mut buf, d);
        }
        buf.push(e.flags);
    }
    for e in &entries {
        for &v in &e.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save(path: &Path, config: &RunConfig, extractor: &MtlDanModel, head: &EriHead) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(config, extractor, head)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format("checkpoint", format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::format("checkpoint", e.to_string()))
    }
}

struct Decoded {
    config: RunConfig,
    entries: Vec<Entry>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::format("checkpoint", "missing ERIC header"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumFailure { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let config = RunConfig::parse_text(&r.string()?)?;
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let flags = r.take(1)?[0];
        entries.push(Entry {
            name,
            shape,
            flags,
            values: Vec::new(),
        });
    }
    for e in &mut entries {
        let n: usize = e.shape.iter().product();
        e.values = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
    }
    if r.pos != body.len() {
        return Err(Error::format("checkpoint", format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Decoded { config, entries })
}

fn install(entries: Vec<Entry>, extractor: &mut MtlDanModel, head: &mut EriHead) -> Result<()> {
    let mut it = entries.into_iter();
    let mut failure: Option<Error> = None;
    let mut fill = |p: &mut Parameter| {
        if failure.is_some() {
            return;
        }
        let Some(e) = it.next() else {
            failure = Some(Error::NameTableMismatch {
                name: p.name().to_string(),
                detail: "missing from checkpoint".into(),
            });
            return;
        };
        if e.name != p.name() {
            failure = Some(Error::NameTableMismatch {
                name: p.name().to_string(),
                detail: format!("checkpoint has `{}` at this position", e.name),
            });
            return;
        }
        if e.shape != p.tensor.shape() {
            failure = Some(Error::NameTableMismatch {
                name: p.name().to_string(),
                detail: format!("shape {:?} in checkpoint, {:?} in model", e.shape, p.tensor.shape()),
            });
            return;
        }
        if (e.flags & FLAG_BUFFER != 0) != p.is_buffer() {
            failure = Some(Error::NameTableMismatch {
                name: p.name().to_string(),
                detail: "buffer flag differs".into(),
            });
            return;
        }
        let requires_grad = p.tensor.requires_grad();
        p.tensor = Tensor::from_vec(e.shape, e.values)
            .expect("length checked by decode")
            .with_requires_grad(requires_grad);
        p.set_frozen(e.flags & FLAG_FROZEN != 0);
    };
    extractor.visit_mut(&mut fill);
    head.visit_mut(&mut fill);
    if let Some(err) = failure {
        return Err(err);
    }
    if let Some(extra) = it.next() {
        return Err(Error::NameTableMismatch {
            name: extra.name,
            detail: "not present in model".into(),
        });
    }
    let all_frozen = extractor.parameters().iter().all(|p| p.is_buffer() || p.is_frozen());
    extractor.set_frozen(all_frozen);
    Ok(())
}

/// Rebuilds both models from the embedded config and restores every
/// parameter and freeze flag.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let Decoded { config, entries } = decode(bytes)?;
    let mut extractor = MtlDanModel::new(&config.extractor(), 0)?;
    let mut head = EriHead::new(&config.head(), 0)?;
    install(entries, &mut extractor, &mut head)?;
    Ok(Checkpoint {
        config,
        extractor,
        head,
    })
}

/// Loads parameters into existing models, which must have the same table.
/// On error both models are left untouched. Returns the embedded config.
pub fn load_into(path: &Path, extractor: &mut MtlDanModel, head: &mut EriHead) -> Result<RunConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let Decoded { config, entries } = decode(&bytes)?;
    let (mut ex, mut hd) = (extractor.clone(), head.clone());
    install(entries, &mut ex, &mut hd)?;
    *extractor = ex;
    *head = hd;
    Ok(config)
}
