//! Single-file named-tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DCGN"            magic
//! u32               format version
//! u32 + bytes       metadata, UTF-8 `key=value` lines
//! u32               tensor count
//! per tensor:       u32 name length, name bytes, u8 dtype (0 = f32),
//!                   u32 rank, rank × u64 extents, u64 absolute byte offset
//! payload           f32 data, each tensor starting on a 64-byte boundary
//! ```
//!
//! Writes go to a temporary sibling file that is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DCGN";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("metadata key `{key}` missing")))
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` missing")))
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    pub fn insert_prefixed<'a>(&mut self, prefix: &str, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) {
        for (name, t) in tensors {
            self.tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            other => {
                return Err(Error::Format(format!(
                    "bad escape `\\{}` in metadata",
                    other.unwrap_or(' ')
                )))
            }
        }
    }
    Ok(out)
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut meta = String::new();
    for (k, v) in &ckpt.metadata {
        if k.is_empty() || k.contains('=') || k.contains('\n') {
            return Err(Error::Format(format!("metadata key `{k}` is not representable")));
        }
        meta.push_str(&format!("{k}={}\n", escape(v)));
    }
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    head.extend_from_slice(meta.as_bytes());
    head.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());

    // Header size is known before offsets are: every field has fixed width.
    let table: usize = ckpt
        .tensors
        .iter()
        .map(|(n, t)| 4 + n.len() + 1 + 4 + 8 * t.rank() + 8)
        .sum();
    let mut offset = align_up(head.len() + table);
    let mut offsets = Vec::with_capacity(ckpt.tensors.len());
    for (name, t) in &ckpt.tensors {
        head.extend_from_slice(&(name.len() as u32).to_le_bytes());
        head.extend_from_slice(name.as_bytes());
        head.push(DTYPE_F32);
        head.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            head.extend_from_slice(&(d as u64).to_le_bytes());
        }
        head.extend_from_slice(&(offset as u64).to_le_bytes());
        offsets.push(offset);
        offset = align_up(offset + 4 * t.numel());
    }
    let mut out = head;
    for (t, &off) in ckpt.tensors.values().zip(&offsets) {
        out.resize(off, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated header at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes; any inconsistency is a format error.
pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur
        .take(4)
        .map_err(|_| Error::Format("file too short for magic".into()))?
        != MAGIC
    {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = cur.u32()? as usize;
    let meta = std::str::from_utf8(cur.take(meta_len)?).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let mut metadata = BTreeMap::new();
    for line in meta.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("metadata line without `=`: {line:?}")))?;
        if metadata.insert(k.to_string(), unescape(v)?).is_some() {
            return Err(Error::Format(format!("duplicate metadata key `{k}`")));
        }
    }

    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor `{name}` has unknown dtype code {dtype}")));
        }
        let rank = cur.u32()? as usize;
        if rank > 16 {
            return Err(Error::Format(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = cur.u64()?;
            if d == 0 || d > u32::MAX as u64 {
                return Err(Error::Format(format!("tensor `{name}` has extent {d}")));
            }
            shape.push(d as usize);
        }
        let offset = cur.u64()? as usize;
        entries.push((name, shape, offset));
    }
    let header_end = cur.pos;

    let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(entries.len());
    for (name, shape, offset) in &entries {
        let bytes = shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` size overflows")))?;
        let end = offset
            .checked_add(bytes)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` offset overflows")))?;
        if *offset < header_end {
            return Err(Error::Format(format!("tensor `{name}` overlaps the header")));
        }
        if end > buf.len() {
            return Err(Error::Format(format!(
                "tensor `{name}` ends at byte {end} but the file has {} bytes",
                buf.len()
            )));
        }
        spans.push((*offset, end, name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Format(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
        }
    }

    let mut tensors = BTreeMap::new();
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let data = buf[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(Checkpoint { metadata, tensors })
}

/// Writes atomically: temp file in the same directory, fsync, rename.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("`{}` is not a file path", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint; a missing file is reported as a missing prerequisite.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    decode(&bytes)
}
