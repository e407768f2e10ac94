//! Single-file container for named f32 tensors plus a JSON metadata header,
//! integrity-protected by a trailing SHA-256 digest. Both teacher-weight
//! files and training checkpoints use this format.

use std::io::Write as _;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RDFARCH1";
const MAX_NAME: usize = 4096;
const MAX_NDIM: usize = 8;

#[derive(Debug, Clone)]
pub struct Archive {
    /// What the payload is, e.g. `"teacher-weights"` or `"checkpoint"`.
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl Archive {
    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write(path: &Path, archive: &Archive) -> Result<()> {
    let mut buf = Vec::<u8>::new();
    buf.extend_from_slice(MAGIC);
    put_bytes_u32(&mut buf, archive.kind.as_bytes());
    let meta = serde_json::to_vec(&archive.meta).expect("metadata serializes");
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(archive.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &archive.tensors {
        put_bytes_u32(&mut buf, name.as_bytes());
        let shape = tensor.shape();
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let data = tensor.as_standard_layout();
        for &v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    // Write-then-rename so a crash can't leave a truncated archive behind.
    let tmp = path.with_extension("tmp-write");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Archive> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < MAGIC.len() + 32 {
        return Err(Error::Archive(format!("{}: file too short", path.display())));
    }
    let (body, trailer) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::Archive(format!("{}: digest mismatch, file is corrupt", path.display())));
    }
    let mut r = Cursor { buf: body, pos: 0, path: path.display().to_string() };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Archive(format!(
            "{}: bad magic {:?} (expected {:?})",
            path.display(),
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let kind = r.string_u32(MAX_NAME)?;
    let meta_len = r.u64()? as usize;
    let meta_bytes = r.take(meta_len)?;
    let meta: serde_json::Value = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Archive(format!("{}: bad metadata JSON: {e}", r.path)))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string_u32(MAX_NAME)?;
        let ndim = r.take(1)?[0] as usize;
        if ndim > MAX_NDIM {
            return Err(Error::Archive(format!("{}: tensor {name} has {ndim} dims", r.path)));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let d = r.u64()? as usize;
            numel = numel
                .checked_mul(d)
                .filter(|&n| n * 4 <= body.len())
                .ok_or_else(|| Error::Archive(format!("{}: tensor {name} is larger than the file", r.path)))?;
            shape.push(d);
        }
        let raw = r.take(numel * 4)?;
        let mut data = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Archive(format!("{}: tensor {name}: {e}", r.path)))?;
        tensors.push((name, tensor));
    }
    if r.pos != body.len() {
        return Err(Error::Archive(format!("{}: {} trailing bytes", r.path, body.len() - r.pos)));
    }
    Ok(Archive { kind, meta, tensors })
}

pub fn read_expect_kind(path: &Path, kind: &str) -> Result<Archive> {
    let archive = read(path)?;
    if archive.kind != kind {
        return Err(Error::Archive(format!(
            "{}: expected a {kind} archive, found {}",
            path.display(),
            archive.kind
        )));
    }
    Ok(archive)
}

fn put_bytes_u32(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Archive(format!("{}: unexpected end of file", self.path)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string_u32(&mut self, max: usize) -> Result<String> {
        let len = self.u32()? as usize;
        if len > max {
            return Err(Error::Archive(format!("{}: string of {len} bytes exceeds limit", self.path)));
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Archive(format!("{}: non-utf8 string", self.path)))
    }
}
