//! Binary checkpoint: `MPRS`, version, architecture, then named f32 segments.
//!
//! All integers and floats are little-endian. Parameters are stored as f32;
//! a model whose parameters are already f32-representable (see
//! [`MaskModel::snap_to_f32`]) round-trips bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Arch, MaskModel};

pub const MAGIC: &[u8; 4] = b"MPRS";
pub const VERSION: u32 = 1;

pub fn encode(model: &MaskModel) -> Vec<u8> {
    let a = model.arch();
    let mut out = Vec::with_capacity(64 + model.n_params() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [a.vocab_size, a.n_layers, a.d_model, a.n_heads, a.d_ff, a.max_seq_len, a.mask_id as usize] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for seg in model.segments() {
        out.extend_from_slice(&(seg.name.len() as u16).to_le_bytes());
        out.extend_from_slice(seg.name.as_bytes());
        out.extend_from_slice(&(seg.len as u64).to_le_bytes());
        for &p in &model.params()[seg.offset..seg.offset + seg.len] {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<MaskModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 7];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let arch = Arch {
        vocab_size: f[0],
        n_layers: f[1],
        d_model: f[2],
        n_heads: f[3],
        d_ff: f[4],
        max_seq_len: f[5],
        mask_id: f[6] as u32,
    };
    arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut params = Vec::new();
    for (name, shape) in arch.layout() {
        let n = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let got = r.take(n)?;
        if got != name.as_bytes() {
            return Err(Error::Checkpoint(format!("expected segment {name:?}, found {:?}", String::from_utf8_lossy(got))));
        }
        let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let want: usize = shape.iter().product();
        if count != want {
            return Err(Error::Checkpoint(format!("segment {name} has {count} values, expected {want}")));
        }
        let data = r.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("segment too large".into()))?)?;
        params.extend(data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    MaskModel::from_params(arch, params)
}

/// Writes atomically through a sibling temp file.
pub fn save(model: &MaskModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&encode(model))?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MaskModel> {
    decode(&fs::read(path)?)
}
