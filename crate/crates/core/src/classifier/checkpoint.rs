//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EMFC"  magic
//! u8      format version (0x01)
//! u64     architecture fingerprint
//! u32     tensor count
//! tensor* u16 name length, name bytes (UTF-8),
//!         u8 rank, rank x u32 dims,
//!         prod(dims) x f32 values
//! u32     CRC32 of everything above
//! ```
//!
//! Model parameters are kept on the f32 grid during training, so the f32
//! values here reproduce them exactly. Besides the weight tensors a
//! checkpoint carries `meta.train_seed` (the seed split into four 16-bit
//! words) and, when given, the per-cell normalization statistics as
//! `norm.mean` / `norm.std`.

use std::fs;
use std::path::Path;

use crate::classifier::{Cnn, CnnConfig};
use crate::error::{Error, Result};
use crate::fusion::NormStats;

const MAGIC: &[u8; 4] = b"EMFC";
const VERSION: u8 = 0x01;

fn put_tensor(buf: &mut Vec<u8>, name: &str, dims: &[usize], values: impl Iterator<Item = f32>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(model: &Cnn, norm: Option<&NormStats>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&model.config.fingerprint().to_le_bytes());
    let tensor_count = model.tensors().len() + 1 + if norm.is_some() { 2 } else { 0 };
    buf.extend_from_slice(&(tensor_count as u32).to_le_bytes());
    for spec in model.tensors() {
        let values = &model.params()[spec.offset..spec.offset + spec.len()];
        put_tensor(&mut buf, &spec.name, &spec.dims, values.iter().map(|&v| v as f32));
    }
    let seed_words = (0..4).map(|i| ((model.train_seed >> (16 * i)) & 0xffff) as f32);
    put_tensor(&mut buf, "meta.train_seed", &[4], seed_words);
    if let Some(norm) = norm {
        let dims = [norm.rows, norm.cols];
        put_tensor(&mut buf, "norm.mean", &dims, norm.mean.iter().map(|&v| v as f32));
        put_tensor(&mut buf, "norm.std", &dims, norm.std.iter().map(|&v| v as f32));
    }
    buf.extend_from_slice(&crc32fast::hash(&buf).to_le_bytes());

    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::CorruptRecord {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.corrupt(format!("truncated: wanted {n} more bytes")));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn take_u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct RawTensor {
    dims: Vec<usize>,
    values: Vec<f32>,
}

/// Loads a checkpoint written for exactly this architecture. The stored
/// fingerprint must match `config.fingerprint()`.
pub fn load_checkpoint(path: &Path, config: &CnnConfig) -> Result<(Cnn, Option<NormStats>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if bytes.len() < MAGIC.len() + 1 + 8 + 4 + 4 {
        return Err(r.corrupt("file shorter than a minimal checkpoint"));
    }
    let body_end = bytes.len() - 4;
    let stored_crc = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_end]) != stored_crc {
        return Err(r.corrupt("checksum mismatch"));
    }
    if r.take(4)? != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(r.corrupt(format!("unsupported version {version}")));
    }
    let stored_fp = r.take_u64()?;
    if stored_fp != config.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: config.fingerprint(),
            actual: stored_fp,
        });
    }
    let count = r.take_u32()? as usize;
    let mut tensors: Vec<(String, RawTensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.take_u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.corrupt("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.take_u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let raw = r.take(len * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(r.corrupt(format!("duplicate tensor {name}")));
        }
        tensors.push((name, RawTensor { dims, values }));
    }
    if r.pos != body_end {
        return Err(r.corrupt("trailing bytes after the last tensor"));
    }

    let mut model = Cnn::build_unchecked(*config, 0)?;
    let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    for spec in model.tensors().to_vec() {
        let tensor = find(&spec.name).ok_or_else(|| Error::CorruptRecord {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("missing tensor {}", spec.name),
        })?;
        if tensor.dims != spec.dims {
            return Err(Error::CorruptRecord {
                path: path.to_path_buf(),
                offset: 0,
                detail: format!(
                    "tensor {} has dims {:?}, expected {:?}",
                    spec.name, tensor.dims, spec.dims
                ),
            });
        }
        let dst = &mut model.params_mut()[spec.offset..spec.offset + spec.len()];
        for (d, &v) in dst.iter_mut().zip(&tensor.values) {
            *d = v as f64;
        }
    }
    let seed = find("meta.train_seed").ok_or_else(|| Error::CorruptRecord {
        path: path.to_path_buf(),
        offset: 0,
        detail: "missing tensor meta.train_seed".into(),
    })?;
    if seed.values.len() != 4 {
        return Err(Error::CorruptRecord {
            path: path.to_path_buf(),
            offset: 0,
            detail: "meta.train_seed must hold 4 words".into(),
        });
    }
    model.train_seed = seed
        .values
        .iter()
        .enumerate()
        .map(|(i, &w)| (w as u64) << (16 * i))
        .sum();

    let norm = match (find("norm.mean"), find("norm.std")) {
        (Some(mean), Some(std)) => {
            if mean.dims.len() != 2 || std.dims != mean.dims {
                return Err(Error::CorruptRecord {
                    path: path.to_path_buf(),
                    offset: 0,
                    detail: "norm.mean / norm.std must be matching rank-2 tensors".into(),
                });
            }
            Some(NormStats {
                rows: mean.dims[0],
                cols: mean.dims[1],
                mean: mean.values.iter().map(|&v| v as f64).collect(),
                std: std.values.iter().map(|&v| v as f64).collect(),
            })
        }
        (None, None) => None,
        _ => {
            return Err(Error::CorruptRecord {
                path: path.to_path_buf(),
                offset: 0,
                detail: "norm.mean and norm.std must appear together".into(),
            })
        }
    };
    Ok((model, norm))
}
