//! Persistent embedding cache.
//!
//! Binary layout: magic `EMBF`, version byte 0x01, then records. Each
//! record is `u16 sample_id len | sample_id | u16 backend_id len |
//! backend_id | u32 dim | dim f32 values | u32 CRC32 of everything before
//! the CRC`, all little-endian. A human-readable sidecar
//! (`sample_id<TAB>backend_id<TAB>offset` per line, same path plus `.idx`)
//! is regenerated from a scan whenever it goes stale, so deleting it is
//! always safe.
//!
//! Writes are single appends: a put interrupted mid-write leaves a torn
//! tail that the next open detects and truncates away, so no partial record
//! is ever visible through the index.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::embedders::EmbeddingVector;
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"EMBF";
const VERSION: u8 = 0x01;
const HEADER_LEN: u64 = 5;

type Key = (String, String);

pub struct CacheStore {
    path: PathBuf,
    file: File,
    index: BTreeMap<Key, u64>,
    end: u64,
    /// Bytes dropped from a torn tail during open, for diagnostics.
    pub repaired_bytes: u64,
}

impl CacheStore {
    /// Opens (or creates) a cache file, rebuilding the in-memory index by
    /// scanning record framing. A torn trailing record is truncated away.
    pub fn open(path: &Path) -> Result<CacheStore> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if len == 0 {
            file.write_all(&MAGIC).map_err(|e| Error::io(path, e))?;
            file.write_all(&[VERSION]).map_err(|e| Error::io(path, e))?;
            file.flush().map_err(|e| Error::io(path, e))?;
            let store = CacheStore {
                path: path.to_path_buf(),
                file,
                index: BTreeMap::new(),
                end: HEADER_LEN,
                repaired_bytes: 0,
            };
            store.write_sidecar()?;
            return Ok(store);
        }

        let mut header = [0u8; HEADER_LEN as usize];
        file.seek(SeekFrom::Start(0)).map_err(|e| Error::io(path, e))?;
        file.read_exact(&mut header).map_err(|_| Error::CorruptRecord {
            path: path.to_path_buf(),
            offset: 0,
            detail: "file shorter than the EMBF header".into(),
        })?;
        if header[..4] != MAGIC || header[4] != VERSION {
            return Err(Error::CorruptRecord {
                path: path.to_path_buf(),
                offset: 0,
                detail: "bad magic or version (not an EMBF v1 cache)".into(),
            });
        }

        let mut index = BTreeMap::new();
        let mut pos = HEADER_LEN;
        let mut repaired = 0u64;
        while pos < len {
            match scan_record(&mut file, pos, len) {
                Ok((key, next)) => {
                    if index.insert(key.clone(), pos).is_some() {
                        return Err(Error::CorruptRecord {
                            path: path.to_path_buf(),
                            offset: pos,
                            detail: format!("duplicate key ({}, {})", key.0, key.1),
                        });
                    }
                    pos = next;
                }
                Err(_) => {
                    // Structurally unreadable from here on: torn tail.
                    repaired = len - pos;
                    file.set_len(pos).map_err(|e| Error::io(path, e))?;
                    break;
                }
            }
        }
        let store = CacheStore {
            path: path.to_path_buf(),
            file,
            index,
            end: pos,
            repaired_bytes: repaired,
        };
        store.refresh_sidecar_if_stale()?;
        Ok(store)
    }

    pub fn sidecar_path(&self) -> PathBuf {
        sidecar_path(&self.path)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, sample_id: &str, backend_id: &str) -> bool {
        self.index
            .contains_key(&(sample_id.to_string(), backend_id.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = (&str, &str)> {
        self.index.keys().map(|(s, b)| (s.as_str(), b.as_str()))
    }

    /// Appends one embedding. The record is assembled in memory and written
    /// with a single call; duplicate keys are rejected.
    pub fn put(&mut self, vector: &EmbeddingVector) -> Result<()> {
        let key = (vector.sample_id.clone(), vector.backend_id.clone());
        if self.index.contains_key(&key) {
            return Err(Error::DuplicateKey {
                sample_id: vector.sample_id.clone(),
                backend_id: vector.backend_id.clone(),
            });
        }
        for (what, s) in [("sample_id", &vector.sample_id), ("backend_id", &vector.backend_id)] {
            if s.len() > u16::MAX as usize || s.contains(['\t', '\n']) || s.is_empty() {
                return Err(Error::parse(
                    &self.path,
                    0,
                    format!("cache {what} {s:?} is empty, too long, or contains separators"),
                ));
            }
        }
        let mut body = Vec::with_capacity(
            2 + vector.sample_id.len() + 2 + vector.backend_id.len() + 4 + vector.values.len() * 4,
        );
        body.extend_from_slice(&(vector.sample_id.len() as u16).to_le_bytes());
        body.extend_from_slice(vector.sample_id.as_bytes());
        body.extend_from_slice(&(vector.backend_id.len() as u16).to_le_bytes());
        body.extend_from_slice(vector.backend_id.as_bytes());
        body.extend_from_slice(&(vector.values.len() as u32).to_le_bytes());
        for v in &vector.values {
            body.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());

        self.file
            .seek(SeekFrom::Start(self.end))
            .map_err(|e| Error::io(&self.path, e))?;
        self.file
            .write_all(&body)
            .map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;

        let offset = self.end;
        self.end += body.len() as u64;
        self.index.insert(key, offset);
        self.append_sidecar_line(&vector.sample_id, &vector.backend_id, offset)?;
        Ok(())
    }

    /// Looks a record up by key; absent keys are `Ok(None)`. The stored CRC
    /// is verified on every read.
    pub fn get(&mut self, sample_id: &str, backend_id: &str) -> Result<Option<EmbeddingVector>> {
        let offset = match self
            .index
            .get(&(sample_id.to_string(), backend_id.to_string()))
        {
            Some(&o) => o,
            None => return Ok(None),
        };
        let corrupt = |detail: String| Error::CorruptRecord {
            path: self.path.clone(),
            offset,
            detail,
        };
        self.file
            .seek(SeekFrom::Start(offset))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut read_exact = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            self.file
                .read_exact(&mut buf)
                .map_err(|e| Error::io(&self.path, e))?;
            Ok(buf)
        };
        let mut body = Vec::new();
        let sid_len = read_exact(2)?;
        let sid = read_exact(u16::from_le_bytes([sid_len[0], sid_len[1]]) as usize)?;
        let bid_len = read_exact(2)?;
        let bid = read_exact(u16::from_le_bytes([bid_len[0], bid_len[1]]) as usize)?;
        let dim_bytes = read_exact(4)?;
        let dim = u32::from_le_bytes(dim_bytes.clone().try_into().expect("4 bytes")) as usize;
        let values_bytes = read_exact(dim * 4)?;
        let crc_bytes = read_exact(4)?;
        for part in [&sid_len, &sid, &bid_len, &bid, &dim_bytes, &values_bytes] {
            body.extend_from_slice(part);
        }
        let stored_crc = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        if crc32fast::hash(&body) != stored_crc {
            return Err(corrupt(format!(
                "crc mismatch for key ({sample_id}, {backend_id})"
            )));
        }
        if sid != sample_id.as_bytes() || bid != backend_id.as_bytes() {
            return Err(corrupt("index points at a record with a different key".into()));
        }
        let values: Vec<f32> = values_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Some(EmbeddingVector {
            sample_id: sample_id.to_string(),
            backend_id: backend_id.to_string(),
            values,
        }))
    }

    fn sidecar_content(&self) -> String {
        let mut out = String::new();
        for ((sid, bid), offset) in &self.index {
            out.push_str(&format!("{sid}\t{bid}\t{offset}\n"));
        }
        out
    }

    fn write_sidecar(&self) -> Result<()> {
        let sidecar = self.sidecar_path();
        let tmp = sidecar.with_extension("idx.tmp");
        std::fs::write(&tmp, self.sidecar_content()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &sidecar).map_err(|e| Error::io(&sidecar, e))?;
        Ok(())
    }

    fn refresh_sidecar_if_stale(&self) -> Result<()> {
        let current = std::fs::read_to_string(self.sidecar_path()).unwrap_or_default();
        if current != self.sidecar_content() {
            self.write_sidecar()?;
        }
        Ok(())
    }

    fn append_sidecar_line(&self, sample_id: &str, backend_id: &str, offset: u64) -> Result<()> {
        let sidecar = self.sidecar_path();
        let mut file = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&sidecar)
            .map_err(|e| Error::io(&sidecar, e))?;
        writeln!(file, "{sample_id}\t{backend_id}\t{offset}").map_err(|e| Error::io(&sidecar, e))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".idx");
    PathBuf::from(os)
}

/// Walks one record's framing starting at `pos` without reading the values,
/// returning its key and end offset. Any structural problem (running past
/// `len`, non-UTF-8 key) is an error, which `open` treats as a torn tail.
fn scan_record(file: &mut File, pos: u64, len: u64) -> std::io::Result<(Key, u64)> {
    use std::io::{Error as IoError, ErrorKind};
    let torn = || IoError::new(ErrorKind::UnexpectedEof, "record runs past end of file");

    file.seek(SeekFrom::Start(pos))?;
    let mut cursor = pos;
    let mut take = |n: u64| -> std::io::Result<Vec<u8>> {
        if cursor + n > len {
            return Err(torn());
        }
        let mut buf = vec![0u8; n as usize];
        file.read_exact(&mut buf)?;
        cursor += n;
        Ok(buf)
    };
    let sid_len = take(2)?;
    let sid = take(u16::from_le_bytes([sid_len[0], sid_len[1]]) as u64)?;
    let bid_len = take(2)?;
    let bid = take(u16::from_le_bytes([bid_len[0], bid_len[1]]) as u64)?;
    let dim = take(4)?;
    let dim = u32::from_le_bytes([dim[0], dim[1], dim[2], dim[3]]) as u64;
    if cursor + dim * 4 + 4 > len {
        return Err(torn());
    }
    let end = cursor + dim * 4 + 4;
    let key = (
        String::from_utf8(sid).map_err(|_| IoError::new(ErrorKind::InvalidData, "key utf8"))?,
        String::from_utf8(bid).map_err(|_| IoError::new(ErrorKind::InvalidData, "key utf8"))?,
    );
    Ok((key, end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn vector(sid: &str, bid: &str, seed: u64, dim: usize) -> EmbeddingVector {
        let mut rng = rng::rng_from_seed(seed);
        EmbeddingVector {
            sample_id: sid.into(),
            backend_id: bid.into(),
            values: (0..dim)
                .map(|_| rng::uniform_f64(&mut rng, -1.0, 1.0) as f32)
                .collect(),
        }
    }

    fn cache_path(dir: &tempfile::TempDir) -> PathBuf {
        dir.path().join("embeddings.embf")
    }

    #[test]
    fn put_get_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CacheStore::open(&cache_path(&dir)).unwrap();
        let mut v = vector("sample-1", "roberta", 1, 1024);
        // Edge-case payloads must survive exactly: negative zero, subnormal.
        v.values[0] = -0.0;
        v.values[1] = f32::from_bits(1);
        store.put(&v).unwrap();
        let back = store.get("sample-1", "roberta").unwrap().unwrap();
        assert_eq!(back.values.len(), v.values.len());
        for (a, b) in v.values.iter().zip(&back.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn absent_keys_are_none_not_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CacheStore::open(&cache_path(&dir)).unwrap();
        assert!(store.get("nope", "roberta").unwrap().is_none());
        assert!(!store.contains("nope", "roberta"));
    }

    #[test]
    fn duplicate_puts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CacheStore::open(&cache_path(&dir)).unwrap();
        store.put(&vector("s", "b", 1, 8)).unwrap();
        let err = store.put(&vector("s", "b", 2, 8)).unwrap_err();
        assert!(matches!(err, Error::DuplicateKey { .. }));
        assert_eq!(err.exit_code(), 7);
        // The original record is untouched.
        assert_eq!(
            store.get("s", "b").unwrap().unwrap().values,
            vector("s", "b", 1, 8).values
        );
    }

    #[test]
    fn reopen_rebuilds_the_index_from_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = cache_path(&dir);
        let originals: Vec<EmbeddingVector> =
            (0..5).map(|i| vector(&format!("s{i}"), "hash1024", i as u64, 64)).collect();
        {
            let mut store = CacheStore::open(&path).unwrap();
            for v in &originals {
                store.put(v).unwrap();
            }
        }
        // Even with the sidecar gone, the scan restores everything.
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        let mut store = CacheStore::open(&path).unwrap();
        assert_eq!(store.len(), 5);
        for v in &originals {
            assert_eq!(store.get(&v.sample_id, "hash1024").unwrap().unwrap().values, v.values);
        }
        // And the sidecar is regenerated in key order.
        let sidecar = std::fs::read_to_string(sidecar_path(&path)).unwrap();
        assert_eq!(sidecar.lines().count(), 5);
        assert!(sidecar.starts_with("s0\thash1024\t"));
    }

    #[test]
    fn torn_tail_is_truncated_and_the_store_stays_writable() {
        let dir = tempfile::tempdir().unwrap();
        let path = cache_path(&dir);
        {
            let mut store = CacheStore::open(&path).unwrap();
            store.put(&vector("s0", "b", 0, 32)).unwrap();
        }
        let good_len = std::fs::metadata(&path).unwrap().len();
        // Simulate a crash mid-append: half a record of plausible bytes.
        let mut file = OpenOptions::new().append(true).open(&path).unwrap();
        file.write_all(&[7u8, 0]).unwrap(); // sid_len = 7 but nothing after
        drop(file);

        let mut store = CacheStore::open(&path).unwrap();
        assert_eq!(store.repaired_bytes, 2);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), good_len);
        assert_eq!(store.len(), 1);
        store.put(&vector("s1", "b", 1, 32)).unwrap();
        assert!(store.get("s1", "b").unwrap().is_some());
    }

    #[test]
    fn bit_corruption_is_detected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = cache_path(&dir);
        {
            let mut store = CacheStore::open(&path).unwrap();
            store.put(&vector("s0", "b", 0, 32)).unwrap();
        }
        // Flip one byte inside the values region.
        let mut bytes = std::fs::read(&path).unwrap();
        let target = bytes.len() - 20;
        bytes[target] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();

        let mut store = CacheStore::open(&path).unwrap();
        let err = store.get("s0", "b").unwrap_err();
        assert!(matches!(err, Error::CorruptRecord { .. }));
        assert_eq!(err.exit_code(), 7);
    }

    #[test]
    fn non_cache_files_are_rejected_up_front() {
        let dir = tempfile::tempdir().unwrap();
        let path = cache_path(&dir);
        std::fs::write(&path, b"definitely not a cache").unwrap();
        assert!(matches!(
            CacheStore::open(&path),
            Err(Error::CorruptRecord { offset: 0, .. })
        ));
    }
}
