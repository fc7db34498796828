//! Append-only record logs.
//!
//! One record per line: `<digest16> <json>\n`, where `digest16` is the first
//! 16 hex chars of the SHA-256 of the JSON text. A crash can only damage the
//! tail, so any log is readable up to its last intact line.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::StoreError;
use crate::ids::sha256_hex;

const DIGEST_LEN: usize = 16;

/// Typed handle to a line-oriented append-only log file.
#[derive(Debug, Clone)]
pub struct RecordLog<T> {
    path: PathBuf,
    _marker: PhantomData<fn() -> T>,
}

/// Result of a tolerant read: the valid prefix plus what went wrong after it.
#[derive(Debug)]
pub struct LogPrefix<T> {
    pub records: Vec<T>,
    /// Byte length of the valid prefix.
    pub valid_len: u64,
    /// Set when the file had trailing bytes that failed validation.
    pub damage: Option<StoreError>,
}

pub(crate) fn encode_line<T: Serialize>(record: &T) -> Result<String, StoreError> {
    let json = serde_json::to_string(record)?;
    let digest = sha256_hex(json.as_bytes());
    Ok(format!("{} {}\n", &digest[..DIGEST_LEN], json))
}

impl<T: Serialize + DeserializeOwned> RecordLog<T> {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        RecordLog {
            path: path.into(),
            _marker: PhantomData,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append one record and flush it to disk.
    pub fn append(&self, record: &T) -> Result<(), StoreError> {
        let line = encode_line(record)?;
        if let Some(parent) = self.path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        Ok(())
    }

    /// Read every record, failing on the first damaged line.
    pub fn read_all(&self) -> Result<Vec<T>, StoreError> {
        let prefix = self.read_prefix()?;
        match prefix.damage {
            Some(err) => Err(err),
            None => Ok(prefix.records),
        }
    }

    /// Read the longest valid prefix. A missing file is an empty log.
    pub fn read_prefix(&self) -> Result<LogPrefix<T>, StoreError> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(LogPrefix {
                    records: Vec::new(),
                    valid_len: 0,
                    damage: None,
                })
            }
            Err(e) => return Err(e.into()),
        };
        let mut reader = BufReader::new(file);
        let mut records = Vec::new();
        let mut valid_len = 0u64;
        let mut line_no = 0usize;
        let mut buf = Vec::new();
        loop {
            buf.clear();
            let n = reader.read_until(b'\n', &mut buf)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            match self.decode_line(&buf, line_no) {
                Ok(record) => {
                    records.push(record);
                    valid_len += n as u64;
                }
                Err(err) => {
                    return Ok(LogPrefix {
                        records,
                        valid_len,
                        damage: Some(err),
                    })
                }
            }
        }
        Ok(LogPrefix {
            records,
            valid_len,
            damage: None,
        })
    }

    /// Cut the file back to its valid prefix. Returns the number of bytes dropped.
    pub fn truncate_to_valid(&self) -> Result<u64, StoreError> {
        let prefix = self.read_prefix()?;
        if prefix.damage.is_none() {
            return Ok(0);
        }
        let file = OpenOptions::new().write(true).open(&self.path)?;
        let old_len = file.metadata()?.len();
        file.set_len(prefix.valid_len)?;
        file.sync_all()?;
        Ok(old_len - prefix.valid_len)
    }

    fn decode_line(&self, raw: &[u8], line_no: usize) -> Result<T, StoreError> {
        let integrity = |reason: &str| StoreError::Integrity {
            path: self.path.clone(),
            detail: format!("line {line_no}: {reason}"),
        };
        let Some(body) = raw.strip_suffix(b"\n") else {
            return Err(integrity("truncated record (no line terminator)"));
        };
        let text = std::str::from_utf8(body).map_err(|_| integrity("invalid utf-8"))?;
        let (digest, json) = text
            .split_once(' ')
            .ok_or_else(|| integrity("missing digest"))?;
        if digest.len() != DIGEST_LEN || sha256_hex(json.as_bytes())[..DIGEST_LEN] != *digest {
            return Err(integrity("digest mismatch"));
        }
        serde_json::from_str(json).map_err(|e| integrity(&format!("undecodable record: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Rec {
        n: u32,
        s: String,
    }

    fn rec(n: u32) -> Rec {
        Rec {
            n,
            s: format!("record {n}"),
        }
    }

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let log = RecordLog::<Rec>::new(dir.path().join("a/b.log"));
        assert!(log.read_all().unwrap().is_empty());
        for n in 0..5 {
            log.append(&rec(n)).unwrap();
        }
        assert_eq!(log.read_all().unwrap(), (0..5).map(rec).collect::<Vec<_>>());
    }

    #[test]
    fn truncated_tail_is_detected_and_prefix_recoverable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.log");
        let log = RecordLog::<Rec>::new(&path);
        for n in 0..3 {
            log.append(&rec(n)).unwrap();
        }
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();

        let err = log.read_all().unwrap_err();
        assert!(matches!(err, StoreError::Integrity { ref path, .. } if path.ends_with("ledger.log")));
        let prefix = log.read_prefix().unwrap();
        assert_eq!(prefix.records, vec![rec(0), rec(1)]);
        assert!(prefix.damage.is_some());

        assert!(log.truncate_to_valid().unwrap() > 0);
        assert_eq!(log.read_all().unwrap().len(), 2);
        log.append(&rec(9)).unwrap();
        assert_eq!(log.read_all().unwrap().last(), Some(&rec(9)));
    }

    #[test]
    fn tampered_line_fails_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.log");
        let log = RecordLog::<Rec>::new(&path);
        log.append(&rec(1)).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"n\":1", "\"n\":2");
        fs::write(&path, text).unwrap();
        let err = log.read_all().unwrap_err();
        assert!(err.to_string().contains("digest mismatch"));
    }
}
