//! Single-entity documents with an embedded digest, written atomically.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::ids::sha256_hex;

#[derive(Serialize, Deserialize)]
struct Envelope {
    sha256: String,
    entity: serde_json::Value,
}

/// Write `bytes` to `path` via a temp file in the same directory plus rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
    Ok(())
}

fn digest_of(value: &serde_json::Value) -> Result<String, StoreError> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

/// Persist an entity as pretty JSON wrapped in a digest envelope.
pub fn write_document<T: Serialize>(path: &Path, entity: &T) -> Result<(), StoreError> {
    let value = serde_json::to_value(entity)?;
    let envelope = Envelope {
        sha256: digest_of(&value)?,
        entity: value,
    };
    let mut bytes = serde_json::to_vec_pretty(&envelope)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Load an entity, verifying its digest.
pub fn read_document<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(StoreError::NotFound(path.display().to_string()))
        }
        Err(e) => return Err(e.into()),
    };
    let integrity = |detail: String| StoreError::Integrity {
        path: path.to_path_buf(),
        detail,
    };
    let envelope: Envelope =
        serde_json::from_slice(&bytes).map_err(|e| integrity(format!("unparseable: {e}")))?;
    if digest_of(&envelope.entity)? != envelope.sha256 {
        return Err(integrity("digest mismatch".into()));
    }
    serde_json::from_value(envelope.entity).map_err(|e| integrity(format!("schema: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Doc {
        id: String,
        items: Vec<u32>,
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d/doc.json");
        let doc = Doc {
            id: "x".into(),
            items: vec![1, 2, 3],
        };
        write_document(&path, &doc).unwrap();
        assert_eq!(read_document::<Doc>(&path).unwrap(), doc);

        let text = fs::read_to_string(&path).unwrap().replace("\"x\"", "\"y\"");
        fs::write(&path, text).unwrap();
        let err = read_document::<Doc>(&path).unwrap_err();
        assert!(matches!(err, StoreError::Integrity { .. }));
        assert!(err.to_string().contains("doc.json"));
    }

    #[test]
    fn missing_document_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_document::<Doc>(&dir.path().join("nope.json")).unwrap_err();
        assert!(matches!(err, StoreError::NotFound(_)));
    }
}
