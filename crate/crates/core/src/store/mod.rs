mod catalog;
mod document;
mod log;

use std::path::PathBuf;

pub use catalog::{
    load_run, Catalog, CatalogError, JobRecord, Layout, RunEntry, RunStatus, RECOVERY_NOTE,
};
pub use document::{read_document, write_atomic, write_document};
pub use log::{LogPrefix, RecordLog};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("integrity error in {path}: {detail}")]
    Integrity { path: PathBuf, detail: String },
    #[error("not found: {0}")]
    NotFound(String),
}
