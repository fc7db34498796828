//! Paper corpus and codeblock library.
//!
//! On disk (under the store's `corpus/` directory):
//!
//! ```text
//! corpus/papers/<id>.txt          paper body, UTF-8
//! corpus/papers/<id>.meta.json    {"id","title","source_path","topics","sha256"}
//! corpus/codeblocks/<id>.block    front-matter + code, exactly as ingested
//! corpus/codeblocks/library.json  {"version": <u64>}
//! ```
//!
//! Codeblock front-matter is a header delimited by `---` lines:
//!
//! ```text
//! ---
//! id: react-agent            (optional; defaults to the slugified name)
//! name: ReAct agent
//! summary: Minimal think/act agent loop over a text environment.
//! capabilities: agent loop, llm calls
//! ---
//! <code>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{content_id, is_safe_id, sha256_hex, slugify};
use crate::store::{write_atomic, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("empty document")]
    EmptyDocument,
    #[error("id conflict: `{0}` already exists with different content")]
    Conflict(String),
    #[error("missing front-matter: {0}")]
    MissingFrontMatter(&'static str),
    #[error("codeblock `{0}` has no code")]
    EmptyCode(String),
    #[error("invalid id `{0}`")]
    InvalidId(String),
    #[error("insufficient papers: need at least 2, corpus has {0}")]
    InsufficientPapers(usize),
    #[error("pair count must be at least 1")]
    ZeroPairs,
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<std::io::Error> for CorpusError {
    fn from(e: std::io::Error) -> Self {
        CorpusError::Store(StoreError::Io(e))
    }
}

impl From<serde_json::Error> for CorpusError {
    fn from(e: serde_json::Error) -> Self {
        CorpusError::Store(StoreError::Json(e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub id: String,
    pub title: String,
    pub body: String,
    pub source_path: String,
    pub topics: Vec<String>,
}

/// Raw input to [`Corpus::ingest_paper`].
#[derive(Debug, Clone, Default)]
pub struct PaperDocument {
    pub id: Option<String>,
    pub title: Option<String>,
    pub text: String,
    pub source_path: Option<String>,
    pub topics: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PaperMeta {
    id: String,
    title: String,
    source_path: String,
    topics: Vec<String>,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codeblock {
    pub id: String,
    pub name: String,
    pub summary: String,
    pub code_text: String,
    pub declared_capabilities: Vec<String>,
}

impl Codeblock {
    /// Parse a `.block` source (front-matter + code).
    pub fn parse(source: &str) -> Result<Codeblock, CorpusError> {
        let mut lines = source.split_inclusive('\n');
        let first = lines.next().unwrap_or("");
        if first.trim_end() != "---" {
            return Err(CorpusError::MissingFrontMatter("name"));
        }
        let mut fields: BTreeMap<String, String> = BTreeMap::new();
        let mut consumed = first.len();
        let mut closed = false;
        for line in lines.by_ref() {
            consumed += line.len();
            let trimmed = line.trim_end();
            if trimmed == "---" {
                closed = true;
                break;
            }
            if let Some((k, v)) = trimmed.split_once(':') {
                fields.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
            }
        }
        if !closed {
            return Err(CorpusError::MissingFrontMatter("closing ---"));
        }
        let take = |key: &'static str| -> Result<String, CorpusError> {
            fields
                .get(key)
                .filter(|v| !v.is_empty())
                .cloned()
                .ok_or(CorpusError::MissingFrontMatter(key))
        };
        let name = take("name")?;
        let summary = take("summary")?;
        let id = match fields.get("id").filter(|v| !v.is_empty()) {
            Some(id) => id.clone(),
            None => slugify(&name),
        };
        if !is_safe_id(&id) {
            return Err(CorpusError::InvalidId(id));
        }
        let code_text = source[consumed..].to_string();
        if code_text.trim().is_empty() {
            return Err(CorpusError::EmptyCode(id));
        }
        let declared_capabilities = fields
            .get("capabilities")
            .map(|c| {
                c.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default();
        Ok(Codeblock {
            id,
            name,
            summary,
            code_text,
            declared_capabilities,
        })
    }

    /// Inverse of [`Codeblock::parse`].
    pub fn to_source(&self) -> String {
        format!(
            "---\nid: {}\nname: {}\nsummary: {}\ncapabilities: {}\n---\n{}",
            self.id,
            self.name,
            self.summary,
            self.declared_capabilities.join(", "),
            self.code_text
        )
    }
}

/// Immutable view of the library at one version.
#[derive(Debug, Clone, PartialEq)]
pub struct LibrarySnapshot {
    pub version: u64,
    blocks: Arc<Vec<Codeblock>>,
}

impl LibrarySnapshot {
    pub fn new(version: u64, blocks: Vec<Codeblock>) -> Self {
        LibrarySnapshot {
            version,
            blocks: Arc::new(blocks),
        }
    }

    pub fn blocks(&self) -> &[Codeblock] {
        &self.blocks
    }

    pub fn get(&self, id: &str) -> Option<&Codeblock> {
        self.blocks.iter().find(|b| b.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// `id: name — summary` lines for prompts.
    pub fn summaries(&self) -> String {
        self.blocks
            .iter()
            .map(|b| format!("- {}: {} — {}", b.id, b.name, b.summary))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct LibraryFile {
    version: u64,
}

#[derive(Debug, Default)]
struct LibraryState {
    version: u64,
    blocks: Vec<Codeblock>,
}

/// Unordered pair of distinct paper ids, stored with `a < b`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PaperPair {
    pub a: String,
    pub b: String,
}

impl PaperPair {
    pub fn new(x: &str, y: &str) -> Self {
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        PaperPair {
            a: a.to_string(),
            b: b.to_string(),
        }
    }
}

impl fmt::Display for PaperPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.a, self.b)
    }
}

pub struct Corpus {
    dir: PathBuf,
    papers: RwLock<BTreeMap<String, PaperRecord>>,
    library: RwLock<LibraryState>,
}

impl Corpus {
    /// Open (creating if needed) a corpus directory and load its contents.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, CorpusError> {
        let dir = dir.into();
        let papers_dir = dir.join("papers");
        let blocks_dir = dir.join("codeblocks");
        fs::create_dir_all(&papers_dir)?;
        fs::create_dir_all(&blocks_dir)?;

        let mut papers = BTreeMap::new();
        for entry in fs::read_dir(&papers_dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(id) = name.strip_suffix(".meta.json") else {
                continue;
            };
            let meta: PaperMeta = serde_json::from_slice(&fs::read(&path)?)?;
            let body = fs::read_to_string(papers_dir.join(format!("{id}.txt")))?;
            if sha256_hex(body.as_bytes()) != meta.sha256 {
                return Err(StoreError::Integrity {
                    path: papers_dir.join(format!("{id}.txt")),
                    detail: "paper body does not match sidecar digest".into(),
                }
                .into());
            }
            papers.insert(
                meta.id.clone(),
                PaperRecord {
                    id: meta.id,
                    title: meta.title,
                    body,
                    source_path: meta.source_path,
                    topics: meta.topics,
                },
            );
        }

        let mut blocks = Vec::new();
        let mut block_paths: Vec<PathBuf> = fs::read_dir(&blocks_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "block"))
            .collect();
        block_paths.sort();
        for path in block_paths {
            blocks.push(Codeblock::parse(&fs::read_to_string(&path)?)?);
        }
        let version = match fs::read(blocks_dir.join("library.json")) {
            Ok(bytes) => serde_json::from_slice::<LibraryFile>(&bytes)?.version,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };
        Ok(Corpus {
            dir,
            papers: RwLock::new(papers),
            library: RwLock::new(LibraryState { version, blocks }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn ingest_paper(&self, doc: PaperDocument) -> Result<PaperRecord, CorpusError> {
        if doc.text.trim().is_empty() {
            return Err(CorpusError::EmptyDocument);
        }
        let id = match doc.id {
            Some(id) => id,
            None => content_id("paper", &[&doc.text], 12),
        };
        if !is_safe_id(&id) {
            return Err(CorpusError::InvalidId(id));
        }
        let mut papers = self.papers.write().unwrap();
        if let Some(existing) = papers.get(&id) {
            if existing.body == doc.text {
                return Ok(existing.clone());
            }
            return Err(CorpusError::Conflict(id));
        }
        let title = doc
            .title
            .filter(|t| !t.trim().is_empty())
            .unwrap_or_else(|| {
                doc.text
                    .lines()
                    .map(str::trim)
                    .find(|l| !l.is_empty())
                    .unwrap_or_default()
                    .chars()
                    .take(200)
                    .collect()
            });
        let record = PaperRecord {
            id: id.clone(),
            title,
            body: doc.text,
            source_path: doc
                .source_path
                .unwrap_or_else(|| format!("papers/{id}.txt")),
            topics: doc.topics,
        };
        let papers_dir = self.dir.join("papers");
        write_atomic(&papers_dir.join(format!("{id}.txt")), record.body.as_bytes())?;
        let meta = PaperMeta {
            id: id.clone(),
            title: record.title.clone(),
            source_path: record.source_path.clone(),
            topics: record.topics.clone(),
            sha256: sha256_hex(record.body.as_bytes()),
        };
        write_atomic(
            &papers_dir.join(format!("{id}.meta.json")),
            &serde_json::to_vec_pretty(&meta)?,
        )?;
        papers.insert(id, record.clone());
        Ok(record)
    }

    /// Parse and store a codeblock. Re-ingesting identical content is a no-op;
    /// new content under an existing id replaces it. Either mutation bumps the
    /// library version.
    pub fn ingest_codeblock(&self, source: &str) -> Result<Codeblock, CorpusError> {
        let block = Codeblock::parse(source)?;
        let mut lib = self.library.write().unwrap();
        match lib.blocks.iter().position(|b| b.id == block.id) {
            Some(i) if lib.blocks[i] == block => return Ok(block),
            Some(i) => lib.blocks[i] = block.clone(),
            None => {
                lib.blocks.push(block.clone());
                lib.blocks.sort_by(|a, b| a.id.cmp(&b.id));
            }
        }
        let blocks_dir = self.dir.join("codeblocks");
        write_atomic(
            &blocks_dir.join(format!("{}.block", block.id)),
            source.as_bytes(),
        )?;
        lib.version += 1;
        write_atomic(
            &blocks_dir.join("library.json"),
            &serde_json::to_vec(&LibraryFile {
                version: lib.version,
            })?,
        )?;
        Ok(block)
    }

    pub fn paper(&self, id: &str) -> Option<PaperRecord> {
        self.papers.read().unwrap().get(id).cloned()
    }

    pub fn paper_ids(&self) -> Vec<String> {
        self.papers.read().unwrap().keys().cloned().collect()
    }

    pub fn paper_count(&self) -> usize {
        self.papers.read().unwrap().len()
    }

    pub fn library_version(&self) -> u64 {
        self.library.read().unwrap().version
    }

    pub fn snapshot(&self) -> LibrarySnapshot {
        let lib = self.library.read().unwrap();
        LibrarySnapshot::new(lib.version, lib.blocks.clone())
    }

    /// `k` unordered pairs of distinct papers, deterministic in `seed`.
    pub fn sample_paper_pairs(&self, k: usize, seed: u64) -> Result<Vec<PaperPair>, CorpusError> {
        sample_pairs(&self.paper_ids(), k, seed)
    }
}

/// Pairs are drawn uniformly without replacement within a batch of at most
/// `n(n-1)/2` pairs; further batches start over, so pairs repeat only across
/// batches. `ids` must be sorted for reproducibility.
pub fn sample_pairs(ids: &[String], k: usize, seed: u64) -> Result<Vec<PaperPair>, CorpusError> {
    let n = ids.len();
    if n < 2 {
        return Err(CorpusError::InsufficientPapers(n));
    }
    if k == 0 {
        return Err(CorpusError::ZeroPairs);
    }
    let total = n * (n - 1) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let batch = (k - out.len()).min(total);
        for rank in index::sample(&mut rng, total, batch) {
            let (i, j) = unrank_pair(n, rank);
            out.push(PaperPair::new(&ids[i], &ids[j]));
        }
    }
    Ok(out)
}

/// Map `rank` in `0..n(n-1)/2` to `(i, j)` with `i < j`, row-major.
fn unrank_pair(n: usize, mut rank: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if rank < row {
            return (i, i + 1 + rank);
        }
        rank -= row;
        i += 1;
    }
}
