//! Page corpus manifest: loading, validation, and neighbor lookups.
//!
//! The manifest is line-delimited JSON. Each line is either a document
//! header (`"kind": "doc"`) or a page record (`"kind": "page"`). Records may
//! arrive in any order; pages are grouped under their document and checked
//! for contiguous indices once the whole file has been read.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Neighbor lists never hold more than this many entries.
pub const MAX_NEIGHBORS: usize = 128;

/// Rank boundary between "close" hard negatives and distractors.
pub const CLOSE_NEIGHBOR_RANKS: usize = 32;

/// Pages need strictly more words than this to seed a question.
pub const MIN_QUESTION_WORDS: u32 = 100;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate doc_id {0:?}")]
    DuplicateDoc(String),
    #[error("duplicate page_id {0:?}")]
    DuplicatePage(String),
    #[error("document {doc_id:?}: {message}")]
    InvalidDocument { doc_id: String, message: String },
    #[error("page {page_id:?}: {message}")]
    InvalidPage { page_id: String, message: String },
    #[error("unknown page_id {0:?}")]
    UnknownPage(String),
    #[error("unknown doc_id {0:?}")]
    UnknownDoc(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContentKind {
    #[default]
    Normal,
    TableOfContents,
    Bibliography,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub page_id: String,
    pub doc_id: String,
    pub index: usize,
    pub image_ref: String,
    pub width_px: u32,
    pub height_px: u32,
    pub word_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed_text: Option<String>,
    pub content_kind: ContentKind,
}

impl Page {
    /// Parsed text if present and non-blank.
    pub fn text(&self) -> Option<&str> {
        self.parsed_text
            .as_deref()
            .filter(|t| !t.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub source_url: String,
    pub category: String,
    pub language: String,
    pub page_count: usize,
    #[serde(skip)]
    pub pages: Vec<Page>,
}

impl Document {
    pub fn page(&self, index: usize) -> Option<&Page> {
        self.pages.get(index)
    }
}

/// One line of the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestRecord {
    Doc(Document),
    Page(Page),
}

/// A similarity-ranked neighbor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub page_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborBand {
    /// Ranks 1..=32.
    WithinFirst32,
    /// Ranks 33..=128.
    OutsideFirst32,
    Any,
}

impl NeighborBand {
    fn range(self, len: usize) -> std::ops::Range<usize> {
        match self {
            NeighborBand::WithinFirst32 => 0..len.min(CLOSE_NEIGHBOR_RANKS),
            NeighborBand::OutsideFirst32 => len.min(CLOSE_NEIGHBOR_RANKS)..len,
            NeighborBand::Any => 0..len,
        }
    }
}

#[derive(Deserialize)]
struct NeighborRecord {
    page_id: String,
    neighbors: Vec<(String, f64)>,
}

/// Per-page hard-negative lists, sorted by similarity descending with ties
/// broken by ascending neighbor id.
#[derive(Debug, Clone, Default)]
pub struct NeighborIndex {
    lists: HashMap<String, Vec<Neighbor>>,
}

impl NeighborIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a list for `page_id`, validating and canonically re-sorting it.
    pub fn insert(
        &mut self,
        page_id: impl Into<String>,
        neighbors: Vec<(String, f64)>,
    ) -> Result<(), CorpusError> {
        let page_id = page_id.into();
        let invalid = |message: String| CorpusError::InvalidPage {
            page_id: page_id.clone(),
            message,
        };
        if neighbors.len() > MAX_NEIGHBORS {
            return Err(invalid(format!(
                "{} neighbors exceeds the limit of {MAX_NEIGHBORS}",
                neighbors.len()
            )));
        }
        let mut list = Vec::with_capacity(neighbors.len());
        for (id, similarity) in neighbors {
            if id == page_id {
                return Err(invalid("neighbor list contains the page itself".into()));
            }
            if !similarity.is_finite() || !(-1.0..=1.0).contains(&similarity) {
                return Err(invalid(format!("similarity {similarity} outside [-1, 1]")));
            }
            list.push(Neighbor {
                page_id: id,
                similarity,
            });
        }
        list.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.page_id.cmp(&b.page_id))
        });
        self.lists.insert(page_id, list);
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let reader = open(path)?;
        let mut index = Self::new();
        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: NeighborRecord =
                serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                    line: line_no,
                    message: e.to_string(),
                })?;
            if index.lists.contains_key(&record.page_id) {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    message: format!("duplicate neighbor list for {:?}", record.page_id),
                });
            }
            index.insert(record.page_id, record.neighbors)?;
        }
        Ok(index)
    }

    pub fn get(&self, page_id: &str) -> Option<&[Neighbor]> {
        self.lists.get(page_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// The whole rank band for `page_id`.
    pub fn band(&self, page_id: &str, band: NeighborBand) -> Result<&[Neighbor], CorpusError> {
        let list = self
            .lists
            .get(page_id)
            .ok_or_else(|| CorpusError::UnknownPage(page_id.to_string()))?;
        Ok(&list[band.range(list.len())])
    }

    /// Up to `k` neighbors from the requested band, best first.
    pub fn topk(
        &self,
        page_id: &str,
        k: usize,
        band: NeighborBand,
    ) -> Result<&[Neighbor], CorpusError> {
        let band = self.band(page_id, band)?;
        Ok(&band[..k.min(band.len())])
    }
}

/// An immutable, validated page corpus.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    documents: Vec<Document>,
    doc_pos: HashMap<String, usize>,
    page_pos: HashMap<String, (usize, usize)>,
    pub neighbors: Option<NeighborIndex>,
}

impl Corpus {
    /// Build a corpus from documents whose `pages` are already populated.
    pub fn from_documents(documents: Vec<Document>) -> Result<Self, CorpusError> {
        let mut doc_pos = HashMap::new();
        let mut page_pos = HashMap::new();
        for (d, doc) in documents.iter().enumerate() {
            if doc_pos.insert(doc.doc_id.clone(), d).is_some() {
                return Err(CorpusError::DuplicateDoc(doc.doc_id.clone()));
            }
            validate_document(doc)?;
            for (p, page) in doc.pages.iter().enumerate() {
                if page_pos.insert(page.page_id.clone(), (d, p)).is_some() {
                    return Err(CorpusError::DuplicatePage(page.page_id.clone()));
                }
            }
        }
        Ok(Self {
            documents,
            doc_pos,
            page_pos,
            neighbors: None,
        })
    }

    /// Read a JSONL manifest.
    pub fn load_manifest(path: &Path) -> Result<Self, CorpusError> {
        let reader = open(path)?;
        let mut docs: Vec<Document> = Vec::new();
        let mut seen_docs = HashMap::new();
        let mut pending: Vec<(usize, Page)> = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                    line: line_no,
                    message: e.to_string(),
                })?;
            match record {
                ManifestRecord::Doc(doc) => {
                    if seen_docs.insert(doc.doc_id.clone(), docs.len()).is_some() {
                        return Err(CorpusError::DuplicateDoc(doc.doc_id));
                    }
                    docs.push(doc);
                }
                ManifestRecord::Page(page) => pending.push((line_no, page)),
            }
        }
        for (line_no, page) in pending {
            let Some(&d) = seen_docs.get(&page.doc_id) else {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    message: format!("page {:?} references unknown doc {:?}", page.page_id, page.doc_id),
                });
            };
            docs[d].pages.push(page);
        }
        for doc in &mut docs {
            doc.pages.sort_by_key(|p| p.index);
        }
        Self::from_documents(docs)
    }

    /// Read a manifest and, if given, a neighbor file.
    pub fn load(manifest: &Path, neighbors: Option<&Path>) -> Result<Self, CorpusError> {
        let mut corpus = Self::load_manifest(manifest)?;
        if let Some(path) = neighbors {
            corpus.neighbors = Some(NeighborIndex::load(path)?);
        }
        Ok(corpus)
    }

    /// Write the canonical manifest: each document header followed by its
    /// pages in index order, documents in load order.
    pub fn write_manifest(&self, out: &mut impl Write) -> std::io::Result<()> {
        for doc in &self.documents {
            let header = ManifestRecord::Doc(doc.clone());
            serde_json::to_writer(&mut *out, &header)?;
            out.write_all(b"\n")?;
            for page in &doc.pages {
                serde_json::to_writer(&mut *out, &ManifestRecord::Page(page.clone()))?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn document(&self, doc_id: &str) -> Result<&Document, CorpusError> {
        self.doc_pos
            .get(doc_id)
            .map(|&d| &self.documents[d])
            .ok_or_else(|| CorpusError::UnknownDoc(doc_id.to_string()))
    }

    pub fn page(&self, page_id: &str) -> Result<&Page, CorpusError> {
        self.page_pos
            .get(page_id)
            .map(|&(d, p)| &self.documents[d].pages[p])
            .ok_or_else(|| CorpusError::UnknownPage(page_id.to_string()))
    }

    pub fn page_count(&self) -> usize {
        self.page_pos.len()
    }

    pub fn pages(&self) -> impl Iterator<Item = &Page> {
        self.documents.iter().flat_map(|d| d.pages.iter())
    }

    /// Pages eligible to seed a question: more than 100 words and normal content.
    pub fn filter_question_pages(&self) -> BTreeSet<String> {
        question_pages(self.pages())
    }
}

/// Pages eligible to seed a question, independent of how they are stored.
pub fn question_pages<'a>(pages: impl IntoIterator<Item = &'a Page>) -> BTreeSet<String> {
    pages
        .into_iter()
        .filter(|p| p.word_count > MIN_QUESTION_WORDS && p.content_kind == ContentKind::Normal)
        .map(|p| p.page_id.clone())
        .collect()
}

fn validate_document(doc: &Document) -> Result<(), CorpusError> {
    let bad = |message: String| CorpusError::InvalidDocument {
        doc_id: doc.doc_id.clone(),
        message,
    };
    if doc.page_count == 0 {
        return Err(bad("page_count must be at least 1".into()));
    }
    if doc.pages.len() != doc.page_count {
        return Err(bad(format!(
            "header declares {} pages but {} page records were found",
            doc.page_count,
            doc.pages.len()
        )));
    }
    let mut seen = HashSet::new();
    for (expected, page) in doc.pages.iter().enumerate() {
        if page.index != expected || !seen.insert(page.index) {
            return Err(bad(format!(
                "page indices are not contiguous: expected {expected}, found {}",
                page.index
            )));
        }
        let page_err = |message: &str| CorpusError::InvalidPage {
            page_id: page.page_id.clone(),
            message: message.to_string(),
        };
        if page.image_ref.is_empty() {
            return Err(page_err("image_ref is empty"));
        }
        if page.width_px == 0 || page.height_px == 0 {
            return Err(page_err("image dimensions must be positive"));
        }
    }
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}
