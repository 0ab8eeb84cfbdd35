//! Document collection, queries, topics and key terms.
//!
//! Every file is UTF-8 JSON Lines. The corpus is immutable once built; other
//! modules address documents, terms and topics through the dense index
//! newtypes defined here.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_FORMAT: &str = "iscr-corpus/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TermId(pub u32);

/// Position of a document in the corpus. Documents are stored sorted by id,
/// so ordering by `DocIdx` is ordering by document id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DocIdx(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TopicIdx(pub u32);

impl DocIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl TermId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl TopicIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

// ---------------------------------------------------------------------------
// On-disk records
// ---------------------------------------------------------------------------

/// Optional first line of a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub format: String,
    #[serde(default)]
    pub one_best_equals_manual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentRecord {
    pub id: String,
    /// Counts seen by the retrieval engine; real-valued in lattice mode.
    pub retrieval_counts: BTreeMap<String, f64>,
    /// Counts from the manual transcription.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub manual_counts: BTreeMap<String, u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryFileRecord {
    pub id: String,
    pub terms: BTreeMap<String, f64>,
    pub relevant_docs: Vec<String>,
    #[serde(default)]
    pub topic_ranking: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicRecord {
    pub id: String,
    pub label: String,
    pub distribution: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyTermRecord {
    pub term: String,
}

// ---------------------------------------------------------------------------
// In-memory model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    retrieval: Vec<(TermId, f64)>,
    retrieval_len: f64,
    manual: Vec<(TermId, u32)>,
}

impl Document {
    /// Retrieval-side counts, sorted by term id.
    pub fn retrieval_counts(&self) -> &[(TermId, f64)] {
        &self.retrieval
    }

    pub fn retrieval_count(&self, term: TermId) -> f64 {
        self.retrieval
            .binary_search_by_key(&term, |&(t, _)| t)
            .map(|i| self.retrieval[i].1)
            .unwrap_or(0.0)
    }

    /// Total retrieval-side mass |d|.
    pub fn length(&self) -> f64 {
        self.retrieval_len
    }

    /// Manual transcription counts, sorted by term id.
    pub fn manual_counts(&self) -> &[(TermId, u32)] {
        &self.manual
    }

    pub fn manual_count(&self, term: TermId) -> u32 {
        self.manual
            .binary_search_by_key(&term, |&(t, _)| t)
            .map(|i| self.manual[i].1)
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Topic {
    pub id: String,
    pub label: String,
    /// Term distribution, sorted by term id, summing to one.
    pub distribution: Vec<(TermId, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub id: String,
    pub terms: BTreeMap<String, f64>,
    pub relevant: BTreeSet<DocIdx>,
    pub topic_ranking: Vec<TopicIdx>,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// How many key terms to derive when no key-term file is supplied.
    pub key_term_count: usize,
    /// Require every query to rank at least four topics.
    pub require_topics: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            key_term_count: 50,
            require_topics: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    #[serde(default)]
    pub topics: Option<PathBuf>,
    #[serde(default)]
    pub key_terms: Option<PathBuf>,
}

impl CorpusPaths {
    /// Standard file names inside one data directory.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            corpus: dir.join("corpus.jsonl"),
            queries: dir.join("queries.jsonl"),
            topics: Some(dir.join("topics.jsonl")),
            key_terms: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    documents: Vec<Document>,
    doc_index: HashMap<String, DocIdx>,
    terms: Vec<String>,
    term_index: HashMap<String, TermId>,
    vocabulary: Vec<TermId>,
    df: Vec<u32>,
    collection_model: Vec<f64>,
    topics: Vec<Topic>,
    topic_index: HashMap<String, TopicIdx>,
    key_terms: Vec<TermId>,
    one_best_equals_manual: bool,
}

impl Corpus {
    /// Index a set of records. `key_terms` of `None` derives the top terms by
    /// global tf·idf.
    pub fn build(
        header: Option<&CorpusHeader>,
        documents: Vec<DocumentRecord>,
        topics: Vec<TopicRecord>,
        key_terms: Option<Vec<String>>,
        options: &LoadOptions,
    ) -> Result<Corpus> {
        let one_best = header.map(|h| h.one_best_equals_manual).unwrap_or(false);
        if let Some(h) = header {
            if h.format != CORPUS_FORMAT {
                return Err(Error::Validation(format!(
                    "unsupported corpus format {:?}, expected {CORPUS_FORMAT:?}",
                    h.format
                )));
            }
        }
        if documents.is_empty() {
            return Err(Error::Validation("corpus has no documents".into()));
        }

        let mut documents = documents;
        documents.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in documents.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::Validation(format!("duplicate document id {:?}", pair[0].id)));
            }
        }

        for doc in &mut documents {
            validate_counts(doc)?;
            if one_best {
                let mirrored = mirror_counts(doc)?;
                if !doc.manual_counts.is_empty() && doc.manual_counts != mirrored {
                    return Err(Error::Validation(format!(
                        "document {:?}: manual_counts differ from retrieval_counts in a one-best-equals-manual corpus",
                        doc.id
                    )));
                }
                doc.manual_counts = mirrored;
            } else if doc.manual_counts.is_empty() {
                return Err(Error::Validation(format!(
                    "document {:?} has no manual_counts and the corpus is not declared one-best-equals-manual",
                    doc.id
                )));
            }
        }

        // Term ids are assigned in lexicographic order so that identical
        // inputs always intern identically.
        let mut all_terms: BTreeSet<&str> = BTreeSet::new();
        for doc in &documents {
            all_terms.extend(doc.retrieval_counts.keys().map(String::as_str));
            all_terms.extend(doc.manual_counts.keys().map(String::as_str));
        }
        for topic in &topics {
            all_terms.extend(topic.distribution.keys().map(String::as_str));
        }
        let terms: Vec<String> = all_terms.into_iter().map(str::to_owned).collect();
        let term_index: HashMap<String, TermId> = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), TermId(i as u32)))
            .collect();

        let n_terms = terms.len();
        let mut df = vec![0u32; n_terms];
        let mut collection_mass = vec![0.0f64; n_terms];
        let mut indexed = Vec::with_capacity(documents.len());
        let mut doc_index = HashMap::with_capacity(documents.len());
        for (i, rec) in documents.into_iter().enumerate() {
            let retrieval: Vec<(TermId, f64)> = rec
                .retrieval_counts
                .iter()
                .filter(|(_, &c)| c > 0.0)
                .map(|(t, &c)| (term_index[t], c))
                .collect();
            let manual: Vec<(TermId, u32)> = rec
                .manual_counts
                .iter()
                .filter(|(_, &c)| c > 0)
                .map(|(t, &c)| (term_index[t], c))
                .collect();
            for &(t, _) in &manual {
                df[t.index()] += 1;
            }
            let mut len = 0.0;
            for &(t, c) in &retrieval {
                collection_mass[t.index()] += c;
                len += c;
            }
            doc_index.insert(rec.id.clone(), DocIdx(i as u32));
            indexed.push(Document {
                id: rec.id,
                retrieval,
                retrieval_len: len,
                manual,
            });
        }
        let total: f64 = collection_mass.iter().sum();
        let collection_model: Vec<f64> = collection_mass.iter().map(|m| m / total).collect();
        let vocabulary: Vec<TermId> = (0..n_terms)
            .filter(|&i| df[i] > 0)
            .map(|i| TermId(i as u32))
            .collect();

        let mut topic_list = Vec::with_capacity(topics.len());
        let mut topic_index = HashMap::with_capacity(topics.len());
        for (i, rec) in topics.into_iter().enumerate() {
            let mass: f64 = rec.distribution.values().sum();
            if rec.distribution.values().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Validation(format!("topic {:?} has a negative or non-finite probability", rec.id)));
            }
            if (mass - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "topic {:?} distribution sums to {mass}, expected 1",
                    rec.id
                )));
            }
            if topic_index.insert(rec.id.clone(), TopicIdx(i as u32)).is_some() {
                return Err(Error::Validation(format!("duplicate topic id {:?}", rec.id)));
            }
            topic_list.push(Topic {
                distribution: rec.distribution.iter().map(|(t, &p)| (term_index[t], p)).collect(),
                id: rec.id,
                label: rec.label,
            });
        }

        let mut corpus = Corpus {
            documents: indexed,
            doc_index,
            terms,
            term_index,
            vocabulary,
            df,
            collection_model,
            topics: topic_list,
            topic_index,
            key_terms: Vec::new(),
            one_best_equals_manual: one_best,
        };
        corpus.key_terms = match key_terms {
            Some(list) => {
                let mut ids = Vec::with_capacity(list.len());
                for term in list {
                    let id = corpus
                        .term_id(&term)
                        .filter(|&t| corpus.df(t) > 0)
                        .ok_or_else(|| Error::Validation(format!("key term {term:?} is not in the vocabulary")))?;
                    if !ids.contains(&id) {
                        ids.push(id);
                    }
                }
                ids
            }
            None => corpus.top_tfidf_terms(options.key_term_count),
        };
        Ok(corpus)
    }

    fn top_tfidf_terms(&self, m: usize) -> Vec<TermId> {
        let mut tf = vec![0u64; self.terms.len()];
        for doc in &self.documents {
            for &(t, c) in &doc.manual {
                tf[t.index()] += u64::from(c);
            }
        }
        let mut scored: Vec<(TermId, f64)> = self
            .vocabulary
            .iter()
            .map(|&t| (t, tf[t.index()] as f64 * self.idf(t)))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        // Ties resolve by term id, which is lexicographic.
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().take(m).map(|(t, _)| t).collect()
    }

    pub fn num_docs(&self) -> usize {
        self.documents.len()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn doc(&self, idx: DocIdx) -> &Document {
        &self.documents[idx.index()]
    }

    pub fn doc_idx(&self, id: &str) -> Option<DocIdx> {
        self.doc_index.get(id).copied()
    }

    pub fn doc_indices(&self) -> impl Iterator<Item = DocIdx> {
        (0..self.documents.len() as u32).map(DocIdx)
    }

    pub fn term(&self, id: TermId) -> &str {
        &self.terms[id.index()]
    }

    pub fn term_id(&self, term: &str) -> Option<TermId> {
        self.term_index.get(term).copied()
    }

    /// Terms that occur in at least one manual transcription, in term order.
    pub fn vocabulary(&self) -> &[TermId] {
        &self.vocabulary
    }

    pub fn df(&self, term: TermId) -> u32 {
        self.df.get(term.index()).copied().unwrap_or(0)
    }

    /// `ln(|D| / df(t))`; zero for terms no manual transcription contains.
    pub fn idf(&self, term: TermId) -> f64 {
        match self.df(term) {
            0 => 0.0,
            df => (self.documents.len() as f64 / f64::from(df)).ln(),
        }
    }

    /// Idf by surface form; unknown terms score zero.
    pub fn idf_of(&self, term: &str) -> f64 {
        self.term_id(term).map(|t| self.idf(t)).unwrap_or(0.0)
    }

    /// Maximum-likelihood collection model over retrieval counts. Zero for
    /// terms that appear only in manual transcriptions or topics.
    pub fn collection_prob(&self, term: TermId) -> f64 {
        self.collection_model.get(term.index()).copied().unwrap_or(0.0)
    }

    pub fn collection_model(&self) -> &[f64] {
        &self.collection_model
    }

    pub fn topics(&self) -> &[Topic] {
        &self.topics
    }

    pub fn topic(&self, idx: TopicIdx) -> &Topic {
        &self.topics[idx.index()]
    }

    pub fn topic_idx(&self, id: &str) -> Option<TopicIdx> {
        self.topic_index.get(id).copied()
    }

    pub fn key_terms(&self) -> &[TermId] {
        &self.key_terms
    }

    pub fn one_best_equals_manual(&self) -> bool {
        self.one_best_equals_manual
    }

    /// Resolve query file records against this corpus.
    pub fn resolve_queries(&self, records: Vec<QueryFileRecord>, options: &LoadOptions) -> Result<Vec<QueryRecord>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(records.len());
        for rec in records {
            if !seen.insert(rec.id.clone()) {
                return Err(Error::Validation(format!("duplicate query id {:?}", rec.id)));
            }
            if rec.terms.is_empty() || rec.terms.values().any(|&w| !(w > 0.0) || !w.is_finite()) {
                return Err(Error::Validation(format!(
                    "query {:?} needs at least one term with a positive weight",
                    rec.id
                )));
            }
            if rec.relevant_docs.is_empty() {
                return Err(Error::Validation(format!("query {:?} has no relevant documents", rec.id)));
            }
            let mut relevant = BTreeSet::new();
            for doc in &rec.relevant_docs {
                let idx = self.doc_idx(doc).ok_or_else(|| {
                    Error::Validation(format!("query {:?} references unknown document {:?}", rec.id, doc))
                })?;
                relevant.insert(idx);
            }
            let mut topic_ranking = Vec::with_capacity(rec.topic_ranking.len());
            for topic in &rec.topic_ranking {
                let idx = self.topic_idx(topic).ok_or_else(|| {
                    Error::Validation(format!("query {:?} references unknown topic {:?}", rec.id, topic))
                })?;
                topic_ranking.push(idx);
            }
            if options.require_topics && topic_ranking.len() < 4 {
                return Err(Error::Validation(format!(
                    "query {:?} ranks {} topics; at least 4 are required",
                    rec.id,
                    topic_ranking.len()
                )));
            }
            out.push(QueryRecord {
                id: rec.id,
                terms: rec.terms,
                relevant,
                topic_ranking,
            });
        }
        Ok(out)
    }

    pub fn query_to_record(&self, query: &QueryRecord) -> QueryFileRecord {
        QueryFileRecord {
            id: query.id.clone(),
            terms: query.terms.clone(),
            relevant_docs: query.relevant.iter().map(|&d| self.doc(d).id.clone()).collect(),
            topic_ranking: query.topic_ranking.iter().map(|&t| self.topic(t).id.clone()).collect(),
        }
    }

    pub fn document_records(&self) -> Vec<DocumentRecord> {
        self.documents
            .iter()
            .map(|d| DocumentRecord {
                id: d.id.clone(),
                retrieval_counts: d.retrieval.iter().map(|&(t, c)| (self.term(t).to_owned(), c)).collect(),
                manual_counts: if self.one_best_equals_manual {
                    BTreeMap::new()
                } else {
                    d.manual.iter().map(|&(t, c)| (self.term(t).to_owned(), c)).collect()
                },
            })
            .collect()
    }

    pub fn topic_records(&self) -> Vec<TopicRecord> {
        self.topics
            .iter()
            .map(|t| TopicRecord {
                id: t.id.clone(),
                label: t.label.clone(),
                distribution: t.distribution.iter().map(|&(w, p)| (self.term(w).to_owned(), p)).collect(),
            })
            .collect()
    }

    /// Write every file named in `paths`. A `None` key-term path skips the
    /// key-term file; a `None` topic path skips topics.
    pub fn save(&self, paths: &CorpusPaths, queries: &[QueryRecord]) -> Result<()> {
        let header = CorpusHeader {
            format: CORPUS_FORMAT.into(),
            one_best_equals_manual: self.one_best_equals_manual,
        };
        write_corpus_file(&paths.corpus, &header, &self.document_records())?;
        write_jsonl(&paths.queries, queries.iter().map(|q| self.query_to_record(q)))?;
        if let Some(path) = &paths.topics {
            write_jsonl(path, self.topic_records())?;
        }
        if let Some(path) = &paths.key_terms {
            write_jsonl(
                path,
                self.key_terms.iter().map(|&t| KeyTermRecord {
                    term: self.term(t).to_owned(),
                }),
            )?;
        }
        Ok(())
    }
}

fn validate_counts(doc: &DocumentRecord) -> Result<()> {
    if doc.id.is_empty() {
        return Err(Error::Validation("document with empty id".into()));
    }
    if let Some((t, c)) = doc.retrieval_counts.iter().find(|(_, c)| !(**c >= 0.0) || !c.is_finite()) {
        return Err(Error::Validation(format!(
            "document {:?}: retrieval count for {t:?} is {c}; counts must be finite and non-negative",
            doc.id
        )));
    }
    if !doc.retrieval_counts.values().any(|&c| c > 0.0) {
        return Err(Error::Validation(format!("document {:?} has no positive retrieval count", doc.id)));
    }
    Ok(())
}

fn mirror_counts(doc: &DocumentRecord) -> Result<BTreeMap<String, u32>> {
    doc.retrieval_counts
        .iter()
        .filter(|(_, &c)| c > 0.0)
        .map(|(t, &c)| {
            if c.fract() != 0.0 || c > f64::from(u32::MAX) {
                Err(Error::Validation(format!(
                    "document {:?}: one-best-equals-manual corpus needs integral counts, {t:?} has {c}",
                    doc.id
                )))
            } else {
                Ok((t.clone(), c as u32))
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Load and index the corpus plus its queries.
pub fn load_corpus(paths: &CorpusPaths, options: &LoadOptions) -> Result<(Corpus, Vec<QueryRecord>)> {
    let (header, docs) = read_corpus_file(&paths.corpus)?;
    let topics = match &paths.topics {
        Some(p) => read_jsonl::<TopicRecord>(p)?,
        None => Vec::new(),
    };
    let key_terms = match &paths.key_terms {
        Some(p) => Some(read_jsonl::<KeyTermRecord>(p)?.into_iter().map(|k| k.term).collect()),
        None => None,
    };
    let corpus = Corpus::build(header.as_ref(), docs, topics, key_terms, options)?;
    let queries = corpus.resolve_queries(read_jsonl(&paths.queries)?, options)?;
    Ok((corpus, queries))
}

pub fn read_corpus_file(path: &Path) -> Result<(Option<CorpusHeader>, Vec<DocumentRecord>)> {
    let mut header = None;
    let mut docs = Vec::new();
    for_each_line(path, |line_no, line| {
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| parse_error(path, line_no, e))?;
        if value.get("format").is_some() {
            if line_no != 1 || header.is_some() {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: line_no,
                    message: "corpus header must be the first record".into(),
                });
            }
            header = Some(serde_json::from_value(value).map_err(|e| parse_error(path, line_no, e))?);
        } else {
            docs.push(serde_json::from_value(value).map_err(|e| parse_error(path, line_no, e))?);
        }
        Ok(())
    })?;
    Ok((header, docs))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for_each_line(path, |line_no, line| {
        out.push(serde_json::from_str(line).map_err(|e| parse_error(path, line_no, e))?);
        Ok(())
    })?;
    Ok(out)
}

fn for_each_line(path: &Path, mut f: impl FnMut(usize, &str) -> Result<()>) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        f(i + 1, &line)?;
    }
    Ok(())
}

fn parse_error(path: &Path, line: usize, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        message: e.to_string(),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(&rec).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_corpus_file(path: &Path, header: &CorpusHeader, docs: &[DocumentRecord]) -> Result<()> {
    let header = serde_json::to_value(header).expect("header serializes");
    let docs = docs.iter().map(|d| serde_json::to_value(d).expect("document serializes"));
    write_jsonl(path, std::iter::once(header).chain(docs))
}
