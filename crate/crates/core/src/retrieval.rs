//! Query-likelihood retrieval with Jelinek-Mercer smoothing and
//! feedback-driven query updates.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DocIdx, Document, TermId, TopicIdx};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalParams {
    /// Weight of the collection model in the smoothed document model.
    pub jm_lambda: f64,
    /// Ranked-list depth; documents beyond it count as not retrieved.
    pub depth: usize,
    /// Background weight μ of the feedback-document mixture.
    pub em_background_weight: f64,
    pub em_max_iterations: usize,
    pub em_tolerance: f64,
    /// Interpolation α between the original query and the feedback model.
    pub feedback_alpha: f64,
    /// Additive boost β for a confirmed or requested term.
    pub term_boost: f64,
    /// Interpolation weight of a chosen topic's distribution.
    pub topic_alpha: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            jm_lambda: 0.5,
            depth: 1000,
            em_background_weight: 0.5,
            em_max_iterations: 30,
            em_tolerance: 1e-6,
            feedback_alpha: 0.5,
            term_boost: 0.3,
            topic_alpha: 0.3,
        }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<()> {
        let unit_open = |x: f64| x > 0.0 && x < 1.0;
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit_open(self.jm_lambda) {
            return Err(Error::Config(format!("jm_lambda must lie in (0,1), got {}", self.jm_lambda)));
        }
        if self.depth == 0 {
            return Err(Error::Config("retrieval depth must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.em_background_weight) {
            return Err(Error::Config("em_background_weight must lie in [0,1)".into()));
        }
        if !unit(self.feedback_alpha) || !unit(self.topic_alpha) {
            return Err(Error::Config("feedback_alpha and topic_alpha must lie in [0,1]".into()));
        }
        if !(self.term_boost >= 0.0) {
            return Err(Error::Config("term_boost must be non-negative".into()));
        }
        Ok(())
    }
}

/// A normalized distribution over terms, remembering the query it started from.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryModel {
    weights: BTreeMap<TermId, f64>,
    origin: Arc<BTreeMap<TermId, f64>>,
}

impl QueryModel {
    /// Normalizes `weights`, dropping non-positive entries. `None` when no
    /// mass remains.
    pub fn new(weights: BTreeMap<TermId, f64>) -> Option<Self> {
        let weights = normalize(weights)?;
        Some(Self {
            origin: Arc::new(weights.clone()),
            weights,
        })
    }

    /// Build from surface-form weights, keeping only terms the engine indexes.
    pub fn from_terms(corpus: &Corpus, terms: &BTreeMap<String, f64>) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for (term, &w) in terms {
            if let Some(t) = corpus.term_id(term).filter(|&t| corpus.collection_prob(t) > 0.0) {
                *weights.entry(t).or_insert(0.0) += w;
            }
        }
        Self::new(weights).ok_or_else(|| Error::Validation("query has no indexed terms".into()))
    }

    /// Whitespace-tokenized, lower-cased free text; repeated tokens add up.
    pub fn from_text(corpus: &Corpus, text: &str) -> Result<Self> {
        let mut terms = BTreeMap::new();
        for tok in text.split_whitespace() {
            *terms.entry(tok.to_lowercase()).or_insert(0.0) += 1.0;
        }
        if terms.is_empty() {
            return Err(Error::Validation("query text is empty".into()));
        }
        Self::from_terms(corpus, &terms)
    }

    pub fn weight(&self, term: TermId) -> f64 {
        self.weights.get(&term).copied().unwrap_or(0.0)
    }

    pub fn weights(&self) -> &BTreeMap<TermId, f64> {
        &self.weights
    }

    pub fn origin(&self) -> &BTreeMap<TermId, f64> {
        &self.origin
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.values().sum()
    }

    fn derive(&self, weights: BTreeMap<TermId, f64>) -> Self {
        match normalize(weights) {
            Some(weights) => Self {
                weights,
                origin: Arc::clone(&self.origin),
            },
            None => self.clone(),
        }
    }
}

fn normalize(mut weights: BTreeMap<TermId, f64>) -> Option<BTreeMap<TermId, f64>> {
    weights.retain(|_, w| *w > 0.0 && w.is_finite());
    let total: f64 = weights.values().sum();
    if !(total > 0.0) {
        return None;
    }
    for w in weights.values_mut() {
        *w /= total;
    }
    Some(weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc: DocIdx,
    pub score: f64,
}

/// Documents in descending score order, ties broken by ascending document id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Sorts and truncates arbitrary scored entries.
    pub fn from_scores(mut entries: Vec<RankedEntry>, depth: usize) -> Self {
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc.cmp(&b.doc)));
        entries.truncate(depth);
        Self { entries }
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn docs(&self) -> impl Iterator<Item = DocIdx> + '_ {
        self.entries.iter().map(|e| e.doc)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self, n: usize) -> &[RankedEntry] {
        &self.entries[..n.min(self.entries.len())]
    }
}

/// `Σ_t q(t)·ln((1−λ)·P_ml(t|d) + λ·P_C(t))`.
///
/// Terms with zero collection probability are skipped: every document would
/// assign them the same `ln 0`, so they carry no ranking information.
pub fn score_document(q: &QueryModel, doc: &Document, corpus: &Corpus, smoothing: f64) -> f64 {
    let counts = doc.retrieval_counts();
    let len = doc.length();
    let mut cursor = 0;
    let mut score = 0.0;
    for (&term, &w) in &q.weights {
        let pc = corpus.collection_prob(term);
        if pc == 0.0 {
            continue;
        }
        while cursor < counts.len() && counts[cursor].0 < term {
            cursor += 1;
        }
        let count = match counts.get(cursor) {
            Some(&(t, c)) if t == term => c,
            _ => 0.0,
        };
        score += w * ((1.0 - smoothing) * count / len + smoothing * pc).ln();
    }
    score
}

/// `Σ_t q(t)·ln P_C(t)`, the score of a document that is the collection.
pub fn collection_baseline(q: &QueryModel, corpus: &Corpus) -> f64 {
    q.weights
        .iter()
        .filter_map(|(&t, &w)| {
            let pc = corpus.collection_prob(t);
            (pc > 0.0).then(|| w * pc.ln())
        })
        .sum()
}

pub fn retrieve(q: &QueryModel, corpus: &Corpus, depth: usize, smoothing: f64) -> RankedList {
    let entries = corpus
        .doc_indices()
        .map(|d| RankedEntry {
            doc: d,
            score: score_document(q, corpus.doc(d), corpus, smoothing),
        })
        .collect();
    RankedList::from_scores(entries, depth)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackEvidence {
    RelevantDoc { doc: DocIdx },
    KeyTermAnswer { term: TermId, yes: bool },
    RequestTerm { term: TermId },
    TopicChoice { topic: TopicIdx },
}

/// Feedback-document language model estimated by EM.
#[derive(Clone, Debug)]
pub struct FeedbackModel {
    pub theta: BTreeMap<TermId, f64>,
    /// Log-likelihood of the document before EM and after each iteration.
    pub log_likelihoods: Vec<f64>,
}

/// Fit θ_F in the two-component mixture `(1−μ)·θ_F + μ·P_C` to one document.
pub fn estimate_feedback_model(
    doc: &Document,
    corpus: &Corpus,
    background: f64,
    max_iterations: usize,
    tolerance: f64,
) -> FeedbackModel {
    let counts = doc.retrieval_counts();
    let background_probs: Vec<f64> = counts.iter().map(|&(t, _)| corpus.collection_prob(t)).collect();
    let mut theta: Vec<f64> = counts.iter().map(|&(_, c)| c / doc.length()).collect();
    let log_likelihood = |theta: &[f64]| -> f64 {
        counts
            .iter()
            .zip(theta)
            .zip(&background_probs)
            .map(|((&(_, c), &p), &pc)| c * ((1.0 - background) * p + background * pc).ln())
            .sum()
    };

    let mut history = vec![log_likelihood(&theta)];
    let mut posterior = vec![0.0; counts.len()];
    for _ in 0..max_iterations {
        // E-step: share of each occurrence explained by the feedback component.
        for i in 0..counts.len() {
            let own = (1.0 - background) * theta[i];
            let mix = own + background * background_probs[i];
            posterior[i] = if mix > 0.0 { own / mix } else { 0.0 };
        }
        // M-step.
        let total: f64 = counts.iter().zip(&posterior).map(|(&(_, c), &z)| c * z).sum();
        if !(total > 0.0) {
            break;
        }
        for i in 0..counts.len() {
            theta[i] = counts[i].1 * posterior[i] / total;
        }
        let ll = log_likelihood(&theta);
        let gain = ll - history.last().copied().unwrap_or(f64::NEG_INFINITY);
        history.push(ll);
        if gain.abs() < tolerance {
            break;
        }
    }

    FeedbackModel {
        theta: counts.iter().zip(&theta).filter(|(_, &p)| p > 0.0).map(|(&(t, _), &p)| (t, p)).collect(),
        log_likelihoods: history,
    }
}

/// Update the query model with one piece of user evidence. Evidence about a
/// term the engine does not index leaves the model unchanged.
pub fn apply_feedback(q: &QueryModel, evidence: &FeedbackEvidence, corpus: &Corpus, params: &RetrievalParams) -> QueryModel {
    match *evidence {
        FeedbackEvidence::RelevantDoc { doc } => {
            let fb = estimate_feedback_model(
                corpus.doc(doc),
                corpus,
                params.em_background_weight,
                params.em_max_iterations,
                params.em_tolerance,
            );
            let mut w: BTreeMap<TermId, f64> = q.origin.iter().map(|(&t, &p)| (t, (1.0 - params.feedback_alpha) * p)).collect();
            for (t, p) in fb.theta {
                *w.entry(t).or_insert(0.0) += params.feedback_alpha * p;
            }
            q.derive(w)
        }
        FeedbackEvidence::RequestTerm { term } | FeedbackEvidence::KeyTermAnswer { term, yes: true } => {
            if corpus.collection_prob(term) == 0.0 {
                return q.clone();
            }
            let mut w = q.weights.clone();
            *w.entry(term).or_insert(0.0) += params.term_boost;
            q.derive(w)
        }
        FeedbackEvidence::KeyTermAnswer { term, yes: false } => {
            if q.weight(term) == 0.0 {
                return q.clone();
            }
            let mut w = q.weights.clone();
            w.remove(&term);
            // Rejecting the only term would leave nothing to search for.
            q.derive(w)
        }
        FeedbackEvidence::TopicChoice { topic } => {
            let topic_weights: BTreeMap<TermId, f64> = corpus
                .topic(topic)
                .distribution
                .iter()
                .filter(|&&(t, _)| corpus.collection_prob(t) > 0.0)
                .copied()
                .collect();
            let Some(topic_weights) = normalize(topic_weights) else {
                return q.clone();
            };
            let mut w: BTreeMap<TermId, f64> = q.weights.iter().map(|(&t, &p)| (t, (1.0 - params.topic_alpha) * p)).collect();
            for (t, p) in topic_weights {
                *w.entry(t).or_insert(0.0) += params.topic_alpha * p;
            }
            q.derive(w)
        }
    }
}
