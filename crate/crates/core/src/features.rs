//! State vectors for the dialogue manager and the simulated user.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DocIdx};
use crate::retrieval::{collection_baseline, score_document, QueryModel, RankedList};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Raw,
    HumanRaw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureParams {
    pub mode: FeatureMode,
    /// Width N of the raw score block.
    pub raw_width: usize,
    /// Width K of the simulator's relevance vector.
    pub simulator_width: usize,
    /// Pool sizes for the three hand-crafted features.
    pub clarity_k: usize,
    pub ambiguity_k: usize,
    pub wig_k: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            mode: FeatureMode::Raw,
            raw_width: 49,
            simulator_width: 49,
            clarity_k: 10,
            ambiguity_k: 10,
            wig_k: 10,
        }
    }
}

impl FeatureParams {
    /// Input width of the manager network: raw block, optional human block,
    /// and one turn-index slot.
    pub fn manager_dim(&self) -> usize {
        self.raw_width + if self.mode == FeatureMode::HumanRaw { 3 } else { 0 } + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManagerState {
    pub raw: Vec<f64>,
    pub human: Option<[f64; 3]>,
    pub turn_index: usize,
}

impl ManagerState {
    pub fn to_vector(&self, max_turns: usize) -> Vec<f64> {
        let mut v = self.raw.clone();
        if let Some(h) = self.human {
            v.extend_from_slice(&h);
        }
        v.push(self.turn_index as f64 / max_turns.max(1) as f64);
        v
    }
}

/// Binary relevance of the top-K ranked documents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatorState {
    pub relevance_bits: Vec<u8>,
}

impl SimulatorState {
    pub fn to_vector(&self) -> Vec<f64> {
        self.relevance_bits.iter().map(|&b| f64::from(b)).collect()
    }

    pub fn ones(&self) -> usize {
        self.relevance_bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Top-n scores min-max scaled by the whole list's range, zero padded. A list
/// whose scores are all equal maps to zeros.
pub fn raw_features(list: &RankedList, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let entries = list.entries();
    if entries.is_empty() {
        return out;
    }
    let (lo, hi) = entries
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e.score), hi.max(e.score)));
    let span = hi - lo;
    if span > 0.0 {
        for (slot, e) in out.iter_mut().zip(entries) {
            *slot = (e.score - lo) / span;
        }
    }
    out
}

/// KL divergence of the smoothed top-k pooled language model from the
/// collection model.
pub fn clarity_score(list: &RankedList, corpus: &Corpus, k: usize, smoothing: f64) -> f64 {
    let top = list.top(k);
    if top.is_empty() {
        return 0.0;
    }
    let mut pooled: HashMap<usize, f64> = HashMap::new();
    let mut total = 0.0;
    for e in top {
        let doc = corpus.doc(e.doc);
        for &(t, c) in doc.retrieval_counts() {
            *pooled.entry(t.index()).or_insert(0.0) += c;
            total += c;
        }
    }
    corpus
        .collection_model()
        .iter()
        .enumerate()
        .filter(|(_, &pc)| pc > 0.0)
        .map(|(i, &pc)| {
            let ml = pooled.get(&i).copied().unwrap_or(0.0) / total;
            let p = (1.0 - smoothing) * ml + smoothing * pc;
            p * (p / pc).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Normalized entropy of the softmax over the top-k scores, in [0,1].
pub fn ambiguity_score(list: &RankedList, k: usize) -> f64 {
    let top = list.top(k);
    if top.len() < 2 {
        return 0.0;
    }
    let max = top.iter().map(|e| e.score).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = top.iter().map(|e| (e.score - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let h: f64 = exps
        .iter()
        .map(|&x| x / z)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    (h / (top.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Mean retrieval-score gain of the top-k documents over the collection
/// baseline.
pub fn wig_score(q: &QueryModel, list: &RankedList, corpus: &Corpus, k: usize, smoothing: f64) -> f64 {
    let top = list.top(k);
    if top.is_empty() {
        return 0.0;
    }
    let baseline = collection_baseline(q, corpus);
    let gain: f64 = top
        .iter()
        .map(|e| score_document(q, corpus.doc(e.doc), corpus, smoothing) - baseline)
        .sum();
    gain / top.len() as f64
}

pub fn manager_state(
    q: &QueryModel,
    list: &RankedList,
    corpus: &Corpus,
    params: &FeatureParams,
    smoothing: f64,
    turn_index: usize,
) -> ManagerState {
    let human = (params.mode == FeatureMode::HumanRaw).then(|| {
        [
            clarity_score(list, corpus, params.clarity_k, smoothing),
            ambiguity_score(list, params.ambiguity_k),
            wig_score(q, list, corpus, params.wig_k, smoothing),
        ]
    });
    ManagerState {
        raw: raw_features(list, params.raw_width),
        human,
        turn_index,
    }
}

pub fn simulator_state(list: &RankedList, relevant: &BTreeSet<DocIdx>, k: usize) -> SimulatorState {
    let mut bits = vec![0u8; k];
    for (bit, doc) in bits.iter_mut().zip(list.docs()) {
        *bit = u8::from(relevant.contains(&doc));
    }
    SimulatorState { relevance_bits: bits }
}
