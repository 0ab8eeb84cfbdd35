//! Seeded synthetic spoken-document collection with planted topic structure.
//!
//! Topics come in clusters of three that share a handful of cluster terms;
//! each query is written in its cluster's shared vocabulary, so first-pass
//! retrieval mixes the three sibling topics together and only feedback that
//! brings in topic-specific terms can separate the relevant documents. The
//! retrieval side sees an ASR-corrupted copy of every document: each term
//! has a fixed confusion partner it is misrecognized as, and a minority of
//! topic terms (think rare names) are misrecognized most of the time.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    write_corpus_file, write_jsonl, Corpus, CorpusHeader, CorpusPaths, DocumentRecord, LoadOptions, QueryFileRecord, QueryRecord,
    TopicRecord, CORPUS_FORMAT,
};
use crate::error::{Error, Result};

const CLUSTER_SIZE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub seed: u64,
    pub n_docs: usize,
    pub n_queries: usize,
    /// Defaults to the query count rounded up to whole clusters.
    pub n_topics: Option<usize>,
    pub background_vocab: usize,
    pub zipf_exponent: f64,
    pub cluster_terms: usize,
    pub topic_terms: usize,
    pub query_terms: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    pub background_share: f64,
    pub cluster_share: f64,
    /// Fraction of documents that belong to no topic.
    pub off_topic_share: f64,
    pub asr_error: f64,
    pub hard_term_share: f64,
    pub hard_term_error: f64,
    /// Emit expected (soft) counts instead of sampled one-best counts.
    pub lattice: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_docs: 200,
            n_queries: 30,
            n_topics: None,
            background_vocab: 300,
            zipf_exponent: 1.0,
            cluster_terms: 4,
            topic_terms: 20,
            query_terms: 2,
            min_doc_len: 40,
            max_doc_len: 80,
            background_share: 0.8,
            cluster_share: 0.12,
            off_topic_share: 0.2,
            asr_error: 0.1,
            hard_term_share: 0.3,
            hard_term_error: 0.7,
            lattice: false,
        }
    }
}

impl SynthParams {
    fn on_topic_docs(&self) -> usize {
        self.n_docs - (self.n_docs as f64 * self.off_topic_share).round() as usize
    }

    pub fn topic_count(&self) -> usize {
        self.n_topics.unwrap_or_else(|| {
            let whole = self.n_queries.div_ceil(CLUSTER_SIZE) * CLUSTER_SIZE;
            whole.max(6).min(self.on_topic_docs())
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_docs < 20 || self.n_queries < 5 {
            return Err(Error::Config("the generator needs n_docs >= 20 and n_queries >= 5".into()));
        }
        let topics = self.topic_count();
        if topics < 4 {
            return Err(Error::Config("the generator needs at least 4 topics".into()));
        }
        if topics > self.on_topic_docs() {
            return Err(Error::Config(format!(
                "{topics} topics cannot each get a document from {} on-topic documents",
                self.on_topic_docs()
            )));
        }
        if self.query_terms == 0 || self.query_terms > self.cluster_terms {
            return Err(Error::Config("query_terms must lie in 1..=cluster_terms".into()));
        }
        if self.topic_terms == 0 || self.background_vocab == 0 {
            return Err(Error::Config("topic_terms and background_vocab must be positive".into()));
        }
        if self.min_doc_len == 0 || self.min_doc_len > self.max_doc_len {
            return Err(Error::Config("document lengths must satisfy 0 < min <= max".into()));
        }
        let shares = [self.background_share, self.cluster_share, self.off_topic_share, self.asr_error, self.hard_term_share, self.hard_term_error];
        if shares.iter().any(|s| !(0.0..=1.0).contains(s)) || self.background_share + self.cluster_share > 1.0 {
            return Err(Error::Config("shares and error rates must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Generated records, not yet indexed.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub header: CorpusHeader,
    pub documents: Vec<DocumentRecord>,
    pub queries: Vec<QueryFileRecord>,
    pub topics: Vec<TopicRecord>,
}

impl SyntheticCorpus {
    pub fn write(&self, dir: &Path) -> Result<CorpusPaths> {
        let paths = CorpusPaths::in_dir(dir);
        write_corpus_file(&paths.corpus, &self.header, &self.documents)?;
        write_jsonl(&paths.queries, &self.queries)?;
        if let Some(t) = &paths.topics {
            write_jsonl(t, &self.topics)?;
        }
        Ok(paths)
    }

    pub fn index(&self, options: &LoadOptions) -> Result<(Corpus, Vec<QueryRecord>)> {
        let corpus = Corpus::build(Some(&self.header), self.documents.clone(), self.topics.clone(), None, options)?;
        let queries = corpus.resolve_queries(self.queries.clone(), options)?;
        Ok((corpus, queries))
    }
}

struct Vocab {
    background: Vec<String>,
    cluster: Vec<Vec<String>>,
    topic: Vec<Vec<String>>,
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| (r as f64).powf(-s))).expect("positive weights")
}

pub fn generate(params: &SynthParams) -> Result<SyntheticCorpus> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n_topics = params.topic_count();
    let n_clusters = n_topics.div_ceil(CLUSTER_SIZE);
    let cluster_of = |topic: usize| topic / CLUSTER_SIZE;

    let vocab = Vocab {
        background: (0..params.background_vocab).map(|i| format!("b{i:03}")).collect(),
        cluster: (0..n_clusters)
            .map(|c| (0..params.cluster_terms).map(|j| format!("c{c:02}x{j}")).collect())
            .collect(),
        topic: (0..n_topics)
            .map(|t| (0..params.topic_terms).map(|j| format!("t{t:02}w{j:02}")).collect())
            .collect(),
    };

    // Every term has one fixed confusable background word and an error rate.
    let mut asr: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    let all_terms = vocab
        .background
        .iter()
        .chain(vocab.cluster.iter().flatten())
        .chain(vocab.topic.iter().flatten());
    for term in all_terms {
        let hard = term.starts_with('t') && rng.gen_bool(params.hard_term_share);
        let rate = if hard { params.hard_term_error } else { params.asr_error };
        let mut partner = rng.gen_range(0..params.background_vocab);
        if vocab.background[partner] == *term {
            partner = (partner + 1) % params.background_vocab;
        }
        asr.insert(term.as_str(), (partner, rate));
    }

    let background_dist = zipf(params.background_vocab, params.zipf_exponent);
    let topic_dist = zipf(params.topic_terms, params.zipf_exponent);
    let n_on = params.on_topic_docs();
    let width = params.n_docs.to_string().len().max(4);

    let mut documents = Vec::with_capacity(params.n_docs);
    let mut members: Vec<Vec<String>> = vec![Vec::new(); n_topics];
    for i in 0..params.n_docs {
        let id = format!("d{i:0width$}");
        let topic = (i < n_on).then_some(i % n_topics);
        let len = rng.gen_range(params.min_doc_len..=params.max_doc_len);
        let mut manual: BTreeMap<String, u32> = BTreeMap::new();
        let mut retrieval: BTreeMap<String, f64> = BTreeMap::new();
        for _ in 0..len {
            let u: f64 = rng.gen();
            let term: &str = match topic {
                Some(t) if u >= params.background_share + params.cluster_share => &vocab.topic[t][topic_dist.sample(&mut rng)],
                Some(t) if u >= params.background_share => {
                    let c = &vocab.cluster[cluster_of(t)];
                    &c[rng.gen_range(0..c.len())]
                }
                // Off-topic documents sprinkle in stray topic terms.
                None if u >= 0.9 => {
                    let t = &vocab.topic[rng.gen_range(0..n_topics)];
                    &t[topic_dist.sample(&mut rng)]
                }
                _ => &vocab.background[background_dist.sample(&mut rng)],
            };
            *manual.entry(term.to_owned()).or_insert(0) += 1;
            let (partner, rate) = asr[term];
            let partner = vocab.background[partner].as_str();
            if params.lattice {
                *retrieval.entry(term.to_owned()).or_insert(0.0) += 1.0 - rate;
                if rate > 0.0 {
                    *retrieval.entry(partner.to_owned()).or_insert(0.0) += rate;
                }
            } else {
                let heard = if rng.gen_bool(rate) { partner } else { term };
                *retrieval.entry(heard.to_owned()).or_insert(0.0) += 1.0;
            }
        }
        retrieval.retain(|_, c| *c > 0.0);
        if let Some(t) = topic {
            members[t].push(id.clone());
        }
        documents.push(DocumentRecord {
            id,
            retrieval_counts: retrieval,
            manual_counts: manual,
        });
    }

    let topics: Vec<TopicRecord> = (0..n_topics)
        .map(|t| {
            let mut distribution = BTreeMap::new();
            let z: f64 = (1..=params.topic_terms).map(|r| (r as f64).powf(-params.zipf_exponent)).sum();
            let specific = 1.0 - params.cluster_share / (params.cluster_share + (1.0 - params.background_share - params.cluster_share));
            for (r, term) in vocab.topic[t].iter().enumerate() {
                distribution.insert(term.clone(), specific * ((r + 1) as f64).powf(-params.zipf_exponent) / z);
            }
            let cluster = &vocab.cluster[cluster_of(t)];
            for term in cluster {
                distribution.insert(term.clone(), (1.0 - specific) / cluster.len() as f64);
            }
            let mass: f64 = distribution.values().sum();
            distribution.values_mut().for_each(|p| *p /= mass);
            TopicRecord {
                id: format!("topic{t:02}"),
                label: format!("{} {}", vocab.topic[t][0], vocab.topic[t][1]),
                distribution,
            }
        })
        .collect();

    let queries: Vec<QueryFileRecord> = (0..params.n_queries)
        .map(|i| {
            let topic = i % n_topics;
            let cluster = cluster_of(topic);
            let terms: BTreeMap<String, f64> = vocab.cluster[cluster]
                .choose_multiple(&mut rng, params.query_terms)
                .map(|t| (t.clone(), 1.0))
                .collect();
            let mut siblings: Vec<usize> = (0..n_topics).filter(|&t| t != topic && cluster_of(t) == cluster).collect();
            let mut others: Vec<usize> = (0..n_topics).filter(|&t| cluster_of(t) != cluster).collect();
            siblings.shuffle(&mut rng);
            others.shuffle(&mut rng);
            let ranking = std::iter::once(topic).chain(siblings).chain(others);
            QueryFileRecord {
                id: format!("q{i:03}"),
                terms,
                relevant_docs: members[topic].clone(),
                topic_ranking: ranking.map(|t| topics[t].id.clone()).collect(),
            }
        })
        .collect();

    Ok(SyntheticCorpus {
        header: CorpusHeader {
            format: CORPUS_FORMAT.into(),
            one_best_equals_manual: false,
        },
        documents,
        queries,
        topics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_corpus;
    use crate::eval::list_average_precision;
    use crate::retrieval::{retrieve, QueryModel};

    fn small() -> SynthParams {
        SynthParams {
            seed: 5,
            n_docs: 20,
            n_queries: 5,
            ..SynthParams::default()
        }
    }

    #[test]
    fn small_corpus_has_judged_queries() {
        let s = generate(&small()).unwrap();
        assert_eq!(s.documents.len(), 20);
        assert_eq!(s.queries.len(), 5);
        for q in &s.queries {
            assert!(!q.relevant_docs.is_empty());
            assert!(q.topic_ranking.len() >= 4);
        }
        s.index(&LoadOptions::default()).unwrap();
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&SynthParams::default()).unwrap().write(a.path()).unwrap();
        generate(&SynthParams::default()).unwrap().write(b.path()).unwrap();
        for f in ["corpus.jsonl", "queries.jsonl", "topics.jsonl"] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        let other = generate(&SynthParams {
            seed: 1,
            ..SynthParams::default()
        })
        .unwrap();
        assert_ne!(other.documents, generate(&SynthParams::default()).unwrap().documents);
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&small()).unwrap();
        let paths = s.write(dir.path()).unwrap();
        let (c, q) = load_corpus(&paths, &LoadOptions::default()).unwrap();
        let (c2, q2) = s.index(&LoadOptions::default()).unwrap();
        assert_eq!(c.num_docs(), c2.num_docs());
        assert_eq!(q, q2);
    }

    #[test]
    fn planted_topics_are_findable_but_ambiguous() {
        let s = generate(&SynthParams::default()).unwrap();
        let (c, queries) = s.index(&LoadOptions::default()).unwrap();
        let mut aps = Vec::new();
        for q in &queries {
            let model = QueryModel::from_terms(&c, &q.terms).unwrap();
            let list = retrieve(&model, &c, 1000, 0.5);
            assert!(list.docs().take(10).any(|d| q.relevant.contains(&d)), "{}", q.id);
            aps.push(list_average_precision(&list, &q.relevant).unwrap());
        }
        let map = aps.iter().sum::<f64>() / aps.len() as f64;
        assert!(map < 0.6, "first-pass MAP {map}");
    }

    #[test]
    fn lattice_mode_emits_soft_counts() {
        let s = generate(&SynthParams {
            lattice: true,
            ..small()
        })
        .unwrap();
        assert!(s.documents.iter().flat_map(|d| d.retrieval_counts.values()).any(|c| c.fract() != 0.0));
        s.index(&LoadOptions::default()).unwrap();
    }

    #[test]
    fn rejects_tiny_requests() {
        assert!(generate(&SynthParams {
            n_docs: 10,
            ..small()
        })
        .is_err());
    }
}
