//! Four-way "which relevant document is best" tasks and the choices
//! subjects submit for them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use iscr_core::corpus::{Corpus, DocIdx, QueryRecord};
use iscr_core::eval::{ActionDistribution, DocumentScenario};
use iscr_core::simulator::DECISIONS;
use serde::{Deserialize, Serialize};

use crate::wire::{ChoiceAck, ChoiceBody, ChoiceRecord, DistributionView, DocView, NextTask, TaskView};
use crate::{now_ms, ApiError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanEvalTask {
    pub id: String,
    pub query_id: String,
    /// The first four relevant documents of a logged list, in rank order.
    pub candidates: Vec<DocIdx>,
}

/// One task per distinct (query, candidates) among the scenarios.
pub fn tasks_from_scenarios(scenarios: &[DocumentScenario], queries: &[QueryRecord]) -> Vec<HumanEvalTask> {
    let mut seen = BTreeSet::new();
    let mut tasks = Vec::new();
    for s in scenarios {
        let Some(q) = queries.iter().find(|q| q.id == s.query) else {
            continue;
        };
        let candidates: Vec<DocIdx> = s.docs.iter().copied().filter(|d| q.relevant.contains(d)).take(DECISIONS).collect();
        if candidates.len() == DECISIONS && seen.insert((q.id.clone(), candidates.clone())) {
            tasks.push(HumanEvalTask {
                id: format!("t{:04}", tasks.len()),
                query_id: q.id.clone(),
                candidates,
            });
        }
    }
    tasks
}

pub(crate) struct HumanEval {
    tasks: Vec<HumanEvalTask>,
    index: BTreeMap<String, usize>,
    state: Mutex<Choices>,
}

struct Choices {
    by_subject: BTreeMap<String, BTreeMap<String, usize>>,
    log: Option<File>,
}

impl HumanEval {
    /// Earlier choices in `log` are reloaded so duplicates stay rejected
    /// across restarts.
    pub(crate) fn new(tasks: Vec<HumanEvalTask>, log: Option<&Path>) -> std::io::Result<Self> {
        let index = tasks.iter().enumerate().map(|(i, t)| (t.id.clone(), i)).collect();
        let mut by_subject: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        let log = match log {
            Some(path) => {
                if path.exists() {
                    for rec in read_choices(path)? {
                        by_subject.entry(rec.subject).or_default().insert(rec.task_id, rec.choice);
                    }
                }
                Some(File::options().create(true).append(true).open(path)?)
            }
            None => None,
        };
        Ok(Self {
            tasks,
            index,
            state: Mutex::new(Choices { by_subject, log }),
        })
    }

    pub(crate) fn len(&self) -> usize {
        self.tasks.len()
    }

    pub(crate) fn next_task(&self, subject: &str, corpus: &Corpus, queries: &BTreeMap<String, QueryRecord>) -> Result<NextTask, ApiError> {
        check_subject(subject)?;
        let state = self.state.lock().expect("choice table poisoned");
        let answered = state.by_subject.get(subject);
        let open: Vec<&HumanEvalTask> = self
            .tasks
            .iter()
            .filter(|t| answered.is_none_or(|a| !a.contains_key(&t.id)))
            .collect();
        let task = open.first().map(|t| TaskView {
            task_id: t.id.clone(),
            query_id: t.query_id.clone(),
            query_terms: queries.get(&t.query_id).map(|q| q.terms.keys().cloned().collect()).unwrap_or_default(),
            candidates: t.candidates.iter().enumerate().map(|(i, &d)| DocView::new(corpus, d, i + 1, None)).collect(),
        });
        Ok(NextTask {
            subject: subject.to_owned(),
            task,
            remaining: open.len(),
        })
    }

    pub(crate) fn submit(&self, body: ChoiceBody, corpus: &Corpus) -> Result<ChoiceAck, ApiError> {
        check_subject(&body.subject)?;
        if body.choice >= DECISIONS {
            return Err(ApiError::bad_request(format!(
                "choice index {} is outside 0..{DECISIONS}",
                body.choice
            )));
        }
        let task = self
            .index
            .get(&body.task_id)
            .map(|&i| &self.tasks[i])
            .ok_or_else(|| ApiError::not_found(format!("unknown task {}", body.task_id)))?;
        let mut state = self.state.lock().expect("choice table poisoned");
        let answered = state.by_subject.entry(body.subject.clone()).or_default();
        if answered.contains_key(&task.id) {
            return Err(ApiError::conflict(format!(
                "subject {} already answered task {}",
                body.subject, task.id
            )));
        }
        answered.insert(task.id.clone(), body.choice);
        let count = answered.len();
        let record = ChoiceRecord {
            subject: body.subject.clone(),
            task_id: task.id.clone(),
            query_id: task.query_id.clone(),
            choice: body.choice,
            doc_id: corpus.doc(task.candidates[body.choice]).id.clone(),
            time_ms: now_ms(),
        };
        if let Some(f) = state.log.as_mut() {
            let line = serde_json::to_string(&record).expect("choice serializes");
            writeln!(f, "{line}").map_err(|e| ApiError::internal(format!("choice log: {e}")))?;
        }
        Ok(ChoiceAck {
            subject: body.subject,
            task_id: task.id.clone(),
            answered: count,
            total: self.tasks.len(),
        })
    }

    pub(crate) fn distribution(&self) -> DistributionView {
        let state = self.state.lock().expect("choice table poisoned");
        let choices: Vec<usize> = state.by_subject.values().flat_map(|m| m.values().copied()).collect();
        let distribution = ActionDistribution::from_choices(choices.iter().copied()).ok();
        DistributionView {
            samples: choices.len() as u64,
            distribution,
        }
    }
}

fn check_subject(subject: &str) -> Result<(), ApiError> {
    if subject.trim().is_empty() {
        return Err(ApiError::bad_request("subject id is empty"));
    }
    Ok(())
}

/// Parse a choice log written by the service.
pub fn read_choices(path: &Path) -> std::io::Result<Vec<ChoiceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}
