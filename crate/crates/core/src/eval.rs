//! Ranking and behavioral metrics: AP/MAP, entropy and smoothed KL over
//! empirical choice distributions, and the two report tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::DocIdx;
use crate::error::{Error, Result};
use crate::features::SimulatorState;
use crate::retrieval::RankedList;

/// Outcome labels of a four-way choice.
pub const RANK_LABELS: [&str; 4] = ["1st", "2nd", "3rd", "4th"];

pub const DEFAULT_KL_SMOOTHING: f64 = 1e-6;

/// Average precision of a ranking; relevant documents that were not
/// retrieved contribute zero.
pub fn average_precision(docs: impl IntoIterator<Item = DocIdx>, relevant: &BTreeSet<DocIdx>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Config("average precision needs at least one relevant document".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in docs.into_iter().enumerate() {
        if relevant.contains(&d) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

pub fn list_average_precision(list: &RankedList, relevant: &BTreeSet<DocIdx>) -> Result<f64> {
    average_precision(list.docs(), relevant)
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Config("cannot average an empty set".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Arithmetic mean of per-query AP.
pub fn mean_average_precision(aps: &[f64]) -> Result<f64> {
    mean(aps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub labels: Vec<String>,
    pub probabilities: Vec<f64>,
    pub samples: u64,
}

impl ActionDistribution {
    pub fn from_counts(labels: &[&str], counts: &[u64]) -> Result<Self> {
        if labels.len() != counts.len() {
            return Err(Error::Contract("one count per outcome label".into()));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Validation("an action distribution needs at least one sample".into()));
        }
        Ok(Self {
            labels: labels.iter().map(|s| (*s).to_owned()).collect(),
            probabilities: counts.iter().map(|&c| c as f64 / total as f64).collect(),
            samples: total,
        })
    }

    /// Empirical distribution of four-way choice indices.
    pub fn from_choices(choices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut counts = [0u64; 4];
        for c in choices {
            let slot = counts
                .get_mut(c)
                .ok_or_else(|| Error::Validation(format!("choice index {c} is outside 0..4")))?;
            *slot += 1;
        }
        Self::from_counts(&RANK_LABELS, &counts)
    }

    pub fn one_hot(&self) -> bool {
        self.probabilities.iter().filter(|&&p| p > 0.0).count() == 1
    }
}

/// Shannon entropy in nats, with 0·ln 0 = 0.
pub fn entropy(p: &ActionDistribution) -> f64 {
    0.0 - p.probabilities.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// KL(p̃‖q̃) after adding `smoothing` to every outcome of both sides and
/// renormalizing.
pub fn kl_divergence(p: &ActionDistribution, q: &ActionDistribution, smoothing: f64) -> Result<f64> {
    if p.labels != q.labels {
        return Err(Error::Validation(format!(
            "outcome labels differ: {:?} vs {:?}",
            p.labels, q.labels
        )));
    }
    let smooth = |v: &[f64]| {
        let z: f64 = v.iter().sum::<f64>() + smoothing * v.len() as f64;
        v.iter().map(|&x| (x + smoothing) / z).collect::<Vec<_>>()
    };
    let (ps, qs) = (smooth(&p.probabilities), smooth(&q.probabilities));
    let kl: f64 = ps
        .iter()
        .zip(&qs)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// A logged moment where the system showed its ranked list and the user
/// had to pick among the relevant documents on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentScenario {
    pub query: String,
    pub docs: Vec<DocIdx>,
    pub state: SimulatorState,
}

/// Pooled empirical distribution of `choose` over every scenario, sampled
/// `samples_per_scenario` times each.
pub fn action_distribution<S>(
    scenarios: &[S],
    samples_per_scenario: usize,
    mut choose: impl FnMut(&S) -> usize,
) -> Result<ActionDistribution> {
    if scenarios.is_empty() || samples_per_scenario == 0 {
        return Err(Error::Validation("action distribution requested over zero samples".into()));
    }
    let mut choices = Vec::with_capacity(scenarios.len() * samples_per_scenario);
    for s in scenarios {
        for _ in 0..samples_per_scenario {
            choices.push(choose(s));
        }
    }
    ActionDistribution::from_choices(choices)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub simulator: String,
    pub manager: String,
    pub features: String,
    pub map: f64,
    pub ret: f64,
}

pub fn format_metrics_table(rows: &[MetricsRow]) -> String {
    let mut out = String::from("simulator\tmanager\tfeatures\tMAP\tReturn\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{:.4}\t{:.4}", r.simulator, r.manager, r.features, r.map, r.ret);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub systems: Vec<(String, ActionDistribution)>,
    /// `(p, q, KL(p‖q))` for every ordered pair.
    pub kl: Vec<(String, String, f64)>,
    pub entropy: Vec<(String, f64)>,
}

pub fn compare_behaviors(systems: Vec<(String, ActionDistribution)>, smoothing: f64) -> Result<BehaviorReport> {
    let mut kl = Vec::new();
    for (a, p) in &systems {
        for (b, q) in &systems {
            if a != b {
                kl.push((a.clone(), b.clone(), kl_divergence(p, q, smoothing)?));
            }
        }
    }
    let entropy = systems.iter().map(|(n, p)| (n.clone(), entropy(p))).collect();
    Ok(BehaviorReport { systems, kl, entropy })
}

pub fn format_behavior_report(report: &BehaviorReport) -> String {
    let mut out = String::from("system\tentropy\tsamples\tdistribution\n");
    for ((name, h), (_, p)) in report.entropy.iter().zip(&report.systems) {
        let probs: Vec<String> = p.probabilities.iter().map(|x| format!("{x:.4}")).collect();
        let _ = writeln!(out, "{name}\t{h:.4}\t{}\t{}", p.samples, probs.join(","));
    }
    out.push_str("\np\tq\tKL(p||q)\n");
    for (a, b, v) in &report.kl {
        let _ = writeln!(out, "{a}\t{b}\t{v:.4}");
    }
    out
}
