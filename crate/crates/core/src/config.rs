//! Run configuration: a named preset, deep-merged with a TOML file and
//! `key.path=value` overrides, with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusPaths, LoadOptions};
use crate::cotrain::{SimulatorKind, TrainSchedule};
use crate::dqn::DqnParams;
use crate::episode::EngineParams;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_KL_SMOOTHING;

/// Name of the fully resolved config written next to every run's outputs.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Two 1024-wide hidden layers, batch 256, C = 500.
    Paper,
    /// 64-wide networks, batch 32, C = 50, 20 epochs.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Directory holding corpus.jsonl, queries.jsonl and topics.jsonl;
    /// the explicit paths below override single files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topics: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_terms: Option<PathBuf>,
    pub key_term_count: usize,
    pub require_topics: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let o = LoadOptions::default();
        Self {
            dir: None,
            corpus: None,
            queries: None,
            topics: None,
            key_terms: None,
            key_term_count: o.key_term_count,
            require_topics: o.require_topics,
        }
    }
}

impl CorpusConfig {
    pub fn paths(&self) -> Result<CorpusPaths> {
        let base = self.dir.as_ref().map(CorpusPaths::in_dir);
        let pick = |explicit: &Option<PathBuf>, from_dir: Option<PathBuf>, name: &str| {
            explicit
                .clone()
                .or(from_dir)
                .ok_or_else(|| Error::Config(format!("corpus.{name} is not set and no corpus.dir was given")))
        };
        Ok(CorpusPaths {
            corpus: pick(&self.corpus, base.as_ref().map(|b| b.corpus.clone()), "corpus")?,
            queries: pick(&self.queries, base.as_ref().map(|b| b.queries.clone()), "queries")?,
            topics: self.topics.clone().or(base.as_ref().and_then(|b| b.topics.clone())),
            key_terms: self.key_terms.clone(),
        })
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            key_term_count: self.key_term_count,
            require_topics: self.require_topics,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    pub kind: SimulatorKind,
    pub dqn: DqnParams,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            kind: SimulatorKind::Dqn,
            dqn: DqnParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossvalConfig {
    pub folds: usize,
    /// Trial whose split `train` and `eval` use.
    pub trial: usize,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        Self { folds: 10, trial: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub kl_smoothing: f64,
    pub scenarios: usize,
    pub samples_per_scenario: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            kl_smoothing: DEFAULT_KL_SMOOTHING,
            scenarios: 1000,
            samples_per_scenario: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub engine: EngineParams,
    pub manager: DqnParams,
    pub simulator: SimulatorConfig,
    pub schedule: TrainSchedule,
    pub crossval: CrossvalConfig,
    pub compare: CompareConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (dqn, schedule) = match preset {
            Preset::Paper => (DqnParams::default(), TrainSchedule::default()),
            Preset::Desk => (
                DqnParams {
                    hidden: vec![64, 64],
                    batch_size: 32,
                    replay_capacity: 2000,
                    ..DqnParams::default()
                },
                TrainSchedule {
                    updates_per_phase: 50,
                    epochs: 20,
                    ..TrainSchedule::default()
                },
            ),
        };
        Self {
            preset,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            engine: EngineParams::default(),
            manager: dqn.clone(),
            simulator: SimulatorConfig {
                kind: SimulatorKind::Dqn,
                dqn,
            },
            schedule,
            crossval: CrossvalConfig::default(),
            compare: CompareConfig::default(),
        }
    }

    /// Preset named in `text` (default desk), overlaid with `text`, then
    /// with each `dotted.key=value` override.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let preset: Preset = match user.get("preset") {
            Some(v) => v.clone().try_into().map_err(|e| Error::Config(format!("preset: {e}")))?,
            None => Preset::Desk,
        };
        let config: RunConfig = overlay(&Self::preset(preset), &toml::to_string(&user).expect("table serializes"), &[])?;
        config.validate()?;
        Ok(config)
    }

    /// Read a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_relative(base);
        Ok(config)
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        let c = &mut self.corpus;
        for p in [&mut c.dir, &mut c.corpus, &mut c.queries, &mut c.topics, &mut c.key_terms].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        self.manager.validate()?;
        if self.simulator.kind == SimulatorKind::Dqn {
            self.simulator.dqn.validate()?;
        }
        self.schedule.validate()?;
        if self.crossval.trial >= self.crossval.folds {
            return Err(Error::Config(format!(
                "crossval.trial {} is out of range for {} folds",
                self.crossval.trial, self.crossval.folds
            )));
        }
        if self.compare.scenarios == 0 || self.compare.samples_per_scenario == 0 || !(self.compare.kl_smoothing > 0.0) {
            return Err(Error::Config("compare needs positive scenarios, samples and smoothing".into()));
        }
        Ok(())
    }

    pub fn simulator_dqn(&self) -> Option<&DqnParams> {
        (self.simulator.kind == SimulatorKind::Dqn).then_some(&self.simulator.dqn)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// `base` overlaid with `text` and then with `key.path=value` overrides.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, text: &str, overrides: &[String]) -> Result<T> {
    let mut user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
    for o in overrides {
        apply_override(&mut user, o)?;
    }
    let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(format!("config: {e}")))?;
    deep_merge(&mut merged, user);
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))
}

fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => deep_merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key.path=value")))?;
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("override {spec:?} has an empty key")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_owned()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {spec:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_owned(), value);
    Ok(())
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_desk_preset() {
        let c = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, RunConfig::preset(Preset::Desk));
        assert_eq!(c.schedule.updates_per_phase, 50);
        assert_eq!(c.manager.hidden, vec![64, 64]);
    }

    #[test]
    fn paper_preset_matches_published_hyperparameters() {
        let c = RunConfig::from_toml_str("preset = \"paper\"", &[]).unwrap();
        assert_eq!(c.manager.hidden, vec![1024, 1024]);
        assert_eq!(c.manager.batch_size, 256);
        assert_eq!(c.manager.learning_rate, 8e-4);
        assert_eq!(c.schedule.updates_per_phase, 500);
        assert_eq!(c.engine.features.simulator_width, 49);
        assert_eq!(c.engine.termination.map_threshold, 0.6);
        assert_eq!(c.engine.termination.max_turns, 4);
    }

    #[test]
    fn nested_keys_merge_instead_of_replacing() {
        let c = RunConfig::from_toml_str(
            "[manager]\nvariant = \"double\"\n[engine.dialogue]\nlambda = 50.0\n",
            &["schedule.epochs=3".into(), "simulator.kind=rule".into()],
        )
        .unwrap();
        assert_eq!(c.manager.variant, crate::dqn::Variant::Double);
        assert_eq!(c.manager.hidden, vec![64, 64]);
        assert_eq!(c.engine.dialogue.lambda, 50.0);
        assert_eq!(c.engine.dialogue.document_page, 49);
        assert_eq!(c.schedule.epochs, 3);
        assert_eq!(c.simulator.kind, SimulatorKind::Rule);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[manager]\nwidth = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
        assert!(RunConfig::from_toml_str("colour = 1", &[]).is_err());
        assert!(RunConfig::from_toml_str("", &["schedule.c".into()]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::from_toml_str("seed = 4\n[corpus]\ndir = \"data\"\n", &[]).unwrap();
        c.resolve_relative(Path::new("/tmp/x"));
        assert_eq!(c.corpus.dir.as_deref(), Some(Path::new("/tmp/x/data")));
        let back = RunConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.corpus.paths().unwrap().corpus, Path::new("/tmp/x/data/corpus.jsonl"));
    }

    #[test]
    fn overlay_works_for_other_tables() {
        let p: crate::synth::SynthParams = overlay(&crate::synth::SynthParams::default(), "seed = 3", &["n_docs=40".into()]).unwrap();
        assert_eq!((p.seed, p.n_docs, p.n_queries), (3, 40, 30));
        assert!(overlay(&crate::synth::SynthParams::default(), "", &["docs=40".into()]).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfig::from_toml_str("[schedule]\nc = 0\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("[engine.dialogue.costs]\nreturn_topic = 1.0\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("[crossval]\ntrial = 10\n", &[]).is_err());
    }
}
