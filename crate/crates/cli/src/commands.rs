use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use iscr_core::config::{overlay, RunConfig};
use iscr_core::corpus::{load_corpus, Corpus, QueryRecord};
use iscr_core::cotrain::{
    self, alternate_train, evaluate, fold_assignment, format_learning_curve, load_agents, save_agents, select, trial_split, Agents,
    SimulatorKind,
};
use iscr_core::episode::{document_scenarios, first_pass_scenarios, scenario_choice, EngineParams, EpisodeTrace};
use iscr_core::eval::{compare_behaviors, format_behavior_report, format_metrics_table, ActionDistribution, BehaviorReport, DocumentScenario, MetricsRow};
use iscr_core::features::FeatureMode;
use iscr_core::simulator::UserSimulator;
use iscr_core::synth::{generate, SynthParams};
use iscr_service::{read_choices, tasks_from_scenarios, Service, ServiceOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{CliError, ConfigArgs};

fn runtime(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("cannot write {}: {e}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| runtime(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| runtime(path, e))
}

fn write_traces(path: &Path, traces: &[EpisodeTrace]) -> Result<(), CliError> {
    let mut out = String::new();
    for t in traces {
        out.push_str(&serde_json::to_string(t).expect("trace serializes"));
        out.push('\n');
    }
    write(path, &out)
}

fn read_traces(path: &Path) -> Result<Vec<EpisodeTrace>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    Ok(RunConfig::load(&args.config, &args.set)?)
}

fn load_data(config: &RunConfig) -> Result<(Corpus, Vec<QueryRecord>), CliError> {
    let paths = config.corpus.paths()?;
    Ok(load_corpus(&paths, &config.corpus.load_options())?)
}

fn checkpoint_dir(config: &RunConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| config.output_dir.join("checkpoints"))
}

fn simulator_label(kind: SimulatorKind) -> &'static str {
    match kind {
        SimulatorKind::Rule => "rule",
        SimulatorKind::Dqn => "dqn",
    }
}

fn feature_label(mode: FeatureMode) -> &'static str {
    match mode {
        FeatureMode::Raw => "raw",
        FeatureMode::HumanRaw => "human+raw",
    }
}

pub fn metrics_row(config: &RunConfig, map: f64, ret: f64) -> MetricsRow {
    MetricsRow {
        simulator: simulator_label(config.simulator.kind).into(),
        manager: config.manager.variant.label().into(),
        features: feature_label(config.engine.features.mode).into(),
        map,
        ret,
    }
}

pub fn gen(out: &Path, config: Option<&Path>, set: &[String]) -> Result<(), CliError> {
    let text = match config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Data(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let params: SynthParams = overlay(&SynthParams::default(), &text, set)?;
    let corpus = generate(&params)?;
    let paths = corpus.write(out)?;
    println!(
        "wrote {} documents, {} queries and {} topics to {}",
        corpus.documents.len(),
        corpus.queries.len(),
        corpus.topics.len(),
        paths.corpus.parent().unwrap_or(out).display()
    );
    Ok(())
}

struct Split {
    train: Vec<QueryRecord>,
    valid: Vec<QueryRecord>,
    test: Vec<QueryRecord>,
}

fn split(config: &RunConfig, queries: &[QueryRecord]) -> Result<Split, CliError> {
    let folds = fold_assignment(queries.len(), config.crossval.folds, config.seed)?;
    let (tr, va, te) = trial_split(&folds, config.crossval.trial);
    Ok(Split {
        train: select(queries, &tr),
        valid: select(queries, &va),
        test: select(queries, &te),
    })
}

fn ids(qs: &[QueryRecord]) -> Vec<&str> {
    qs.iter().map(|q| q.id.as_str()).collect()
}

pub fn train(args: &ConfigArgs) -> Result<(), CliError> {
    let config = load_config(args)?;
    let (corpus, queries) = load_data(&config)?;
    let s = split(&config, &queries)?;
    let report = alternate_train(
        &corpus,
        &s.train,
        &s.valid,
        &config.engine,
        &config.schedule,
        &config.manager,
        config.simulator_dqn(),
        config.seed,
    )?;

    let out = &config.output_dir;
    config.write_resolved(out)?;
    write(&out.join("learning_curve.tsv"), &format_learning_curve(&report.log))?;
    let ck = out.join("checkpoints");
    if ck.exists() {
        std::fs::remove_dir_all(&ck).map_err(|e| runtime(&ck, e))?;
    }
    save_agents(&report.best, &ck)?;
    write_traces(&out.join("traces.jsonl"), &report.traces)?;
    let split_json = serde_json::json!({
        "train": ids(&s.train),
        "valid": ids(&s.valid),
        "test": ids(&s.test),
        "best_epoch": report.best_epoch,
    });
    write(&out.join("split.json"), &serde_json::to_string_pretty(&split_json).expect("json"))?;

    print!("{}", format_learning_curve(&report.log));
    println!("best epoch {} (checkpoints in {})", report.best_epoch, ck.display());
    Ok(())
}

fn eval_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(fold as u64))
}

pub fn eval(args: &ConfigArgs, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let config = load_config(args)?;
    let (corpus, queries) = load_data(&config)?;
    let dir = checkpoint_dir(&config, checkpoint);
    let agents = load_agents(&dir, &config.engine, &config.manager, config.simulator_dqn())?;
    let folds = fold_assignment(queries.len(), config.crossval.folds, config.seed)?;

    let mut table = String::from("fold\tqueries\tMAP\tReturn\n");
    let (mut maps, mut rets, mut traces) = (Vec::new(), Vec::new(), Vec::new());
    for (i, fold) in folds.iter().enumerate() {
        let test = select(&queries, fold);
        let e = evaluate(&test, &agents, &corpus, &config.engine, &mut eval_rng(config.seed, i))?;
        let _ = writeln!(table, "{i}\t{}\t{:.4}\t{:.4}", test.len(), e.map, e.mean_return);
        maps.push(e.map);
        rets.push(e.mean_return);
        traces.extend(e.traces);
    }
    let row = metrics_row(&config, iscr_core::eval::mean(&maps)?, iscr_core::eval::mean(&rets)?);
    let report = format!("{table}\n{}", format_metrics_table(&[row]));

    let out = &config.output_dir;
    config.write_resolved(out)?;
    write(&out.join("metrics.tsv"), &report)?;
    write_traces(&out.join("eval_traces.jsonl"), &traces)?;
    print!("{report}");
    Ok(())
}

pub fn crossval(args: &ConfigArgs) -> Result<(), CliError> {
    let config = load_config(args)?;
    let (corpus, queries) = load_data(&config)?;
    let report = cotrain::crossval(
        &corpus,
        &queries,
        config.crossval.folds,
        &config.engine,
        &config.schedule,
        &config.manager,
        config.simulator_dqn(),
        config.seed,
    )?;
    let out = &config.output_dir;
    config.write_resolved(out)?;
    let mut table = String::from("fold\tqueries\tMAP\tReturn\n");
    for f in &report.folds {
        let _ = writeln!(table, "{}\t{}\t{:.4}\t{:.4}", f.trial, f.test_traces.len(), f.test_map, f.test_return);
        write(&out.join(format!("fold_{:02}_learning_curve.tsv", f.trial)), &format_learning_curve(&f.log))?;
    }
    let text = format!("{table}\n{}", format_metrics_table(&[metrics_row(&config, report.map, report.ret)]));
    write(&out.join("crossval.tsv"), &text)?;
    let traces: Vec<EpisodeTrace> = report.folds.iter().flat_map(|f| f.test_traces.iter().cloned()).collect();
    write_traces(&out.join("test_traces.jsonl"), &traces)?;
    print!("{text}");
    Ok(())
}

fn sample_scenarios(pool: &[DocumentScenario], n: usize, seed: u64) -> Result<Vec<DocumentScenario>, CliError> {
    if pool.is_empty() {
        return Err(CliError::Data("no list shows four relevant documents; nothing to compare on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect())
}

/// Distribution of simulated choices over `scenarios`, with key-term
/// randomness drawn from `seed`.
pub fn simulated_distribution(
    scenarios: &[DocumentScenario],
    queries: &[QueryRecord],
    corpus: &Corpus,
    simulator: &UserSimulator,
    samples_per_scenario: usize,
    seed: u64,
) -> Result<ActionDistribution, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut choices = Vec::with_capacity(scenarios.len() * samples_per_scenario);
    for s in scenarios {
        let q = queries
            .iter()
            .find(|q| q.id == s.query)
            .ok_or_else(|| CliError::Data(format!("scenario names unknown query {}", s.query)))?;
        for _ in 0..samples_per_scenario {
            choices.push(scenario_choice(s, q, corpus, simulator, &mut rng)?);
        }
    }
    Ok(ActionDistribution::from_choices(choices)?)
}

pub fn behavior_report(
    config: &RunConfig,
    corpus: &Corpus,
    queries: &[QueryRecord],
    learned: Option<&Agents>,
    human: &[PathBuf],
    traces: Option<&[EpisodeTrace]>,
) -> Result<BehaviorReport, CliError> {
    let pool = match traces {
        Some(t) => document_scenarios(t, queries),
        None => first_pass_scenarios(queries, corpus, &config.engine)?,
    };
    let scenarios = sample_scenarios(&pool, config.compare.scenarios, config.seed)?;
    let per = config.compare.samples_per_scenario;
    let mut systems = vec![(
        "rule".to_owned(),
        simulated_distribution(&scenarios, queries, corpus, &UserSimulator::RuleBased, per, config.seed)?,
    )];
    if let Some(a) = learned {
        systems.push(("dqn".to_owned(), simulated_distribution(&scenarios, queries, corpus, &a.simulator, per, config.seed)?));
    }
    if !human.is_empty() {
        let mut choices = Vec::new();
        for path in human {
            let records = read_choices(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
            choices.extend(records.into_iter().map(|r| r.choice));
        }
        systems.push(("human".to_owned(), ActionDistribution::from_choices(choices)?));
    }
    Ok(compare_behaviors(systems, config.compare.kl_smoothing)?)
}

pub fn compare(args: &ConfigArgs, checkpoint: Option<PathBuf>, human: &[PathBuf], traces: Option<PathBuf>) -> Result<(), CliError> {
    let config = load_config(args)?;
    let (corpus, queries) = load_data(&config)?;
    let learned = match &checkpoint {
        Some(dir) => {
            let dqn = config.simulator_dqn().ok_or_else(|| {
                CliError::Data("--checkpoint needs simulator.kind = \"dqn\" to know the user network shape".into())
            })?;
            Some(load_agents(dir, &config.engine, &config.manager, Some(dqn))?)
        }
        None => None,
    };
    let traces = traces.as_deref().map(read_traces).transpose()?;
    let report = behavior_report(&config, &corpus, &queries, learned.as_ref(), human, traces.as_deref())?;
    let text = format_behavior_report(&report);
    let out = &config.output_dir;
    config.write_resolved(out)?;
    write(&out.join("behavior.tsv"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn serve(args: &ConfigArgs, checkpoint: Option<PathBuf>, addr: SocketAddr) -> Result<(), CliError> {
    let config = load_config(args)?;
    let (corpus, queries) = load_data(&config)?;
    let dir = checkpoint_dir(&config, checkpoint);
    let agents = load_agents(&dir, &config.engine, &config.manager, None)?;
    let tasks = humaneval_tasks(&config.engine, &corpus, &queries, &agents.manager, config.seed)?;

    let out = &config.output_dir;
    config.write_resolved(out)?;
    let options = ServiceOptions {
        session_log: Some(out.join("sessions.jsonl")),
        choice_log: Some(out.join("choices.jsonl")),
        ..ServiceOptions::default()
    };
    let n_tasks = tasks.len();
    let service = Service::new(corpus, queries, agents.manager, config.engine.clone(), tasks, options)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(format!("cannot start runtime: {e}")))?;
    println!("serving {n_tasks} human-evaluation tasks on http://{addr}/api/v1");
    rt.block_on(iscr_service::serve(Arc::new(service), addr))
        .map_err(|e| CliError::Runtime(format!("server on {addr}: {e}")))
}

/// Tasks from greedy rollouts of `manager` with the rule-based user, plus
/// first-pass lists.
fn humaneval_tasks(
    params: &EngineParams,
    corpus: &Corpus,
    queries: &[QueryRecord],
    manager: &iscr_core::dqn::QLearner,
    seed: u64,
) -> Result<Vec<iscr_service::HumanEvalTask>, CliError> {
    let agents = Agents {
        manager: manager.clone(),
        simulator: UserSimulator::RuleBased,
    };
    let traces = evaluate(queries, &agents, corpus, params, &mut ChaCha8Rng::seed_from_u64(seed))?.traces;
    let mut scenarios = document_scenarios(&traces, queries);
    scenarios.extend(first_pass_scenarios(queries, corpus, params)?);
    Ok(tasks_from_scenarios(&scenarios, queries))
}
