use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use iscr_core::corpus::{Corpus, LoadOptions, QueryRecord};
use iscr_core::cotrain::{evaluate, Agents};
use iscr_core::dialogue::{SystemAction, UTTERANCE_DOCUMENTS, UTTERANCE_REQUEST, UTTERANCE_TOPIC};
use iscr_core::dqn::{Architecture, DqnParams, Head, Mlp, QLearner};
use iscr_core::episode::{document_scenarios, replay_maps, EngineParams};
use iscr_core::simulator::{UserResponse, UserSimulator};
use iscr_core::synth::{generate, SynthParams};
use iscr_service::wire::*;
use iscr_service::{router, tasks_from_scenarios, Service, ServiceOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

fn world() -> (Corpus, Vec<QueryRecord>) {
    generate(&SynthParams::default()).unwrap().index(&LoadOptions::default()).unwrap()
}

/// A manager that always selects `action`.
fn fixed_manager(action: SystemAction, params: &EngineParams) -> QLearner {
    let mut net = Mlp::zeros(Architecture {
        input_dim: params.manager_dim(),
        hidden: vec![],
        n_actions: 4,
        head: Head::Linear,
    });
    let n = net.num_params();
    net.params_mut()[n - 4 + action.index()] = 1.0;
    QLearner::from_network(&DqnParams::default(), net)
}

fn service(action: SystemAction, options: ServiceOptions) -> Arc<Service> {
    let (corpus, queries) = world();
    let params = EngineParams::default();
    let manager = fixed_manager(action, &params);
    let agents = Agents {
        manager: fixed_manager(SystemAction::ReturnDocuments, &params),
        simulator: UserSimulator::RuleBased,
    };
    let traces = evaluate(&queries, &agents, &corpus, &params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().traces;
    let tasks = tasks_from_scenarios(&document_scenarios(&traces, &queries), &queries);
    Arc::new(Service::new(corpus, queries, manager, params, tasks, options).unwrap())
}

async fn call<T: DeserializeOwned>(svc: &Arc<Service>, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Result<T, Value>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(Arc::clone(svc)).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v: Value = serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("non-JSON body: {}", String::from_utf8_lossy(&bytes)));
    if status.is_success() {
        (status, Ok(serde_json::from_value(v).unwrap()))
    } else {
        (status, Err(v))
    }
}

async fn create(svc: &Arc<Service>, body: Value) -> (StatusCode, Result<SessionView, Value>) {
    call(svc, Method::POST, "/api/v1/sessions", Some(body)).await
}

async fn respond(svc: &Arc<Service>, id: &str, body: Value) -> (StatusCode, Result<SessionView, Value>) {
    call(svc, Method::POST, &format!("/api/v1/sessions/{id}/respond"), Some(body)).await
}

#[tokio::test]
async fn known_query_opens_with_one_of_the_four_prompts() {
    for action in SystemAction::ALL {
        let svc = service(action, ServiceOptions::default());
        let (status, view) = create(&svc, json!({"query_id": "q000"})).await;
        assert_eq!(status, StatusCode::OK);
        let view = view.unwrap();
        assert_eq!(view.status, Status::Active);
        assert_eq!(view.turn, 0);
        assert_eq!(view.ranking.len(), 10);
        let prompt = view.prompt.unwrap();
        let u = prompt.utterance.as_str();
        assert!(
            [UTTERANCE_DOCUMENTS, UTTERANCE_REQUEST, UTTERANCE_TOPIC].contains(&u) || u.starts_with("Is it related to "),
            "{u}"
        );
        assert_eq!(prompt.action, action);
        match (&prompt.payload, action) {
            (PayloadView::Documents { documents }, SystemAction::ReturnDocuments) => assert_eq!(documents.len(), 49),
            (PayloadView::KeyTerm { term }, SystemAction::ReturnKeyTerm) => assert_eq!(u, format!("Is it related to {term}?")),
            (PayloadView::Request, SystemAction::ReturnRequest) => {}
            (PayloadView::Topics { topics }, SystemAction::ReturnTopic) => assert!(!topics.is_empty() && topics.len() <= 4),
            other => panic!("unexpected payload {other:?}"),
        }
    }
}

#[tokio::test]
async fn create_errors() {
    let svc = service(SystemAction::ReturnRequest, ServiceOptions::default());
    let (status, body) = create(&svc, json!({"query_id": "nope"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body.unwrap_err()["error"], "not_found");
    assert_eq!(create(&svc, json!({"query_text": "   "})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(create(&svc, json!({"query_text": "zzzz"})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(create(&svc, json!({})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(create(&svc, json!({"query_id": "q000", "query_text": "b001"})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(create(&svc, json!({"query": "q000"})).await.0, StatusCode::BAD_REQUEST);
    let (status, _) = call::<Value>(&svc, Method::POST, "/api/v1/sessions/unknown/respond", Some(json!({"kind": "provide_term", "term": "x"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn free_text_query_retrieves_documents() {
    let svc = service(SystemAction::ReturnRequest, ServiceOptions::default());
    let term = svc.corpus().term(svc.corpus().vocabulary()[0]).to_owned();
    let (status, view) = create(&svc, json!({"query_text": term.to_uppercase()})).await;
    assert_eq!(status, StatusCode::OK);
    let view = view.unwrap();
    assert!(!view.ranking.is_empty());
    assert_eq!(view.query_terms, vec![term]);
    assert_eq!(view.query_id, None);
}

#[tokio::test]
async fn mismatched_response_names_the_expected_kind() {
    let svc = service(SystemAction::ReturnRequest, ServiceOptions::default());
    let id = create(&svc, json!({"query_id": "q001"})).await.1.unwrap().session_id;
    let (status, body) = respond(&svc, &id, json!({"kind": "yes_no", "yes": true})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let msg = body.unwrap_err()["message"].as_str().unwrap().to_owned();
    assert!(msg.contains("provide_term"), "{msg}");
    let (status, _) = respond(&svc, &id, json!({"kind": "shout"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    // Rejected responses leave the session untouched.
    let view = call::<SessionView>(&svc, Method::GET, &format!("/api/v1/sessions/{id}"), None).await.1.unwrap();
    assert_eq!(view.turn, 0);
}

#[tokio::test]
async fn documents_must_come_from_the_displayed_list() {
    let svc = service(SystemAction::ReturnDocuments, ServiceOptions::default());
    let view = create(&svc, json!({"query_id": "q002"})).await.1.unwrap();
    let PayloadView::Documents { documents } = view.prompt.unwrap().payload else { unreachable!() };
    let shown: BTreeSet<String> = documents.iter().map(|d| d.doc_id.clone()).collect();
    let hidden = svc.corpus().documents().iter().map(|d| d.id.clone()).find(|d| !shown.contains(d)).unwrap();
    let (status, _) = respond(&svc, &view.session_id, json!({"kind": "pick_document", "doc": hidden})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn stalled_session_fails_after_the_fourth_turn() {
    let svc = service(SystemAction::ReturnRequest, ServiceOptions::default());
    let id = create(&svc, json!({"query_id": "q003"})).await.1.unwrap().session_id;
    let mut last = None;
    for turn in 1..=4 {
        let (status, view) = respond(&svc, &id, json!({"kind": "provide_term", "term": "unheard-of"})).await;
        assert_eq!(status, StatusCode::OK);
        let view = view.unwrap();
        assert_eq!(view.turn, turn);
        last = Some(view);
    }
    let view = last.unwrap();
    assert_eq!(view.status, Status::Failure);
    assert!(view.prompt.is_none());
    let summary = view.summary.unwrap();
    assert_eq!(summary.outcome, Status::Failure);
    assert_eq!(summary.turns, 4);
    assert_eq!(summary.map_trajectory.len(), 5);
    assert!(summary.map_trajectory.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(summary.ret, -4.0);
    let (status, body) = respond(&svc, &id, json!({"kind": "provide_term", "term": "more"})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body.unwrap_err()["error"], "conflict");
}

#[tokio::test]
async fn picking_relevant_documents_reaches_success_and_the_log_replays() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("sessions.jsonl");
    let svc = service(
        SystemAction::ReturnDocuments,
        ServiceOptions {
            session_log: Some(log.clone()),
            ..ServiceOptions::default()
        },
    );
    let (_, queries) = world();
    let mut successes = 0;
    for q in &queries {
        let mut view = create(&svc, json!({"query_id": q.id})).await.1.unwrap();
        while view.status == Status::Active {
            let PayloadView::Documents { documents } = &view.prompt.as_ref().unwrap().payload else { unreachable!() };
            let pick = documents
                .iter()
                .find(|d| q.relevant.contains(&svc.corpus().doc_idx(&d.doc_id).unwrap()))
                .map_or_else(|| documents[0].doc_id.clone(), |d| d.doc_id.clone());
            view = respond(&svc, &view.session_id, json!({"kind": "pick_document", "doc": pick})).await.1.unwrap();
        }
        let s = view.summary.unwrap();
        assert_eq!(s.turns, s.map_trajectory.len() - 1);
        assert!(s.judged);
        if s.outcome == Status::Success {
            successes += 1;
            assert!(*s.map_trajectory.last().unwrap() >= 0.6);
            assert!(s.map_trajectory[1..s.turns].iter().all(|&m| m < 0.6));
        } else {
            assert_eq!(s.turns, 4);
        }
    }
    assert!(successes > 0);
    assert_replays(&log, svc.corpus(), &queries, queries.len());
}

fn assert_replays(log: &Path, corpus: &Corpus, queries: &[QueryRecord], expected_ends: usize) {
    let text = std::fs::read_to_string(log).unwrap();
    let events: Vec<LogEvent> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let params = EngineParams::default();
    let mut ends = 0;
    for e in &events {
        let LogEvent::End { session, trace, .. } = e else { continue };
        let (query_id, terms) = events
            .iter()
            .find_map(|c| match c {
                LogEvent::Create { session: s, query_id, query_terms, .. } if s == session => Some((query_id.clone(), query_terms.clone())),
                _ => None,
            })
            .unwrap();
        let known = query_id.as_ref().and_then(|id| queries.iter().find(|q| &q.id == id));
        let record = QueryRecord {
            id: query_id.clone().unwrap_or_default(),
            terms,
            relevant: known.map(|q| q.relevant.clone()).unwrap_or_default(),
            topic_ranking: known.map(|q| q.topic_ranking.clone()).unwrap_or_default(),
        };
        assert_eq!(replay_maps(trace, &record, corpus, &params.retrieval).unwrap(), trace.map_sequence());
        let turns = events.iter().filter(|t| matches!(t, LogEvent::Turn { session: s, .. } if s == session)).count();
        assert_eq!(turns, trace.turns.len());
        ends += 1;
    }
    assert_eq!(ends, expected_ends);
}

#[tokio::test]
async fn free_text_sessions_replay_too() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("sessions.jsonl");
    let svc = service(
        SystemAction::ReturnKeyTerm,
        ServiceOptions {
            session_log: Some(log.clone()),
            ..ServiceOptions::default()
        },
    );
    let (_, queries) = world();
    let text = queries[0].terms.keys().cloned().collect::<Vec<_>>().join(" ");
    let mut view = create(&svc, json!({"query_text": text})).await.1.unwrap();
    let mut yes = true;
    while view.status == Status::Active {
        let body = match view.prompt.as_ref().unwrap().payload {
            PayloadView::KeyTerm { .. } => json!({"kind": "yes_no", "yes": yes}),
            _ => json!({"kind": "provide_term", "term": text}),
        };
        yes = !yes;
        view = respond(&svc, &view.session_id, body).await.1.unwrap();
    }
    let s = view.summary.unwrap();
    assert!(!s.judged);
    assert_eq!(s.outcome, Status::Failure);
    assert!(s.map_trajectory.iter().all(|&m| m == 0.0));
    assert_replays(&log, svc.corpus(), &queries, 1);
}

#[tokio::test]
async fn terminate_ends_the_session() {
    let svc = service(SystemAction::ReturnTopic, ServiceOptions::default());
    let id = create(&svc, json!({"query_id": "q004"})).await.1.unwrap().session_id;
    let view = respond(&svc, &id, json!({"kind": "terminate", "success": true})).await.1.unwrap();
    assert_eq!(view.status, Status::Success);
    assert_eq!(view.summary.unwrap().turns, 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_are_independent() {
    let svc = service(SystemAction::ReturnRequest, ServiceOptions::default());
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let svc = Arc::clone(&svc);
            tokio::spawn(async move { create(&svc, json!({"query_id": format!("q{:03}", i % 3)})).await.1.unwrap() })
        })
        .collect();
    let mut views = Vec::new();
    for h in handles {
        views.push(h.await.unwrap());
    }
    let ids: BTreeSet<&str> = views.iter().map(|v| v.session_id.as_str()).collect();
    assert_eq!(ids.len(), 8);

    let pushes: Vec<_> = views
        .iter()
        .take(4)
        .map(|v| {
            let svc = Arc::clone(&svc);
            let id = v.session_id.clone();
            tokio::spawn(async move { respond(&svc, &id, json!({"kind": "provide_term", "term": "t000w00"})).await })
        })
        .collect();
    for p in pushes {
        assert_eq!(p.await.unwrap().0, StatusCode::OK);
    }
    for (i, v) in views.iter().enumerate() {
        let now = call::<SessionView>(&svc, Method::GET, &format!("/api/v1/sessions/{}", v.session_id), None).await.1.unwrap();
        assert_eq!(now.turn, usize::from(i < 4));
        if i >= 4 {
            assert_eq!(now.ranking, v.ranking);
        }
    }
}

#[tokio::test]
async fn idle_sessions_are_abandoned() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("sessions.jsonl");
    let svc = service(
        SystemAction::ReturnRequest,
        ServiceOptions {
            idle_timeout: Duration::from_millis(50),
            session_log: Some(log.clone()),
            ..ServiceOptions::default()
        },
    );
    let id = create(&svc, json!({"query_id": "q005"})).await.1.unwrap().session_id;
    tokio::time::sleep(Duration::from_millis(120)).await;
    let (status, body) = respond(&svc, &id, json!({"kind": "provide_term", "term": "x"})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(body.unwrap_err()["message"].as_str().unwrap().contains("abandoned"));
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.lines().any(|l| l.contains("\"event\":\"end\"") && l.contains("\"status\":\"abandoned\"")));

    tokio::time::sleep(Duration::from_millis(120)).await;
    svc.sweep_idle();
    assert_eq!(call::<Value>(&svc, Method::GET, &format!("/api/v1/sessions/{id}"), None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn humaneval_flow() {
    let dir = tempfile::tempdir().unwrap();
    let choices = dir.path().join("choices.jsonl");
    let options = ServiceOptions {
        choice_log: Some(choices.clone()),
        ..ServiceOptions::default()
    };
    let svc = service(SystemAction::ReturnRequest, options.clone());
    let total = svc.models().humaneval_tasks;
    assert!(total >= 10, "{total}");

    let (status, _) = call::<Value>(&svc, Method::GET, "/api/v1/humaneval/task", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let mut submitted = 0u64;
    for subject in ["s01", "s02", "s03"] {
        loop {
            let next = call::<NextTask>(&svc, Method::GET, &format!("/api/v1/humaneval/task?subject={subject}"), None).await.1.unwrap();
            let Some(task) = next.task else {
                assert_eq!(next.remaining, 0);
                break;
            };
            assert_eq!(task.candidates.len(), 4);
            assert_eq!(task.candidates.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
            let bad = json!({"subject": subject, "task_id": task.task_id, "choice": 5});
            assert_eq!(call::<Value>(&svc, Method::POST, "/api/v1/humaneval/choice", Some(bad)).await.0, StatusCode::BAD_REQUEST);
            let ok = json!({"subject": subject, "task_id": task.task_id, "choice": (submitted % 3) as usize});
            let ack = call::<ChoiceAck>(&svc, Method::POST, "/api/v1/humaneval/choice", Some(ok.clone())).await.1.unwrap();
            submitted += 1;
            assert_eq!(ack.total, total);
            assert_eq!(call::<Value>(&svc, Method::POST, "/api/v1/humaneval/choice", Some(ok)).await.0, StatusCode::CONFLICT);
        }
    }
    let unknown = json!({"subject": "s01", "task_id": "t9999", "choice": 0});
    assert_eq!(call::<Value>(&svc, Method::POST, "/api/v1/humaneval/choice", Some(unknown)).await.0, StatusCode::NOT_FOUND);

    let dist = call::<DistributionView>(&svc, Method::GET, "/api/v1/humaneval/distribution", None).await.1.unwrap();
    assert_eq!(dist.samples, submitted);
    assert_eq!(submitted, 3 * total as u64);
    let d = dist.distribution.unwrap();
    assert_eq!(d.samples, submitted);
    assert_eq!(d.probabilities[3], 0.0);

    let records = iscr_service::read_choices(&choices).unwrap();
    assert_eq!(records.len() as u64, submitted);

    // A restarted service still refuses repeats.
    let again = service(SystemAction::ReturnRequest, options);
    assert_eq!(again.distribution().samples, submitted);
    let next = again.next_task("s01").unwrap();
    assert!(next.task.is_none());
}

#[tokio::test]
async fn models_describe_the_manager_and_utterances() {
    let svc = service(SystemAction::ReturnRequest, ServiceOptions::default());
    let m = call::<ModelsView>(&svc, Method::GET, "/api/v1/models", None).await.1.unwrap();
    assert_eq!(m.api_version, "v1");
    assert_eq!(m.manager.input_dim, EngineParams::default().manager_dim());
    assert_eq!(m.max_turns, 4);
    assert_eq!(m.map_threshold, 0.6);
    assert_eq!(m.queries.len(), 30);
    assert_eq!(m.utterances["return_request"], UTTERANCE_REQUEST);
    assert_eq!(m.utterances["return_key_term"], "Is it related to {term}?");
}

#[test]
fn mismatched_manager_is_rejected() {
    let (corpus, queries) = world();
    let params = EngineParams::default();
    let mut wrong = params.clone();
    wrong.features.raw_width = 10;
    let manager = fixed_manager(SystemAction::ReturnRequest, &wrong);
    assert!(Service::new(corpus, queries, manager, params, vec![], ServiceOptions::default()).is_err());
}

#[test]
fn response_wire_format() {
    let r: UserResponse = serde_json::from_value(json!({"kind": "pick_topic", "topic": "topic01"})).unwrap();
    assert_eq!(r, UserResponse::PickTopic { topic: "topic01".into() });
}
