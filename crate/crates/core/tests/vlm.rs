mod common;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use nalgebra::{Matrix3, Vector3};
use provlm::envelope::{ComponentVoxels, GaussianEnvelope};
use provlm::scene_graph::{EdgePolicy, RelationAssertion, SceneGraph, SceneSnapshot};
use provlm::sim::{render, SimScene};
use provlm::task_memory::{ActionKind, MotionRecord, Outcome, TaskMemory};
use provlm::vlm::http::{HttpBackend, HttpConfig};
use provlm::vlm::prompt::{build_coarse_prompt, build_fine_prompt, COARSE_SECTIONS, FINE_SECTIONS};
use provlm::vlm::scripted::{derive_plan, FaultConfig, ScriptedBackend, ScriptedConfig};
use provlm::vlm::*;

fn fixture_state() -> (SimScene, TaskMemory, SceneSnapshot) {
    let scene = common::load_fixture("two_step.json");
    let mut mem = TaskMemory::init_from_plan(scene.task.plan.clone().unwrap(), 3).unwrap();
    mem.activate_next();
    mem.record_motion(MotionRecord {
        subtask_id: "approach_block".into(),
        action_kind: ActionKind::Approach,
        target_category: "block".into(),
        parameters: BTreeMap::from([("verb".to_string(), "move_to".to_string())]),
        outcome: Outcome::Failure,
        timestamp: 1,
    })
    .unwrap();
    let mut g = SceneGraph::new();
    g.upsert_vertex("block", "block", GaussianEnvelope::new(Vector3::new(0.45, 0.1, 0.015), Matrix3::identity() * 2.25e-4, 0)).unwrap();
    g.upsert_vertex("table", "table", GaussianEnvelope::new(Vector3::new(0.3, 0.0, -0.02), Matrix3::from_diagonal(&Vector3::new(0.2, 0.16, 4e-4)), 0))
        .unwrap();
    g.set_components("block", vec![ComponentVoxels { component_id: 0, voxels: (0..27).map(|i| [i % 3, (i / 3) % 3, i / 9]).collect() }]).unwrap();
    let contact = RelationAssertion { src: "block".into(), dst: "table".into(), relation: "supporting".into(), constraints: BTreeMap::new() };
    g.update_edges(&[contact], EdgePolicy::AcceptAll).unwrap();
    (scene, mem, g.snapshot(2))
}

fn check_golden(name: &str, text: &str) {
    let path = common::fixture_path(&format!("prompts/{name}"));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, text).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden {}; rerun with UPDATE_GOLDEN=1", path.display()));
    assert_eq!(text, want, "prompt {name} drifted from its golden file");
}

#[test]
fn coarse_prompt_matches_golden() {
    let (scene, mem, snap) = fixture_state();
    let cfg = PromptConfig { camera_mount: scene.camera_mount, ..Default::default() };
    let p = build_coarse_prompt(&mem, &snap, &cfg).unwrap();
    assert_eq!(p.tags(), COARSE_SECTIONS.to_vec());
    assert!(p.images.is_empty());
    check_golden("coarse.txt", &p.render());
}

#[test]
fn fine_prompt_matches_golden() {
    let (scene, mem, snap) = fixture_state();
    let (obs, _) = render(&scene);
    let cfg = PromptConfig { camera_mount: scene.camera_mount, ..Default::default() };
    let p = build_fine_prompt(&mem, &snap, &obs, &cfg).unwrap();
    assert_eq!(p.tags(), FINE_SECTIONS.to_vec());
    assert!(p.section(SectionTag::Dt).unwrap().contains("effector: (0.300, 0.000, 0.350) m"));
    check_golden("fine.txt", &p.render());
    let with_image = build_fine_prompt(&mem, &snap, &obs, &PromptConfig { attach_images: true, ..cfg }).unwrap();
    assert_eq!(with_image.images.len(), 1);
    assert_eq!(with_image.hash(), p.hash());
}

#[test]
fn prompts_need_an_active_subtask() {
    let (_, mut mem, snap) = fixture_state();
    mem = TaskMemory::init_from_plan(mem.plan().to_vec(), 3).unwrap();
    assert_eq!(build_coarse_prompt(&mem, &snap, &PromptConfig::default()), Err(VlmError::NoActiveSubtask));
}

#[test]
fn scripted_segmentation_reproduces_ground_truth() {
    let scene = common::load_scenario("truss_slot");
    let (_, gt) = render(&scene);
    let backend = ScriptedBackend::default();
    let q = VlmQuery::new(ResponseKind::Segmentation, "segment".into(), QueryContext::Segmentation { frame: 0 });
    let VlmResponse::Segmentation { objects } = request(&backend, &q, &Oracle { scene: &scene, frame: Some(&gt) }).unwrap() else {
        panic!("wrong kind")
    };
    for o in &objects {
        let i = scene.index_of(&o.id).unwrap();
        assert!(scene.primitives[i].task_relevant);
        let px: Vec<(u32, u32)> = o.pixels.iter().map(|p| (p[0], p[1])).collect();
        assert_eq!(px, gt.pixels_of(i));
    }
    let visible = scene.primitives.iter().enumerate().filter(|(i, p)| p.task_relevant && !gt.pixels_of(*i).is_empty()).count();
    assert_eq!(objects.len(), visible);
}

#[test]
fn scripted_relations_follow_ground_truth() {
    let scene = common::load_scenario("truss_slot");
    let ids: Vec<String> = scene.primitives.iter().map(|p| p.id.clone()).collect();
    let pairs: Vec<(String, String)> = ids.iter().flat_map(|a| ids.iter().filter(move |b| a < *b).map(move |b| (a.clone(), b.clone()))).collect();
    let q = VlmQuery::new(ResponseKind::Relationships, "relate".into(), QueryContext::Relationships { frame: 0, pairs: pairs.clone() });
    let VlmResponse::Relationships { relations } = request(&ScriptedBackend::default(), &q, &Oracle { scene: &scene, frame: None }).unwrap() else {
        panic!("wrong kind")
    };
    assert_eq!(relations.len(), pairs.len());
    for r in relations {
        assert_eq!(r.relation, scene.relation_truth(&r.src, &r.dst).unwrap().to_string());
    }
}

#[test]
fn derived_plan_is_a_dependency_chain() {
    let scene = common::load_scenario("connector_dock");
    let plan = derive_plan(&scene);
    assert!(!plan.is_empty());
    assert!(plan[0].depends_on.is_empty());
    for w in plan.windows(2) {
        assert_eq!(w[1].depends_on, vec![w[0].id.clone()]);
    }
    assert!(provlm::task_memory::topological_order(&plan).is_ok());
}

#[test]
fn scripted_answers_are_deterministic() {
    let scene = common::load_fixture("two_step.json");
    let subtask = scene.task.plan.clone().unwrap()[1].clone();
    let cfg = ScriptedConfig { relation_noise: 0.5, faults: FaultConfig { failure_probability: 0.5, ..Default::default() }, ..Default::default() };
    let q = VlmQuery::new(ResponseKind::Action, "act".into(), QueryContext::Action { frame: 3, mode: Mode::Fine, subtask, attempt: 0 });
    let oracle = Oracle { scene: &scene, frame: None };
    let a = ScriptedBackend::new(cfg.clone()).complete(&q, &oracle).unwrap();
    let b = ScriptedBackend::new(cfg).complete(&q, &oracle).unwrap();
    assert_eq!(a, b);
}

#[test]
fn malformed_fault_fails_strict_parsing() {
    let scene = common::load_fixture("two_step.json");
    let subtask = scene.task.plan.clone().unwrap()[1].clone();
    let cfg = ScriptedConfig { faults: FaultConfig { malformed_probability: 1.0, ..Default::default() }, ..Default::default() };
    let q = VlmQuery::new(ResponseKind::Action, "act".into(), QueryContext::Action { frame: 3, mode: Mode::Fine, subtask, attempt: 0 });
    let r = request(&ScriptedBackend::new(cfg), &q, &Oracle { scene: &scene, frame: None });
    assert!(matches!(r, Err(VlmError::Malformed(_))));
}

#[test]
fn mismatched_context_is_a_config_error() {
    let scene = common::load_fixture("two_step.json");
    let q = VlmQuery::new(ResponseKind::Action, "act".into(), QueryContext::Plan);
    assert!(matches!(ScriptedBackend::default().complete(&q, &Oracle { scene: &scene, frame: None }), Err(VlmError::Config(_))));
}

#[test]
fn fenced_responses_parse() {
    let raw = "```json\n{\"kind\":\"action\",\"command\":{\"verb\":\"retreat\",\"parameters\":{\"distance\":0.05}}}\n```";
    let VlmResponse::Action { command, .. } = parse_response(raw, ResponseKind::Action).unwrap() else { panic!("wrong kind") };
    assert_eq!(command, ActionCommand::retreat(0.05));
}

/// Serves the given `(status, body)` replies in order, one per connection,
/// and returns the request bodies it saw.
fn mock_server(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            seen.push(String::from_utf8(buf).unwrap());
            let mut stream = reader.into_inner();
            write!(stream, "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len())
                .unwrap();
        }
        seen
    });
    (url, handle)
}

#[test]
fn http_backend_retries_transient_errors() {
    let content = r#"{"kind":"action","command":{"verb":"grasp","target":{"object":"block"}}}"#;
    let ok = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
    let (url, server) = mock_server(vec![(503, "{}".into()), (200, ok)]);
    let mut cfg = HttpConfig::new(&url, "test-model");
    cfg.backoff = Duration::from_millis(1);
    cfg.api_key = Some("k".into());
    let backend = HttpBackend::new(cfg);
    let scene = common::load_fixture("two_step.json");
    let q = VlmQuery::new(ResponseKind::Action, "act".into(), QueryContext::Plan);
    let resp = request(&backend, &q, &Oracle { scene: &scene, frame: None }).unwrap();
    assert_eq!(resp, VlmResponse::Action { command: ActionCommand::grasp("block"), rationale: None });
    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 2);
    let body: serde_json::Value = serde_json::from_str(&seen[1]).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["content"][0]["text"], "act");
}

#[test]
fn http_backend_gives_up_on_client_errors() {
    let (url, server) = mock_server(vec![(400, "{\"error\":\"bad\"}".into())]);
    let backend = HttpBackend::new(HttpConfig::new(&url, "m"));
    let scene = common::load_fixture("two_step.json");
    let q = VlmQuery::new(ResponseKind::Plan, "plan".into(), QueryContext::Plan);
    assert!(matches!(backend.complete(&q, &Oracle { scene: &scene, frame: None }), Err(VlmError::Unavailable(_))));
    assert_eq!(server.join().unwrap().len(), 1);
}
