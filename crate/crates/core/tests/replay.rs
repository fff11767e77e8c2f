use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::mpsc;

use semmac::env::{Action, EnvState, RewardConfig};
use semmac::teacher::{
    build_queries, ChatClient, ChatClientConfig, FixtureLlm, Instruction, LlmClient, LlmTeacher, RecordingLlm,
    TeacherBackend,
};
use semmac::textgrad::{run_textgrad, select_best, PromptOptState, TextGradScenario, TextualObjective};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn fixed_goodput(i: &Instruction) -> semmac::Result<f64> {
    Ok(if i.id == "phi_0" { 0.30 } else { 0.45 })
}

#[test]
fn instruction_update_trace_replays() {
    let mut llm = FixtureLlm::load(fixture("textgrad_trace.json")).unwrap();
    let x = TextGradScenario::bundled().training_queries().unwrap();
    let objective = TextualObjective::from_rewards(&RewardConfig::default());
    let mut state = PromptOptState::new(Instruction::initial(), 9);
    let best = run_textgrad(&mut state, &mut llm, &x, &objective, &mut fixed_goodput).unwrap();

    assert!(state.converged);
    assert_eq!(state.history.len(), 2);
    let feedback = state.history[0].feedback.as_deref().unwrap();
    assert!(feedback.starts_with("The system prompt should explicitly state the following key rules"));
    assert!(feedback.contains("1. Only one UE should transmit at a time to avoid collisions."));
    assert_eq!(state.history[1].instruction.text, Instruction::default_instruction().text);
    assert_eq!(state.history[1].feedback.as_deref(), Some("NO_CHANGE"));
    assert_eq!(best.id, "phi_1");
    assert_eq!(best.text, Instruction::default_instruction().text);
}

#[test]
fn replaying_twice_selects_the_same_instruction() {
    let x = TextGradScenario::bundled().training_queries().unwrap();
    let objective = TextualObjective::from_rewards(&RewardConfig::default());
    let run = || {
        let mut llm = FixtureLlm::load(fixture("textgrad_trace.json")).unwrap();
        let mut state = PromptOptState::new(Instruction::initial(), 9);
        run_textgrad(&mut state, &mut llm, &x, &objective, &mut fixed_goodput).unwrap();
        state
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(select_best(&a).unwrap(), select_best(&b).unwrap());
}

#[test]
fn recorded_teacher_reply_yields_actions_and_scores() {
    let mut teacher = LlmTeacher::new(FixtureLlm::load(fixture("remote_teacher.json")).unwrap());
    let state = EnvState { buffers: vec![2, 1, 1], b0: 2 };
    let (ue, bs) = build_queries(&state).unwrap();
    let r = teacher.complete(&Instruction::default_instruction(), &ue, &bs).unwrap();
    assert_eq!(r.resolved_actions(), vec![Action::Transmit, Action::Discard, Action::Silent]);
    assert_eq!(r.log_scores[0], Some([-2.9, -0.08, -3.5]));
    let m = r.distributions(1.0);
    for (dist, a) in m.iter().zip([1, 2, 0]) {
        let best = (0..3).max_by(|&i, &j| dist[i].total_cmp(&dist[j])).unwrap();
        assert_eq!(best, a);
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // Unknown requests are transport failures, not panics.
    let other = EnvState { buffers: vec![0, 0, 0], b0: 0 };
    let (ue, bs) = build_queries(&other).unwrap();
    assert!(teacher.complete(&Instruction::default_instruction(), &ue, &bs).is_err());
}

#[test]
fn recorder_output_replays() {
    let src = FixtureLlm::load(fixture("remote_teacher.json")).unwrap();
    let first = src.entries[0].clone();
    let mut rec = RecordingLlm::new(src);
    rec.chat(&first.system, &first.user).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rec.json");
    rec.save(&path).unwrap();
    let mut replay = FixtureLlm::load(&path).unwrap();
    assert_eq!(replay.chat(&first.system, &first.user).unwrap().text, first.text);
}

/// Serves one canned chat-completion response and reports the request.
fn serve_once(body: &'static str) -> (String, mpsc::Receiver<(String, String)>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut head = String::new();
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            if line == "\r\n" || line.is_empty() {
                break;
            }
            head.push_str(&line);
        }
        let mut req = vec![0; len];
        reader.read_exact(&mut req).unwrap();
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        tx.send((head, String::from_utf8(req).unwrap())).unwrap();
    });
    (format!("http://{addr}/v1"), rx)
}

#[test]
fn chat_client_speaks_chat_completions() {
    let body = r#"{"choices":[{"message":{"role":"assistant","content":"UE 1: Action 1"},
        "logprobs":{"content":[{"token":"UE","logprob":-0.01,"top_logprobs":[]},
        {"token":" 1","logprob":-0.01,"top_logprobs":[]},{"token":": Action ","logprob":-0.02,"top_logprobs":[]},
        {"token":"1","logprob":-0.1,"top_logprobs":[{"token":"0","logprob":-2.5},{"token":"2","logprob":-4.0}]}]}}]}"#;
    let (url, rx) = serve_once(body);
    std::env::set_var("SEMMAC_TEST_TOKEN", "sekret");
    let mut client = ChatClient::new(ChatClientConfig {
        base_url: url,
        model: "tiny".into(),
        token_env: Some("SEMMAC_TEST_TOKEN".into()),
        timeout_secs: 10,
        ..Default::default()
    })
    .unwrap();
    let reply = client.chat("sys", "user text").unwrap();
    assert_eq!(reply.text, "UE 1: Action 1");
    let tokens = reply.tokens.unwrap();
    assert_eq!(tokens.len(), 4);
    assert_eq!(tokens[3].top, vec![("0".to_string(), -2.5), ("2".to_string(), -4.0)]);

    let (head, req) = rx.recv().unwrap();
    assert!(head.starts_with("POST /v1/chat/completions"));
    assert!(head.to_ascii_lowercase().contains("authorization: bearer sekret"));
    let req: serde_json::Value = serde_json::from_str(&req).unwrap();
    assert_eq!(req["model"], "tiny");
    assert_eq!(req["messages"][0]["role"], "system");
    assert_eq!(req["messages"][1]["content"], "user text");
    assert_eq!(req["logprobs"], true);
    assert_eq!(req["top_logprobs"], 5);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let mut client = ChatClient::new(ChatClientConfig {
        base_url: format!("http://{addr}/v1"),
        timeout_secs: 2,
        ..Default::default()
    })
    .unwrap();
    assert!(matches!(client.chat("s", "u"), Err(semmac::Error::Transport(_))));
}
