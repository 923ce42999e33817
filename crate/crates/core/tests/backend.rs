mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use proptest::prelude::*;

use privicl::backend::{
    BackendError, CachedEmbedder, CallSettings, CompletionBackend, CompletionRequest, Embedder,
    EmbeddingCache, HttpBackend, HttpConfig, MockBackend, MockMode, RetryPolicy,
};
use privicl::data::load_examples;
use privicl::mia::cosine;
use privicl::pipeline::{answer_query, Aggregation, EnsembleConfig};
use privicl::rng::DpRng;

use common::workspace_root;

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves one canned `(status, body)` per connection, in order.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = std::thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let (mut len, mut auth) = (0, None);
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                path,
                auth,
                body: serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null),
            });
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn client(url: &str, key: Option<&str>) -> HttpBackend {
    let config = HttpConfig {
        base_url: url.to_string(),
        chat_model: "chat-x".into(),
        embedding_model: "embed-x".into(),
        timeout_secs: 5,
    };
    HttpBackend::with_api_key(config, key.map(str::to_string)).unwrap()
}

fn chat(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
        .to_string()
}

#[test]
fn completion_round_trip() {
    let (url, seen, h) = serve(vec![(200, chat("Rest and fluids."))]);
    let b = client(&url, Some("sk-test"));
    let out = b
        .complete(&CompletionRequest::new("What helps?", ""))
        .unwrap();
    h.join().unwrap();
    assert_eq!(out, "Rest and fluids.");
    let s = &seen.lock().unwrap()[0];
    assert_eq!(s.path, "/chat/completions");
    assert_eq!(s.auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(s.body["model"], "chat-x");
    assert_eq!(s.body["messages"][0]["content"], "What helps?");
}

#[test]
fn embedding_round_trip_normalizes() {
    let body = serde_json::json!({"data": [{"embedding": [3.0, 4.0]}]}).to_string();
    let (url, seen, h) = serve(vec![(200, body)]);
    let v = client(&url, None).embed("hello").unwrap();
    h.join().unwrap();
    assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
    let s = &seen.lock().unwrap()[0];
    assert_eq!(s.path, "/embeddings");
    assert_eq!(s.auth, None);
    assert_eq!(s.body["input"], "hello");
}

#[test]
fn server_errors_are_retried() {
    let (url, seen, h) = serve(vec![
        (503, "{}".into()),
        (500, "{}".into()),
        (200, chat("ok")),
    ]);
    let b = client(&url, None);
    let (res, attempts) = CallSettings {
        retry: RetryPolicy::no_delay(),
        ..CallSettings::default()
    }
    .complete(&b, "q");
    h.join().unwrap();
    assert_eq!(res.unwrap(), "ok");
    assert_eq!(attempts, 3);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_fatal() {
    let (url, seen, h) = serve(vec![(401, "{}".into())]);
    let b = client(&url, None);
    let (res, attempts) = CallSettings {
        retry: RetryPolicy::no_delay(),
        ..CallSettings::default()
    }
    .complete(&b, "q");
    h.join().unwrap();
    assert!(matches!(res, Err(BackendError::Fatal(_))));
    assert_eq!(attempts, 1);
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_response_is_fatal() {
    let (url, _, h) = serve(vec![(200, r#"{"choices": []}"#.into())]);
    let err = client(&url, None)
        .complete(&CompletionRequest::new("q", ""))
        .unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, BackendError::Fatal(_)));
}

#[test]
fn bad_base_url_rejected() {
    let config = HttpConfig {
        base_url: "ftp://example".into(),
        ..HttpConfig::default()
    };
    assert!(HttpBackend::with_api_key(config, None).is_err());
}

#[test]
fn cache_persists_across_opens() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.cache");
    let first = CachedEmbedder::new(
        MockBackend::new(MockMode::Standard),
        EmbeddingCache::open(&path).unwrap(),
    );
    let a = first.embed("chest pain at night").unwrap();
    first.embed("chest pain at night").unwrap();
    let st = first.cache_stats();
    assert_eq!((st.hits, st.misses, st.size), (1, 1, 1));
    assert_eq!(first.inner().embed_calls(), 1);
    drop(first);

    let second = CachedEmbedder::new(
        MockBackend::new(MockMode::Standard),
        EmbeddingCache::open(&path).unwrap(),
    );
    let b = second.embed("chest pain at night").unwrap();
    assert_eq!(a, b);
    assert_eq!(second.inner().embed_calls(), 0);
    assert_eq!(second.cache_stats().hits, 1);
}

#[test]
fn truncated_cache_tail_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.cache");
    {
        let c = EmbeddingCache::open(&path).unwrap();
        c.insert("m", "one", &[0.6, 0.8]).unwrap();
        c.insert("m", "two", &[0.8, 0.6]).unwrap();
    }
    let len = std::fs::metadata(&path).unwrap().len();
    let f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
    f.set_len(len - 3).unwrap();
    drop(f);
    let c = EmbeddingCache::open(&path).unwrap();
    assert!(c.get("m", "one").is_some());
    assert!(c.get("m", "two").is_none());
    c.insert("m", "three", &[1.0, 0.0]).unwrap();
    drop(c);
    let c = EmbeddingCache::open(&path).unwrap();
    assert_eq!(c.stats().size, 2);
}

#[test]
fn cache_keys_include_model() {
    let c = EmbeddingCache::in_memory();
    c.insert("m1", "t", &[1.0, 0.0]).unwrap();
    assert!(c.get("m2", "t").is_none());
    assert!(c.get("m1", "t").is_some());
}

#[test]
fn mock_embeddings_separate_texts() {
    let m = MockBackend::new(MockMode::Standard);
    let (a, b) = (m.embed("a").unwrap(), m.embed("b").unwrap());
    assert!(cosine(&a, &b) < 0.99);
    assert_eq!(m.embed("a").unwrap(), a);
    assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(m.embed("   ").is_err());
}

#[test]
fn caching_does_not_change_answers() {
    let root = workspace_root().join("fixtures");
    let private = load_examples(root.join("private.jsonl")).unwrap();
    let public = load_examples(root.join("public.jsonl")).unwrap();
    let queries = load_examples(root.join("queries.jsonl")).unwrap();
    let llm = MockBackend::new(MockMode::Standard);
    let cached = CachedEmbedder::new(
        MockBackend::new(MockMode::Standard),
        EmbeddingCache::in_memory(),
    );
    let cfg = EnsembleConfig {
        aggregation: Aggregation::SgaTopk,
        ..EnsembleConfig::default()
    };
    let settings = CallSettings {
        retry: RetryPolicy::no_delay(),
        ..CallSettings::default()
    };
    for (i, q) in queries.iter().take(5).enumerate() {
        let plain = answer_query(
            q,
            &private,
            &public,
            &cfg,
            &llm,
            &llm,
            &settings,
            &mut DpRng::new(i as u64),
        )
        .unwrap();
        let with = answer_query(
            q,
            &private,
            &public,
            &cfg,
            &llm,
            &cached,
            &settings,
            &mut DpRng::new(i as u64),
        )
        .unwrap();
        let again = answer_query(
            q,
            &private,
            &public,
            &cfg,
            &llm,
            &cached,
            &settings,
            &mut DpRng::new(i as u64),
        )
        .unwrap();
        assert_eq!(
            serde_json::to_value(&plain).unwrap(),
            serde_json::to_value(&with).unwrap()
        );
        assert_eq!(
            serde_json::to_value(&plain).unwrap(),
            serde_json::to_value(&again).unwrap()
        );
    }
    assert!(cached.cache_stats().hits > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cache_returns_f32_rounded_vectors(v in prop::collection::vec(-1.0f64..1.0, 1..16), text in "[a-z ]{1,20}") {
        let c = EmbeddingCache::in_memory();
        c.insert("m", &text, &v).unwrap();
        let got = c.get("m", &text).unwrap();
        prop_assert_eq!(got.len(), v.len());
        for (g, w) in got.iter().zip(&v) {
            prop_assert_eq!(*g, f64::from(*w as f32));
        }
    }
}
