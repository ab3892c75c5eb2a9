use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use image::{Rgb, RgbImage};
use mlkg::knowledge::{
    generate_bundle, BackendError, HttpBackend, HttpBackendConfig, KnowledgeError, KnowledgeId, RetryPolicy,
};

/// Serves `responses` in order, one connection each, recording request bodies.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<serde_json::Value>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        length = v.trim().parse().unwrap();
                    }
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(serde_json::from_slice(&buf).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/generate"), seen, handle)
}

fn backend(endpoint: String) -> HttpBackend {
    HttpBackend::new(HttpBackendConfig {
        endpoint,
        timeout: Duration::from_secs(10),
        min_interval: Duration::ZERO,
    })
}

fn ok(text: &str) -> (u16, String) {
    (200, serde_json::json!({ "text": text }).to_string())
}

#[test]
fn bundle_over_http_with_one_retry() {
    // P1 text-only, then five scene prompts; the first scene prompt fails once.
    let responses = vec![
        ok("a crab with a hard shell"),
        (503, "{}".into()),
        ok("rocky shore"),
        ok("grey and brown"),
        ok("rough"),
        ok("flat oval"),
        ok("overcast"),
    ];
    let (url, seen, handle) = serve(responses);
    let photo = RgbImage::from_pixel(6, 4, Rgb([90, 80, 70]));
    let bundle = generate_bundle(
        "stone crab",
        Some(&photo),
        "img-1",
        &backend(url),
        RetryPolicy { max_attempts: 2 },
    )
    .unwrap();
    handle.join().unwrap();

    assert_eq!(bundle.get(KnowledgeId::Kb), Some("a crab with a hard shell"));
    assert_eq!(bundle.get(KnowledgeId::Kc), Some("rocky shore"));
    assert_eq!(bundle.get(KnowledgeId::Kg), Some("overcast"));
    assert!(bundle.get(KnowledgeId::Ka).unwrap().contains("stone crab"));

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 7);
    assert!(seen[0].get("image_base64").is_none());
    assert!(seen[0]["prompt"].as_str().unwrap().contains("stone crab"));
    for req in &seen[1..] {
        assert!(!req["image_base64"].as_str().unwrap().is_empty());
    }
    assert_eq!(seen[1], seen[2], "retry resends the same request");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen, handle) = serve(vec![(400, "{}".into())]);
    let photo = RgbImage::from_pixel(4, 4, Rgb([0, 0, 0]));
    let err = generate_bundle("moth", Some(&photo), "m", &backend(url), RetryPolicy { max_attempts: 3 }).unwrap_err();
    handle.join().unwrap();
    match err {
        KnowledgeError::Backend {
            attempts,
            source: BackendError::Status(400),
            ..
        } => assert_eq!(attempts, 1),
        other => panic!("unexpected error {other}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}
