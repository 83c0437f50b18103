use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use countforge_core::client::{request_body, ClientError, EndpointConfig, HttpClient, VisionModel, VisionQuery};
use countforge_core::image_ops::EncodedImage;

#[derive(Clone, Copy)]
enum Behavior {
    Status(u16),
    Hang,
    Ok,
}

/// Serves canned responses; the n-th request gets `script[min(n, last)]`.
fn serve(script: Vec<Behavior>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let b = script[n.min(script.len() - 1)];
            thread::spawn(move || respond(stream, b));
        }
    });
    (format!("http://{addr}/v1"), hits)
}

fn respond(mut stream: TcpStream, b: Behavior) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        if line == "\r\n" {
            break;
        }
    }
    let mut body = vec![0; len];
    let _ = reader.read_exact(&mut body);
    let (status, payload) = match b {
        Behavior::Hang => {
            thread::sleep(Duration::from_secs(3));
            return;
        }
        Behavior::Status(s) => (s, r#"{"error":{"message":"nope"}}"#.to_string()),
        Behavior::Ok => (200, r#"{"choices":[{"message":{"content":"a photo of 7 cats"}}]}"#.to_string()),
    };
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
        payload.len()
    );
}

fn client(base_url: String, max_retries: u32, timeout_s: f64) -> HttpClient {
    HttpClient::new(EndpointConfig {
        base_url,
        max_retries,
        timeout_s,
        initial_backoff_ms: 10,
        ..Default::default()
    })
    .unwrap()
}

fn query() -> VisionQuery {
    VisionQuery::new(
        vec![EncodedImage {
            bytes: vec![1, 2, 3],
            media_type: "image/png".into(),
        }],
        "How many cats are there in the image?",
    )
}

#[test]
fn ok_reply() {
    let (url, _) = serve(vec![Behavior::Ok]);
    let r = client(url, 1, 5.0).query(&query()).unwrap();
    assert_eq!(r.text, "a photo of 7 cats");
}

#[test]
fn unauthorized_maps_to_auth_error() {
    let (url, hits) = serve(vec![Behavior::Status(401)]);
    let err = client(url, 3, 5.0).query(&query()).unwrap_err();
    assert_eq!(err, ClientError::Auth { status: 401 });
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn two_timeouts_exhaust_one_retry() {
    let (url, hits) = serve(vec![Behavior::Hang]);
    let err = client(url, 1, 0.3).query(&query()).unwrap_err();
    match err {
        ClientError::RetriesExhausted { attempts, last } => {
            assert_eq!(attempts, 2);
            assert_eq!(*last, ClientError::Timeout);
        }
        other => panic!("expected RetriesExhausted, got {other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn server_error_is_retried() {
    let (url, hits) = serve(vec![Behavior::Status(503), Behavior::Ok]);
    let r = client(url, 1, 5.0).query(&query()).unwrap();
    assert_eq!(r.text, "a photo of 7 cats");
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn client_error_status_is_not_retried() {
    let (url, hits) = serve(vec![Behavior::Status(400)]);
    let err = client(url, 2, 5.0).query(&query()).unwrap_err();
    assert!(matches!(err, ClientError::Http { status: 400, .. }), "{err:?}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_failure() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = client(format!("http://127.0.0.1:{port}/v1"), 0, 2.0).query(&query()).unwrap_err();
    assert!(matches!(err, ClientError::Transport(_) | ClientError::Timeout), "{err:?}");
}

#[test]
fn invalid_base_url_rejected() {
    let err = HttpClient::new(EndpointConfig {
        base_url: "not a url".into(),
        ..Default::default()
    });
    assert!(matches!(err, Err(ClientError::Config(_))));
}

#[test]
fn wire_format_puts_images_before_text() {
    let body = request_body("m", &query());
    let content = body["messages"][0]["content"].as_array().unwrap();
    assert_eq!(content[0]["type"], "image_url");
    assert!(content[0]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
    assert_eq!(content[1]["text"], "How many cats are there in the image?");
    assert_eq!(body["temperature"], 0.0);
}
