//! HTTP client against a minimal in-process server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};
use vqadiff_core::backends::{
    BackendDescriptor, BackendKind, EmbedContent, EmbeddingBackend, GenerationBackend, GenerationRequest,
    HttpBackend, HttpOptions, SegmentationBackend, VqaBackend,
};
use vqadiff_core::raster::{encode_gray_png, encode_png, solid};
use vqadiff_core::Error;

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    idempotency_key: Option<String>,
    body: Value,
}

type Handler = dyn Fn(usize, &Seen) -> (u16, String) + Send + Sync;

struct Server {
    url: String,
    hits: Arc<AtomicUsize>,
    seen: Arc<Mutex<Vec<Seen>>>,
}

fn serve(handler: Box<Handler>) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(Mutex::new(Vec::new()));
    let (h, s) = (hits.clone(), seen.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let (mut len, mut key) = (0usize, None);
            loop {
                let mut header = String::new();
                reader.read_line(&mut header).unwrap();
                let header = header.trim_end();
                if header.is_empty() {
                    break;
                }
                let (name, value) = header.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "idempotency-key" => key = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req = Seen {
                path,
                idempotency_key: key,
                body: serde_json::from_slice(&body).unwrap_or(Value::Null),
            };
            let n = h.fetch_add(1, Ordering::SeqCst);
            s.lock().unwrap().push(req.clone());
            let (status, reply) = handler(n, &req);
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    Server { url, hits, seen }
}

fn backend(kind: BackendKind, url: &str, timeout_s: f64) -> HttpBackend {
    let d = BackendDescriptor {
        endpoint: url.into(),
        model_id: "m-1".into(),
        timeout_s,
        ..BackendDescriptor::stub(kind)
    };
    HttpBackend::new(
        &d,
        HttpOptions {
            max_retries: 2,
            backoff: Duration::from_millis(5),
            max_in_flight: 2,
        },
    )
}

#[test]
fn vqa_round_trip_carries_key_and_fields() {
    let srv = serve(Box::new(|_, r| {
        if r.body["mode"] == "answer" {
            (200, json!({"answer": "a red Mazda"}).to_string())
        } else {
            (200, json!({"yes_probability": 0.25}).to_string())
        }
    }));
    let b = backend(BackendKind::Vqa, &srv.url, 5.0);
    let img = solid(4, 4, [1, 2, 3]);
    assert_eq!(b.answer(&img, "What car?").unwrap(), "a red Mazda");
    assert_eq!(b.yes_probability(&img, "Is it red?").unwrap(), 0.25);
    let seen = srv.seen.lock().unwrap();
    assert_eq!(seen[0].path, "/vqa");
    assert_eq!(seen[0].body["question"], "What car?");
    assert_eq!(seen[0].body["model_id"], "m-1");
    let png = B64.decode(seen[0].body["image"].as_str().unwrap()).unwrap();
    assert_eq!(vqadiff_core::raster::decode_png(&png).unwrap(), img);
    assert!(seen.iter().all(|s| s.idempotency_key.is_some()));
}

#[test]
fn server_errors_are_retried_with_key() {
    let srv = serve(Box::new(|n, r| {
        if n < 2 {
            (503, "busy".into())
        } else {
            let w = r.body["width"].as_u64().unwrap() as u32;
            let h = r.body["height"].as_u64().unwrap() as u32;
            let png = encode_png(&solid(w, h, [9, 9, 9])).unwrap();
            (200, json!({"image": B64.encode(png)}).to_string())
        }
    }));
    let b = backend(BackendKind::Edge2image, &srv.url, 5.0);
    let req = GenerationRequest::new("car", 3, 8, 6).with_condition(solid(8, 6, [255; 3]));
    let img = b.generate(BackendKind::Edge2image, &req).unwrap();
    assert_eq!(img.dimensions(), (8, 6));
    assert_eq!(srv.hits.load(Ordering::SeqCst), 3);
    let seen = srv.seen.lock().unwrap();
    assert_eq!(seen[0].path, "/generate/edge2image");
    assert!(seen[0].body.get("condition_image").is_some());
    // the same key on every attempt
    assert!(seen.iter().all(|s| s.idempotency_key == seen[0].idempotency_key));
}

#[test]
fn retries_are_bounded_and_unkeyed_posts_are_not_retried() {
    let srv = serve(Box::new(|_, _| (500, "down".into())));
    let b = backend(BackendKind::Embed, &srv.url, 5.0);
    match b.embed(&EmbedContent::Text("car")) {
        Err(Error::Backend { status, attempts, .. }) => assert_eq!((status, attempts), (500, 3)),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(srv.hits.load(Ordering::SeqCst), 3);
    assert!(b.post("/embed", &json!({}), None).is_err());
    assert_eq!(srv.hits.load(Ordering::SeqCst), 4);
}

#[test]
fn client_errors_fail_fast() {
    let srv = serve(Box::new(|_, _| (422, "bad image".into())));
    let b = backend(BackendKind::Segment, &srv.url, 5.0);
    match b.segment(&solid(4, 4, [0; 3])) {
        Err(Error::Backend {
            status, retryable, message, ..
        }) => {
            assert_eq!(status, 422);
            assert!(!retryable);
            assert_eq!(message, "bad image");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(srv.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn masks_and_embeddings_decode() {
    let srv = serve(Box::new(|_, r| {
        if r.path == "/segment" {
            let mut m = image::GrayImage::new(4, 4);
            m.put_pixel(1, 1, image::Luma([255]));
            (200, json!({"mask": B64.encode(encode_gray_png(&m).unwrap())}).to_string())
        } else {
            (200, json!({"embedding": [3.0, 4.0]}).to_string())
        }
    }));
    let seg = backend(BackendKind::Segment, &srv.url, 5.0);
    let mask = seg.segment(&solid(4, 4, [0; 3])).unwrap();
    assert_eq!(mask.area(), 1);
    assert_eq!(mask.mask.get_pixel(1, 1)[0], 1);
    let emb = backend(BackendKind::Embed, &srv.url, 5.0);
    let v = emb.embed(&EmbedContent::Pair(&solid(2, 2, [0; 3]), "car")).unwrap();
    assert_eq!(v.values, vec![3.0, 4.0]);
}

#[test]
fn malformed_reply_is_a_backend_error() {
    let srv = serve(Box::new(|_, _| (200, json!({"unexpected": 1}).to_string())));
    let b = backend(BackendKind::Vqa, &srv.url, 5.0);
    assert!(matches!(b.answer(&solid(2, 2, [0; 3]), "q"), Err(Error::Backend { status: 200, .. })));
}

#[test]
fn unreachable_and_slow_services() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let b = backend(BackendKind::Vqa, &format!("http://127.0.0.1:{port}"), 5.0);
    let err = b.answer(&solid(2, 2, [0; 3]), "q").unwrap_err();
    assert!(matches!(err, Error::BackendUnavailable { .. }), "{err:?}");
    assert!(err.is_backend());

    let srv = serve(Box::new(|_, _| {
        std::thread::sleep(Duration::from_millis(600));
        (200, json!({"answer": "late"}).to_string())
    }));
    let b = backend(BackendKind::Vqa, &srv.url, 0.2);
    let err = b.answer(&solid(2, 2, [0; 3]), "q").unwrap_err();
    assert!(matches!(err, Error::Timeout { .. }), "{err:?}");
}
