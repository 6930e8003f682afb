use std::io::Cursor;
use std::time::Duration;

use image::{GrayImage, ImageFormat, Luma};
use xedge_textual::*;

fn png(w: u32, h: u32, shade: u8) -> Vec<u8> {
    let img = GrayImage::from_fn(w, h, |x, y| Luma([shade.wrapping_add((x * 7 + y * 3) as u8)]));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).unwrap();
    out.into_inner()
}

fn bundle() -> SampleImages {
    SampleImages::complete(png(8, 6, 10), png(8, 6, 60), png(8, 6, 120), png(8, 6, 200))
}

#[test]
fn prompt_structure() {
    let req = build_prompt(&bundle(), "tower", &TextConfig::default()).unwrap();
    assert_eq!(req.images.len(), 4);
    assert_eq!(req.images.iter().map(|p| p.name).collect::<Vec<_>>(), IMAGE_PARTS);
    assert!(req.system_text.contains("XAI expert"));

    let lower = req.system_text.to_lowercase();
    let order = ["xai expert", "input:", "think step-by-step", "saliency concentrates", "answer format"];
    let positions: Vec<usize> = order.iter().map(|s| lower.find(s).unwrap_or_else(|| panic!("{s} missing"))).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]), "{positions:?}");

    let body = req.body();
    assert_eq!(body["messages"][0]["role"], "system");
    let content = body["messages"][1]["content"].as_array().unwrap();
    assert_eq!(content.len(), 5);
    assert!(content[0]["text"].as_str().unwrap().contains("tower"));
    for part in &content[1..] {
        let url = part["image_url"]["url"].as_str().unwrap();
        let b64 = url.strip_prefix("data:image/png;base64,").unwrap();
        use base64::Engine;
        let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
        image::load_from_memory_with_format(&bytes, ImageFormat::Png).unwrap();
    }
}

#[test]
fn prompt_is_deterministic_and_matches_snapshot() {
    let a = build_prompt(&bundle(), "tower", &TextConfig::default()).unwrap();
    let b = build_prompt(&bundle(), "tower", &TextConfig::default()).unwrap();
    assert_eq!(a.body_bytes(), b.body_bytes());
    let snapshot = include_str!("fixtures/system_text.txt");
    assert_eq!(a.system_text, snapshot.trim_end_matches('\n'));
    let other = build_prompt(&bundle(), "cable", &TextConfig::default()).unwrap();
    assert_ne!(a.digest(), other.digest());
}

#[test]
fn prompt_errors() {
    let mut missing = bundle();
    missing.explanation = None;
    let err = build_prompt(&missing, "tower", &TextConfig::default()).unwrap_err();
    assert!(matches!(err, TextualError::MissingImage("explanation")));
    assert!(err.to_string().contains("explanation"));

    let mut skewed = bundle();
    skewed.segmentation = Some(png(4, 6, 0));
    assert!(matches!(
        build_prompt(&skewed, "tower", &TextConfig::default()),
        Err(TextualError::DimensionMismatch { part: "segmentation", .. })
    ));
    assert!(matches!(build_prompt(&bundle(), "  ", &TextConfig::default()), Err(TextualError::EmptyCategory)));
    let mut garbage = bundle();
    garbage.ground_truth = Some(b"not a png".to_vec());
    assert!(matches!(
        build_prompt(&garbage, "tower", &TextConfig::default()),
        Err(TextualError::BadImage { part: "ground_truth", .. })
    ));
}

#[test]
fn mock_round_trip() {
    let req = build_prompt(&bundle(), "tower", &TextConfig::default()).unwrap();
    let mock = MockBackend::echo("MOST focused: tower body");
    let resp = request_explanation(&req, &mock, DEFAULT_MAX_IMAGE_BYTES, RetryPolicy::no_delay(3)).unwrap();
    assert_eq!(resp.text, "MOST focused: tower body");
    assert_eq!(resp.attempts, 1);
    assert_eq!(mock.calls(), vec![req.body_bytes()]);
}

#[test]
fn retries_then_succeeds() {
    let req = build_prompt(&bundle(), "tower", &TextConfig::default()).unwrap();
    let err500 = || Err(TransportError::Status { status: 500, body: "oops".into() });
    let mock = MockBackend::scripted(vec![err500(), Err(TransportError::Timeout)], "ok");
    let resp = request_explanation(&req, &mock, DEFAULT_MAX_IMAGE_BYTES, RetryPolicy::no_delay(3)).unwrap();
    assert_eq!((resp.text.as_str(), resp.attempts), ("ok", 3));
}

#[test]
fn retry_exhaustion_is_typed() {
    let req = build_prompt(&bundle(), "tower", &TextConfig::default()).unwrap();
    let err500 = || Err(TransportError::Status { status: 500, body: "oops".into() });
    let mock = MockBackend::scripted(vec![err500(), err500(), err500()], "never");
    let policy = RetryPolicy { max_attempts: 3, base_delay: Duration::from_millis(1) };
    match request_explanation(&req, &mock, DEFAULT_MAX_IMAGE_BYTES, policy) {
        Err(TextualError::Transport { attempts: 3, last: TransportError::Status { status: 500, .. } }) => {}
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(mock.calls().len(), 3);
}

#[test]
fn auth_failure_is_not_retried() {
    let req = build_prompt(&bundle(), "tower", &TextConfig::default()).unwrap();
    let mock = MockBackend::scripted(vec![Err(TransportError::Status { status: 401, body: String::new() })], "never");
    assert!(matches!(
        request_explanation(&req, &mock, DEFAULT_MAX_IMAGE_BYTES, RetryPolicy::no_delay(3)),
        Err(TextualError::Auth(401))
    ));
    assert_eq!(mock.calls().len(), 1);
}

#[test]
fn oversized_image_fails_before_network() {
    let mut req = build_prompt(&bundle(), "tower", &TextConfig::default()).unwrap();
    req.images[2].png = vec![0; DEFAULT_MAX_IMAGE_BYTES + 1];
    let mock = MockBackend::echo("unused");
    assert!(matches!(
        request_explanation(&req, &mock, DEFAULT_MAX_IMAGE_BYTES, RetryPolicy::no_delay(3)),
        Err(TextualError::PayloadTooLarge { part: "segmentation", .. })
    ));
    assert!(mock.calls().is_empty());
}

#[test]
fn cache_and_concurrency() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::new(dir.path());
    let cfg = TextConfig::default();
    let reqs: Vec<_> = ["tower", "cable", "insulator"]
        .iter()
        .map(|c| build_prompt(&bundle(), c, &cfg).unwrap())
        .collect();
    let mock = MockBackend::echo("MOST focused: top");
    let first = request_many(&reqs, &mock, &cfg, RetryPolicy::no_delay(3), Some(&cache));
    assert!(first.iter().all(|r| r.as_ref().is_ok_and(|r| !r.cached)));
    assert_eq!(mock.calls().len(), 3);
    let second = request_many(&reqs, &mock, &cfg, RetryPolicy::no_delay(3), Some(&cache));
    assert!(second.iter().all(|r| r.as_ref().is_ok_and(|r| r.cached && r.text == "MOST focused: top")));
    assert_eq!(mock.calls().len(), 3);
    assert!(dir.path().join(format!("{}.json", reqs[0].digest())).exists());
}

#[test]
fn config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lvlm.json");
    std::fs::write(&path, r#"{"endpoint_url": "http://localhost:9/v1/chat/completions", "model_name": "m", "concurrency": 4}"#).unwrap();
    let cfg = TextConfig::load(&path).unwrap();
    assert_eq!((cfg.concurrency, cfg.max_image_bytes), (4, DEFAULT_MAX_IMAGE_BYTES));
    std::fs::write(&path, r#"{"concurrency": 0}"#).unwrap();
    assert!(TextConfig::load(&path).is_err());
    std::fs::write(&path, r#"{"endpont_url": "x"}"#).unwrap();
    assert!(TextConfig::load(&path).is_err());
}
