use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use gsqa_cli::service::{journal_path, router, training_ratings_path, Service, ServiceConfig, StimulusInfo, INDEX_FILE};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn write_stimuli(dir: &Path, n: usize, training: usize) {
    let index: Vec<StimulusInfo> = (0..n)
        .map(|i| StimulusInfo {
            id: format!("stim{i:02}"),
            video_path: format!("v{i}.mp4"),
            base_model: "bicycle".into(),
            distortion_kind: "gaussian_noise".into(),
            level: 0.01,
            is_training: i < training,
        })
        .collect();
    for i in 0..n {
        std::fs::write(dir.join(format!("v{i}.mp4")), format!("video-bytes-{i:04}")).unwrap();
    }
    std::fs::write(dir.join(INDEX_FILE), serde_json::to_string(&index).unwrap()).unwrap();
}

fn open(dir: &Path) -> Router {
    let svc = Service::open(&ServiceConfig {
        stimuli_dir: dir.to_path_buf(),
        ratings_path: dir.join("ratings.csv"),
        training_count: 5,
    })
    .unwrap();
    router(Arc::new(svc))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body, None).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn call_raw(app: &Router, method: &str, uri: &str, body: Option<Value>, range: Option<&str>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(r) = range {
        req = req.header(header::RANGE, r);
    }
    let req = match body {
        Some(b) => req.header(header::CONTENT_TYPE, "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn create(app: &Router, participant: &str, seed: u64) -> String {
    let (s, v) = call(app, "POST", "/v1/sessions", Some(json!({"participant_id": participant, "seed": seed}))).await;
    assert_eq!(s, StatusCode::CREATED);
    v["session_id"].as_str().unwrap().to_string()
}

/// Watches the current video and rates it; returns the rated stimulus id.
async fn step(app: &Router, sid: &str, score: i64) -> String {
    let (_, cur) = call(app, "GET", &format!("/v1/sessions/{sid}/current"), None).await;
    let url = cur["video_url"].as_str().unwrap().to_string();
    let (s, _) = call_raw(app, "GET", &url, None, None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = call(app, "POST", &format!("/v1/sessions/{sid}/rating"), Some(json!({"score": score}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    cur["stimulus"]["id"].as_str().unwrap().to_string()
}

fn data_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[tokio::test]
async fn full_session_phases_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    write_stimuli(dir.path(), 12, 2);
    let app = open(dir.path());
    let sid = create(&app, "p1", 42).await;

    let mut phases = Vec::new();
    let mut seen = Vec::new();
    loop {
        let (_, cur) = call(&app, "GET", &format!("/v1/sessions/{sid}/current"), None).await;
        let phase = cur["phase"].as_str().unwrap().to_string();
        if phases.last() != Some(&phase) {
            phases.push(phase.clone());
        }
        if phase == "done" {
            assert!(cur["stimulus"].is_null());
            break;
        }
        seen.push(step(&app, &sid, 4).await);
    }
    assert_eq!(phases, ["training", "rating", "done"]);
    assert_eq!(seen.len(), 12);
    assert!(seen[..2].iter().all(|s| s == "stim00" || s == "stim01"));

    let rows = data_rows(&dir.path().join("ratings.csv"));
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.starts_with("p1,stim") && r.contains(",4,")));
    assert_eq!(data_rows(&training_ratings_path(&dir.path().join("ratings.csv"))).len(), 2);

    let (_, p) = call(&app, "GET", &format!("/v1/sessions/{sid}/progress"), None).await;
    assert_eq!((p["cursor"].as_u64(), p["total"].as_u64(), p["rated"].as_u64()), (Some(12), Some(12), Some(10)));
    let (s, _) = call(&app, "POST", &format!("/v1/sessions/{sid}/rating"), Some(json!(3))).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn equal_seeds_equal_playlists() {
    let dir = tempfile::tempdir().unwrap();
    write_stimuli(dir.path(), 10, 0);
    let app = open(dir.path());
    let a = create(&app, "p", 7).await;
    let b = create(&app, "p", 7).await;
    let c = create(&app, "p", 8).await;
    assert_ne!(a, b);
    let mut orders = Vec::new();
    for sid in [&a, &b, &c] {
        let mut order = Vec::new();
        for _ in 0..15 {
            order.push(step(&app, sid, 3).await);
        }
        orders.push(order);
    }
    assert_eq!(orders[0], orders[1]);
    assert_ne!(orders[0], orders[2]);
    // no flagged training stimuli: the first five index entries are shown first, then all ten
    let mut head = orders[0][..5].to_vec();
    head.sort();
    assert_eq!(head, ["stim00", "stim01", "stim02", "stim03", "stim04"]);
    let mut tail = orders[0][5..].to_vec();
    tail.sort();
    assert_eq!(tail.len(), 10);
    tail.dedup();
    assert_eq!(tail.len(), 10);
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    write_stimuli(dir.path(), 4, 0);
    let app = open(dir.path());
    let (s, _) = call(&app, "GET", "/v1/sessions/nope/current", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/v1/sessions/nope/rating", Some(json!(3))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/v1/sessions/nope/progress", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/v1/stimuli/unknown/video", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let sid = create(&app, "p", 1).await;
    let (s, _) = call(&app, "POST", &format!("/v1/sessions/{sid}/rating"), Some(json!(3))).await;
    assert_eq!(s, StatusCode::CONFLICT, "rating before the video was served");
    let (_, cur) = call(&app, "GET", &format!("/v1/sessions/{sid}/current"), None).await;
    call_raw(&app, "GET", cur["video_url"].as_str().unwrap(), None, None).await;
    for bad in [json!(0), json!(6), json!({"score": -1})] {
        let (s, _) = call(&app, "POST", &format!("/v1/sessions/{sid}/rating"), Some(bad)).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    }
    let (s, _) = call(&app, "POST", &format!("/v1/sessions/{sid}/rating"), Some(json!(5))).await;
    assert_eq!(s, StatusCode::OK);
    // the served mark does not carry over to the next position
    let (s, _) = call(&app, "POST", &format!("/v1/sessions/{sid}/rating"), Some(json!(5))).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn replays_do_not_advance_and_ranges_work() {
    let dir = tempfile::tempdir().unwrap();
    write_stimuli(dir.path(), 3, 0);
    let app = open(dir.path());
    let sid = create(&app, "p", 1).await;
    let (_, cur) = call(&app, "GET", &format!("/v1/sessions/{sid}/current"), None).await;
    let url = cur["video_url"].as_str().unwrap().to_string();
    for _ in 0..3 {
        call_raw(&app, "GET", &url, None, None).await;
    }
    let (_, p) = call(&app, "GET", &format!("/v1/sessions/{sid}/progress"), None).await;
    assert_eq!(p["cursor"], 0);

    let (s, body) = call_raw(&app, "GET", "/v1/stimuli/stim01/video", None, Some("bytes=0-4")).await;
    assert_eq!((s, body.as_slice()), (StatusCode::PARTIAL_CONTENT, &b"video"[..]));
    let (s, body) = call_raw(&app, "GET", "/v1/stimuli/stim01/video", None, Some("bytes=-4")).await;
    assert_eq!((s, body.as_slice()), (StatusCode::PARTIAL_CONTENT, &b"0001"[..]));
    let (s, _) = call_raw(&app, "GET", "/v1/stimuli/stim01/video", None, Some("bytes=999-")).await;
    assert_eq!(s, StatusCode::RANGE_NOT_SATISFIABLE);
}

#[tokio::test]
async fn restart_resumes_and_repairs() {
    let dir = tempfile::tempdir().unwrap();
    write_stimuli(dir.path(), 6, 1);
    let ratings = dir.path().join("ratings.csv");
    let (sid, first) = {
        let app = open(dir.path());
        let sid = create(&app, "p9", 3).await;
        let mut first = Vec::new();
        for _ in 0..3 {
            first.push(step(&app, &sid, 2).await);
        }
        (sid, first)
    };
    // simulate a crash after the journal write: drop the last CSV row and leave a torn line
    let text = std::fs::read_to_string(&ratings).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let lost = lines.pop().unwrap().to_string();
    std::fs::write(&ratings, lines.join("\n") + "\np9,stim0").unwrap();
    let mut journal = std::fs::read_to_string(journal_path(&ratings)).unwrap();
    journal.push_str("{\"event\":\"rat");
    std::fs::write(journal_path(&ratings), journal).unwrap();

    let app = open(dir.path());
    let (_, p) = call(&app, "GET", &format!("/v1/sessions/{sid}/progress"), None).await;
    assert_eq!(p["cursor"], 3);
    let rows = data_rows(&ratings);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1], lost);

    let mut rest = Vec::new();
    loop {
        let (_, cur) = call(&app, "GET", &format!("/v1/sessions/{sid}/current"), None).await;
        if cur["phase"] == "done" {
            break;
        }
        rest.push(step(&app, &sid, 4).await);
    }
    assert_eq!(rest.len(), 3);
    let mut all: Vec<String> = first.into_iter().chain(rest).collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 6);
    assert_eq!(data_rows(&ratings).len(), 5);
    // a fresh session after restart gets a new id
    assert_ne!(create(&app, "p9", 3).await, sid);
}
