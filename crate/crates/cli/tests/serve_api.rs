//! Annotation API driven through the router in-process.

mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use cap_eval::agreement::{AnnotationRecord, Criterion, Side};
use cap_eval::annotation::{AnnotationStore, PairView, Receipt};
use cap_eval_cli::commands::{annotation_store, load_records};
use cap_eval_cli::serve::{router, ErrorBody};
use serde_json::{json, Value};
use tokio::sync::Mutex;
use tower::ServiceExt;

fn store(dir: &std::path::Path) -> AnnotationStore {
    let (_, records) = load_records(None, Some(&dir.join("records.jsonl"))).unwrap();
    annotation_store(records, &dir.join("pairs.jsonl"), 7, None, &dir.join("annotations.jsonl")).unwrap()
}

fn app(store: AnnotationStore) -> Router {
    router(Arc::new(Mutex::new(store)), None)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, ctype, body.to_vec())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: &Value) -> Request<Body> {
    Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn submission(session: &str, pick: impl Fn(Criterion) -> Side) -> Value {
    let choices: Vec<Value> = Criterion::ALL
        .iter()
        .map(|&c| json!({"criterion": c, "choice": pick(c)}))
        .collect();
    json!({"session": session, "choices": choices})
}

async fn export(app: &Router) -> Vec<AnnotationRecord> {
    let (status, ctype, body) = send(app, get("/export")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("application/x-ndjson"));
    String::from_utf8(body)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[tokio::test]
async fn two_annotators_three_pairs() {
    let tmp = common::fixture_copy();
    let app = app(store(tmp.path()));

    for session in ["ann-a", "ann-b"] {
        let mut done = 0;
        loop {
            let (status, _, body) = send(&app, get(&format!("/pairs/next?session={session}"))).await;
            if status == StatusCode::NO_CONTENT {
                break;
            }
            assert_eq!(status, StatusCode::OK);
            let view: PairView = serde_json::from_slice(&body).unwrap();
            assert_eq!(view.criteria.len(), 10);
            assert_eq!(view.progress.unwrap().done, done);
            let raw = String::from_utf8(body).unwrap();
            for leak in ["generated", "real", "shuffled", "provenance", ".png"] {
                assert!(!raw.contains(leak), "pair view leaks {leak:?}: {raw}");
            }
            let (status, _, body) = send(
                &app,
                post(&format!("/pairs/{}/annotations", view.pair_id), &submission(session, |_| Side::Left)),
            )
            .await;
            assert_eq!(status, StatusCode::CREATED);
            let receipt: Receipt = serde_json::from_slice(&body).unwrap();
            done += 1;
            assert_eq!(receipt.records, 10);
            assert_eq!(receipt.progress.done, done);
            assert_eq!(receipt.pair_complete, session == "ann-b");
        }
        assert_eq!(done, 3);
    }
    let records = export(&app).await;
    assert_eq!(records.len(), 60);

    // Choices are stored in canonical orientation: a presented "left" on a
    // shuffled pair is the canonical right image.
    let s = store(common::fixture_copy().path());
    for p in s.pairs() {
        let want = if p.shuffled { Side::Right } else { Side::Left };
        assert!(records.iter().filter(|r| r.pair_id == p.pair_id).all(|r| r.choice == want));
    }

    // Duplicate submission: conflict, nothing recorded.
    let (status, _, body) = send(&app, post("/pairs/pair-01/annotations", &submission("ann-a", |_| Side::Right))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let err: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(err.error, "already_submitted");
    // Third annotator: conflict.
    let (status, _, body) = send(&app, post("/pairs/pair-01/annotations", &submission("ann-c", |_| Side::Right))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().error, "pair_full");
    assert_eq!(export(&app).await, records);
    let (status, _, _) = send(&app, get("/pairs/next?session=ann-c")).await;
    assert_eq!(status, StatusCode::NO_CONTENT);

    // The log replays into an identical store.
    let replayed = app_export_after_restart(tmp.path()).await;
    assert_eq!(replayed, records);
}

async fn app_export_after_restart(dir: &std::path::Path) -> Vec<AnnotationRecord> {
    export(&app(store(dir))).await
}

#[tokio::test]
async fn rejects_malformed_submissions() {
    let tmp = common::fixture_copy();
    let app = app(store(tmp.path()));
    let mut partial = submission("ann-a", |_| Side::Left);
    partial["choices"].as_array_mut().unwrap().pop();
    let (status, _, body) = send(&app, post("/pairs/pair-01/annotations", &partial)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().error, "incomplete");

    let mut doubled = submission("ann-a", |_| Side::Left);
    doubled["choices"][9]["criterion"] = json!("alignment");
    let (status, _, _) = send(&app, post("/pairs/pair-01/annotations", &doubled)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, _, _) = send(&app, post("/pairs/pair-01/annotations", &submission(" ", |_| Side::Left))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let bad_choice = json!({"session": "ann-a", "choices": [{"criterion": "alignment", "choice": "tie"}]});
    let (status, _, _) = send(&app, post("/pairs/pair-01/annotations", &bad_choice)).await;
    assert!(status.is_client_error(), "{status}");

    let (status, _, _) = send(&app, post("/pairs/nope/annotations", &submission("ann-a", |_| Side::Left))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = send(&app, get("/pairs/next")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(export(&app).await.is_empty());
}

#[tokio::test]
async fn serves_pair_and_images() {
    let tmp = common::fixture_copy();
    let s = store(tmp.path());
    let pair = s.pair("pair-02").unwrap().clone();
    let app = app(s);
    let (status, _, body) = send(&app, get("/pairs/pair-02?session=x")).await;
    assert_eq!(status, StatusCode::OK);
    let view: PairView = serde_json::from_slice(&body).unwrap();
    assert_eq!(view.left_image, "/pairs/pair-02/images/left");
    assert_eq!(view.statements.len(), 2);
    assert_eq!(view.progress.unwrap().total, 3);

    let (status, ctype, bytes) = send(&app, get("/pairs/pair-02/images/left")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert_eq!(bytes, std::fs::read(&pair.left.locator).unwrap());
    let (status, _, _) = send(&app, get("/pairs/pair-02/images/middle")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = send(&app, get("/pairs/missing")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn quota_limits_a_session() {
    let tmp = common::fixture_copy();
    let (_, records) = load_records(None, Some(&tmp.path().join("records.jsonl"))).unwrap();
    let s = annotation_store(records, &tmp.path().join("pairs.jsonl"), 7, Some(1), &tmp.path().join("log.jsonl")).unwrap();
    let app = app(s);
    let (status, _, _) = send(&app, post("/pairs/pair-01/annotations", &submission("q", |_| Side::Left))).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, _, _) = send(&app, get("/pairs/next?session=q")).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _, body) = send(&app, post("/pairs/pair-02/annotations", &submission("q", |_| Side::Left))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().error, "quota_exceeded");
}
