mod common;

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use kgconsult::api::{router, AppState};
use kgconsult_core::consult::ConsultationEngine;
use kgconsult_core::graph::sample_patient_case;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

fn engine() -> &'static ConsultationEngine {
    static E: OnceLock<ConsultationEngine> = OnceLock::new();
    E.get_or_init(|| common::tiny_engine(5))
}

fn app() -> Router {
    app_with(Duration::from_secs(3600))
}

fn app_with(idle: Duration) -> Router {
    router(Arc::new(AppState::new(engine().clone(), idle)), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(
            body.map(|b| Body::from(b.to_string()))
                .unwrap_or_else(Body::empty),
        )
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", uri, Some(&body.to_string())).await
}

fn error_code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap()
}

/// A session that is still asking after its first symptom.
async fn asking_session(app: &Router) -> (String, u64) {
    for &s in engine().graph.symptoms() {
        let (status, v) = post(app, "/v1/sessions", json!({"initial_symptoms": [s.0]})).await;
        assert_eq!(status, StatusCode::CREATED);
        if v["status"] == "asking" {
            return (
                v["session_id"].as_str().unwrap().to_string(),
                v["question"]["id"].as_u64().unwrap(),
            );
        }
    }
    panic!("every single-symptom session concluded immediately");
}

#[tokio::test]
async fn symptoms_catalog() {
    let (status, v) = call(&app(), "GET", "/v1/symptoms", None).await;
    assert_eq!(status, StatusCode::OK);
    let list = v.as_array().unwrap();
    assert_eq!(list.len(), engine().graph.n_symptoms());
    for item in list {
        let id = item["id"].as_u64().unwrap();
        assert!(engine().symptom(id).is_ok());
        assert!(!item["name"].as_str().unwrap().is_empty());
    }
}

#[tokio::test]
async fn answering_until_concluded() {
    let app = app();
    let (id, mut q) = asking_session(&app).await;
    let mut count = 0;
    let last = loop {
        let (status, v) = post(
            &app,
            &format!("/v1/sessions/{id}/answer"),
            json!({"symptom_id": q, "answer": "no"}),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{v}");
        count += 1;
        assert_eq!(v["question_count"], count);
        if v["status"] == "concluded" {
            break v;
        }
        assert_eq!(v["status"], "asking");
        assert!(v["diagnosis"].is_null());
        q = v["question"]["id"].as_u64().unwrap();
    };
    assert!(last["question"].is_null());
    let diag = last["diagnosis"].as_array().unwrap();
    assert_eq!(diag.len(), engine().graph.n_diseases());
    let probs: Vec<f64> = diag
        .iter()
        .map(|d| d["probability"].as_f64().unwrap())
        .collect();
    assert!(probs.windows(2).all(|w| w[0] >= w[1]));
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(diag[0]["name"].is_string() && diag[0]["disease_id"].is_u64());

    let (status, v) = post(
        &app,
        &format!("/v1/sessions/{id}/answer"),
        json!({"symptom_id": q, "answer": "yes"}),
    )
    .await;
    assert_eq!(
        (status, error_code(&v)),
        (StatusCode::CONFLICT, "session_concluded")
    );

    let (status, t) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(t["status"], "concluded");
    assert_eq!(t["history"].as_array().unwrap().len(), count);
    assert!(t["history"]
        .as_array()
        .unwrap()
        .iter()
        .all(|h| h["answer"] == "no"));
    assert_eq!(t["diagnosis"], last["diagnosis"]);
}

#[tokio::test]
async fn error_contract() {
    let app = app();
    let (status, v) = call(&app, "GET", "/v1/sessions/not-a-session", None).await;
    assert_eq!(
        (status, error_code(&v)),
        (StatusCode::NOT_FOUND, "unknown_session")
    );
    let (status, v) = post(
        &app,
        "/v1/sessions/nope/answer",
        json!({"symptom_id": 60, "answer": "yes"}),
    )
    .await;
    assert_eq!(
        (status, error_code(&v)),
        (StatusCode::NOT_FOUND, "unknown_session")
    );

    let (status, v) = post(&app, "/v1/sessions", json!({"initial_symptoms": [99999]})).await;
    assert_eq!(
        (status, error_code(&v)),
        (StatusCode::UNPROCESSABLE_ENTITY, "invalid_symptom")
    );
    assert!(v["error"]["message"].as_str().unwrap().contains("99999"));
    let disease = engine().graph.diseases()[0].0;
    let (status, v) = post(&app, "/v1/sessions", json!({"initial_symptoms": [disease]})).await;
    assert_eq!(
        (status, error_code(&v)),
        (StatusCode::UNPROCESSABLE_ENTITY, "invalid_symptom")
    );

    let (status, v) = post(&app, "/v1/sessions", json!({"initial_symptoms": []})).await;
    assert_eq!(
        (status, error_code(&v)),
        (StatusCode::BAD_REQUEST, "invalid_request")
    );
    let (status, v) = call(&app, "POST", "/v1/sessions", Some("{not json")).await;
    assert_eq!(
        (status, error_code(&v)),
        (StatusCode::BAD_REQUEST, "invalid_request")
    );

    let (id, q) = asking_session(&app).await;
    let other = engine()
        .graph
        .symptoms()
        .iter()
        .find(|s| s.0 as u64 != q)
        .unwrap()
        .0;
    let uri = format!("/v1/sessions/{id}/answer");
    let (status, v) = post(&app, &uri, json!({"symptom_id": other, "answer": "yes"})).await;
    assert_eq!(
        (status, error_code(&v)),
        (StatusCode::CONFLICT, "not_pending")
    );
    let (status, v) = post(&app, &uri, json!({"symptom_id": 99999, "answer": "yes"})).await;
    assert_eq!(
        (status, error_code(&v)),
        (StatusCode::UNPROCESSABLE_ENTITY, "invalid_symptom")
    );
    let (status, v) = post(&app, &uri, json!({"symptom_id": q, "answer": "maybe"})).await;
    assert_eq!(
        (status, error_code(&v)),
        (StatusCode::BAD_REQUEST, "invalid_request")
    );
    // The failed calls left the session untouched.
    let (_, t) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(t["pending_question"]["id"], q);
    assert_eq!(t["question_count"], 0);
}

#[tokio::test]
async fn idle_sessions_expire() {
    let app = app_with(Duration::ZERO);
    let s = engine().graph.symptoms()[0].0;
    let (_, v) = post(&app, "/v1/sessions", json!({"initial_symptoms": [s]})).await;
    tokio::time::sleep(Duration::from_millis(5)).await;
    let (status, _) = call(
        &app,
        "GET",
        &format!("/v1/sessions/{}", v["session_id"].as_str().unwrap()),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn static_client_is_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>client</p>").unwrap();
    let app = router(
        Arc::new(AppState::new(engine().clone(), Duration::from_secs(60))),
        Some(dir.path().into()),
    );
    let resp = app
        .oneshot(Request::get("/index.html").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], b"<p>client</p>");
}

/// Plays one truthful patient through the API and returns the transcript.
async fn play(app: Router, seed: u64) -> (kgconsult_core::graph::PatientCase, u64, Value) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = sample_patient_case(&engine().graph, &mut rng, 0.1).unwrap();
    let present: Vec<u64> = case.present_symptoms.iter().map(|s| s.0 as u64).collect();
    let first = present[rng.random_range(0..present.len())];
    let (status, mut v) = post(&app, "/v1/sessions", json!({"initial_symptoms": [first]})).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = v["session_id"].as_str().unwrap().to_string();
    while v["status"] == "asking" {
        let q = v["question"]["id"].as_u64().unwrap();
        let answer = if present.contains(&q) { "yes" } else { "no" };
        tokio::task::yield_now().await;
        let (status, next) = post(
            &app,
            &format!("/v1/sessions/{id}/answer"),
            json!({"symptom_id": q, "answer": answer}),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        v = next;
    }
    let (_, t) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    (case, first, t)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn parallel_sessions_stay_separate() {
    let app = app();
    let handles: Vec<_> = (0..100)
        .map(|i| tokio::spawn(play(app.clone(), 1000 + i)))
        .collect();
    for h in handles {
        let (case, first, t) = h.await.unwrap();
        let questions: Vec<u64> = t["history"]
            .as_array()
            .unwrap()
            .iter()
            .map(|h| h["question"]["id"].as_u64().unwrap())
            .collect();
        let distinct: BTreeSet<u64> = questions.iter().copied().collect();
        assert_eq!(distinct.len(), questions.len(), "repeated question");
        assert!(!distinct.contains(&first));
        for h in t["history"].as_array().unwrap() {
            let q = kgconsult_core::graph::EntityId(h["question"]["id"].as_u64().unwrap() as u32);
            assert_eq!(h["answer"] == "yes", case.present_symptoms.contains(&q));
        }
        let direct = engine()
            .simulate(&case, &[kgconsult_core::graph::EntityId(first as u32)])
            .unwrap();
        let expected: Vec<u64> = direct.questions().iter().map(|q| q.0 as u64).collect();
        assert_eq!(questions, expected);
        let ids: Vec<u64> = t["diagnosis"]
            .as_array()
            .unwrap()
            .iter()
            .map(|d| d["disease_id"].as_u64().unwrap())
            .collect();
        let direct_ids: Vec<u64> = direct
            .diagnosis
            .unwrap()
            .iter()
            .map(|d| d.disease.0 as u64)
            .collect();
        assert_eq!(ids, direct_ids);
    }
}
