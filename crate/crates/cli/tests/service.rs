use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use radseq::caption::Vocabulary;
use radseq::inference::BeamConfig;
use radseq::model::{Model, ModelConfig};
use radseq_cli::commands::{load_model, LoadedModel};
use radseq_cli::service::{router, AppState};
use serde_json::Value;
use tower::ServiceExt;

fn loaded() -> Arc<LoadedModel> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let vocab = Vocabulary::with_radicals(["r01", "r02", "r03"]).unwrap();
    Model::<f32>::new(ModelConfig::tiny(), vocab, 4)
        .unwrap()
        .save_file(&path)
        .unwrap();
    Arc::new(load_model(&path).unwrap())
}

fn state(model: Option<Arc<LoadedModel>>) -> AppState {
    AppState {
        model,
        beam: BeamConfig {
            beam: 3,
            max_len: 6,
            length_normalize: false,
        },
    }
}

async fn call(
    app: axum::Router,
    method: &str,
    uri: &str,
    body: Option<&str>,
) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req
        .body(
            body.map(|b| Body::from(b.to_string()))
                .unwrap_or_else(Body::empty),
        )
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

const SQUARE: &str = r#"{"points": [[0,0,1],[1,0,1],[1,1,1],[0,1,2],[0.5,0.2,2]]}"#;

#[tokio::test]
async fn health_without_model() {
    let app = router(state(None));
    let (s, v) = call(app.clone(), "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, serde_json::json!({"status": "ok"}));
    let (s, _) = call(app.clone(), "POST", "/recognize", Some(SQUARE)).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    let (s, _) = call(app, "GET", "/model", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn malformed_bodies_are_400() {
    let app = router(state(Some(loaded())));
    for body in [
        "{",
        r#"{"pts": []}"#,
        r#"{"points": [[1,2]]}"#,
        r#"{"points": "no"}"#,
        r#"{"points": [[0,0,1],[1,1,1]], "beam": 0}"#,
    ] {
        let (s, _) = call(app.clone(), "POST", "/recognize", Some(body)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body}");
    }
}

#[tokio::test]
async fn degenerate_trajectories_are_422() {
    let app = router(state(Some(loaded())));
    for body in [
        r#"{"points": []}"#,
        r#"{"points": [[0.1,0.1,1],[0.1,0.1,1]]}"#,
        r#"{"points": [[0,0,2],[1,1,1]]}"#,
    ] {
        let (s, v) = call(app.clone(), "POST", "/recognize", Some(body)).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert!(v["error"].is_string());
    }
}

fn significant_digits(x: f64) -> usize {
    let s = format!("{:e}", x);
    let mantissa = s.split('e').next().unwrap();
    mantissa.chars().filter(char::is_ascii_digit).count()
}

#[tokio::test]
async fn recognition_response_shape() {
    let m = loaded();
    let app = router(state(Some(m.clone())));
    let (s, v) = call(app.clone(), "POST", "/recognize", Some(SQUARE)).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["caption"].is_array() && v["score"].is_number() && v["grammatical"].is_boolean());
    let frames = v["frames"].as_u64().unwrap() as usize;
    for row in v["attention"].as_array().unwrap() {
        let row = row.as_array().unwrap();
        assert_eq!(row.len(), frames);
        for x in row {
            assert!(significant_digits(x.as_f64().unwrap()) <= 6);
        }
    }
    let (s, info) = call(app, "GET", "/model", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(info["vocab_size"], 17);
    assert_eq!(info["preset"], "tiny");
    assert_eq!(info["checkpoint_hash"], m.hash.as_str());
    assert_eq!(info["frame_map"], "ceil(j/2)");
}

#[tokio::test]
async fn beam_override_and_concurrency() {
    let app = router(state(Some(loaded())));
    let one = r#"{"points": [[0,0,1],[1,0,1],[1,1,1],[0,1,2],[0.5,0.2,2]], "beam": 1}"#;
    let handles: Vec<_> = (0..6)
        .map(|_| tokio::spawn(call(app.clone(), "POST", "/recognize", Some(one))))
        .collect();
    let mut results = Vec::new();
    for h in handles {
        let (s, v) = h.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        results.push(v);
    }
    assert!(results.windows(2).all(|w| w[0] == w[1]));
}
