mod common;

use std::sync::Arc;

use axum::http::StatusCode;
use common::{get, post, texture_png, Part};
use serde_json::Value;
use texid::imgproc::GrayImage;
use texid::PipelineConfig;
use texid_cli::server::{router, AppState};
use texid_cli::service::MAX_IMAGE_BYTES;

fn json(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

fn code(s: &str) -> String {
    json(s)["code"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn enroll_verify_search_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("g");
    let state = Arc::new(AppState::open(&store, PipelineConfig::default()).unwrap());
    let app = router(Arc::clone(&state));

    let (s, body) = get(&app, "/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(json(&body), serde_json::json!({"status": "ok", "gallery_size": 0}));

    let img = texture_png(11);
    let (s, body) = post(&app, "/search", &[Part::File("image", &img)]).await;
    assert_eq!((s, code(&body)), (StatusCode::CONFLICT, "EmptyGallery".into()));

    let (s, body) = post(
        &app,
        "/enroll",
        &[
            Part::File("image", &img),
            Part::Text("manufacturer", "Acme"),
            Part::Text("lot", "42"),
        ],
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    let enrolled = json(&body);
    let id = enrolled["id"].as_str().unwrap().to_string();
    assert_eq!(enrolled["gallery_size"], 1);
    assert!(enrolled["keypoints"].as_u64().unwrap() > 0);

    let (_, body) = get(&app, &format!("/product/{id}")).await;
    let p = json(&body);
    assert_eq!(p["metadata"]["manufacturer"], "Acme");
    assert_eq!(p["metadata"]["extra"]["lot"], "42");
    let (s, body) = get(&app, "/product/ffffffffffffffff").await;
    assert_eq!((s, code(&body)), (StatusCode::NOT_FOUND, "NotFound".into()));

    // persisted before the response
    assert_eq!(texid::Gallery::load(&store).unwrap().len(), 1);

    let (s, body) = post(&app, "/verify", &[Part::File("image", &img), Part::Text("id", &id)]).await;
    assert_eq!(s, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["verdict"], "Match");
    assert!(v["inliers"].as_u64().unwrap() >= 6);
    let (_, body) = post(
        &app,
        "/verify",
        &[
            Part::File("image", &img),
            Part::Text("id", &id),
            Part::Text("boost", "true"),
        ],
    )
    .await;
    assert_eq!(json(&body)["verdict"], "Match");

    let (s, body) = post(&app, "/search", &[Part::File("image", &img), Part::Text("k", "3")]).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(json(&body)["top1"]["id"], id.as_str());

    let cases: Vec<(Vec<Part>, StatusCode, &str)> = vec![
        (
            vec![Part::File("image", b"garbage"), Part::Text("id", &id)],
            StatusCode::BAD_REQUEST,
            "BadImage",
        ),
        (vec![Part::Text("id", &id)], StatusCode::BAD_REQUEST, "BadRequest"),
        (vec![Part::File("image", &img)], StatusCode::BAD_REQUEST, "BadRequest"),
        (
            vec![Part::File("image", &img), Part::Text("id", "nope")],
            StatusCode::NOT_FOUND,
            "NotFound",
        ),
        (
            vec![
                Part::File("image", &img),
                Part::Text("id", &id),
                Part::Text("boost", "maybe"),
            ],
            StatusCode::BAD_REQUEST,
            "BadRequest",
        ),
    ];
    for (parts, status, c) in &cases {
        let (s, body) = post(&app, "/verify", parts).await;
        assert_eq!((s, code(&body).as_str()), (*status, *c), "{body}");
    }

    let flat = GrayImage::filled(448, 448, 128).encode_png().unwrap();
    let (s, body) = post(&app, "/enroll", &[Part::File("image", &flat)]).await;
    assert_eq!((s, code(&body)), (StatusCode::BAD_REQUEST, "LowQuality".into()));
    let (_, body) = get(&app, "/health").await;
    assert_eq!(json(&body)["gallery_size"], 1);

    let huge = vec![0u8; MAX_IMAGE_BYTES + 1024];
    let (s, body) = post(&app, "/search", &[Part::File("image", &huge)]).await;
    assert_eq!((s, code(&body)), (StatusCode::BAD_REQUEST, "BadImage".into()));

    let (s, body) = post(&app, "/search", &[Part::File("image", &img), Part::Text("k", "0")]).await;
    assert_eq!((s, code(&body)), (StatusCode::BAD_REQUEST, "BadRequest".into()));
}

#[tokio::test]
async fn readers_get_busy_while_the_gallery_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let state = Arc::new(AppState::open(dir.path(), PipelineConfig::default()).unwrap());
    let app = router(Arc::clone(&state));
    let guard = state.lock_exclusive().await;
    let (s, body) = get(&app, "/health").await;
    assert_eq!((s, code(&body)), (StatusCode::SERVICE_UNAVAILABLE, "Busy".into()));
    drop(guard);
    assert_eq!(get(&app, "/health").await.0, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_enrollments_are_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("g");
    let state = Arc::new(AppState::open(&store, PipelineConfig::default()).unwrap());
    let app = router(Arc::clone(&state));
    let images: Vec<Vec<u8>> = (0..4).map(|i| texture_png(60 + i)).collect();
    let mut tasks = Vec::new();
    for img in images {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            post(&app, "/enroll", &[Part::File("image", &img)]).await
        }));
    }
    let mut ids = Vec::new();
    for t in tasks {
        let (s, body) = t.await.unwrap();
        assert_eq!(s, StatusCode::OK, "{body}");
        ids.push(json(&body)["id"].as_str().unwrap().to_string());
    }
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 4);
    let back = texid::Gallery::load(&store).unwrap();
    assert_eq!(back.len(), 4);
    assert_eq!(json(&get(&app, "/health").await.1)["gallery_size"], 4);
}
