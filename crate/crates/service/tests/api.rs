mod support;

use std::time::Duration;

use drscreen_service::worker::ServiceConfig;
use drscreen_service::Server;
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use support::{form, phantom_png, submit, wait_done};

const WAIT: Duration = Duration::from_secs(120);

async fn start(dir: &std::path::Path, max_upload: Option<usize>) -> Server {
    let mut cfg = ServiceConfig::new(dir);
    if let Some(m) = max_upload {
        cfg.max_upload = m;
    }
    let (server, issues) = Server::start(cfg, "127.0.0.1:0".parse().unwrap()).await.unwrap();
    assert!(issues.is_empty());
    server
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_and_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path(), None).await;
    let base = server.url("");
    let c = Client::new();
    let health: Value = c.get(format!("{base}/api/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(health["status"], "ok");
    let id = uuid::Uuid::new_v4();
    for path in [
        format!("/api/jobs/{id}"),
        format!("/api/cases/{id}"),
        format!("/api/cases/{id}/overlay.png"),
        format!("/api/cases/{id}/review"),
    ] {
        assert_eq!(c.get(format!("{base}{path}")).send().await.unwrap().status(), StatusCode::NOT_FOUND, "{path}");
    }
    assert_eq!(c.get(format!("{base}/api/jobs/nope")).send().await.unwrap().status(), StatusCode::BAD_REQUEST);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn upload_validation() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path(), Some(4096)).await;
    let base = server.url("");
    let c = Client::new();

    let (status, body) = submit(&c, &base, form(vec![1; 5000], "c1", "p1", "left")).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE, "{body}");

    let partial = reqwest::multipart::Form::new()
        .part("image", reqwest::multipart::Part::bytes(vec![1u8; 10]))
        .text("clinic", "c1");
    let (status, body) = submit(&c, &base, partial).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("patient, eye"), "{body}");

    let (status, _) = submit(&c, &base, form(vec![1; 10], "c1", "p1", "both")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = submit(&c, &base, form(vec![1; 10], " ", "p1", "left")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = submit(&c, &base, form(Vec::new(), "c1", "p1", "left")).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn fifty_megabytes_is_refused_under_the_default_limit() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path(), None).await;
    let (status, _) = submit(&Client::new(), &server.url(""), form(vec![0; 50 * 1024 * 1024], "c1", "p1", "left")).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn case_lifecycle_listing_and_review() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path(), None).await;
    let base = server.url("");
    let c = Client::new();

    let graded = phantom_png(31, 1, 1024, 768);
    let mut ids = Vec::new();
    for (clinic, eye) in [("north", "left"), ("north", "right"), ("south", "left")] {
        let (status, body) = submit(&c, &base, form(graded.clone(), clinic, "p-17", eye)).await;
        assert_eq!(status, StatusCode::ACCEPTED);
        assert_eq!(body["job"]["state"], "queued");
        ids.push(body["job_id"].as_str().unwrap().to_string());
    }
    let (_, bad) = submit(&c, &base, form(b"not an image".to_vec(), "south", "p-18", "right")).await;
    let bad = bad["job_id"].as_str().unwrap().to_string();
    assert_eq!(ids.iter().collect::<std::collections::HashSet<_>>().len(), 3, "identical uploads share no job");

    let early = c.get(format!("{base}/api/cases/{}", ids[2])).send().await.unwrap();
    assert_eq!(early.status(), StatusCode::CONFLICT, "report fetchable before done");

    for id in &ids {
        let job = wait_done(&c, &base, id, WAIT).await;
        assert_eq!(job["state"], "done");
        assert_eq!(job["metadata"]["patient"], "p-17");
    }
    let failed = wait_done(&c, &base, &bad, WAIT).await;
    assert_eq!(failed["state"], "failed");
    assert!(failed["error"].as_str().unwrap().contains("decode"), "{failed}");
    let resp = c.get(format!("{base}/api/cases/{bad}")).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert!(resp.text().await.unwrap().contains("decode"));

    let report: Value = c.get(format!("{base}/api/cases/{}", ids[0])).send().await.unwrap().json().await.unwrap();
    assert_eq!(report["case_id"], ids[0].as_str());
    assert_eq!(report["accepted"], true, "{}", report["reason"]);
    let level = report["grade"]["level"].as_u64().unwrap();
    let referral = report["grade"]["referral"].as_bool().unwrap();
    let overlay = c.get(format!("{base}/api/cases/{}/overlay.png", ids[0])).send().await.unwrap();
    assert_eq!(overlay.headers()["content-type"], "image/png");
    assert!(overlay.bytes().await.unwrap().starts_with(b"\x89PNG"));

    let page: Value = c.get(format!("{base}/api/cases?clinic=north")).send().await.unwrap().json().await.unwrap();
    assert_eq!(page["total"], 2);
    assert!(page["items"].as_array().unwrap().iter().all(|i| i["clinic"] == "north"));
    let page: Value = c.get(format!("{base}/api/cases?state=failed")).send().await.unwrap().json().await.unwrap();
    assert_eq!(page["items"][0]["case_id"], bad.as_str());
    let page: Value = c.get(format!("{base}/api/cases?limit=2&offset=3")).send().await.unwrap().json().await.unwrap();
    assert_eq!((page["total"].as_u64(), page["items"].as_array().unwrap().len()), (Some(4), 1));
    let page: Value = c.get(format!("{base}/api/cases?to=2000-01-01")).send().await.unwrap().json().await.unwrap();
    assert_eq!(page["total"], 0);
    let today = chrono::Utc::now().format("%Y-%m-%d").to_string();
    let page: Value = c.get(format!("{base}/api/cases?from={today}&to={today}")).send().await.unwrap().json().await.unwrap();
    assert_eq!(page["total"], 4);
    let resp = c.get(format!("{base}/api/cases?state=lost")).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);

    let review_url = format!("{base}/api/cases/{}/review", ids[0]);
    let decision_id = uuid::Uuid::new_v4();
    let other = (level + 1) % 4;
    let no_note = json!({"decision_id": decision_id, "reviewer": "dr k", "action": "override", "final_level": other, "final_referral": true});
    assert_eq!(c.post(&review_url).json(&no_note).send().await.unwrap().status(), StatusCode::UNPROCESSABLE_ENTITY);
    let wrong_confirm = json!({"decision_id": decision_id, "reviewer": "dr k", "action": "confirm", "final_level": other, "final_referral": referral});
    assert_eq!(c.post(&review_url).json(&wrong_confirm).send().await.unwrap().status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(c.get(&review_url).send().await.unwrap().status(), StatusCode::NOT_FOUND);

    let confirm = json!({"decision_id": decision_id, "reviewer": "dr k", "action": "confirm", "final_level": level, "final_referral": referral});
    assert_eq!(c.post(&review_url).json(&confirm).send().await.unwrap().status(), StatusCode::CREATED);
    assert_eq!(c.post(&review_url).json(&confirm).send().await.unwrap().status(), StatusCode::OK);
    let rival = json!({"decision_id": uuid::Uuid::new_v4(), "reviewer": "dr m", "action": "override", "final_level": other, "final_referral": true, "note": "disagree"});
    assert_eq!(c.post(&review_url).json(&rival).send().await.unwrap().status(), StatusCode::CONFLICT);
    let stored: Value = c.get(&review_url).send().await.unwrap().json().await.unwrap();
    assert_eq!(stored["decision"]["reviewer"], "dr k");
    let bad_review = c.post(format!("{base}/api/cases/{bad}/review")).json(&rival).send().await.unwrap();
    assert_eq!(bad_review.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let page: Value = c.get(format!("{base}/api/cases?state=reviewed")).send().await.unwrap().json().await.unwrap();
    assert_eq!(page["total"], 1);

    let before = c.get(format!("{base}/api/cases/{}", ids[1])).send().await.unwrap().bytes().await.unwrap();
    server.stop().await;
    let server = start(dir.path(), None).await;
    let base = server.url("");
    let after = c.get(format!("{base}/api/cases/{}", ids[1])).send().await.unwrap().bytes().await.unwrap();
    assert_eq!(before, after);
    let stored: Value = c.get(format!("{base}/api/cases/{}/review", ids[0])).send().await.unwrap().json().await.unwrap();
    assert_eq!(stored["decision"]["decision_id"], decision_id.to_string());
    server.stop().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn rejected_case_has_a_reason_and_cannot_be_reviewed() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path(), None).await;
    let base = server.url("");
    let c = Client::new();
    let black = drscreen_core::raster::encode_png(&drscreen_core::RasterImage::new(320, 240).unwrap()).unwrap();
    let (_, body) = submit(&c, &base, form(black, "east", "p-2", "right")).await;
    let id = body["job_id"].as_str().unwrap().to_string();
    assert_eq!(wait_done(&c, &base, &id, WAIT).await["state"], "done");
    let report: Value = c.get(format!("{base}/api/cases/{id}")).send().await.unwrap().json().await.unwrap();
    assert_eq!(report["accepted"], false);
    assert!(report["grade"].is_null());
    assert!(!report["reason"].as_str().unwrap().is_empty());
    let page: Value = c.get(format!("{base}/api/cases?state=rejected")).send().await.unwrap().json().await.unwrap();
    assert_eq!(page["items"][0]["outcome"]["reason"], report["reason"]);
    let confirm = json!({"decision_id": uuid::Uuid::new_v4(), "reviewer": "dr k", "action": "confirm", "final_level": 0, "final_referral": false});
    let resp = c.post(format!("{base}/api/cases/{id}/review")).json(&confirm).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::CONFLICT);
    server.stop().await;
}
