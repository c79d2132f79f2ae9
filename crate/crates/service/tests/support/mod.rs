#![allow(dead_code)]

use std::time::{Duration, Instant};

use drscreen_core::phantom::{generate, PhantomSpec};
use drscreen_core::raster::encode_png;
use reqwest::multipart::{Form, Part};
use reqwest::{Client, StatusCode};
use serde_json::Value;

pub fn phantom_png(seed: u64, grade: u8, width: usize, height: usize) -> Vec<u8> {
    let base = PhantomSpec::for_grade(seed, grade).unwrap();
    let spec = PhantomSpec { width, height, ..base };
    encode_png(&generate(&spec).unwrap().image).unwrap()
}

pub fn form(image: Vec<u8>, clinic: &str, patient: &str, eye: &str) -> Form {
    Form::new()
        .part("image", Part::bytes(image).file_name("fundus.png").mime_str("image/png").unwrap())
        .text("clinic", clinic.to_string())
        .text("patient", patient.to_string())
        .text("eye", eye.to_string())
}

pub async fn submit(client: &Client, base: &str, form: Form) -> (StatusCode, Value) {
    let resp = client.post(format!("{base}/api/cases")).multipart(form).send().await.unwrap();
    let status = resp.status();
    (status, resp.json().await.unwrap_or(Value::Null))
}

/// Polls the job until it leaves the queue, returning its final view.
pub async fn wait_done(client: &Client, base: &str, id: &str, limit: Duration) -> Value {
    let start = Instant::now();
    let mut seen = Vec::new();
    loop {
        let job: Value = client.get(format!("{base}/api/jobs/{id}")).send().await.unwrap().json().await.unwrap();
        let state = job["state"].as_str().unwrap().to_string();
        if seen.last() != Some(&state) {
            seen.push(state.clone());
        }
        if state == "done" || state == "failed" {
            let order = ["queued", "running", "done", "failed"];
            let ranks: Vec<usize> = seen.iter().map(|s| order.iter().position(|o| o == s).unwrap().min(2)).collect();
            assert!(ranks.windows(2).all(|w| w[0] < w[1]), "states went {seen:?}");
            return job;
        }
        assert!(start.elapsed() < limit, "job {id} stuck in {state}");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}
