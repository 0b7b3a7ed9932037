// Drives the HTTP API in process: create a session, follow the progress
// stream while an edit runs, then read back telemetry.

use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use lazydiff::decoder::Variant;
use lazydiff::model::{LazyModel, ModelConfig};
use lazydiff::raster::Mask;
use lazydiff::session::SessionManager;
use lazydiff_service::api::{router, AppState};

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> anyhow::Result<Value> {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let body = body.map_or_else(Body::empty, |v| Body::from(v.to_string()));
    let resp = app.clone().oneshot(req.body(body)?).await?;
    let status = resp.status();
    let bytes = resp.into_body().collect().await?.to_bytes();
    let v: Value = serde_json::from_slice(&bytes)?;
    anyhow::ensure!(status.is_success(), "{method} {uri}: {status} {v}");
    Ok(v)
}

pub fn run_example() -> anyhow::Result<Value> {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    rt.block_on(async {
        let model = LazyModel::new(ModelConfig::toy(Variant::ConcatHidden), 0)?;
        let app = router(AppState::new(Arc::new(SessionManager::new(Arc::new(model)))));

        let id = send(&app, "POST", "/sessions", Some(json!({})))
            .await?["id"]
            .as_str()
            .expect("id")
            .to_string();
        let events = app
            .clone()
            .oneshot(Request::get(format!("/sessions/{id}/events")).body(Body::empty())?)
            .await?;
        let reader = tokio::spawn(async move {
            let mut body = events.into_body();
            let mut text = String::new();
            while let Some(Ok(frame)) = body.frame().await {
                if let Ok(data) = frame.into_data() {
                    text.push_str(&String::from_utf8_lossy(&data));
                }
                if text.contains("event: done") {
                    break;
                }
            }
            text.matches("event: step").count()
        });

        let mask = Mask::from_fn(32, 32, |y, x| (8..20).contains(&y) && (8..24).contains(&x));
        let edit = send(
            &app,
            "POST",
            &format!("/sessions/{id}/edits"),
            Some(json!({ "mask_rle": mask.to_rle(), "label": 1, "seed": 7, "steps": 8, "guidance": 4.5 })),
        )
        .await?;
        let ticks = reader.await?;
        let t = &edit["telemetry"];
        println!("edit 0: {ticks} progress ticks, k={} N={} token-steps {}", t["k"], t["n"], t["token_steps"]);
        println!("per-phase ms: {}", t["timings"]);

        let telemetry = send(&app, "GET", &format!("/sessions/{id}/telemetry"), None).await?;
        anyhow::ensure!(ticks == 8 && telemetry.as_array().map_or(0, Vec::len) == 1);
        Ok(telemetry)
    })
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
