//! Drive the annotation REST interface in-process: list studies, fetch a
//! slice, store six clicks and run inference.
//!
//! To serve over HTTP instead, use `ugda serve --data-dir <corpus> --port 8080`.

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;
use ugda::corpus::{build_corpus, CorpusConfig};
use ugda::extreme::{extract_extreme_points, PointSource};
use ugda::phantom::{generate_study, study_seed};
use ugda::service::{router, InferResponse, ServiceState, StudySummary};
use ugda::trainer::data::TrainingData;
use ugda::trainer::{pretrain_source, AccessContext, DataAccess, LossLog, TrainConfig, Variant};
use ugda::Error;

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json").header("x-annotator", "demo");
    }
    let req = req.body(body.map_or_else(Body::empty, Body::from)).expect("request");
    let resp = app.clone().oneshot(req).await.expect("infallible");
    let status = resp.status();
    let bytes = resp.into_body().collect().await.expect("body").to_bytes().to_vec();
    (status, bytes)
}

#[tokio::main(flavor = "current_thread")]
async fn main() -> ugda::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let cfg = CorpusConfig {
        out_dir: dir.path().to_path_buf(),
        n_source: 10,
        n_target: 4,
        n_eval: 1,
        ps_fraction: 0.5,
        ..CorpusConfig::default()
    };
    let manifest = build_corpus(&cfg)?;

    let mut train = TrainConfig::for_variant(Variant::SupervisedDual);
    train.model_shape = [16, 16, 8];
    train.heatmap_net.stage_channels = vec![4, 8];
    train.seg_net.stage_channels = vec![4, 8];
    train.pretrain_max_epochs = 30;
    let data = TrainingData::load(&manifest, &train, &DataAccess::untracked(AccessContext::Training))?;
    let trainer = pretrain_source(&data, &train, &mut LossLog::default())?;

    let app = router(Arc::new(ServiceState::from_parts(dir.path(), &manifest, Some(trainer))?));

    let (_, body) = call(&app, "GET", "/studies", None).await;
    let studies: Vec<StudySummary> = serde_json::from_slice(&body)?;
    for s in &studies {
        println!("{} {:?} {:?}", s.study_id, s.shape, s.status);
    }
    let id = manifest.target_unlabelled_studies[0].study_id.clone();

    let (status, png) = call(&app, "GET", &format!("/studies/{id}/slices/z/12"), None).await;
    println!("slice z=12: {status}, {} PNG bytes", png.len());

    // stand-in for a user's clicks: the true extreme points of the phantom
    let (_, mask) = generate_study(study_seed(cfg.seed, &id), &cfg.target)?;
    let mut clicks = extract_extreme_points(&mask)?;
    clicks.study_id = id.clone();
    clicks.source = PointSource::HumanClick;
    let (status, _) = call(
        &app,
        "PUT",
        &format!("/studies/{id}/extreme-points"),
        Some(serde_json::to_string(&clicks.to_payload())?),
    )
    .await;
    println!("stored clicks: {status}");

    let (status, body) = call(&app, "POST", &format!("/studies/{id}/infer"), None).await;
    let resp: InferResponse = serde_json::from_slice(&body)?;
    println!(
        "inference: {status}, {} foreground voxels, heatmaps from {:?}, MXA {:?} mm",
        resp.mask.foreground(),
        resp.heatmap_source,
        resp.mxa_mm
    );
    Ok(())
}
