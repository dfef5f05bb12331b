use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use loopid_core::annotation::{
    spot_check, AnnotationQueue, FeatureProjection, LogicalClock, SharedQueue, SpotCheckBatch,
};
use loopid_core::datagen::{generate_longtail_dataset, DatasetManifest, GenConfig, NoveltyPartition};
use loopid_core::pipeline::{Annotator, PeriodContext};
use loopid_core::records::{LabelSource, PredictionRecord};
use loopid_service::{router, Hub, HumanAnnotator, Phase};
use parking_lot::Mutex;
use serde_json::{json, Value};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;
use tower::ServiceExt;

fn manifest() -> DatasetManifest {
    generate_longtail_dataset(&GenConfig {
        n_categories: 6,
        dim: 4,
        min_abundance: 20,
        max_abundance: 60,
        partition: NoveltyPartition {
            group1: 3,
            group2_only: 2,
            left_out: 1,
        },
        ..GenConfig::default()
    })
    .unwrap()
}

fn record(sample_id: u64, predicted: u32, confident: bool) -> PredictionRecord {
    PredictionRecord {
        sample_id,
        predicted_category: predicted,
        logits_digest: String::new(),
        energy: -2.0,
        softmax_max: 0.4,
        confident,
        label_source: if confident {
            LabelSource::Pseudo
        } else {
            LabelSource::None
        },
        final_label: confident.then_some(predicted),
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

struct Fixture {
    manifest: DatasetManifest,
    queue: SharedQueue,
    batch: Arc<Mutex<SpotCheckBatch>>,
    projection: FeatureProjection,
}

fn fixture(n_low: u64) -> Fixture {
    let manifest = manifest();
    let queue = AnnotationQueue::in_memory(Arc::new(LogicalClock::default())).into_shared();
    let low: Vec<_> = (0..n_low).map(|s| record(s, 0, false)).collect();
    queue.lock().enqueue_low_confidence(2, &low).unwrap();
    let high: Vec<_> = (100..110).map(|s| record(s, 1, true)).collect();
    let batch = Arc::new(Mutex::new(spot_check(&high, 3, 9, 2).unwrap()));
    let x = ndarray::Array2::from_shape_fn((manifest.samples.len(), 4), |(i, j)| manifest.samples[i].features[j]);
    Fixture {
        projection: FeatureProjection::fit(&x),
        manifest,
        queue,
        batch,
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap()
}

/// Runs the human annotator for period 2 on a scoped thread while `f` drives the API.
fn with_annotator<F, Fut>(fx: &Fixture, hub: Arc<Hub>, timeout: Duration, f: F) -> Phase
where
    F: FnOnce() -> Fut,
    Fut: std::future::Future<Output = ()>,
{
    let known = [0u32, 1, 2];
    let (done_tx, done_rx) = std::sync::mpsc::channel();
    std::thread::scope(|scope| {
        let h = hub.clone();
        scope.spawn(move || {
            let ctx = PeriodContext {
                period: 2,
                queue: fx.queue.clone(),
                spot_check: Some(fx.batch.clone()),
                manifest: &fx.manifest,
                known: &known,
                projection: &fx.projection,
                tau: 1.25,
                temperature: 1.5,
            };
            HumanAnnotator::new(h, vec![0, 1, 2, 3, 4], timeout)
                .annotate(&ctx)
                .unwrap();
            done_tx.send(()).unwrap();
        });
        while hub.phase() == Phase::Idle {
            std::thread::sleep(Duration::from_millis(1));
        }
        runtime().block_on(f());
        done_rx
            .recv_timeout(Duration::from_secs(10))
            .expect("annotator returned");
    });
    hub.phase()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn idle_hub_answers_with_schema_version() {
    let hub = Hub::new(None, None);
    let app = router(hub, None);
    let (s, v) = call(&app, "GET", "/api/periods/current", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["state"], "idle");
    let (s, v) = call(&app, "GET", "/api/tasks?status=pending&limit=5", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["tasks"], json!([]));
    let (s, v) = call(&app, "POST", "/api/periods/advance", None, None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "no_active_period");
    assert_eq!(v["schema_version"], 1);
    let (s, _) = call(&app, "GET", "/api/reports/1", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call(&app, "GET", "/api/nope", None, None).await;
    assert_eq!((s, v["schema_version"].clone()), (StatusCode::NOT_FOUND, json!(1)));
    let (s, _) = call(&app, "GET", "/api/tasks?status=labeled", None, None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn token_guards_the_api() {
    let app = router(Hub::new(None, Some("s3cret".into())), None);
    let (s, v) = call(&app, "GET", "/api/periods/current", None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_eq!(v["error"]["code"], "unauthorized");
    let (s, _) = call(&app, "GET", "/api/periods/current", None, Some("wrong")).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = call(&app, "GET", "/api/periods/current", None, Some("s3cret")).await;
    assert_eq!(s, StatusCode::OK);
}

#[test]
fn claim_label_spot_check_and_advance() {
    let fx = fixture(4);
    let hub = Hub::new(None, None);
    let app = router(hub.clone(), None);
    let phase = with_annotator(&fx, hub.clone(), Duration::from_secs(30), || async {
        let (_, cur) = call(&app, "GET", "/api/periods/current", None, None).await;
        assert_eq!(cur["state"], "annotating");
        assert_eq!(cur["period"], 2);
        assert_eq!(cur["counts"]["pending"], 4);
        assert_eq!(cur["advance_ready"], false);
        assert_eq!(cur["categories"].as_array().unwrap().len(), 5);
        assert_eq!(cur["categories"][3]["known"], false);
        assert_eq!(cur["spot_check"]["size"], 3);

        let (s, claimed) = call(
            &app,
            "GET",
            "/api/tasks?status=pending&limit=3&annotator=ana",
            None,
            None,
        )
        .await;
        assert_eq!(s, StatusCode::OK);
        let tasks = claimed["tasks"].as_array().unwrap();
        assert_eq!(tasks.len(), 3);
        assert!(tasks[0].get("true_category").is_none());
        assert!(!claimed.to_string().contains("true_category"));
        assert_eq!(tasks[0]["projection"].as_array().unwrap().len(), 2);

        let (s, v) = call(&app, "POST", "/api/periods/advance", None, None).await;
        assert_eq!(s, StatusCode::CONFLICT);
        assert_eq!(v["error"]["code"], "queue_not_drained");
        assert_eq!(v["error"]["detail"]["pending"], 1);

        // another annotator cannot label ana's claim
        let (s, v) = call(
            &app,
            "POST",
            "/api/tasks/0/label",
            Some(json!({"category": 1, "annotator": "ben"})),
            None,
        )
        .await;
        assert_eq!(
            (s, v["error"]["code"].clone()),
            (StatusCode::CONFLICT, json!("claimed_by_other"))
        );
        let (s, v) = call(
            &app,
            "POST",
            "/api/tasks/0/label",
            Some(json!({"category": 9, "annotator": "ana"})),
            None,
        )
        .await;
        assert_eq!(
            (s, v["error"]["code"].clone()),
            (StatusCode::UNPROCESSABLE_ENTITY, json!("unknown_category"))
        );

        for id in 0..3 {
            let (s, v) = call(
                &app,
                "POST",
                &format!("/api/tasks/{id}/label"),
                Some(json!({"category": 1, "annotator": "ana"})),
                None,
            )
            .await;
            assert_eq!(s, StatusCode::OK);
            assert_eq!(v["outcome"], "applied");
            // retry after a lost response
            let (s, again) = call(
                &app,
                "POST",
                &format!("/api/tasks/{id}/label"),
                Some(json!({"category": 1, "annotator": "ana"})),
                None,
            )
            .await;
            assert_eq!(s, StatusCode::OK);
            assert_eq!(again["outcome"], "already_applied");
            assert_eq!(again["period_counts"], v["period_counts"]);
        }
        let (s, v) = call(&app, "POST", "/api/tasks/0/label", Some(json!({"category": 2})), None).await;
        assert_eq!(
            (s, v["error"]["code"].clone()),
            (StatusCode::CONFLICT, json!("immutable"))
        );
        let (s, _) = call(&app, "POST", "/api/tasks/77/label", Some(json!({"category": 2})), None).await;
        assert_eq!(s, StatusCode::NOT_FOUND);

        // spot check: three verdicts, one correction
        for (i, verdict) in [
            json!({"verdict": "agree"}),
            json!({"verdict": "agree"}),
            json!({"verdict": "corrected", "label": 4}),
        ]
        .into_iter()
        .enumerate()
        {
            let (_, next) = call(&app, "GET", "/api/spotcheck/next", None, None).await;
            assert_eq!(next["remaining"], 3 - i);
            let id = next["sample"]["sample_id"].as_u64().unwrap();
            assert_eq!(next["sample"]["predicted_category"], 1);
            let (s, v) = call(
                &app,
                "POST",
                &format!("/api/spotcheck/{id}/verdict"),
                Some(verdict),
                None,
            )
            .await;
            assert_eq!(s, StatusCode::OK);
            assert_eq!(v["remaining"], 2 - i);
        }
        let (_, next) = call(&app, "GET", "/api/spotcheck/next", None, None).await;
        assert_eq!(next["sample"], Value::Null);
        let (_, cur) = call(&app, "GET", "/api/periods/current", None, None).await;
        assert!((cur["spot_check"]["agreement_rate"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);

        let (_, claimed) = call(&app, "GET", "/api/tasks?limit=10", None, None).await;
        assert_eq!(claimed["tasks"].as_array().unwrap().len(), 1);
        let (s, _) = call(&app, "POST", "/api/tasks/3/label", Some(json!({"category": 3})), None).await;
        assert_eq!(s, StatusCode::OK);
        let (_, cur) = call(&app, "GET", "/api/periods/current", None, None).await;
        assert_eq!(cur["advance_ready"], true);
        let (s, v) = call(&app, "POST", "/api/periods/advance", None, None).await;
        assert_eq!(s, StatusCode::ACCEPTED);
        assert_eq!(v["state"], "updating");
    });
    assert_eq!(phase, Phase::Updating);
    let rt = runtime();
    rt.block_on(async {
        assert!(fx.queue.lock().is_drained(2));
        assert_eq!(fx.queue.lock().labels_for_period(2).len(), 4);
        assert_eq!(fx.batch.lock().corrections().len(), 1);

        // after the window closes: retries stay idempotent, new labels are refused
        let (s, v) = call(&app, "POST", "/api/tasks/3/label", Some(json!({"category": 3})), None).await;
        assert_eq!((s, v["outcome"].clone()), (StatusCode::OK, json!("already_applied")));
        let (s, v) = call(&app, "POST", "/api/tasks/3/label", Some(json!({"category": 4})), None).await;
        assert_eq!(
            (s, v["error"]["code"].clone()),
            (StatusCode::CONFLICT, json!("period_closed"))
        );
        let (s, _) = call(&app, "POST", "/api/periods/advance", None, None).await;
        assert_eq!(s, StatusCode::ACCEPTED);
    });
}

#[test]
fn annotation_window_times_out() {
    let fx = fixture(2);
    let hub = Hub::new(None, None);
    let app = router(hub.clone(), None);
    let phase = with_annotator(&fx, hub.clone(), Duration::from_millis(200), || async {
        let (s, _) = call(&app, "POST", "/api/tasks/0/label", Some(json!({"category": 0})), None).await;
        assert_eq!(s, StatusCode::OK);
    });
    assert_eq!(phase, Phase::TimedOut);
    assert!(!fx.queue.lock().is_drained(2));
    let (_, cur) = runtime().block_on(call(&app, "GET", "/api/periods/current", None, None));
    assert_eq!(cur["state"], "timed_out");
    assert_eq!(cur["counts"]["labeled"], 1);
}

fn write(path: &Path, bytes: &[u8]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, bytes).unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn reports_and_static_assets() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    write(
        &out.join("period_1/report.json"),
        br#"{"schema_version":1,"period":1,"class_avg_acc":0.5}"#,
    );
    write(&out.join("period_2/report.json"), b"{\"schema_version\":1,");
    let assets = dir.path().join("console");
    write(&assets.join("index.html"), b"<!doctype html><title>console</title>");

    let app = router(Hub::new(Some(out), Some("t".into())), Some(&assets));
    let (s, v) = call(&app, "GET", "/api/reports/1", None, Some("t")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["class_avg_acc"], 0.5);
    let (s, v) = call(&app, "GET", "/api/reports/2", None, Some("t")).await;
    assert_eq!(
        (s, v["error"]["code"].clone()),
        (StatusCode::INTERNAL_SERVER_ERROR, json!("corrupt_report"))
    );
    let (s, _) = call(&app, "GET", "/api/reports/3", None, Some("t")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (_, cur) = call(&app, "GET", "/api/periods/current", None, Some("t")).await;
    assert_eq!(cur["reports"], json!([1, 2]));

    let resp = app
        .clone()
        .oneshot(Request::get("/index.html").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    assert!(body.starts_with(b"<!doctype html>"));
}
