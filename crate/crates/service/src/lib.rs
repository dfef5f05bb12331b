//! HTTP JSON API over the annotation queue, and the annotator that blocks the
//! orchestrator until a client advances the period.
//!
//! | route | |
//! |---|---|
//! | `GET /api/tasks?status=pending&limit=N` | claim up to N tasks |
//! | `POST /api/tasks/{id}/label` | `{"category": c}`; retries are idempotent |
//! | `GET /api/periods/current` | phase, counts, label list |
//! | `POST /api/periods/advance` | 409 until the queue drains |
//! | `GET /api/spotcheck/next` | next unreviewed confident prediction |
//! | `POST /api/spotcheck/{sample_id}/verdict` | `{"verdict": "agree"}` etc. |
//! | `GET /api/reports/{period}` | the period's report.json |

mod api;
mod hub;

pub use api::ApiError;
pub use hub::{CategoryEntry, Hub, HumanAnnotator, Phase};

use axum::routing::{get, post};
use axum::Router;
use std::future::Future;
use std::path::Path;
use std::sync::Arc;
use tokio::net::TcpListener;

/// The API under `/api`, plus static console assets from `static_dir` if given.
pub fn router(hub: Arc<Hub>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/tasks", get(api::claim_tasks))
        .route("/tasks/{id}/label", post(api::label_task))
        .route("/periods/current", get(api::current_period))
        .route("/periods/advance", post(api::advance))
        .route("/spotcheck/next", get(api::spotcheck_next))
        .route("/spotcheck/{id}/verdict", post(api::spotcheck_verdict))
        .route("/reports/{period}", get(api::report))
        .fallback(api::not_found)
        .route_layer(axum::middleware::from_fn_with_state(hub.clone(), api::require_token))
        .with_state(hub);
    let app = Router::new().nest("/api", api);
    match static_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app,
    }
}

/// Serves `app` until `shutdown` resolves, then finishes in-flight requests.
pub async fn serve(
    listener: TcpListener,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
