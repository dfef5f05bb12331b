use crate::{load_config, out_dir};
use anyhow::Context;
use clap::{Args, ValueEnum};
use loopid_core::config::{AnnotatorConfig, ExperimentConfig};
use loopid_core::pipeline::{annotator_palette, open_queue, run_experiment, run_with_oracle, RunOptions, RunSummary};
use loopid_service::{router, Hub, HumanAnnotator, Phase};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

const DEFAULT_LEASE_SECS: u64 = 600;
const DEFAULT_TIMEOUT_SECS: u64 = 3600;

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Oracle,
    Human,
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    periods: u32,
    /// Annotate with the simulated oracle (same as `--annotator oracle`).
    #[arg(long, conflicts_with = "annotator")]
    oracle: bool,
    /// Oracle label corruption rate; implies the oracle annotator.
    #[arg(long)]
    error_rate: Option<f64>,
    #[arg(long, value_enum)]
    annotator: Option<Mode>,
    /// Address for the annotation API in human mode.
    #[arg(long)]
    bind: Option<String>,
    /// Bearer token required by the API.
    #[arg(long)]
    token: Option<String>,
    /// Directory of console assets to serve.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value = "loopid-out")]
    out: PathBuf,
    /// Continue an existing run directory.
    #[arg(long)]
    resume: bool,
}

/// Applies command-line overrides to the loaded config.
fn configure(a: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = load_config(a.config.as_deref())?;
    let mode = match (a.oracle || a.error_rate.is_some(), a.annotator) {
        (true, Some(Mode::Human)) => {
            anyhow::bail!("--error-rate applies to the oracle annotator, not --annotator human")
        }
        (true, _) | (false, Some(Mode::Oracle)) => Some(Mode::Oracle),
        (false, m) => m,
    };
    match mode {
        Some(Mode::Oracle) => {
            let current = match cfg.annotator {
                AnnotatorConfig::Oracle { error_rate } => error_rate,
                AnnotatorConfig::Human { .. } => 0.0,
            };
            cfg.annotator = AnnotatorConfig::Oracle {
                error_rate: a.error_rate.unwrap_or(current),
            };
        }
        Some(Mode::Human) if matches!(cfg.annotator, AnnotatorConfig::Oracle { .. }) => {
            cfg.annotator = AnnotatorConfig::Human {
                lease_secs: DEFAULT_LEASE_SECS,
                timeout_secs: DEFAULT_TIMEOUT_SECS,
            };
        }
        _ => {}
    }
    if let Some(b) = &a.bind {
        cfg.service.bind = b.clone();
    }
    if let Some(t) = &a.token {
        cfg.service.token = Some(t.clone());
    }
    if let Some(d) = &a.static_dir {
        cfg.service.static_dir = Some(d.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The API served on a background runtime until [`Server::stop`].
struct Server {
    shutdown: tokio::sync::oneshot::Sender<()>,
    thread: std::thread::JoinHandle<std::io::Result<()>>,
}

impl Server {
    fn start(cfg: &ExperimentConfig, hub: Arc<Hub>) -> anyhow::Result<Server> {
        let listener =
            std::net::TcpListener::bind(&cfg.service.bind).with_context(|| format!("binding {}", cfg.service.bind))?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let app = router(hub, cfg.service.static_dir.as_deref().map(std::path::Path::new));
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                loopid_service::serve(listener, app, async {
                    let _ = rx.await;
                })
                .await
            })
        });
        eprintln!("annotation API listening on http://{addr}");
        Ok(Server { shutdown: tx, thread })
    }

    /// Stops accepting connections and waits for in-flight requests.
    fn stop(self) -> anyhow::Result<()> {
        let _ = self.shutdown.send(());
        self.thread
            .join()
            .map_err(|_| anyhow::anyhow!("server thread panicked"))??;
        Ok(())
    }
}

fn print_summary(s: &RunSummary) {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}%", 100.0 * x));
    for r in &s.reports {
        println!(
            "period {}: class-avg acc {}, high-conf acc {}, novel detect {}, saved effort {}",
            r.period,
            pct(Some(r.class_avg_acc)),
            pct(r.high_conf_acc),
            pct(r.novel_detect_ratio),
            pct(r.saved_effort)
        );
    }
    println!("artifacts in {}", s.out.display());
}

pub fn run(a: RunArgs) -> anyhow::Result<()> {
    let cfg = configure(&a)?;
    let opts = RunOptions {
        out: out_dir(a.out.clone()),
        periods: a.periods,
        resume: a.resume,
    };
    let summary = match cfg.annotator {
        AnnotatorConfig::Oracle { .. } => run_with_oracle(&cfg, &opts)?,
        AnnotatorConfig::Human { timeout_secs, .. } => {
            let hub = Hub::new(Some(opts.out.clone()), cfg.service.token.clone());
            let server = Server::start(&cfg, hub.clone())?;
            let result = open_queue(&opts.out, &cfg).and_then(|queue| {
                let mut human =
                    HumanAnnotator::new(hub.clone(), annotator_palette(&cfg), Duration::from_secs(timeout_secs));
                run_experiment(&cfg, &opts, queue, &mut human)
            });
            if result.is_ok() {
                hub.set_phase(Phase::Finished);
            }
            server.stop()?;
            result?
        }
    };
    print_summary(&summary);
    Ok(())
}

#[derive(Args)]
pub struct ServeArgs {
    /// Run directory whose reports are served.
    #[arg(long, default_value = "loopid-out")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    token: Option<String>,
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

/// Serves reports of a finished or stopped run until interrupted.
pub fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(b) = a.bind {
        cfg.service.bind = b;
    }
    if let Some(t) = a.token {
        cfg.service.token = Some(t);
    }
    if let Some(d) = a.static_dir {
        cfg.service.static_dir = Some(d.display().to_string());
    }
    let hub = Hub::new(Some(out_dir(a.out)), cfg.service.token.clone());
    let server = Server::start(&cfg, hub)?;
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(tokio::signal::ctrl_c())?;
    server.stop()
}
