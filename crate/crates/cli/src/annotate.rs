use crate::out_dir;
use anyhow::{bail, Context};
use clap::Args;
use loopid_core::annotation::{OracleAnnotator, TaskStatus};
use loopid_core::config::{AnnotatorConfig, ExperimentConfig};
use loopid_core::datagen::DatasetManifest;
use loopid_core::pipeline::{annotator_palette, open_queue, prepare_data};
use serde_json::{json, Value};
use std::path::PathBuf;
use std::time::Duration;

#[derive(Args)]
pub struct AnnotateArgs {
    /// Label with the simulated oracle (the only non-interactive annotator).
    #[arg(long, required = true)]
    oracle: bool,
    /// Label corruption rate (default: the run's configured rate, else 0).
    #[arg(long)]
    error_rate: Option<f64>,
    /// Run directory; its config.json supplies the data seed.
    #[arg(long, default_value = "loopid-out")]
    out: PathBuf,
    /// Annotate through a running service instead of the queue file.
    #[arg(long)]
    url: Option<String>,
    #[arg(long)]
    token: Option<String>,
    #[arg(long, default_value = "oracle")]
    annotator_id: String,
    /// Tasks claimed per request.
    #[arg(long, default_value_t = 25)]
    batch: usize,
    /// Stop after this many labels without advancing the period.
    #[arg(long)]
    max_labels: Option<usize>,
    /// Keep annotating later periods until the run finishes.
    #[arg(long)]
    follow: bool,
    #[arg(long, default_value_t = 100)]
    poll_ms: u64,
}

struct Truth {
    cfg: ExperimentConfig,
    manifest: Option<(u32, DatasetManifest)>,
}

impl Truth {
    /// The true category of `sample`, regenerating the data for `period` if needed.
    fn of(&mut self, period: u32, sample: u64) -> anyhow::Result<u32> {
        if self.manifest.as_ref().is_none_or(|(p, _)| *p < period) {
            let data = prepare_data(&self.cfg, period.max(2))?;
            self.manifest = Some((period, data.manifest));
        }
        let m = &self.manifest.as_ref().expect("just set").1;
        if sample as usize >= m.samples.len() {
            bail!("sample {sample} is not in the generated data; does --out match the running service?");
        }
        Ok(m.sample(sample).true_category)
    }
}

pub fn annotate(a: AnnotateArgs) -> anyhow::Result<()> {
    let out = out_dir(a.out.clone());
    let config_path = out.join("config.json");
    let cfg = ExperimentConfig::load(&config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let configured = match cfg.annotator {
        AnnotatorConfig::Oracle { error_rate } => error_rate,
        AnnotatorConfig::Human { .. } => 0.0,
    };
    let oracle = OracleAnnotator::new(
        a.error_rate.unwrap_or(configured),
        annotator_palette(&cfg),
        cfg.seeds.annotation,
    )?;
    let truth = Truth { cfg, manifest: None };
    match &a.url {
        Some(url) => Remote::new(url, a.token.as_deref())?.annotate(&a, oracle, truth),
        None => offline(&out, oracle, truth),
    }
}

/// Drains every outstanding task in the run's queue file. The run must not be live.
fn offline(out: &std::path::Path, mut oracle: OracleAnnotator, mut truth: Truth) -> anyhow::Result<()> {
    let queue = open_queue(out, &truth.cfg)?;
    let mut q = queue.lock();
    let periods: std::collections::BTreeSet<u32> = q
        .tasks()
        .iter()
        .filter(|t| matches!(t.status, TaskStatus::Pending | TaskStatus::Claimed))
        .map(|t| t.period)
        .collect();
    if periods.is_empty() {
        println!("no outstanding tasks in {}", out.display());
        return Ok(());
    }
    let last = *periods.last().expect("non-empty");
    truth.of(last, 0)?;
    let manifest = &truth.manifest.as_ref().expect("generated").1;
    for p in periods {
        let s = oracle.drain(&mut q, p, |s| manifest.sample(s).true_category)?;
        println!("period {p}: labeled {} tasks ({} corrupted)", s.labeled, s.corrupted);
    }
    Ok(())
}

struct Remote {
    http: reqwest::blocking::Client,
    base: String,
    token: Option<String>,
}

impl Remote {
    fn new(url: &str, token: Option<&str>) -> anyhow::Result<Self> {
        Ok(Self {
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()?,
            base: url.trim_end_matches('/').to_string(),
            token: token.map(str::to_string),
        })
    }

    /// Sends a request, retrying transport failures. Every endpoint used here is safe
    /// to repeat: claims are leased and label posts are idempotent.
    fn send(&self, method: reqwest::Method, path: &str, body: Option<Value>) -> anyhow::Result<(u16, Value)> {
        let mut last = None;
        for attempt in 0..4 {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 << attempt));
            }
            let mut req = self.http.request(method.clone(), format!("{}{path}", self.base));
            if let Some(t) = &self.token {
                req = req.bearer_auth(t);
            }
            if let Some(b) = &body {
                req = req.json(b);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let value = resp.json::<Value>().unwrap_or(Value::Null);
                    return Ok((status, value));
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt")).with_context(|| format!("{method} {path}"))
    }

    fn get(&self, path: &str) -> anyhow::Result<Value> {
        match self.send(reqwest::Method::GET, path, None)? {
            (200, v) => Ok(v),
            (s, v) => bail!("GET {path}: HTTP {s}: {}", v["error"]["message"]),
        }
    }

    fn annotate(&self, a: &AnnotateArgs, mut oracle: OracleAnnotator, mut truth: Truth) -> anyhow::Result<()> {
        let wait = || std::thread::sleep(Duration::from_millis(a.poll_ms));
        let mut labeled = 0usize;
        let mut advanced = 0usize;
        loop {
            let cur = match self.get("/api/periods/current") {
                Ok(v) => v,
                // the service exits with the run
                Err(_) if advanced > 0 && a.follow => break,
                Err(e) => return Err(e),
            };
            let period = cur["period"].as_u64().unwrap_or(0) as u32;
            match cur["state"].as_str().unwrap_or("") {
                "annotating" => {}
                "finished" => break,
                "timed_out" => bail!("the annotation window for period {period} closed"),
                _ if advanced > 0 && !a.follow => break,
                _ => {
                    wait();
                    continue;
                }
            }
            let path = format!(
                "/api/tasks?status=pending&limit={}&annotator={}",
                a.batch, a.annotator_id
            );
            let tasks = self.get(&path)?["tasks"].as_array().cloned().unwrap_or_default();
            for t in &tasks {
                if a.max_labels.is_some_and(|m| labeled >= m) {
                    break;
                }
                let id = t["task_id"].as_u64().context("task_id")?;
                let sample = t["sample_id"].as_u64().context("sample_id")?;
                let (label, _) = oracle.label_for(truth.of(period, sample)?);
                let body = json!({ "category": label, "annotator": a.annotator_id });
                match self.send(reqwest::Method::POST, &format!("/api/tasks/{id}/label"), Some(body))? {
                    (200, _) => labeled += 1,
                    (s, v) => bail!("labeling task {id}: HTTP {s}: {}", v["error"]["message"]),
                }
            }
            if a.max_labels.is_some_and(|m| labeled >= m) {
                println!("labeled {labeled} tasks");
                return Ok(());
            }
            if !tasks.is_empty() {
                continue;
            }
            self.review_spot_check(period, &mut truth)?;
            match self.send(reqwest::Method::POST, "/api/periods/advance", None)? {
                (202, _) => {
                    advanced += 1;
                    println!("period {period}: advanced after {labeled} labels");
                    if !a.follow {
                        break;
                    }
                }
                // another annotator still holds claims
                (409, _) => wait(),
                (s, v) => bail!("advance: HTTP {s}: {}", v["error"]["message"]),
            }
        }
        println!("labeled {labeled} tasks, advanced {advanced} periods");
        Ok(())
    }

    fn review_spot_check(&self, period: u32, truth: &mut Truth) -> anyhow::Result<()> {
        loop {
            let next = self.get("/api/spotcheck/next")?;
            let Some(sample) = next["sample"]["sample_id"].as_u64() else {
                return Ok(());
            };
            let predicted = next["sample"]["predicted_category"]
                .as_u64()
                .context("predicted_category")? as u32;
            let t = truth.of(period, sample)?;
            let verdict = if t == predicted {
                json!({ "verdict": "agree" })
            } else {
                json!({ "verdict": "corrected", "label": t })
            };
            match self.send(
                reqwest::Method::POST,
                &format!("/api/spotcheck/{sample}/verdict"),
                Some(verdict),
            )? {
                (200, _) => {}
                (s, v) => bail!("spot-check verdict for {sample}: HTTP {s}: {}", v["error"]["message"]),
            }
        }
    }
}
