use crate::energy::SoftmaxOperatingPoint;
use crate::CategoryId;
use serde::{Deserialize, Serialize};
use std::fmt::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: CategoryId,
    pub name: String,
    pub n_val: usize,
    pub accuracy: f64,
    pub n_human_annotations: usize,
    pub n_full_annotations: usize,
    /// `None` when unbounded (zero annotations, positive accuracy) or not applicable.
    pub efficiency: Option<f64>,
    pub efficiency_unbounded: bool,
    /// Accuracy of the full-annotation baseline on the same category, when it was run.
    pub baseline_accuracy: Option<f64>,
}

/// Sizes behind the ratios, so each can be recounted from the artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PartitionCounts {
    /// Samples scored for the confidence statistics.
    pub n_scored: usize,
    pub n_high: usize,
    pub n_low: usize,
    pub n_high_correct: usize,
    pub n_novel_scored: usize,
    pub n_novel_low: usize,
    pub annotation_requests: usize,
    pub c_novel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotCheckSummary {
    pub batch_id: String,
    pub k: usize,
    pub agree: usize,
    pub agreement_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub period: u32,
    pub model_version: u64,
    pub n_known_categories: usize,
    pub class_avg_acc: f64,
    /// Over categories first learned this period (`None` in period 1).
    pub class_avg_acc_new_classes: Option<f64>,
    pub high_conf_ratio: f64,
    /// `None` when nothing was confident.
    pub high_conf_acc: Option<f64>,
    pub novel_detect_ratio: Option<f64>,
    /// `1 − |low| / |new|` (`None` in period 1).
    pub saved_effort: Option<f64>,
    pub tau: f64,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub counts: PartitionCounts,
    pub softmax_baseline: Option<SoftmaxOperatingPoint>,
    pub spot_check: Option<SpotCheckSummary>,
    pub per_category: Vec<CategoryReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Text,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown report format {other:?} (expected text, csv or json)")),
        }
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn opt_pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), pct)
}

pub fn render_text(r: &EvaluationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Period {} (model v{}, {} known categories, tau {:.4}, T {})",
        r.period, r.model_version, r.n_known_categories, r.tau, r.temperature
    );
    let _ = writeln!(s, "{:<28}{:>8}", "Class Avg. Acc. (%)", pct(r.class_avg_acc));
    let _ = writeln!(s, "{:<28}{:>8}", "High Conf. Ratio (%)", pct(r.high_conf_ratio));
    let _ = writeln!(s, "{:<28}{:>8}", "High Conf. Acc. (%)", opt_pct(r.high_conf_acc));
    let _ = writeln!(
        s,
        "{:<28}{:>8}",
        "Novel Detect Ratio (%)",
        opt_pct(r.novel_detect_ratio)
    );
    if let Some(a) = r.class_avg_acc_new_classes {
        let _ = writeln!(s, "new-class avg acc {}%", pct(a));
    }
    if let Some(e) = r.saved_effort {
        let _ = writeln!(
            s,
            "saved human effort {}% ({} of {} annotated, {} novel categories)",
            pct(e),
            r.counts.n_low,
            r.counts.n_scored,
            r.counts.c_novel
        );
    }
    if let Some(b) = &r.softmax_baseline {
        let _ = writeln!(
            s,
            "softmax baseline at matched accuracy: novel detect {}%, high conf acc {}%",
            pct(b.novel_detect_ratio),
            pct(b.high_conf_accuracy)
        );
    }
    if let Some(sc) = &r.spot_check {
        let _ = writeln!(
            s,
            "spot check {}: {}/{} agree ({}%)",
            sc.batch_id,
            sc.agree,
            sc.k,
            pct(sc.agreement_rate)
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<12}{:>7}{:>9}{:>8}{:>8}{:>11}",
        "species", "n_val", "acc(%)", "human", "full", "efficiency"
    );
    for c in &r.per_category {
        let eff = if c.efficiency_unbounded {
            "inf".to_string()
        } else {
            c.efficiency.map_or_else(|| "-".into(), |e| format!("{e:.2}"))
        };
        let _ = writeln!(
            s,
            "{:<12}{:>7}{:>9}{:>8}{:>8}{:>11}",
            c.name,
            c.n_val,
            pct(c.accuracy),
            c.n_human_annotations,
            c.n_full_annotations,
            eff
        );
    }
    s
}

/// Species, human annotations, then accuracy per method.
pub fn render_csv(r: &EvaluationReport) -> String {
    let mut s = String::from(
        "species,n_human_annotations,loop_accuracy,baseline_accuracy,n_full_annotations,n_val,efficiency\n",
    );
    for c in &r.per_category {
        let eff = if c.efficiency_unbounded {
            "inf".to_string()
        } else {
            c.efficiency.map_or_else(String::new, |e| format!("{e:.4}"))
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c.name,
            c.n_human_annotations,
            pct(c.accuracy),
            c.baseline_accuracy.map_or_else(String::new, pct),
            c.n_full_annotations,
            c.n_val,
            eff
        );
    }
    s
}

pub fn render_json(r: &EvaluationReport) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}
