//! Runs a two-period oracle experiment and prints the headline numbers.
//!
//! `cargo run --release -p loopid-core --example two_periods -- [seed] [out-dir]`
//!
//! `LOOPID_CONFIG` names a config file to start from instead of the defaults.

use loopid_core::config::ExperimentConfig;
use loopid_core::pipeline::{run_with_oracle, RunOptions};
use std::time::Instant;

fn main() {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(1);
    let out = args
        .next()
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("loopid-two-periods-{seed}")));
    let _ = std::fs::remove_dir_all(&out);
    let mut cfg = match std::env::var("LOOPID_CONFIG") {
        Ok(path) => ExperimentConfig::load(path.as_ref()).expect("config"),
        Err(_) => ExperimentConfig::default(),
    };
    cfg.datagen.seed = seed;
    cfg.baselines.pseudo_only = true;
    let t0 = Instant::now();
    let summary = run_with_oracle(
        &cfg,
        &RunOptions {
            out,
            periods: 2,
            resume: false,
        },
    )
    .expect("run");
    for r in &summary.reports {
        println!(
            "period {}: class avg {:.3} | new classes {:?} | high conf {:.3} acc {:?} | novel {:?} | saved {:?} | tau {:.3}",
            r.period,
            r.class_avg_acc,
            r.class_avg_acc_new_classes,
            r.high_conf_ratio,
            r.high_conf_acc,
            r.novel_detect_ratio,
            r.saved_effort,
            r.tau
        );
        if let Some(s) = &r.softmax_baseline {
            println!("  softmax baseline: {s:?}");
        }
    }
    for b in &summary.baselines {
        println!("transfer baseline p{}: {:.3}", b.period, b.class_avg_acc);
    }
    for a in &summary.ablations {
        println!("pseudo-only p{}: {:.3}", a.period, a.class_avg_acc);
    }
    if let Some(r2) = summary.reports.get(1) {
        let known = &summary.reports[0].per_category;
        let mut worse = vec![];
        for row in r2
            .per_category
            .iter()
            .filter(|r| known.iter().any(|k| k.category == r.category))
        {
            let base = row.baseline_accuracy.unwrap_or(0.0);
            let ok = row.efficiency_unbounded || row.efficiency.unwrap_or(0.0) >= base;
            if !ok {
                worse.push((
                    row.category,
                    row.accuracy,
                    row.n_human_annotations,
                    row.n_full_annotations,
                    base,
                ));
            }
        }
        println!("label efficiency below baseline: {worse:?}");
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}
