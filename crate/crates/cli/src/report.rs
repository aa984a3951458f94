//! Comparison table over finished search runs.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use dms::search::{EvalMetrics, PipelineReport};

use crate::commands::{read_json, REPORT_FILE};
use crate::Result;

/// Reports of the given run directories, ordered by path.
pub fn load(runs: &[PathBuf]) -> Result<Vec<(String, PipelineReport)>> {
    let mut runs: Vec<&PathBuf> = runs.iter().collect();
    runs.sort();
    runs.dedup();
    runs.into_iter()
        .map(|dir| Ok((run_name(dir), read_json(&dir.join(REPORT_FILE))?)))
        .collect()
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Accuracy when the task has one, otherwise the loss.
fn score(m: &EvalMetrics) -> (f64, &'static str) {
    match m.accuracy {
        Some(a) => (a, "acc"),
        None => (m.loss, "loss"),
    }
}

/// Searched minus baseline, signed so that positive is better.
fn improvement(r: &PipelineReport) -> Option<f64> {
    let b = r.baseline.as_ref()?;
    let (s, kind) = score(&r.test);
    let (u, _) = score(&b.test);
    Some(if kind == "acc" { s - u } else { u - s })
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn render(rows: &[(String, PipelineReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:<8} {:>6} {:<8} {:>12} {:>12} {:>7} {:<6} {:>10} {:>10} {:>10}",
        "run", "pipeline", "seed", "resource", "target", "exported", "ratio", "metric",
        "searched", "uniform", "delta"
    );
    for (name, r) in rows {
        let (s, kind) = score(&r.test);
        let (u, d) = match (&r.baseline, improvement(r)) {
            (Some(b), Some(d)) => (format!("{:.4}", score(&b.test).0), format!("{d:+.4}")),
            _ => ("-".into(), "-".into()),
        };
        let _ = writeln!(
            out,
            "{:<20} {:<8} {:>6} {:<8} {:>12.5e} {:>12.5e} {:>7.4} {:<6} {:>10.4} {:>10} {:>10}",
            name,
            r.pipeline.to_string(),
            r.seed,
            r.resource_kind.to_string(),
            r.r_final,
            r.exported_resource,
            r.exported_resource / r.r_final,
            kind,
            s,
            u,
            d
        );
    }
    let deltas: Vec<f64> = rows.iter().filter_map(|(_, r)| improvement(r)).collect();
    let wins = deltas.iter().filter(|&&d| d >= 0.0).count();
    let _ = writeln!(
        out,
        "runs {}; with baseline {}; searched >= uniform in {}/{}; median delta {}",
        rows.len(),
        deltas.len(),
        wins,
        deltas.len(),
        median(deltas.clone()).map_or_else(|| "-".into(), |m| format!("{m:+.4}"))
    );
    out
}
