use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::protocol::{MergeReport, MethodResult, RunReport, Timings};
use crate::error::Result;
use crate::metrics::{mean, AccuracyMatrix};

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

fn list(values: &[f64]) -> String {
    values.iter().map(|&v| pct(v)).collect::<Vec<_>>().join(",")
}

/// Key-value summary. Contains no wall-clock data.
pub fn summary_text(report: &RunReport) -> String {
    let mut s = String::new();
    let c = &report.config;
    writeln!(s, "runs={}", c.runs).unwrap();
    writeln!(s, "seed={}", c.seed).unwrap();
    writeln!(
        s,
        "run_seeds={}",
        report.seeds.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    )
    .unwrap();
    writeln!(s, "tasks={}", c.tasks).unwrap();
    writeln!(s, "spread=sample_std").unwrap();
    for r in &report.results {
        let m = r.method.name();
        writeln!(s, "{m}.average={}", pct(r.average_mean)).unwrap();
        writeln!(s, "{m}.average_std={}", pct(r.average_std)).unwrap();
        writeln!(s, "{m}.average_per_run={}", list(&r.final_average)).unwrap();
        if let Some(b) = r.bwt_mean {
            writeln!(s, "{m}.bwt={}", pct(b)).unwrap();
            writeln!(s, "{m}.bwt_per_run={}", list(&r.bwt)).unwrap();
        }
        if let Some(a) = r.membership_accuracy_mean {
            writeln!(s, "{m}.membership_accuracy={}", pct(a)).unwrap();
            writeln!(s, "{m}.membership_accuracy_per_run={}", list(&r.membership_accuracy)).unwrap();
        }
    }
    for f in &report.fingerprints {
        writeln!(s, "fingerprint.run{}.task{}.{}={}", f.run, f.task, f.artifact, f.sha256).unwrap();
    }
    writeln!(s, "config={}", c.to_json()).unwrap();
    s
}

/// Element-wise mean over runs; entries missing in any run stay empty.
pub fn mean_matrix(matrices: &[AccuracyMatrix]) -> Vec<Vec<Option<f64>>> {
    let t = matrices.first().map_or(0, |m| m.tasks());
    (0..t)
        .map(|i| {
            (0..t)
                .map(|j| {
                    let v: Option<Vec<f64>> = matrices.iter().map(|m| m.get(i, j)).collect();
                    v.map(|v| mean(&v))
                })
                .collect()
        })
        .collect()
}

/// `stage,task_0,…` header followed by one row per stage.
pub fn matrix_csv(result: &MethodResult) -> String {
    let rows = mean_matrix(&result.matrices);
    let mut s = String::from("stage");
    for j in 0..rows.len() {
        write!(s, ",task_{j}").unwrap();
    }
    s.push('\n');
    for (i, row) in rows.iter().enumerate() {
        write!(s, "{i}").unwrap();
        for v in row {
            s.push(',');
            if let Some(v) = v {
                s.push_str(&pct(*v));
            }
        }
        s.push('\n');
    }
    s
}

pub fn histogram_csv(report: &RunReport) -> String {
    let mut s = String::from("method,true_task,bin_lo,bin_hi,count\n");
    for r in &report.results {
        for (task, h) in r.histograms.iter().enumerate() {
            let bins = h.len() as f64;
            for (b, count) in h.iter().enumerate() {
                writeln!(
                    s,
                    "{},{},{},{},{}",
                    r.method.name(),
                    task,
                    b as f64 / bins,
                    (b + 1) as f64 / bins,
                    count
                )
                .unwrap();
            }
        }
    }
    s
}

pub fn timings_csv(timings: &Timings) -> String {
    let mut s = String::from("run,stage,phase,seconds\n");
    for t in &timings.0 {
        writeln!(s, "{},{},{},{:.3}", t.run, t.stage, t.phase, t.seconds).unwrap();
    }
    s
}

pub fn merge_summary(m: &MergeReport) -> String {
    let mut s = String::new();
    writeln!(s, "merge.unmerged={}", pct(m.unmerged_mean)).unwrap();
    writeln!(s, "merge.merged={}", pct(m.merged_mean)).unwrap();
    writeln!(s, "merge.unmerged_per_run={}", list(&m.unmerged)).unwrap();
    writeln!(s, "merge.merged_per_run={}", list(&m.merged)).unwrap();
    let student: Vec<f64> = m.student_accuracy.iter().flatten().copied().collect();
    writeln!(s, "merge.student_accuracy_per_run={}", list(&student)).unwrap();
    s
}

/// Writes the report files into `out_dir` and returns their paths. Timing
/// data goes to its own file so the rest is reproducible byte for byte.
pub fn emit_report(report: &RunReport, timings: Option<&Timings>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut files = vec![
        (out_dir.join("summary.txt"), summary_text(report)),
        (out_dir.join("histograms.csv"), histogram_csv(report)),
        (out_dir.join("report.json"), serde_json::to_string_pretty(report)?),
    ];
    for r in &report.results {
        files.push((out_dir.join(format!("accuracy_{}.csv", r.method.name())), matrix_csv(r)));
    }
    if let Some(t) = timings {
        files.push((out_dir.join("timings.csv"), timings_csv(t)));
    }
    let mut written = Vec::new();
    for (path, body) in files {
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}
