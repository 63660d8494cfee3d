//! Report generation: a Table-2-style text summary with significance
//! bolding, smoothed per-step accuracy curves, and a boundary
//! precision-recall scatter, all from the files a run directory holds.

use std::collections::BTreeMap;
use std::fmt::Write as FmtWrite;
use std::path::{Path, PathBuf};

use anyhow::Context;

use osaka_core::eval::{read_trace_csv, Aggregate};
use osaka_core::stream::Family;

use crate::runner::LearnerSummary;
use crate::svg;

pub struct ReportInputs {
    pub summaries: Vec<LearnerSummary>,
    /// learner name -> per-seed traces' accuracy series.
    pub acc_series: BTreeMap<String, Vec<Vec<f64>>>,
}

pub fn load_run_dir(dir: &Path) -> anyhow::Result<ReportInputs> {
    let mut summaries = Vec::new();
    let mut acc_series: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in &entries {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        if let Some(rest) = name
            .strip_prefix("summary_")
            .and_then(|n| n.strip_suffix(".json"))
        {
            let text = std::fs::read_to_string(path)?;
            let summary: LearnerSummary = serde_json::from_str(&text)
                .with_context(|| format!("{}: bad summary json", path.display()))?;
            let _ = rest;
            summaries.push(summary);
        } else if let Some(rest) = name
            .strip_prefix("trace_")
            .and_then(|n| n.strip_suffix(".csv"))
        {
            // trace_<learner>_<seed>.csv; learner names may contain '_', the
            // seed is the final segment.
            let Some(idx) = rest.rfind('_') else { continue };
            let learner = rest[..idx].to_string();
            let trace = read_trace_csv(path)?;
            acc_series
                .entry(learner)
                .or_default()
                .push(trace.rows.iter().map(|r| r.acc).collect());
        }
    }
    if summaries.is_empty() {
        anyhow::bail!("{}: no summary_*.json files found", dir.display());
    }
    Ok(ReportInputs {
        summaries,
        acc_series,
    })
}

/// Trailing moving average; window 1 reproduces the input exactly.
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..series.len())
        .map(|i| {
            let start = (i + 1).saturating_sub(w);
            let slice = &series[start..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// A method is bold iff its 95% CI excludes every other method's mean.
pub fn bold_mask(totals: &[Option<Aggregate>]) -> Vec<bool> {
    totals
        .iter()
        .enumerate()
        .map(|(i, agg)| {
            let Some(a) = agg else { return false };
            totals.iter().enumerate().all(|(j, other)| {
                if i == j {
                    return true;
                }
                match other {
                    Some(o) => (o.mean - a.mean).abs() > a.ci95,
                    None => true,
                }
            })
        })
        .collect()
}

pub fn render_table(summaries: &[LearnerSummary], ansi: bool) -> String {
    let columns: Vec<(&str, &str)> = vec![
        ("total", "Total"),
        (Family::Pretrain.as_str(), "Pretrain"),
        (Family::OodInputs.as_str(), "OoD-inputs"),
        (Family::OodTargets.as_str(), "OoD-targets"),
        ("boundary_f1", "Boundary-F1"),
    ];
    let totals: Vec<Option<Aggregate>> = summaries
        .iter()
        .map(|s| s.aggregate.get("total").copied())
        .collect();
    let bold = bold_mask(&totals);

    let mut out = String::new();
    let name_w = summaries
        .iter()
        .map(|s| s.name.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let _ = write!(out, "{:<name_w$}", "method");
    for (_, header) in &columns {
        let _ = write!(out, "  {header:>16}");
    }
    out.push('\n');
    let _ = writeln!(out, "{}", "-".repeat(name_w + columns.len() * 18));
    for (i, s) in summaries.iter().enumerate() {
        let _ = write!(out, "{:<name_w$}", s.name);
        for (key, _) in &columns {
            let cell = match s.aggregate.get(*key) {
                Some(a) => format!("{:.3} +-{:.3}", a.mean, a.std),
                None => match s.per_seed.first() {
                    Some(first) if *key == "total" => format!("{:.3}", first.total_accuracy),
                    _ => "-".to_string(),
                },
            };
            let cell = if bold[i] && *key == "total" {
                if ansi {
                    format!("\u{1b}[1m{cell}*\u{1b}[0m")
                } else {
                    format!("{cell}*")
                }
            } else {
                cell
            };
            // ANSI escapes confuse the width math; pad on the plain text.
            let pad = 16usize.saturating_sub(visible_len(&cell));
            let _ = write!(out, "  {}{cell}", " ".repeat(pad));
        }
        out.push('\n');
    }
    let _ = writeln!(out, "(* total CI excludes every other method's mean)");
    out
}

fn visible_len(s: &str) -> usize {
    let mut len = 0;
    let mut in_escape = false;
    for c in s.chars() {
        match (in_escape, c) {
            (false, '\u{1b}') => in_escape = true,
            (false, _) => len += 1,
            (true, 'm') => in_escape = false,
            (true, _) => {}
        }
    }
    len
}

pub fn cmd_report(dir: &Path, window: usize) -> anyhow::Result<()> {
    let inputs = load_run_dir(dir)?;
    let table = render_table(&inputs.summaries, true);
    println!("{table}");
    std::fs::write(
        dir.join("report.txt"),
        render_table(&inputs.summaries, false),
    )?;

    // Smoothed per-step accuracy curves (mean across seeds per learner).
    let mut curves = Vec::new();
    for (name, series) in &inputs.acc_series {
        let max_len = series.iter().map(Vec::len).max().unwrap_or(0);
        if max_len == 0 {
            continue;
        }
        let mut mean_curve = vec![0.0; max_len];
        let mut counts = vec![0usize; max_len];
        for s in series {
            for (t, v) in s.iter().enumerate() {
                mean_curve[t] += v;
                counts[t] += 1;
            }
        }
        for (v, c) in mean_curve.iter_mut().zip(&counts) {
            *v /= (*c).max(1) as f64;
        }
        curves.push((name.clone(), smooth(&mean_curve, window)));
    }
    if !curves.is_empty() {
        let svg_text = svg::line_chart(
            "online accuracy (smoothed)",
            "t",
            "accuracy",
            &curves,
            (0.0, 1.0),
        );
        std::fs::write(dir.join("curves.svg"), svg_text)?;
    }

    // Boundary precision-recall scatter colored by gamma.
    let mut points = Vec::new();
    for s in &inputs.summaries {
        for seed in &s.per_seed {
            points.push((seed.boundary_recall, seed.boundary_precision, s.gamma));
        }
    }
    let scatter = svg::pr_scatter("boundary detection", &points);
    std::fs::write(dir.join("pr_scatter.svg"), scatter)?;

    println!(
        "wrote {}, {}, {}",
        dir.join("report.txt").display(),
        dir.join("curves.svg").display(),
        dir.join("pr_scatter.svg").display()
    );
    Ok(())
}
