//! Episode execution and online-cumulative metrics.
//!
//! Scoring is strictly online: each step's prediction is scored before the
//! learner sees the labels, and the trace row records that incurred loss and
//! accuracy together with the hidden ground truth for later breakdowns.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::{self, AlgoError, Learner};
use crate::ndcore;
use crate::stream::{Family, StepBatch, StepTruth};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty selection: no steps match the filter")]
    EmptySelection,
    #[error("aggregation needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("{file}:{line}: malformed trace row: {msg}")]
    Malformed {
        file: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// One scored step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub loss: f64,
    pub acc: f64,
    pub context_id: u64,
    pub family: Family,
    pub true_boundary: bool,
    pub detected_boundary: bool,
    pub modulation: Option<f64>,
}

/// Per-step record of a whole episode; `failure` marks a truncated run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeTrace {
    pub rows: Vec<TraceRow>,
    pub failure: Option<String>,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Run one episode: predict, score, then update, for every step of the
/// stream. A learner error truncates the trace with a failure marker instead
/// of propagating.
pub fn run_episode(
    learner: &mut dyn Learner,
    stream: impl Iterator<Item = (StepBatch, StepTruth)>,
) -> EpisodeTrace {
    let mut trace = EpisodeTrace::default();
    for (batch, truth) in stream {
        let step = (|| -> std::result::Result<TraceRow, AlgoError> {
            let logits = learner.predict(&batch.x)?;
            let loss = ndcore::softmax_cross_entropy(&logits, &batch.y)?.item()?;
            let acc = algorithms::accuracy(&logits, &batch.y);
            let diag = learner.update(&batch)?;
            Ok(TraceRow {
                t: truth.t,
                loss,
                acc,
                context_id: truth.context_id,
                family: truth.family,
                true_boundary: truth.is_boundary,
                detected_boundary: diag.detected_boundary,
                modulation: diag.modulation,
            })
        })();
        match step {
            Ok(row) => trace.rows.push(row),
            Err(e) => {
                trace.failure = Some(format!("step {}: {e}", truth.t));
                break;
            }
        }
    }
    trace
}

/// Mean per-step accuracy over the whole trace or one family.
pub fn cumulative_accuracy(trace: &EpisodeTrace, family: Option<Family>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for row in &trace.rows {
        if family.map_or(true, |f| row.family == f) {
            sum += row.acc;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptySelection);
    }
    Ok(sum / n as f64)
}

/// Boundary-detection precision, recall and F1.
///
/// With `window = 0` a detection is a true positive iff a true boundary
/// occurred at the same step; a wider window greedily matches detections to
/// unmatched true boundaries within `window` steps. Conventions: precision is
/// 1 with no detections, recall is 1 with no true boundaries, and F1 is 0
/// when both components vanish.
pub fn boundary_metrics(trace: &EpisodeTrace, window: usize) -> (f64, f64, f64) {
    let detections: Vec<usize> = trace
        .rows
        .iter()
        .filter(|r| r.detected_boundary)
        .map(|r| r.t)
        .collect();
    let truths: Vec<usize> = trace
        .rows
        .iter()
        .filter(|r| r.true_boundary)
        .map(|r| r.t)
        .collect();

    let tp = if window == 0 {
        trace
            .rows
            .iter()
            .filter(|r| r.detected_boundary && r.true_boundary)
            .count()
    } else {
        let mut matched = vec![false; truths.len()];
        let mut tp = 0;
        for d in &detections {
            let mut best: Option<(usize, usize)> = None;
            for (i, tr) in truths.iter().enumerate() {
                if matched[i] {
                    continue;
                }
                let dist = tr.abs_diff(*d);
                if dist <= window && best.map_or(true, |(_, bd)| dist < bd) {
                    best = Some((i, dist));
                }
            }
            if let Some((i, _)) = best {
                matched[i] = true;
                tp += 1;
            }
        }
        tp
    };

    let precision = if detections.is_empty() {
        1.0
    } else {
        tp as f64 / detections.len() as f64
    };
    let recall = if truths.is_empty() {
        1.0
    } else {
        tp as f64 / truths.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Rolled-up metrics of one episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub config_hash: String,
    pub n_steps: usize,
    pub total_accuracy: f64,
    /// Family tag -> (cumulative accuracy, step count); absent families omitted.
    pub family_accuracy: BTreeMap<String, f64>,
    pub family_steps: BTreeMap<String, usize>,
    pub boundary_precision: f64,
    pub boundary_recall: f64,
    pub boundary_f1: f64,
    pub failed: Option<String>,
}

pub fn summarize(
    trace: &EpisodeTrace,
    seed: u64,
    config_hash: &str,
    window: usize,
) -> Result<RunSummary> {
    let total = cumulative_accuracy(trace, None)?;
    let mut family_accuracy = BTreeMap::new();
    let mut family_steps = BTreeMap::new();
    for family in Family::ALL {
        let steps = trace.rows.iter().filter(|r| r.family == family).count();
        if steps > 0 {
            family_accuracy.insert(
                family.as_str().to_string(),
                cumulative_accuracy(trace, Some(family))?,
            );
            family_steps.insert(family.as_str().to_string(), steps);
        }
    }
    let (boundary_precision, boundary_recall, boundary_f1) = boundary_metrics(trace, window);
    Ok(RunSummary {
        seed,
        config_hash: config_hash.to_string(),
        n_steps: trace.len(),
        total_accuracy: total,
        family_accuracy,
        family_steps,
        boundary_precision,
        boundary_recall,
        boundary_f1,
        failed: trace.failure.clone(),
    })
}

/// Sample mean, sample standard deviation (n-1), and normal 95% CI half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    let n = values.len();
    if n < 2 {
        return Err(EvalError::TooFewRuns(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let ci95 = 1.96 * std / (n as f64).sqrt();
    Ok(Aggregate { mean, std, ci95, n })
}

const TRACE_HEADER: &str =
    "t,loss,acc,context_id,family,true_boundary,detected_boundary,modulation";

/// Trace CSV: one row per step, `modulation` empty when absent; a truncated
/// run appends a trailing `#failure:` comment.
pub fn write_trace_csv(trace: &EpisodeTrace, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{TRACE_HEADER}")?;
    for r in &trace.rows {
        let modulation = r.modulation.map(|m| m.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.t,
            r.loss,
            r.acc,
            r.context_id,
            r.family,
            u8::from(r.true_boundary),
            u8::from(r.detected_boundary),
            modulation
        )?;
    }
    if let Some(f) = &trace.failure {
        writeln!(w, "#failure:{f}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<EpisodeTrace> {
    let file = std::fs::File::open(path)?;
    let name = path.display().to_string();
    let mut trace = EpisodeTrace::default();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            if line != TRACE_HEADER {
                return Err(EvalError::Malformed {
                    file: name,
                    line: lineno,
                    msg: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        if let Some(msg) = line.strip_prefix("#failure:") {
            trace.failure = Some(msg.to_string());
            continue;
        }
        let bad = |msg: &str| EvalError::Malformed {
            file: name.clone(),
            line: lineno,
            msg: msg.to_string(),
        };
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(bad(&format!("expected 8 fields, got {}", parts.len())));
        }
        trace.rows.push(TraceRow {
            t: parts[0].parse().map_err(|_| bad("bad t"))?,
            loss: parts[1].parse().map_err(|_| bad("bad loss"))?,
            acc: parts[2].parse().map_err(|_| bad("bad acc"))?,
            context_id: parts[3].parse().map_err(|_| bad("bad context_id"))?,
            family: Family::parse(parts[4]).ok_or_else(|| bad("bad family"))?,
            true_boundary: parts[5] == "1",
            detected_boundary: parts[6] == "1",
            modulation: if parts[7].is_empty() {
                None
            } else {
                Some(parts[7].parse().map_err(|_| bad("bad modulation"))?)
            },
        });
    }
    Ok(trace)
}
