//! The pretrain and run phases.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use osaka_core::algorithms::{make_learner, pretrain_maml, LearnerSpec};
use osaka_core::eval::{
    self, aggregate, run_episode, summarize, Aggregate, EpisodeTrace, RunSummary,
};
use osaka_core::models::{load_checkpoint, save_checkpoint};
use osaka_core::stream::{self, EpisodeStream, Pools};

use crate::config::{config_err, ExperimentConfig};

#[derive(Serialize)]
struct PretrainManifest<'a> {
    net: &'a osaka_core::models::NetSpec,
    pretrain: &'a osaka_core::algorithms::PretrainConfig,
    epochs: usize,
    first_meta_loss: Option<f64>,
    final_meta_loss: Option<f64>,
    meta_learned_inner_lrs: Vec<f64>,
}

/// Meta-train and write the checkpoint plus its JSON manifest.
pub fn cmd_pretrain(
    cfg: &ExperimentConfig,
    first_order: Option<bool>,
    output: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut pcfg = cfg.pretrain.config.clone();
    if let Some(fo) = first_order {
        pcfg.first_order = fo;
    }
    let net = cfg.net_spec();
    let result = pretrain_maml(&net, &cfg.stream, &pcfg)
        .with_context(|| "pre-training failed".to_string())?;

    let ckpt_path = output.unwrap_or_else(|| cfg.pretrain.checkpoint.clone());
    if let Some(parent) = ckpt_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_checkpoint(&result.params, &ckpt_path)?;
    let manifest = PretrainManifest {
        net: &net,
        pretrain: &pcfg,
        epochs: pcfg.epochs,
        first_meta_loss: result.loss_curve.first().copied(),
        final_meta_loss: result.loss_curve.last().copied(),
        meta_learned_inner_lrs: result.params.inner_lrs(),
    };
    let manifest_path = manifest_path(&ckpt_path);
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "wrote {} (meta-loss {:?} -> {:?}) and {}",
        ckpt_path.display(),
        manifest.first_meta_loss,
        manifest.final_meta_loss,
        manifest_path.display()
    );
    Ok(())
}

pub fn manifest_path(ckpt: &Path) -> PathBuf {
    let mut os = ckpt.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

/// Per-learner roll-up written as `summary_<name>.json`.
#[derive(Serialize, Deserialize)]
pub struct LearnerSummary {
    pub name: String,
    pub kind: String,
    #[serde(with = "osaka_core::algorithms::serde_threshold")]
    pub gamma: f64,
    #[serde(with = "osaka_core::algorithms::serde_threshold")]
    pub lambda: f64,
    pub config_hash: String,
    pub per_seed: Vec<RunSummary>,
    /// metric -> {mean, std, ci95, n}; present with >= 2 seeds.
    pub aggregate: BTreeMap<String, Aggregate>,
}

fn aggregate_summaries(
    name: &str,
    spec: &LearnerSpec,
    config_hash: &str,
    per_seed: Vec<RunSummary>,
) -> LearnerSummary {
    let mut agg = BTreeMap::new();
    if per_seed.len() >= 2 {
        let mut push = |key: &str, values: Vec<f64>| {
            if values.len() >= 2 {
                if let Ok(a) = aggregate(&values) {
                    agg.insert(key.to_string(), a);
                }
            }
        };
        push("total", per_seed.iter().map(|s| s.total_accuracy).collect());
        for family in osaka_core::stream::Family::ALL {
            let vals: Vec<f64> = per_seed
                .iter()
                .filter_map(|s| s.family_accuracy.get(family.as_str()).copied())
                .collect();
            if vals.len() == per_seed.len() {
                push(family.as_str(), vals);
            }
        }
        push(
            "boundary_precision",
            per_seed.iter().map(|s| s.boundary_precision).collect(),
        );
        push(
            "boundary_recall",
            per_seed.iter().map(|s| s.boundary_recall).collect(),
        );
        push(
            "boundary_f1",
            per_seed.iter().map(|s| s.boundary_f1).collect(),
        );
    }
    LearnerSummary {
        name: name.to_string(),
        kind: spec.kind.as_str().to_string(),
        gamma: spec.gamma,
        lambda: spec.lambda,
        config_hash: config_hash.to_string(),
        per_seed,
        aggregate: agg,
    }
}

/// One CL episode per (learner, seed), fanned out over a worker pool and
/// merged in deterministic (learner, seed) order.
pub fn cmd_run(cfg: &ExperimentConfig, jobs: usize) -> anyhow::Result<()> {
    if cfg.learners.is_empty() {
        return config_err("run requires at least one learner block");
    }
    if cfg.seeds.is_empty() {
        return config_err("run requires a non-empty seeds list");
    }
    // Checkpoints must resolve before any episode starts.
    for spec in &cfg.learners {
        let needs = spec.kind.requires_checkpoint() || spec.pretrain_checkpoint.is_some();
        if needs {
            let path = spec
                .pretrain_checkpoint
                .clone()
                .unwrap_or_else(|| cfg.pretrain.checkpoint.clone());
            if !path.exists() {
                return config_err(format!(
                    "learner {} needs checkpoint {}, which does not exist (run `osaka pretrain` first)",
                    spec.display_name(),
                    path.display()
                ));
            }
            load_checkpoint(&path)
                .map_err(|e| crate::config::ConfigError(format!("{}: {e}", path.display())))?;
        }
    }

    std::fs::create_dir_all(&cfg.output_dir)?;
    let net = cfg.net_spec();
    let pools = Pools::from_config(&cfg.stream)?;
    let config_hash = cfg.content_hash();

    // Ground-truth trace per seed (learner-independent).
    for &seed in &cfg.seeds {
        let truths: Vec<_> = EpisodeStream::new(&cfg.stream, &pools, seed)?
            .map(|(_, tr)| tr)
            .collect();
        stream::write_truth_csv(&truths, &cfg.output_dir.join(format!("truth_{seed}.csv")))?;
    }

    let tasks: Vec<(usize, u64)> = cfg
        .learners
        .iter()
        .enumerate()
        .flat_map(|(i, _)| cfg.seeds.iter().map(move |s| (i, *s)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, u64, EpisodeTrace)>> = Mutex::new(Vec::new());
    let worker_error: Mutex<Option<String>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= tasks.len() {
                    break;
                }
                let (learner_idx, seed) = tasks[i];
                let spec = &cfg.learners[learner_idx];
                let run = || -> anyhow::Result<EpisodeTrace> {
                    let ckpt = match (
                        spec.kind.requires_checkpoint() || spec.pretrain_checkpoint.is_some(),
                        &spec.pretrain_checkpoint,
                    ) {
                        (false, _) => None,
                        (true, Some(p)) => Some(load_checkpoint(p)?),
                        (true, None) => Some(load_checkpoint(&cfg.pretrain.checkpoint)?),
                    };
                    let mut learner = make_learner(spec, &net, ckpt, seed)?;
                    let stream = EpisodeStream::new(&cfg.stream, &pools, seed)?;
                    Ok(run_episode(learner.as_mut(), stream))
                };
                match run() {
                    Ok(trace) => results.lock().unwrap().push((learner_idx, seed, trace)),
                    Err(e) => {
                        *worker_error.lock().unwrap() =
                            Some(format!("{} seed {seed}: {e}", spec.display_name()));
                        break;
                    }
                }
            });
        }
    });

    if let Some(e) = worker_error.into_inner().unwrap() {
        anyhow::bail!("episode failed: {e}");
    }
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, s, _)| (*i, *s));

    let mut failures = Vec::new();
    for (learner_idx, spec) in cfg.learners.iter().enumerate() {
        let name = spec.display_name();
        let mut per_seed = Vec::new();
        for (_, seed, trace) in results.iter().filter(|(i, _, _)| *i == learner_idx) {
            let path = cfg.output_dir.join(format!("trace_{name}_{seed}.csv"));
            eval::write_trace_csv(trace, &path)?;
            if let Some(f) = &trace.failure {
                failures.push(format!("{name} seed {seed}: {f}"));
            }
            per_seed.push(summarize(trace, *seed, &config_hash, 0)?);
        }
        let summary = aggregate_summaries(name, spec, &config_hash, per_seed);
        let spath = cfg.output_dir.join(format!("summary_{name}.json"));
        std::fs::write(&spath, serde_json::to_string_pretty(&summary)?)?;
        if let Some(total) = summary.aggregate.get("total") {
            println!(
                "{name}: total {:.4} +- {:.4} (n={})",
                total.mean, total.std, total.n
            );
        } else if let Some(s) = summary.per_seed.first() {
            println!("{name}: total {:.4} (single seed)", s.total_accuracy);
        }
    }
    let mut echo = std::fs::File::create(cfg.output_dir.join("config.json"))?;
    echo.write_all(serde_json::to_string_pretty(cfg)?.as_bytes())?;

    if !failures.is_empty() {
        anyhow::bail!(
            "{} episode(s) truncated: {}",
            failures.len(),
            failures.join("; ")
        );
    }
    Ok(())
}
