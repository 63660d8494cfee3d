//! The task-stream environment: a context Markov chain over synthetic
//! Gaussian-prototype classification families, plus the pre-training episode
//! sampler.
//!
//! Three families share one mechanism: a context picks `ways` prototypes
//! from its pool and a label bijection over them.
//!
//! * `pretrain` — prototypes from the pre-training pool.
//! * `ood_inputs` — prototypes from a mean-shifted pool.
//! * `ood_targets` — the pre-training pool with labels remapped by a
//!   bijection held out from pre-training's set, so the input marginal is
//!   unchanged but `p(y|x)` is context-dependent.
//!
//! Two label regimes realize the held-out split ([`LabelMode`]):
//!
//! * `episodic` (default) — labels are drawn per context: even permutations
//!   for pretrain and ood_inputs, odd permutations for ood_targets. Every
//!   context switch reshuffles the mapping, the standard few-shot protocol.
//! * `canonical` — subsets take one prototype per residue class `id % ways`
//!   and pretrain/ood_inputs always use the canonical label `id % ways`,
//!   which a model can commit to during pre-training; ood_targets composes a
//!   non-identity permutation on top. This is the remapped-targets regime
//!   where a frozen representation is stuck with stale semantics.
//!
//! Learners only ever see [`StepBatch`] (inputs, labels, timestep); context
//! identity and boundary timing travel separately as [`StepTruth`] for the
//! evaluator.

pub mod sinusoid;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndcore::Tensor;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid stream config: {0}")]
    InvalidConfig(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StreamError>;

/// RNG stream ids carved out of one seed (ChaCha supports independent
/// streams per seed).
pub mod rng_streams {
    pub const POOLS: u64 = 1;
    pub const EPISODE: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const LEARNER: u64 = 4;
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Pretrain,
    OodInputs,
    OodTargets,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Pretrain, Family::OodInputs, Family::OodTargets];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Pretrain => "pretrain",
            Family::OodInputs => "ood_inputs",
            Family::OodTargets => "ood_targets",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        match s {
            "pretrain" => Some(Family::Pretrain),
            "ood_inputs" => Some(Family::OodInputs),
            "ood_targets" => Some(Family::OodTargets),
            _ => None,
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One hidden context: a prototype subset and its label bijection.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSpec {
    pub context_id: u64,
    pub family: Family,
    /// Prototype ids into the family's pool, position `i` holding residue `i`.
    pub class_subset: Vec<usize>,
    /// `label_map[i]` is the label emitted for `class_subset[i]`; always a
    /// bijection onto `0..ways`.
    pub label_map: Vec<usize>,
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolsSpec {
    pub n_pretrain: usize,
    pub n_ood: usize,
    pub mu_shift: f64,
}

/// How contexts assign labels; see the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Episodic,
    Canonical,
}

/// Stream profile; field names match the JSON profile format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub alpha: f64,
    pub episode_length: usize,
    /// (pretrain, ood_inputs, ood_targets) fresh-draw probabilities.
    pub mixture: [f64; 3],
    pub ways: usize,
    pub samples_per_step: usize,
    pub dim: usize,
    pub noise: f64,
    pub pools: PoolsSpec,
    pub seed: u64,
    #[serde(default)]
    pub label_mode: LabelMode,
    /// Fixed-list mode: pre-enumerate this many contexts and run the Markov
    /// chain over them (uniform off-diagonal, current context excluded).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_contexts: Option<usize>,
}

impl StreamConfig {
    /// The default desk-scale classification profile.
    pub fn default_profile() -> StreamConfig {
        StreamConfig {
            alpha: 0.98,
            episode_length: 10_000,
            mixture: [0.5, 0.25, 0.25],
            ways: 5,
            samples_per_step: 10,
            dim: 16,
            noise: 0.3,
            pools: PoolsSpec {
                n_pretrain: 64,
                n_ood: 64,
                mu_shift: 1.0,
            },
            seed: 7,
            label_mode: LabelMode::Episodic,
            fixed_contexts: None,
        }
    }

    /// The remapped-targets regime (the font-task analog): canonical labels
    /// at pre-training, held-out permutations on the same inputs at CL time.
    pub fn font_task_profile() -> StreamConfig {
        StreamConfig {
            mixture: [0.0, 0.0, 1.0],
            label_mode: LabelMode::Canonical,
            ..StreamConfig::default_profile()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(StreamError::InvalidConfig(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        let total: f64 = self.mixture.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(StreamError::InvalidConfig(format!(
                "mixture must sum to 1, got {total}"
            )));
        }
        if self.mixture.iter().any(|p| *p < 0.0) {
            return Err(StreamError::InvalidConfig(
                "mixture weights must be >= 0".into(),
            ));
        }
        if self.ways < 2 {
            return Err(StreamError::InvalidConfig("ways must be >= 2".into()));
        }
        if self.pools.n_pretrain < self.ways || self.pools.n_ood < self.ways {
            return Err(StreamError::InvalidConfig(
                "prototype pools need at least one prototype per residue class".into(),
            ));
        }
        if self.samples_per_step == 0 || self.dim == 0 || self.episode_length == 0 {
            return Err(StreamError::InvalidConfig(
                "samples_per_step, dim and episode_length must be >= 1".into(),
            ));
        }
        if let Some(n) = self.fixed_contexts {
            if n < 2 {
                return Err(StreamError::InvalidConfig(
                    "fixed-list mode needs at least 2 contexts".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Prototype pools; `pretrain` and `ood` are disjoint by construction (the
/// ood pool is drawn around `mu_shift * ones`).
#[derive(Debug, Clone)]
pub struct Pools {
    pub pretrain: Vec<Vec<f64>>,
    pub ood: Vec<Vec<f64>>,
}

impl Pools {
    pub fn from_config(cfg: &StreamConfig) -> Result<Pools> {
        let mut rng = seeded_rng(cfg.seed, rng_streams::POOLS);
        build_pools(cfg, &mut rng)
    }

    fn pool(&self, family: Family) -> &Vec<Vec<f64>> {
        match family {
            Family::Pretrain | Family::OodTargets => &self.pretrain,
            Family::OodInputs => &self.ood,
        }
    }
}

/// Pre-training prototypes ~ N(0, I); ood-inputs prototypes ~ N(mu_shift*1, I).
pub fn build_pools(cfg: &StreamConfig, rng: &mut ChaCha8Rng) -> Result<Pools> {
    cfg.validate()?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |mean: f64, n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..cfg.dim).map(|_| mean + normal.sample(rng)).collect())
            .collect()
    };
    let pretrain = draw(0.0, cfg.pools.n_pretrain);
    let ood = draw(cfg.pools.mu_shift, cfg.pools.n_ood);
    Ok(Pools { pretrain, ood })
}

/// Uniformly pick one prototype id per residue class `id % ways`.
fn draw_subset_residue(pool_size: usize, ways: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..ways)
        .map(|r| {
            let count = (pool_size - r).div_ceil(ways);
            let k = rng.gen_range(0..count);
            r + k * ways
        })
        .collect()
}

/// Uniformly pick `ways` distinct prototype ids (partial Fisher-Yates).
fn draw_subset_uniform(pool_size: usize, ways: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..pool_size).collect();
    for i in 0..ways {
        let j = rng.gen_range(i..pool_size);
        ids.swap(i, j);
    }
    ids.truncate(ways);
    ids
}

fn permutation_is_even(perm: &[usize]) -> bool {
    // Count inversions; fine at `ways` scale.
    let mut inversions = 0usize;
    for i in 0..perm.len() {
        for j in i + 1..perm.len() {
            if perm[i] > perm[j] {
                inversions += 1;
            }
        }
    }
    inversions % 2 == 0
}

/// Uniform permutation of `0..ways` with the requested parity. A uniform
/// draw of the wrong parity is fixed by one transposition, which maps the
/// classes onto each other bijectively, so uniformity is preserved.
fn draw_permutation_with_parity(ways: usize, even: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..ways).collect();
    for i in (1..ways).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    if permutation_is_even(&perm) != even {
        perm.swap(0, 1);
    }
    perm
}

/// Uniform non-identity permutation of `0..ways`.
fn draw_non_identity(ways: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    loop {
        let mut perm: Vec<usize> = (0..ways).collect();
        for i in (1..ways).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().any(|(i, p)| i != *p) {
            return perm;
        }
    }
}

fn draw_context(
    cfg: &StreamConfig,
    pools: &Pools,
    family: Family,
    context_id: u64,
    rng: &mut ChaCha8Rng,
) -> ContextSpec {
    let pool_size = pools.pool(family).len();
    let (class_subset, label_map) = match cfg.label_mode {
        LabelMode::Episodic => {
            let subset = draw_subset_uniform(pool_size, cfg.ways, rng);
            // Pre-training's bijection set is the even permutations; the
            // held-out ood_targets set is the odd ones.
            let even = family != Family::OodTargets;
            (subset, draw_permutation_with_parity(cfg.ways, even, rng))
        }
        LabelMode::Canonical => {
            let subset = draw_subset_residue(pool_size, cfg.ways, rng);
            // Position i holds residue i, so the canonical map is the
            // identity; ood_targets composes a held-out non-identity
            // permutation on top of it.
            let map = match family {
                Family::Pretrain | Family::OodInputs => (0..cfg.ways).collect(),
                Family::OodTargets => draw_non_identity(cfg.ways, rng),
            };
            (subset, map)
        }
    };
    ContextSpec {
        context_id,
        family,
        class_subset,
        label_map,
        noise: cfg.noise,
    }
}

fn sample_family(mixture: &[f64; 3], rng: &mut ChaCha8Rng) -> Family {
    let r: f64 = rng.gen();
    if r < mixture[0] {
        Family::Pretrain
    } else if r < mixture[0] + mixture[1] {
        Family::OodInputs
    } else {
        Family::OodTargets
    }
}

/// Markov transition: stay on `prev` with probability alpha, otherwise draw a
/// fresh context (family by mixture, then subset and label map). The first
/// call draws fresh unconditionally.
pub fn next_context(
    cfg: &StreamConfig,
    pools: &Pools,
    prev: Option<&ContextSpec>,
    next_id: &mut u64,
    rng: &mut ChaCha8Rng,
) -> ContextSpec {
    if let Some(p) = prev {
        if rng.gen::<f64>() < cfg.alpha {
            return p.clone();
        }
    }
    let family = sample_family(&cfg.mixture, rng);
    let id = *next_id;
    *next_id += 1;
    draw_context(cfg, pools, family, id, rng)
}

/// The per-timestep labelled batch visible to learners.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub t: usize,
}

/// Ground truth for the evaluator; never handed to learners.
#[derive(Debug, Clone, Copy)]
pub struct StepTruth {
    pub t: usize,
    pub context_id: u64,
    pub family: Family,
    pub is_boundary: bool,
}

/// Draw one batch from a context: emit `prototype + noise * N(0, I)` with
/// the mapped label. Classes cycle in shuffled round-robin order (the
/// episodic task-batch protocol: every class appears `samples/ways` times
/// per batch, so the label marginal is exactly uniform).
pub fn sample_step(
    ctx: &ContextSpec,
    pools: &Pools,
    samples: usize,
    dim: usize,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> StepBatch {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let pool = pools.pool(ctx.family);
    let ways = ctx.class_subset.len();
    let mut order: Vec<usize> = Vec::with_capacity(samples);
    while order.len() < samples {
        let mut round: Vec<usize> = (0..ways).collect();
        for i in (1..round.len()).rev() {
            let j = rng.gen_range(0..=i);
            round.swap(i, j);
        }
        order.extend(round);
    }
    order.truncate(samples);

    let mut x = Vec::with_capacity(samples * dim);
    let mut y = Vec::with_capacity(samples);
    for &pos in &order {
        let proto = &pool[ctx.class_subset[pos]];
        for d in 0..dim {
            x.push(proto[d] + ctx.noise * normal.sample(rng));
        }
        y.push(ctx.label_map[pos]);
    }
    StepBatch {
        x: Tensor::new(samples, dim, x).expect("batch shape"),
        y,
        t,
    }
}

/// The continual-learning stream: exactly `episode_length` steps of the
/// context chain, yielding `(batch, truth)` pairs. Step 0 counts as a true
/// boundary (the chain enters its first context).
pub struct EpisodeStream {
    cfg: StreamConfig,
    pools: Pools,
    rng: ChaCha8Rng,
    current: Option<ContextSpec>,
    fixed: Option<Vec<ContextSpec>>,
    fixed_idx: usize,
    next_fresh_id: u64,
    t: usize,
}

impl EpisodeStream {
    /// `episode_seed` drives the chain and observation noise; the pools come
    /// from the profile seed, so all episodes share one environment.
    pub fn new(cfg: &StreamConfig, pools: &Pools, episode_seed: u64) -> Result<EpisodeStream> {
        cfg.validate()?;
        let mut rng = seeded_rng(episode_seed, rng_streams::EPISODE);
        let fixed = match cfg.fixed_contexts {
            None => None,
            Some(n) => {
                // Composition follows the mixture; every context keeps its
                // list index as id.
                let mut counts = [0usize; 3];
                for (i, p) in cfg.mixture.iter().enumerate() {
                    counts[i] = (p * n as f64).round() as usize;
                }
                while counts.iter().sum::<usize>() > n {
                    let i = counts
                        .iter()
                        .enumerate()
                        .max_by_key(|(_, c)| **c)
                        .unwrap()
                        .0;
                    counts[i] -= 1;
                }
                while counts.iter().sum::<usize>() < n {
                    let i = counts
                        .iter()
                        .enumerate()
                        .max_by_key(|(_, c)| **c)
                        .unwrap()
                        .0;
                    counts[i] += 1;
                }
                let mut list = Vec::with_capacity(n);
                for (fi, family) in Family::ALL.iter().enumerate() {
                    for _ in 0..counts[fi] {
                        let id = list.len() as u64;
                        list.push(draw_context(cfg, pools, *family, id, &mut rng));
                    }
                }
                Some(list)
            }
        };
        Ok(EpisodeStream {
            cfg: cfg.clone(),
            pools: pools.clone(),
            rng,
            current: None,
            fixed,
            fixed_idx: 0,
            next_fresh_id: 0,
            t: 0,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    fn advance_context(&mut self) -> bool {
        match &self.fixed {
            None => {
                let prev = self.current.take();
                let next = next_context(
                    &self.cfg,
                    &self.pools,
                    prev.as_ref(),
                    &mut self.next_fresh_id,
                    &mut self.rng,
                );
                let switched = prev
                    .as_ref()
                    .map_or(true, |p| p.context_id != next.context_id);
                self.current = Some(next);
                switched
            }
            Some(list) => {
                if self.current.is_none() {
                    self.fixed_idx = self.rng.gen_range(0..list.len());
                } else if self.rng.gen::<f64>() >= self.cfg.alpha {
                    // Fresh draw excludes the current context, matching the
                    // uniform off-diagonal transition matrix.
                    let j = self.rng.gen_range(0..list.len() - 1);
                    self.fixed_idx = if j >= self.fixed_idx { j + 1 } else { j };
                } else {
                    return false;
                }
                self.current = Some(list[self.fixed_idx].clone());
                true
            }
        }
    }
}

impl Iterator for EpisodeStream {
    type Item = (StepBatch, StepTruth);

    fn next(&mut self) -> Option<Self::Item> {
        if self.t >= self.cfg.episode_length {
            return None;
        }
        let is_boundary = self.advance_context();
        let ctx = self.current.as_ref().expect("context set");
        let batch = sample_step(
            ctx,
            &self.pools,
            self.cfg.samples_per_step,
            self.cfg.dim,
            self.t,
            &mut self.rng,
        );
        let truth = StepTruth {
            t: self.t,
            context_id: ctx.context_id,
            family: ctx.family,
            is_boundary,
        };
        self.t += 1;
        Some((batch, truth))
    }
}

/// One pre-training task: support/query split of a single context's draw.
#[derive(Debug, Clone)]
pub struct PretrainTask {
    pub family: Family,
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PretrainEpisode {
    pub tasks: Vec<PretrainTask>,
}

/// Batch of `batch` independent pretrain-family tasks, each split into `k`
/// support and `samples_per_step - k` query examples.
///
/// Unlike the CL-time stream, task examples are class-balanced (classes
/// cycle in shuffled round-robin order), matching the standard episodic
/// protocol: `shots = ways` gives one support example per class.
pub fn pretrain_episode(
    cfg: &StreamConfig,
    pools: &Pools,
    batch: usize,
    shots: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainEpisode> {
    if shots == 0 || shots >= cfg.samples_per_step {
        return Err(StreamError::Contract(format!(
            "shots must be in [1, samples_per_step), got {shots} of {}",
            cfg.samples_per_step
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut tasks = Vec::with_capacity(batch);
    for i in 0..batch {
        let ctx = draw_context(cfg, pools, Family::Pretrain, i as u64, rng);
        // Balanced class order: a fresh shuffle of 0..ways per round.
        let mut order: Vec<usize> = Vec::with_capacity(cfg.samples_per_step);
        while order.len() < cfg.samples_per_step {
            let mut round: Vec<usize> = (0..cfg.ways).collect();
            for i in (1..round.len()).rev() {
                let j = rng.gen_range(0..=i);
                round.swap(i, j);
            }
            order.extend(round);
        }
        order.truncate(cfg.samples_per_step);

        let mut x = Vec::with_capacity(cfg.samples_per_step * cfg.dim);
        let mut y = Vec::with_capacity(cfg.samples_per_step);
        for &pos in &order {
            let proto = &pools.pretrain[ctx.class_subset[pos]];
            for d in 0..cfg.dim {
                x.push(proto[d] + ctx.noise * normal.sample(rng));
            }
            y.push(ctx.label_map[pos]);
        }
        let dim = cfg.dim;
        let split = |rows: std::ops::Range<usize>| -> (Tensor, Vec<usize>) {
            let data = x[rows.start * dim..rows.end * dim].to_vec();
            let xt = Tensor::new(rows.end - rows.start, dim, data).expect("split shape");
            (xt, y[rows].to_vec())
        };
        let (support_x, support_y) = split(0..shots);
        let (query_x, query_y) = split(shots..cfg.samples_per_step);
        tasks.push(PretrainTask {
            family: ctx.family,
            support_x,
            support_y,
            query_x,
            query_y,
        });
    }
    Ok(PretrainEpisode { tasks })
}

/// Ground-truth trace export: `t,context_id,is_boundary`.
pub fn write_truth_csv(truths: &[StepTruth], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,context_id,is_boundary")?;
    for tr in truths {
        writeln!(w, "{},{},{}", tr.t, tr.context_id, u8::from(tr.is_boundary))?;
    }
    w.flush()?;
    Ok(())
}
