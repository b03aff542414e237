//! Episodic training: curriculum branch between auxiliary supervised
//! batches and episodic few-shot steps, memory refresh, pathway
//! construction, propagation and branch-restricted Adam updates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{
    aux_loss, init_aux_head, init_encoder_params, AuxHeadNodes, EncoderConfig, EncoderNodes,
};
use crate::error::{Error, Result};
use crate::graph::{
    build_full_pathway, build_pathway, sample_random, sample_snowball, CategoryGraph, ClassId,
};
use crate::memory::PrototypeMemory;
use crate::propagation::{
    init_propagation_params, register_heads, run_propagation, AttentionKind, PropagationConfig,
    Variant,
};
use crate::store::{AdamConfig, ParameterStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// How episode classes are drawn: snowball, uniform random, or a per-
/// episode coin between the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMix {
    Hybrid,
    Snowball,
    Random,
}

impl FromStr for SamplingMix {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sr-s" => Ok(SamplingMix::Hybrid),
            "s-s" => Ok(SamplingMix::Snowball),
            "r-s" => Ok(SamplingMix::Random),
            other => Err(Error::Config(format!("unknown sampling mix `{other}`"))),
        }
    }
}

impl std::fmt::Display for SamplingMix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", match self {
            SamplingMix::Hybrid => "sr-s",
            SamplingMix::Snowball => "s-s",
            SamplingMix::Random => "r-s",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub tau_total: u64,
    /// Memory refresh interval.
    pub m: u64,
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    /// Snowball hop radius.
    pub k_n: u32,
    pub sampling_mix: SamplingMix,
    /// Probability of the snowball arm under the hybrid mix.
    pub sr_ratio: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_interval: u64,
    pub lr_decay_start: u64,
    pub aux_batch: usize,
    /// Auxiliary-task curriculum on/off (off forces the episodic branch).
    pub aux: bool,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Per-class sample cap for memory refresh.
    pub refresh_cap: usize,
    /// Refresh only classes seen in previous tasks instead of all
    /// training classes.
    pub refresh_tasked_only: bool,
    /// Reduce the pathway to a maximum spanning forest (off keeps every
    /// candidate edge).
    pub mst: bool,
    pub t_steps: u32,
    pub heads: usize,
    pub gamma: f64,
    pub variant: Variant,
    pub attention: AttentionKind,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau_total: 20_000,
            m: 3,
            n_way: 5,
            k_shot: 1,
            query_per_class: 15,
            k_n: 5,
            sampling_mix: SamplingMix::Hybrid,
            sr_ratio: 0.5,
            lr: 1e-3,
            weight_decay: 1e-5,
            lr_decay_factor: 0.9,
            lr_decay_interval: 10_000,
            lr_decay_start: 20_000,
            aux_batch: 128,
            aux: true,
            hidden_dims: vec![64],
            embed_dim: 32,
            refresh_cap: 64,
            refresh_tasked_only: false,
            mst: true,
            t_steps: 2,
            heads: 5,
            gamma: 10.0,
            variant: Variant::Neighbors,
            attention: AttentionKind::Multiplicative,
            normalize: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_total == 0 {
            return Err(Error::Config("tau_total must be >= 1".into()));
        }
        if self.n_way < 2 {
            return Err(Error::Config("n_way must be >= 2".into()));
        }
        if self.k_shot == 0 {
            return Err(Error::Config("k_shot must be >= 1".into()));
        }
        if self.query_per_class == 0 {
            return Err(Error::Config("query_per_class must be >= 1".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sr_ratio) {
            return Err(Error::Config("sr_ratio must be in [0, 1]".into()));
        }
        if self.lr <= 0.0 || self.lr_decay_factor <= 0.0 || self.lr_decay_interval == 0 {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        if self.aux_batch == 0 {
            return Err(Error::Config("aux_batch must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        if self.refresh_cap == 0 {
            return Err(Error::Config("refresh_cap must be >= 1".into()));
        }
        self.propagation().validate()
    }

    pub fn propagation(&self) -> PropagationConfig {
        PropagationConfig {
            t_steps: self.t_steps,
            heads: self.heads,
            gamma: self.gamma,
            variant: self.variant,
            attention: self.attention,
            normalize: self.normalize,
        }
    }

    pub fn encoder(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            embed_dim: self.embed_dim,
        }
    }

    /// Parses line-oriented `key = value` text; unknown keys are errors,
    /// omitted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Parse(format!("line {}: bad {what} `{value}`", lineno + 1));
            match key {
                "tau_total" => cfg.tau_total = value.parse().map_err(|_| bad("count"))?,
                "m" => cfg.m = value.parse().map_err(|_| bad("count"))?,
                "n_way" => cfg.n_way = value.parse().map_err(|_| bad("count"))?,
                "k_shot" => cfg.k_shot = value.parse().map_err(|_| bad("count"))?,
                "query_per_class" => {
                    cfg.query_per_class = value.parse().map_err(|_| bad("count"))?
                }
                "k_n" => cfg.k_n = value.parse().map_err(|_| bad("count"))?,
                "sampling_mix" => cfg.sampling_mix = value.parse()?,
                "sr_ratio" => cfg.sr_ratio = value.parse().map_err(|_| bad("real"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad("real"))?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad("real"))?,
                "lr_decay_factor" => {
                    cfg.lr_decay_factor = value.parse().map_err(|_| bad("real"))?
                }
                "lr_decay_interval" => {
                    cfg.lr_decay_interval = value.parse().map_err(|_| bad("count"))?
                }
                "lr_decay_start" => {
                    cfg.lr_decay_start = value.parse().map_err(|_| bad("count"))?
                }
                "aux_batch" => cfg.aux_batch = value.parse().map_err(|_| bad("count"))?,
                "aux" => cfg.aux = parse_bool(value).ok_or_else(|| bad("bool"))?,
                "hidden_dims" => {
                    cfg.hidden_dims = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|p| p.trim().parse::<usize>().map_err(|_| bad("dims")))
                            .collect::<Result<_>>()?
                    };
                }
                "embed_dim" => cfg.embed_dim = value.parse().map_err(|_| bad("count"))?,
                "refresh_cap" => cfg.refresh_cap = value.parse().map_err(|_| bad("count"))?,
                "refresh_tasked_only" => {
                    cfg.refresh_tasked_only = parse_bool(value).ok_or_else(|| bad("bool"))?
                }
                "mst" => cfg.mst = parse_bool(value).ok_or_else(|| bad("bool"))?,
                "t_steps" => cfg.t_steps = value.parse().map_err(|_| bad("count"))?,
                "heads" => cfg.heads = value.parse().map_err(|_| bad("count"))?,
                "gamma" => cfg.gamma = value.parse().map_err(|_| bad("real"))?,
                "variant" => cfg.variant = value.parse()?,
                "attention" => cfg.attention = value.parse()?,
                "normalize" => cfg.normalize = parse_bool(value).ok_or_else(|| bad("bool"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                other => {
                    return Err(Error::Parse(format!("line {}: unknown key `{other}`", lineno + 1)))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `key = value` echo parseable by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tau_total = {}", self.tau_total);
        let _ = writeln!(s, "m = {}", self.m);
        let _ = writeln!(s, "n_way = {}", self.n_way);
        let _ = writeln!(s, "k_shot = {}", self.k_shot);
        let _ = writeln!(s, "query_per_class = {}", self.query_per_class);
        let _ = writeln!(s, "k_n = {}", self.k_n);
        let _ = writeln!(s, "sampling_mix = {}", self.sampling_mix);
        let _ = writeln!(s, "sr_ratio = {}", self.sr_ratio);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "lr_decay_factor = {}", self.lr_decay_factor);
        let _ = writeln!(s, "lr_decay_interval = {}", self.lr_decay_interval);
        let _ = writeln!(s, "lr_decay_start = {}", self.lr_decay_start);
        let _ = writeln!(s, "aux_batch = {}", self.aux_batch);
        let _ = writeln!(s, "aux = {}", self.aux);
        let dims: Vec<String> = self.hidden_dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "hidden_dims = {}", dims.join(","));
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "refresh_cap = {}", self.refresh_cap);
        let _ = writeln!(s, "refresh_tasked_only = {}", self.refresh_tasked_only);
        let _ = writeln!(s, "mst = {}", self.mst);
        let _ = writeln!(s, "t_steps = {}", self.t_steps);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "attention = {}", self.attention);
        let _ = writeln!(s, "normalize = {}", self.normalize);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "1" | "yes" => Some(true),
        "false" | "off" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Annealed probability of running the auxiliary supervised branch.
pub fn curriculum_aux_prob(tau: u64, tau_total: u64) -> f64 {
    0.9f64.powf(20.0 * tau as f64 / tau_total as f64)
}

/// Mixing weight between the initial and the propagated prototype.
pub fn lambda_schedule(tau: u64, tau_total: u64) -> f64 {
    1.0 - tau as f64 / tau_total as f64
}

/// Step-decayed learning rate at episode `tau`.
pub fn lr_at(cfg: &TrainConfig, tau: u64) -> f64 {
    let steps = tau.saturating_sub(cfg.lr_decay_start) / cfg.lr_decay_interval;
    cfg.lr * cfg.lr_decay_factor.powi(steps as i32)
}

/// One N-way-K-shot task with per-class support and query samples.
#[derive(Clone, Debug)]
pub struct FewShotTask {
    /// Sorted task classes.
    pub classes: Vec<ClassId>,
    pub support: BTreeMap<ClassId, Vec<Vec<f64>>>,
    pub query: BTreeMap<ClassId, Vec<Vec<f64>>>,
}

/// Draws task classes per the sampling mix and splits each class's pool
/// into disjoint support and query sets without replacement.
pub fn sample_task<R: Rng>(
    g: &CategoryGraph,
    pools: &BTreeMap<ClassId, Vec<Vec<f64>>>,
    eligible: &BTreeSet<ClassId>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<FewShotTask> {
    let need = cfg.k_shot + cfg.query_per_class;
    let usable: BTreeSet<ClassId> = eligible
        .iter()
        .copied()
        .filter(|y| pools.get(y).is_some_and(|p| p.len() >= need))
        .collect();
    if usable.len() < cfg.n_way {
        return Err(Error::Argument(format!(
            "{} usable classes for a {}-way task",
            usable.len(),
            cfg.n_way
        )));
    }
    let snowball = match cfg.sampling_mix {
        SamplingMix::Random => false,
        SamplingMix::Snowball => true,
        SamplingMix::Hybrid => rng.random_range(0.0..1.0) < cfg.sr_ratio,
    };
    let mut classes = if snowball {
        sample_snowball(g, &usable, cfg.n_way, cfg.k_n, rng)?.classes
    } else {
        let pool: Vec<ClassId> = usable.iter().copied().collect();
        sample_random(&pool, cfg.n_way, rng)?
    };
    classes.sort_unstable();

    let mut support = BTreeMap::new();
    let mut query = BTreeMap::new();
    for &y in &classes {
        let pool = &pools[&y];
        let idx = rand::seq::index::sample(rng, pool.len(), need);
        let picked: Vec<usize> = idx.iter().collect();
        support.insert(y, picked[..cfg.k_shot].iter().map(|&i| pool[i].clone()).collect());
        query.insert(y, picked[cfg.k_shot..].iter().map(|&i| pool[i].clone()).collect());
    }
    Ok(FewShotTask { classes, support, query })
}

/// Builds the full differentiable episode graph: support embeddings,
/// prototype init, pathway propagation with mixing `lambda`, and the mean
/// query cross-entropy under the soft nearest-prototype classifier.
/// Returns the tape and the scalar loss node.
pub fn episode_loss_graph(
    g: &CategoryGraph,
    task: &FewShotTask,
    store: &ParameterStore,
    enc_cfg: &EncoderConfig,
    prop_cfg: &PropagationConfig,
    memory: &PrototypeMemory,
    lambda: f64,
    mst: bool,
) -> Result<(Tape, NodeId)> {
    let mut tape = Tape::new();
    let encoder = EncoderNodes::register(&mut tape, store, enc_cfg)?;
    let heads = register_heads(&mut tape, store, prop_cfg)?;

    let task_set: BTreeSet<ClassId> = task.classes.iter().copied().collect();
    let mut p0: BTreeMap<ClassId, NodeId> = BTreeMap::new();
    let mut proto_values: BTreeMap<ClassId, Vec<f64>> = memory.protos();
    for &y in &task.classes {
        let sup = task.support.get(&y).ok_or_else(|| {
            Error::Argument(format!("task class {y} has no support samples"))
        })?;
        let embs: Vec<NodeId> = sup
            .iter()
            .map(|x| encoder.embed(&mut tape, x))
            .collect::<Result<_>>()?;
        let proto = crate::propagation::init_prototype(&mut tape, &embs)?;
        proto_values.insert(y, tape.value(proto).data().to_vec());
        p0.insert(y, proto);
    }

    let pathway = if mst {
        build_pathway(g, &task_set, prop_cfg.t_steps, &proto_values)?
    } else {
        build_full_pathway(g, &task_set, prop_cfg.t_steps, &proto_values)?
    };
    for y in pathway.members() {
        if !p0.contains_key(y) {
            let v = memory
                .fetch(*y)
                .ok_or_else(|| Error::State(format!("pathway class {y} missing from memory")))?;
            p0.insert(*y, tape.constant(Tensor::vector(v.to_vec())));
        }
    }
    let finals = run_propagation(&mut tape, &p0, &pathway, prop_cfg, &heads, lambda)?;

    let mut terms = Vec::new();
    for (yi, &y) in task.classes.iter().enumerate() {
        let queries = task
            .query
            .get(&y)
            .ok_or_else(|| Error::Argument(format!("task class {y} has no query samples")))?;
        for x in queries {
            let e = encoder.embed(&mut tape, x)?;
            let mut logits = Vec::with_capacity(task.classes.len());
            for &c in &task.classes {
                let d = tape.sqdist(e, finals[&c]);
                let neg = tape.scale_const(-1.0, d);
                logits.push(neg);
            }
            let stacked = tape.stack(&logits);
            let lse = tape.logsumexp(stacked);
            let at = tape.index(stacked, yi);
            terms.push(tape.sub(lse, at));
        }
    }
    if terms.is_empty() {
        return Err(Error::Argument("task has no query samples".into()));
    }
    let loss = tape.mean(&terms);
    Ok((tape, loss))
}

/// Scalar episode loss (forward only).
pub fn episode_loss(
    g: &CategoryGraph,
    task: &FewShotTask,
    store: &ParameterStore,
    enc_cfg: &EncoderConfig,
    prop_cfg: &PropagationConfig,
    memory: &PrototypeMemory,
    lambda: f64,
    mst: bool,
) -> Result<f64> {
    let (tape, loss) = episode_loss_graph(g, task, store, enc_cfg, prop_cfg, memory, lambda, mst)?;
    Ok(tape.value(loss).as_scalar())
}

/// One auxiliary supervised batch step; updates only `enc` and `fc`.
/// Returns the batch loss.
pub fn aux_step<R: Rng>(
    store: &mut ParameterStore,
    enc_cfg: &EncoderConfig,
    pools: &BTreeMap<ClassId, Vec<Vec<f64>>>,
    labels: &BTreeMap<ClassId, usize>,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let classes: Vec<ClassId> = labels.keys().copied().collect();
    let mut batch = Vec::with_capacity(cfg.aux_batch);
    for _ in 0..cfg.aux_batch {
        let y = classes[rng.random_range(0..classes.len())];
        let pool = &pools[&y];
        let x = pool[rng.random_range(0..pool.len())].clone();
        batch.push((x, labels[&y]));
    }
    let mut tape = Tape::new();
    let encoder = EncoderNodes::register(&mut tape, store, enc_cfg)?;
    let head = AuxHeadNodes::register(&mut tape, store)?;
    let loss = aux_loss(&mut tape, &encoder, &head, &batch, labels.len())?;
    let loss_value = tape.value(loss).as_scalar();
    let grads = tape.backward(loss)?;
    store.zero_grad();
    store.accumulate(grads.params())?;
    store.adam_step(&["enc", "fc"], &AdamConfig { lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    Ok(loss_value)
}

/// One episodic step; updates only `enc` and `prop`. Returns the episode
/// loss and the task.
pub fn episodic_step<R: Rng>(
    g: &CategoryGraph,
    store: &mut ParameterStore,
    enc_cfg: &EncoderConfig,
    pools: &BTreeMap<ClassId, Vec<Vec<f64>>>,
    eligible: &BTreeSet<ClassId>,
    memory: &PrototypeMemory,
    cfg: &TrainConfig,
    lambda: f64,
    lr: f64,
    rng: &mut R,
) -> Result<(f64, FewShotTask)> {
    let task = sample_task(g, pools, eligible, cfg, rng)?;
    let (mut tape, loss) =
        episode_loss_graph(g, &task, store, enc_cfg, &cfg.propagation(), memory, lambda, cfg.mst)?;
    let loss_value = tape.value(loss).as_scalar();
    let grads = tape.backward(loss)?;
    store.zero_grad();
    store.accumulate(grads.params())?;
    store.adam_step(&["enc", "prop"], &AdamConfig { lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    Ok((loss_value, task))
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub branch: String,
    pub loss: f64,
    pub lambda: f64,
    pub lr: f64,
    pub task_classes: Vec<u32>,
}

pub struct TrainOutput {
    pub store: ParameterStore,
    pub memory: PrototypeMemory,
    pub log: Vec<EpisodeRecord>,
}

/// Full training loop over `tau_total` episodes. `g` must be the training
/// graph (no test classes); `train_classes` are the classes with sample
/// pools eligible for tasks, auxiliary batches and memory refresh.
pub fn train(
    g: &CategoryGraph,
    pools: &BTreeMap<ClassId, Vec<Vec<f64>>>,
    train_classes: &BTreeSet<ClassId>,
    input_dim: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let enc_cfg = cfg.encoder(input_dim);
    enc_cfg.validate()?;
    for y in train_classes {
        if !g.contains(*y) {
            return Err(Error::Argument(format!("training class {y} not in graph")));
        }
        if !pools.contains_key(y) {
            return Err(Error::Argument(format!("training class {y} has no samples")));
        }
    }

    let labels: BTreeMap<ClassId, usize> = train_classes
        .iter()
        .enumerate()
        .map(|(i, &y)| (y, i))
        .collect();

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParameterStore::new();
    init_encoder_params(&mut store, &enc_cfg, &mut init_rng);
    init_aux_head(&mut store, cfg.embed_dim, labels.len(), &mut init_rng);
    init_propagation_params(&mut store, cfg.embed_dim, &cfg.propagation(), &mut init_rng);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut memory = PrototypeMemory::new();
    let mut tasked: BTreeSet<ClassId> = BTreeSet::new();
    let mut log = Vec::with_capacity(cfg.tau_total as usize);

    for tau in 0..cfg.tau_total {
        if tau % cfg.m == 0 {
            let refresh_set: BTreeMap<ClassId, Vec<Vec<f64>>> = train_classes
                .iter()
                .filter(|y| !cfg.refresh_tasked_only || tasked.contains(y))
                .map(|&y| (y, pools[&y].clone()))
                .collect();
            if !refresh_set.is_empty() {
                memory.refresh(&store, &enc_cfg, &refresh_set, tau, cfg.refresh_cap, &mut rng)?;
            }
        }

        let lambda = lambda_schedule(tau, cfg.tau_total);
        let lr = lr_at(cfg, tau);
        let aux_prob = if cfg.aux { curriculum_aux_prob(tau, cfg.tau_total) } else { 0.0 };
        let alpha: f64 = rng.random_range(0.0..1.0);

        let record = if alpha < aux_prob {
            let loss = aux_step(&mut store, &enc_cfg, pools, &labels, cfg, lr, &mut rng)?;
            EpisodeRecord {
                episode: tau,
                branch: "aux".to_string(),
                loss,
                lambda,
                lr,
                task_classes: Vec::new(),
            }
        } else {
            let (loss, task) = episodic_step(
                g, &mut store, &enc_cfg, pools, train_classes, &memory, cfg, lambda, lr, &mut rng,
            )?;
            tasked.extend(task.classes.iter().copied());
            EpisodeRecord {
                episode: tau,
                branch: "episodic".to_string(),
                loss,
                lambda,
                lr,
                task_classes: task.classes.iter().map(|y| y.0).collect(),
            }
        };

        if !record.loss.is_finite() {
            return Err(Error::Abort(format!(
                "non-finite loss {} at episode {tau} ({} branch, classes {:?})",
                record.loss, record.branch, record.task_classes
            )));
        }
        log.push(record);
    }

    Ok(TrainOutput { store, memory, log })
}

/// Serializes the log as JSON lines.
pub fn log_to_jsonl(log: &[EpisodeRecord]) -> Result<String> {
    let mut out = String::new();
    for rec in log {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::State(format!("log serialization: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{BenchSpec, SyntheticBenchmark};

    #[test]
    fn curriculum_endpoints_and_monotone() {
        assert_eq!(curriculum_aux_prob(0, 100), 1.0);
        let end = curriculum_aux_prob(100, 100);
        assert!((end - 0.9f64.powi(20)).abs() < 1e-12);
        let mut prev = 1.0;
        for tau in 0..=100 {
            let p = curriculum_aux_prob(tau, 100);
            assert!(p <= prev + 1e-15);
            prev = p;
        }
    }

    #[test]
    fn lambda_endpoints_linear() {
        assert_eq!(lambda_schedule(0, 10), 1.0);
        assert_eq!(lambda_schedule(10, 10), 0.0);
        assert_eq!(lambda_schedule(5, 10), 0.5);
    }

    #[test]
    fn lr_schedule_exact() {
        let cfg = TrainConfig {
            lr: 1e-3,
            lr_decay_factor: 0.9,
            lr_decay_interval: 10_000,
            lr_decay_start: 20_000,
            ..Default::default()
        };
        for tau in [0u64, 19_999, 20_000, 29_999, 30_000, 55_000] {
            let steps = tau.saturating_sub(20_000) / 10_000;
            let expect = 1e-3 * 0.9f64.powi(steps as i32);
            assert_eq!(lr_at(&cfg, tau), expect, "tau = {tau}");
        }
    }

    #[test]
    fn config_text_roundtrip_and_unknown_key() {
        let cfg = TrainConfig {
            tau_total: 123,
            hidden_dims: vec![8, 4],
            variant: Variant::Children,
            attention: AttentionKind::Additive,
            sampling_mix: SamplingMix::Snowball,
            ..Default::default()
        };
        let parsed = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
        assert!(TrainConfig::parse("nonsense = 1").is_err());
        assert!(TrainConfig::parse("n_way = 1").is_err());
    }

    fn tiny_bench() -> SyntheticBenchmark {
        let spec = BenchSpec {
            depth: 5,
            branching: (2.0, 2.2),
            feature_dim: 4,
            samples_per_class: 25,
            n_train_classes: 12,
            n_test_classes: 3,
            seed: 17,
            ..Default::default()
        };
        SyntheticBenchmark::generate(&spec).unwrap()
    }

    #[test]
    fn sampled_tasks_support_query_disjoint() {
        let bench = tiny_bench();
        let cfg = TrainConfig {
            n_way: 3,
            k_shot: 2,
            query_per_class: 5,
            hidden_dims: vec![8],
            embed_dim: 4,
            ..Default::default()
        };
        // unique-valued pools so value disjointness equals index
        // disjointness (non-leaf pools may contain duplicate samples)
        let unique_pools: BTreeMap<ClassId, Vec<Vec<f64>>> = bench
            .pools
            .iter()
            .map(|(&y, pool)| {
                let fresh: Vec<Vec<f64>> = (0..pool.len())
                    .map(|j| vec![y.0 as f64, j as f64, 0.0, 0.0])
                    .collect();
                (y, fresh)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let task =
                sample_task(&bench.graph, &unique_pools, &bench.splits.train, &cfg, &mut rng)
                    .unwrap();
            assert_eq!(task.classes.len(), 3);
            for &y in &task.classes {
                let sup = &task.support[&y];
                let qry = &task.query[&y];
                assert_eq!(sup.len(), 2);
                assert_eq!(qry.len(), 5);
                for s in sup {
                    assert!(!qry.contains(s), "support sample reappears in query");
                }
            }
        }
    }

    #[test]
    fn random_mix_delegates_to_sample_random() {
        let bench = tiny_bench();
        let cfg = TrainConfig {
            n_way: 4,
            k_shot: 1,
            query_per_class: 3,
            sampling_mix: SamplingMix::Random,
            ..Default::default()
        };
        let mut rng1 = ChaCha8Rng::seed_from_u64(5);
        let task =
            sample_task(&bench.graph, &bench.pools, &bench.splits.train, &cfg, &mut rng1).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let pool: Vec<ClassId> = bench.splits.train.iter().copied().collect();
        let expect = sample_random(&pool, 4, &mut rng2).unwrap();
        assert_eq!(task.classes, expect);
    }

    fn identity_store(dim: usize) -> (ParameterStore, EncoderConfig) {
        let cfg = EncoderConfig { input_dim: dim, hidden_dims: vec![], embed_dim: dim };
        let mut store = ParameterStore::new();
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        store.insert("enc/w0", Tensor::matrix(dim, dim, eye), true);
        store.insert("enc/b0", Tensor::vector(vec![0.0; dim]), true);
        (store, cfg)
    }

    #[test]
    fn identical_prototypes_give_ln_n_loss() {
        // all classes share the same single support vector and t_steps = 0,
        // so every query has a uniform posterior over the 3 classes
        let (mut store, enc_cfg) = identity_store(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let prop = PropagationConfig { t_steps: 0, heads: 1, ..Default::default() };
        init_propagation_params(&mut store, 2, &prop, &mut rng);
        let g = CategoryGraph::new(
            &[],
            &[(ClassId(0), ClassId(1)), (ClassId(0), ClassId(2))],
        )
        .unwrap();
        let shared = vec![0.3, -0.7];
        let classes = vec![ClassId(0), ClassId(1), ClassId(2)];
        let task = FewShotTask {
            classes: classes.clone(),
            support: classes.iter().map(|&y| (y, vec![shared.clone()])).collect(),
            query: classes.iter().map(|&y| (y, vec![vec![1.0, 2.0]])).collect(),
        };
        let memory = PrototypeMemory::new();
        let loss =
            episode_loss(&g, &task, &store, &enc_cfg, &prop, &memory, 1.0, true).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separated_prototypes_give_near_zero_loss() {
        // queries exactly at their prototypes, prototypes far apart
        let (mut store, enc_cfg) = identity_store(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prop = PropagationConfig { t_steps: 0, heads: 1, ..Default::default() };
        init_propagation_params(&mut store, 2, &prop, &mut rng);
        let g = CategoryGraph::new(&[], &[(ClassId(0), ClassId(1))]).unwrap();
        let a = vec![10.0, 0.0];
        let b = vec![-10.0, 0.0];
        let task = FewShotTask {
            classes: vec![ClassId(0), ClassId(1)],
            support: BTreeMap::from([
                (ClassId(0), vec![a.clone()]),
                (ClassId(1), vec![b.clone()]),
            ]),
            query: BTreeMap::from([(ClassId(0), vec![a]), (ClassId(1), vec![b])]),
        };
        let memory = PrototypeMemory::new();
        let loss =
            episode_loss(&g, &task, &store, &enc_cfg, &prop, &memory, 1.0, true).unwrap();
        assert!(loss >= 0.0);
        assert!(loss <= 1e-3, "loss {loss}");
    }

    #[test]
    fn scripted_eq2_oracle_matches() {
        // t_steps = 0: loss reduces to plain soft nearest-prototype CE
        let (mut store, enc_cfg) = identity_store(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prop = PropagationConfig { t_steps: 0, heads: 1, ..Default::default() };
        init_propagation_params(&mut store, 2, &prop, &mut rng);
        let g = CategoryGraph::new(&[], &[(ClassId(0), ClassId(1))]).unwrap();
        let p0 = vec![0.5, 1.0];
        let p1 = vec![-0.3, 0.2];
        let q = vec![0.4, 0.9];
        let task = FewShotTask {
            classes: vec![ClassId(0), ClassId(1)],
            support: BTreeMap::from([
                (ClassId(0), vec![p0.clone()]),
                (ClassId(1), vec![p1.clone()]),
            ]),
            query: BTreeMap::from([(ClassId(0), vec![q.clone()]), (ClassId(1), vec![])]),
        };
        let memory = PrototypeMemory::new();
        let loss =
            episode_loss(&g, &task, &store, &enc_cfg, &prop, &memory, 0.4, true).unwrap();
        let d0: f64 = q.iter().zip(&p0).map(|(a, b)| (a - b) * (a - b)).sum();
        let d1: f64 = q.iter().zip(&p1).map(|(a, b)| (a - b) * (a - b)).sum();
        let expect = ((-d0).exp() + (-d1).exp()).ln() - (-d0);
        assert!((loss - expect).abs() < 1e-10, "loss {loss} expect {expect}");
    }

    #[test]
    fn branch_gradient_isolation() {
        let bench = tiny_bench();
        let cfg = TrainConfig {
            n_way: 3,
            k_shot: 1,
            query_per_class: 2,
            hidden_dims: vec![6],
            embed_dim: 4,
            heads: 2,
            ..Default::default()
        };
        let enc_cfg = cfg.encoder(4);
        let mut init_rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        init_encoder_params(&mut store, &enc_cfg, &mut init_rng);
        init_aux_head(&mut store, 4, bench.splits.train.len(), &mut init_rng);
        init_propagation_params(&mut store, 4, &cfg.propagation(), &mut init_rng);

        // episodic branch: gradients touch enc and prop but never fc
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let task =
            sample_task(&bench.graph, &bench.pools, &bench.splits.train, &cfg, &mut rng).unwrap();
        let memory = PrototypeMemory::new();
        let (mut tape, loss) = episode_loss_graph(
            &bench.graph, &task, &store, &enc_cfg, &cfg.propagation(), &memory, 0.5, true,
        )
        .unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.params().keys().any(|k| k.starts_with("enc/")));
        assert!(!grads.params().keys().any(|k| k.starts_with("fc/")));

        // aux branch: gradients touch enc and fc but never prop
        let labels: BTreeMap<ClassId, usize> = bench
            .splits
            .train
            .iter()
            .enumerate()
            .map(|(i, &y)| (y, i))
            .collect();
        let mut tape = Tape::new();
        let encoder = EncoderNodes::register(&mut tape, &store, &enc_cfg).unwrap();
        let head = AuxHeadNodes::register(&mut tape, &store).unwrap();
        let y0 = *labels.keys().next().unwrap();
        let batch = vec![(bench.pools[&y0][0].clone(), labels[&y0])];
        let loss = aux_loss(&mut tape, &encoder, &head, &batch, labels.len()).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.params().keys().any(|k| k.starts_with("enc/")));
        assert!(grads.params().keys().any(|k| k.starts_with("fc/")));
        assert!(!grads.params().keys().any(|k| k.starts_with("prop/")));
    }

    #[test]
    fn aux_steps_leave_prop_params_unchanged() {
        let bench = tiny_bench();
        let cfg = TrainConfig {
            hidden_dims: vec![6],
            embed_dim: 4,
            aux_batch: 8,
            heads: 2,
            ..Default::default()
        };
        let enc_cfg = cfg.encoder(4);
        let mut init_rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParameterStore::new();
        init_encoder_params(&mut store, &enc_cfg, &mut init_rng);
        init_aux_head(&mut store, 4, bench.splits.train.len(), &mut init_rng);
        init_propagation_params(&mut store, 4, &cfg.propagation(), &mut init_rng);
        let labels: BTreeMap<ClassId, usize> = bench
            .splits
            .train
            .iter()
            .enumerate()
            .map(|(i, &y)| (y, i))
            .collect();

        let before: Vec<(String, Vec<f64>)> = store
            .names()
            .filter(|n| n.starts_with("prop/"))
            .map(|n| (n.to_string(), store.value(n).unwrap().data().to_vec()))
            .collect();
        assert!(!before.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            aux_step(&mut store, &enc_cfg, &bench.pools, &labels, &cfg, 1e-3, &mut rng).unwrap();
        }
        for (name, old) in before {
            assert_eq!(store.value(&name).unwrap().data(), old.as_slice(), "{name} changed");
        }
    }

    #[test]
    fn tiny_training_run_is_deterministic() {
        let bench = tiny_bench();
        let cfg = TrainConfig {
            tau_total: 12,
            n_way: 3,
            k_shot: 1,
            query_per_class: 3,
            hidden_dims: vec![6],
            embed_dim: 4,
            aux_batch: 8,
            refresh_cap: 8,
            heads: 2,
            seed: 9,
            ..Default::default()
        };
        let test_all: BTreeSet<ClassId> = bench
            .splits
            .close_test
            .union(&bench.splits.far_test)
            .copied()
            .collect();
        let train_graph = bench.graph.without_nodes(&test_all);
        let run = || {
            train(&train_graph, &bench.pools, &bench.splits.train, 4, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log, b.log);
        assert_eq!(a.memory, b.memory);
        for name in a.store.names() {
            assert_eq!(
                a.store.value(name).unwrap().data(),
                b.store.value(name).unwrap().data(),
                "{name} differs"
            );
        }
        assert_eq!(a.log.len(), 12);
        // early episodes should be mostly auxiliary under the curriculum
        assert!(a.log[0].branch == "aux" || a.log[0].branch == "episodic");
        let jsonl = log_to_jsonl(&a.log).unwrap();
        assert_eq!(jsonl.lines().count(), 12);
        let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(first["episode"], 0);
        assert!(first["loss"].is_f64() || first["loss"].is_number());
    }
}
