//! Gated multi-head attention propagation of class prototypes over a
//! pathway, with the directional, scheduling and attention variants.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ClassId, PropagationPathway, SenderFilter};
use crate::store::ParameterStore;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Which neighbors send messages, or how directional steps are scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Messages from all pathway neighbors every step.
    Neighbors,
    /// Messages from parents only.
    Parents,
    /// Messages from children only.
    Children,
    /// Parent steps for all of `t_steps`, then child steps for `t_steps`.
    ForwardBackward,
    /// One parent step then one child step, repeated `t_steps` times.
    Alternating,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "n-c" => Ok(Variant::Neighbors),
            "f-c" => Ok(Variant::Parents),
            "c-c" => Ok(Variant::Children),
            "b-p" => Ok(Variant::ForwardBackward),
            "m-p" => Ok(Variant::Alternating),
            other => Err(Error::Config(format!("unknown propagation variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Neighbors => "n-c",
            Variant::Parents => "f-c",
            Variant::Children => "c-c",
            Variant::ForwardBackward => "b-p",
            Variant::Alternating => "m-p",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Cosine of the two head-transformed prototypes.
    Multiplicative,
    /// `v . tanh(W1 p + W2 q)` with a learnable score vector.
    Additive,
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m-a" | "multiplicative" => Ok(AttentionKind::Multiplicative),
            "a-a" | "additive" => Ok(AttentionKind::Additive),
            other => Err(Error::Config(format!("unknown attention kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", match self {
            AttentionKind::Multiplicative => "m-a",
            AttentionKind::Additive => "a-a",
        })
    }
}

#[derive(Clone, Debug)]
pub struct PropagationConfig {
    pub t_steps: u32,
    pub heads: usize,
    /// Gate softmax temperature.
    pub gamma: f64,
    pub variant: Variant,
    pub attention: AttentionKind,
    /// Softmax-normalize attention weights over senders (off by default;
    /// the raw weighted sum is the primary form).
    pub normalize: bool,
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads < 1 {
            return Err(Error::Config("heads must be >= 1".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            t_steps: 2,
            heads: 5,
            gamma: 10.0,
            variant: Variant::Neighbors,
            attention: AttentionKind::Multiplicative,
            normalize: false,
        }
    }
}

/// One head's parameter nodes on a tape. Multiplicative heads hold the two
/// untied linear maps; additive heads hold the two maps plus the score
/// vector.
pub struct HeadNodes {
    kind: AttentionKind,
    h1: NodeId,
    h2: NodeId,
    score: Option<NodeId>,
}

/// Creates the `prop/head<i>/*` slots. Linear maps start near the
/// identity so early attention behaves like plain prototype cosine.
pub fn init_propagation_params<R: Rng>(
    store: &mut ParameterStore,
    embed_dim: usize,
    cfg: &PropagationConfig,
    rng: &mut R,
) {
    let bound = 0.5 / (embed_dim as f64).sqrt();
    for i in 0..cfg.heads {
        let mut mk = |identity: bool| {
            let mut data = vec![0.0; embed_dim * embed_dim];
            for r in 0..embed_dim {
                for c in 0..embed_dim {
                    let noise = rng.random_range(-bound..bound);
                    data[r * embed_dim + c] =
                        if identity && r == c { 1.0 + noise } else { noise };
                }
            }
            Tensor::matrix(embed_dim, embed_dim, data)
        };
        match cfg.attention {
            AttentionKind::Multiplicative => {
                let h1 = mk(true);
                let h2 = mk(true);
                store.insert(&format!("prop/head{i}/h1"), h1, true);
                store.insert(&format!("prop/head{i}/h2"), h2, true);
            }
            AttentionKind::Additive => {
                let w1 = mk(false);
                let w2 = mk(false);
                store.insert(&format!("prop/head{i}/w1"), w1, true);
                store.insert(&format!("prop/head{i}/w2"), w2, true);
                let v: Vec<f64> = (0..embed_dim).map(|_| rng.random_range(-bound..bound)).collect();
                store.insert(&format!("prop/head{i}/v"), Tensor::vector(v), true);
            }
        }
    }
}

/// Registers all head parameters of `cfg` on one tape.
pub fn register_heads(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &PropagationConfig,
) -> Result<Vec<HeadNodes>> {
    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let head = match cfg.attention {
            AttentionKind::Multiplicative => HeadNodes {
                kind: cfg.attention,
                h1: tape.param(store, &format!("prop/head{i}/h1"))?,
                h2: tape.param(store, &format!("prop/head{i}/h2"))?,
                score: None,
            },
            AttentionKind::Additive => HeadNodes {
                kind: cfg.attention,
                h1: tape.param(store, &format!("prop/head{i}/w1"))?,
                h2: tape.param(store, &format!("prop/head{i}/w2"))?,
                score: Some(tape.param(store, &format!("prop/head{i}/v"))?),
            },
        };
        heads.push(head);
    }
    Ok(heads)
}

/// Mean of the support embeddings of one class.
pub fn init_prototype(tape: &mut Tape, support: &[NodeId]) -> Result<NodeId> {
    if support.is_empty() {
        return Err(Error::Argument("prototype of empty support set".into()));
    }
    Ok(tape.mean(support))
}

/// One head's attention score between prototypes `p` (receiver) and `q`
/// (sender).
pub fn attention_weight(
    tape: &mut Tape,
    head: &HeadNodes,
    p: NodeId,
    q: NodeId,
) -> Result<NodeId> {
    match head.kind {
        AttentionKind::Multiplicative => {
            let hp = tape.matvec(head.h1, p);
            let hq = tape.matvec(head.h2, q);
            tape.cosine(hp, hq)
        }
        AttentionKind::Additive => {
            let a = tape.matvec(head.h1, p);
            let b = tape.matvec(head.h2, q);
            let s = tape.add(a, b);
            let t = tape.tanh(s);
            Ok(tape.dot(head.score.unwrap(), t))
        }
    }
}

/// Weighted sum of sender prototypes with raw (or, behind the flag,
/// softmax-normalized) attention weights.
pub fn aggregate_neighbors(
    tape: &mut Tape,
    head: &HeadNodes,
    receiver: NodeId,
    senders: &[NodeId],
    normalize: bool,
) -> Result<NodeId> {
    if senders.is_empty() {
        return Err(Error::Argument("aggregate over empty sender set".into()));
    }
    let mut scores = Vec::with_capacity(senders.len());
    for &z in senders {
        scores.push(attention_weight(tape, head, receiver, z)?);
    }
    let weights: Vec<NodeId> = if normalize {
        let stacked = tape.stack(&scores);
        let sm = tape.softmax(stacked, 1.0);
        (0..senders.len()).map(|i| tape.index(sm, i)).collect()
    } else {
        scores
    };
    let mut acc = tape.mul_scalar(weights[0], senders[0]);
    for i in 1..senders.len() {
        let term = tape.mul_scalar(weights[i], senders[i]);
        acc = tape.add(acc, term);
    }
    Ok(acc)
}

/// Gate between the self message and the aggregated neighbor message:
/// softmax with temperature `gamma` over the cosines of each candidate
/// against the initial prototype. Returns the mixed vector and the gate
/// value (which weights the self message).
pub fn gate_mix(
    tape: &mut Tape,
    p0: NodeId,
    self_msg: NodeId,
    nbr_msg: NodeId,
    gamma: f64,
) -> Result<(NodeId, f64)> {
    let cos_self = tape.cosine(p0, self_msg)?;
    let cos_nbr = tape.cosine(p0, nbr_msg)?;
    let a = tape.scale_const(gamma, cos_self);
    let b = tape.scale_const(gamma, cos_nbr);
    let ea = tape.exp(a);
    let eb = tape.exp(b);
    let denom = tape.add(ea, eb);
    let g = tape.div(ea, denom);
    let one = tape.scalar(1.0);
    let one_minus_g = tape.sub(one, g);
    let left = tape.mul_scalar(g, self_msg);
    let right = tape.mul_scalar(one_minus_g, nbr_msg);
    let mixed = tape.add(left, right);
    let g_value = tape.value(g).as_scalar();
    Ok((mixed, g_value))
}

/// Exact mean of head outputs, written as `x0 + sum(xi - x0) / k` so that
/// identical heads reproduce the single-head output bit for bit.
fn average_heads(tape: &mut Tape, outputs: &[NodeId]) -> NodeId {
    let first = outputs[0];
    if outputs.len() == 1 {
        return first;
    }
    let mut acc: Option<NodeId> = None;
    for &x in &outputs[1..] {
        let d = tape.sub(x, first);
        acc = Some(match acc {
            None => d,
            Some(a) => tape.add(a, d),
        });
    }
    let scaled = tape.scale_const(1.0 / outputs.len() as f64, acc.unwrap());
    tape.add(first, scaled)
}

fn step_ordered(
    tape: &mut Tape,
    p0: &BTreeMap<ClassId, NodeId>,
    cur: &BTreeMap<ClassId, NodeId>,
    pathway: &PropagationPathway,
    cfg: &PropagationConfig,
    heads: &[HeadNodes],
    filter: SenderFilter,
    order: &[ClassId],
) -> Result<BTreeMap<ClassId, NodeId>> {
    let mut next = BTreeMap::new();
    for &y in order {
        let self_msg = cur[&y];
        let senders = pathway.senders(y, filter);
        let out = if senders.is_empty() {
            // no neighbor message: the gate takes the self message, g = 1
            self_msg
        } else {
            let sender_nodes: Vec<NodeId> = senders.iter().map(|z| cur[z]).collect();
            let mut per_head = Vec::with_capacity(heads.len());
            for head in heads {
                let nbr = aggregate_neighbors(tape, head, self_msg, &sender_nodes, cfg.normalize)?;
                let (mixed, _g) = gate_mix(tape, p0[&y], self_msg, nbr, cfg.gamma)?;
                per_head.push(mixed);
            }
            average_heads(tape, &per_head)
        };
        next.insert(y, out);
    }
    Ok(next)
}

/// One synchronous propagation step: every pathway class reads only
/// step-`t` prototypes, so iteration order cannot affect the result.
pub fn propagate_step(
    tape: &mut Tape,
    p0: &BTreeMap<ClassId, NodeId>,
    cur: &BTreeMap<ClassId, NodeId>,
    pathway: &PropagationPathway,
    cfg: &PropagationConfig,
    heads: &[HeadNodes],
    filter: SenderFilter,
) -> Result<BTreeMap<ClassId, NodeId>> {
    let order: Vec<ClassId> = pathway.members().to_vec();
    step_ordered(tape, p0, cur, pathway, cfg, heads, filter, &order)
}

/// Runs the configured step schedule and applies the final mixing
/// `lambda * P0 + (1 - lambda) * P_T` per class.
pub fn run_propagation(
    tape: &mut Tape,
    p0: &BTreeMap<ClassId, NodeId>,
    pathway: &PropagationPathway,
    cfg: &PropagationConfig,
    heads: &[HeadNodes],
    lambda: f64,
) -> Result<BTreeMap<ClassId, NodeId>> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!("lambda {lambda} outside [0, 1]")));
    }
    if cfg.t_steps == 0 {
        return Ok(p0.clone());
    }
    let schedule: Vec<SenderFilter> = match cfg.variant {
        Variant::Neighbors => vec![SenderFilter::All; cfg.t_steps as usize],
        Variant::Parents => vec![SenderFilter::Parents; cfg.t_steps as usize],
        Variant::Children => vec![SenderFilter::Children; cfg.t_steps as usize],
        Variant::ForwardBackward => {
            let mut s = vec![SenderFilter::Parents; cfg.t_steps as usize];
            s.extend(vec![SenderFilter::Children; cfg.t_steps as usize]);
            s
        }
        Variant::Alternating => {
            let mut s = Vec::with_capacity(2 * cfg.t_steps as usize);
            for _ in 0..cfg.t_steps {
                s.push(SenderFilter::Parents);
                s.push(SenderFilter::Children);
            }
            s
        }
    };
    let mut cur = p0.clone();
    for filter in schedule {
        cur = propagate_step(tape, p0, &cur, pathway, cfg, heads, filter)?;
    }
    let mut out = BTreeMap::new();
    for (&y, &pt) in &cur {
        let a = tape.scale_const(lambda, p0[&y]);
        let b = tape.scale_const(1.0 - lambda, pt);
        out.insert(y, tape.add(a, b));
    }
    Ok(out)
}
