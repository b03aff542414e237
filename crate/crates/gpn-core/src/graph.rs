//! The class taxonomy DAG: hop distances, task class sampling, maximum
//! spanning forest propagation pathways and attachment of unseen classes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::cosine;

/// Dense class identifier; node ids are stable across a run.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub u32);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, Default)]
struct NodeAdj {
    parents: Vec<ClassId>,
    children: Vec<ClassId>,
}

/// Directed acyclic graph of classes with parent→child arcs. Immutable
/// after construction; all queries are read-only.
#[derive(Clone, Debug, Default)]
pub struct CategoryGraph {
    adj: BTreeMap<ClassId, NodeAdj>,
}

impl CategoryGraph {
    /// Builds a graph from isolated nodes plus parent→child arcs. Arc
    /// endpoints are added implicitly. Fails on directed cycles or
    /// duplicate arcs.
    pub fn new(nodes: &[ClassId], arcs: &[(ClassId, ClassId)]) -> Result<Self> {
        let mut adj: BTreeMap<ClassId, NodeAdj> = BTreeMap::new();
        for &n in nodes {
            adj.entry(n).or_default();
        }
        let mut seen = BTreeSet::new();
        for &(p, c) in arcs {
            if p == c {
                return Err(Error::Argument(format!("self-loop arc on class {p}")));
            }
            if !seen.insert((p, c)) {
                return Err(Error::Argument(format!("duplicate arc {p} -> {c}")));
            }
            adj.entry(p).or_default().children.push(c);
            adj.entry(c).or_default().parents.push(p);
        }
        for node in adj.values_mut() {
            node.parents.sort_unstable();
            node.children.sort_unstable();
        }
        let g = CategoryGraph { adj };
        g.topo_order()?;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn contains(&self, y: ClassId) -> bool {
        self.adj.contains_key(&y)
    }

    pub fn nodes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.adj.keys().copied()
    }

    fn node(&self, y: ClassId) -> Result<&NodeAdj> {
        self.adj
            .get(&y)
            .ok_or_else(|| Error::Argument(format!("unknown class {y}")))
    }

    pub fn parents(&self, y: ClassId) -> Result<&[ClassId]> {
        Ok(&self.node(y)?.parents)
    }

    pub fn children(&self, y: ClassId) -> Result<&[ClassId]> {
        Ok(&self.node(y)?.children)
    }

    /// Undirected neighborhood: parents plus children, sorted, deduped.
    pub fn neighbors(&self, y: ClassId) -> Result<Vec<ClassId>> {
        let node = self.node(y)?;
        let mut out: Vec<ClassId> = node.parents.iter().chain(&node.children).copied().collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Kahn's algorithm; `Err` means a directed cycle exists.
    pub fn topo_order(&self) -> Result<Vec<ClassId>> {
        let mut indeg: BTreeMap<ClassId, usize> =
            self.adj.iter().map(|(&y, n)| (y, n.parents.len())).collect();
        let mut queue: VecDeque<ClassId> = indeg
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&y, _)| y)
            .collect();
        let mut order = Vec::with_capacity(self.adj.len());
        while let Some(y) = queue.pop_front() {
            order.push(y);
            for &c in &self.adj[&y].children {
                let d = indeg.get_mut(&c).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push_back(c);
                }
            }
        }
        if order.len() != self.adj.len() {
            return Err(Error::Argument("graph contains a directed cycle".into()));
        }
        Ok(order)
    }

    /// Length of the shortest undirected path, or `None` if unreachable.
    pub fn hop_distance(&self, a: ClassId, b: ClassId) -> Result<Option<u32>> {
        self.node(a)?;
        self.node(b)?;
        if a == b {
            return Ok(Some(0));
        }
        let mut dist: BTreeMap<ClassId, u32> = BTreeMap::new();
        dist.insert(a, 0);
        let mut queue = VecDeque::from([a]);
        while let Some(y) = queue.pop_front() {
            let d = dist[&y];
            for z in self.neighbors(y)? {
                if !dist.contains_key(&z) {
                    if z == b {
                        return Ok(Some(d + 1));
                    }
                    dist.insert(z, d + 1);
                    queue.push_back(z);
                }
            }
        }
        Ok(None)
    }

    /// Multi-source BFS: every node within `k` undirected hops of any
    /// source, mapped to its minimal distance (sources at 0).
    pub fn hop_neighborhood(&self, sources: &[ClassId], k: u32) -> Result<BTreeMap<ClassId, u32>> {
        let mut dist: BTreeMap<ClassId, u32> = BTreeMap::new();
        let mut queue = VecDeque::new();
        for &s in sources {
            self.node(s)?;
            if !dist.contains_key(&s) {
                dist.insert(s, 0);
                queue.push_back(s);
            }
        }
        while let Some(y) = queue.pop_front() {
            let d = dist[&y];
            if d == k {
                continue;
            }
            for z in self.neighbors(y)? {
                if !dist.contains_key(&z) {
                    dist.insert(z, d + 1);
                    queue.push_back(z);
                }
            }
        }
        Ok(dist)
    }

    /// Minimal hop distance from `y` to any node in `targets`.
    pub fn min_distance_to(&self, y: ClassId, targets: &BTreeSet<ClassId>) -> Result<Option<u32>> {
        self.node(y)?;
        if targets.contains(&y) {
            return Ok(Some(0));
        }
        let mut dist: BTreeMap<ClassId, u32> = BTreeMap::new();
        dist.insert(y, 0);
        let mut queue = VecDeque::from([y]);
        while let Some(v) = queue.pop_front() {
            let d = dist[&v];
            for z in self.neighbors(v)? {
                if !dist.contains_key(&z) {
                    if targets.contains(&z) {
                        return Ok(Some(d + 1));
                    }
                    dist.insert(z, d + 1);
                    queue.push_back(z);
                }
            }
        }
        Ok(None)
    }

    /// Copy of the graph without the given nodes (and their arcs).
    pub fn without_nodes(&self, remove: &BTreeSet<ClassId>) -> CategoryGraph {
        let mut adj = BTreeMap::new();
        for (&y, node) in &self.adj {
            if remove.contains(&y) {
                continue;
            }
            let keep = NodeAdj {
                parents: node.parents.iter().filter(|p| !remove.contains(p)).copied().collect(),
                children: node.children.iter().filter(|c| !remove.contains(c)).copied().collect(),
            };
            adj.insert(y, keep);
        }
        CategoryGraph { adj }
    }

    pub fn arcs(&self) -> Vec<(ClassId, ClassId)> {
        let mut out = Vec::new();
        for (&y, node) in &self.adj {
            for &c in &node.children {
                out.push((y, c));
            }
        }
        out
    }

    // ---- file format: one `<parent> <child>` arc per line, `node <id>`
    // for isolated nodes, `#` comments and blank lines ignored ----

    pub fn parse(text: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut arcs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Parse(format!("graph file line {}: `{}`", lineno + 1, raw));
            match parts.as_slice() {
                ["node", id] => {
                    nodes.push(ClassId(id.parse().map_err(|_| bad())?));
                }
                [p, c] => {
                    let p = ClassId(p.parse().map_err(|_| bad())?);
                    let c = ClassId(c.parse().map_err(|_| bad())?);
                    arcs.push((p, c));
                }
                _ => return Err(bad()),
            }
        }
        CategoryGraph::new(&nodes, &arcs)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (&y, node) in &self.adj {
            if node.parents.is_empty() && node.children.is_empty() {
                out.push_str(&format!("node {y}\n"));
            }
            for &c in &node.children {
                out.push_str(&format!("{y} {c}\n"));
            }
        }
        out
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

// ---- task class sampling ----

/// `n` distinct classes, uniform without replacement, returned sorted.
pub fn sample_random<R: Rng>(eligible: &[ClassId], n: usize, rng: &mut R) -> Result<Vec<ClassId>> {
    if n > eligible.len() {
        return Err(Error::Argument(format!(
            "requested {n} classes from {} eligible",
            eligible.len()
        )));
    }
    let idx = rand::seq::index::sample(rng, eligible.len(), n);
    let mut out: Vec<ClassId> = idx.iter().map(|i| eligible[i]).collect();
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SnowballSample {
    /// Classes in selection order.
    pub classes: Vec<ClassId>,
    /// True when an exhausted frontier forced a uniform draw over the
    /// remaining eligible classes.
    pub fallback_used: bool,
}

/// Sequential sampling: the first class is uniform over `eligible`, each
/// subsequent one uniform over the hop-`k_n` neighborhood of the already
/// selected classes (intersected with `eligible`). An empty frontier falls
/// back to a uniform draw over the remaining eligible classes.
pub fn sample_snowball<R: Rng>(
    g: &CategoryGraph,
    eligible: &BTreeSet<ClassId>,
    n: usize,
    k_n: u32,
    rng: &mut R,
) -> Result<SnowballSample> {
    if n == 0 {
        return Err(Error::Argument("snowball sample of zero classes".into()));
    }
    if k_n == 0 {
        return Err(Error::Argument("snowball hop radius must be >= 1".into()));
    }
    if n > eligible.len() {
        return Err(Error::Argument(format!(
            "requested {n} classes from {} eligible",
            eligible.len()
        )));
    }
    let pool: Vec<ClassId> = eligible.iter().copied().collect();
    let first = pool[rng.random_range(0..pool.len())];
    let mut selected = vec![first];
    let mut selected_set = BTreeSet::from([first]);
    let mut fallback_used = false;
    while selected.len() < n {
        let hood = g.hop_neighborhood(&selected, k_n)?;
        let frontier: Vec<ClassId> = hood
            .keys()
            .filter(|y| eligible.contains(y) && !selected_set.contains(y))
            .copied()
            .collect();
        let next = if frontier.is_empty() {
            fallback_used = true;
            let rest: Vec<ClassId> = pool
                .iter()
                .filter(|y| !selected_set.contains(y))
                .copied()
                .collect();
            rest[rng.random_range(0..rest.len())]
        } else {
            frontier[rng.random_range(0..frontier.len())]
        };
        selected.push(next);
        selected_set.insert(next);
    }
    Ok(SnowballSample { classes: selected, fallback_used })
}

// ---- propagation pathway ----

/// One pathway edge; the original arc direction is kept because some
/// propagation variants filter messages by direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathwayEdge {
    pub parent: ClassId,
    pub child: ClassId,
    pub weight: f64,
}

/// Which pathway neighbors may send messages to a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SenderFilter {
    /// All pathway neighbors.
    All,
    /// Only parents (messages flow down the hierarchy).
    Parents,
    /// Only children (messages flow up the hierarchy).
    Children,
}

/// The subgraph messages are passed on. [`build_pathway`] always produces
/// a forest; the full-subgraph builder used by the spanning-tree ablation
/// may keep cycles.
#[derive(Clone, Debug)]
pub struct PropagationPathway {
    members: Vec<ClassId>,
    edges: Vec<PathwayEdge>,
    parents_of: BTreeMap<ClassId, Vec<ClassId>>,
    children_of: BTreeMap<ClassId, Vec<ClassId>>,
}

impl PropagationPathway {
    fn from_parts(members: Vec<ClassId>, edges: Vec<PathwayEdge>) -> Self {
        let mut parents_of: BTreeMap<ClassId, Vec<ClassId>> =
            members.iter().map(|&y| (y, Vec::new())).collect();
        let mut children_of = parents_of.clone();
        for e in &edges {
            parents_of.get_mut(&e.child).unwrap().push(e.parent);
            children_of.get_mut(&e.parent).unwrap().push(e.child);
        }
        for v in parents_of.values_mut().chain(children_of.values_mut()) {
            v.sort_unstable();
        }
        PropagationPathway { members, edges, parents_of, children_of }
    }

    /// Pathway classes, sorted.
    pub fn members(&self) -> &[ClassId] {
        &self.members
    }

    pub fn edges(&self) -> &[PathwayEdge] {
        &self.edges
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    /// Classes allowed to send a message to `y` under the given filter,
    /// sorted by id.
    pub fn senders(&self, y: ClassId, filter: SenderFilter) -> Vec<ClassId> {
        let parents = self.parents_of.get(&y).map(|v| v.as_slice()).unwrap_or(&[]);
        let children = self.children_of.get(&y).map(|v| v.as_slice()).unwrap_or(&[]);
        match filter {
            SenderFilter::Parents => parents.to_vec(),
            SenderFilter::Children => children.to_vec(),
            SenderFilter::All => {
                let mut out: Vec<ClassId> = parents.iter().chain(children).copied().collect();
                out.sort_unstable();
                out.dedup();
                out
            }
        }
    }

    /// Number of connected components of the undirected pathway.
    pub fn component_count(&self) -> usize {
        let mut uf = UnionFind::new(self.members.len());
        let index: BTreeMap<ClassId, usize> =
            self.members.iter().enumerate().map(|(i, &y)| (y, i)).collect();
        for e in &self.edges {
            uf.union(index[&e.parent], index[&e.child]);
        }
        uf.component_count()
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }

    fn component_count(&mut self) -> usize {
        let n = self.parent.len();
        (0..n).filter(|&i| self.find(i) == i).count()
    }
}

/// Candidate subgraph for a task: the task classes plus every node within
/// `t_steps` undirected hops that has a prototype available. Returns the
/// candidate members and their induced arcs with cosine weights.
fn candidate_subgraph(
    g: &CategoryGraph,
    task_classes: &BTreeSet<ClassId>,
    t_steps: u32,
    protos: &BTreeMap<ClassId, Vec<f64>>,
) -> Result<(Vec<ClassId>, Vec<PathwayEdge>)> {
    for y in task_classes {
        if !protos.contains_key(y) {
            return Err(Error::Argument(format!("task class {y} has no prototype")));
        }
    }
    let sources: Vec<ClassId> = task_classes.iter().copied().collect();
    let hood = g.hop_neighborhood(&sources, t_steps)?;
    let members: Vec<ClassId> = hood
        .keys()
        .filter(|y| task_classes.contains(y) || protos.contains_key(y))
        .copied()
        .collect();
    let member_set: BTreeSet<ClassId> = members.iter().copied().collect();
    let mut edges = Vec::new();
    for &y in &members {
        for &c in g.children(y)? {
            if member_set.contains(&c) {
                let w = cosine(&protos[&y], &protos[&c])?;
                edges.push(PathwayEdge { parent: y, child: c, weight: w });
            }
        }
    }
    Ok((members, edges))
}

/// Maximum spanning forest of the hop-`t_steps` candidate subgraph, edge
/// weights given by cosine similarity of the endpoint prototypes. Ties
/// break deterministically by (weight desc, smaller endpoint pair).
pub fn build_pathway(
    g: &CategoryGraph,
    task_classes: &BTreeSet<ClassId>,
    t_steps: u32,
    protos: &BTreeMap<ClassId, Vec<f64>>,
) -> Result<PropagationPathway> {
    let (members, mut edges) = candidate_subgraph(g, task_classes, t_steps, protos)?;
    edges.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .unwrap()
            .then_with(|| {
                let ka = (a.parent.min(a.child), a.parent.max(a.child));
                let kb = (b.parent.min(b.child), b.parent.max(b.child));
                ka.cmp(&kb)
            })
    });
    let index: BTreeMap<ClassId, usize> =
        members.iter().enumerate().map(|(i, &y)| (y, i)).collect();
    let mut uf = UnionFind::new(members.len());
    let mut kept = Vec::new();
    for e in edges {
        if uf.union(index[&e.parent], index[&e.child]) {
            kept.push(e);
        }
    }
    Ok(PropagationPathway::from_parts(members, kept))
}

/// The full hop-`t_steps` candidate subgraph with every induced edge; used
/// when spanning-tree reduction is ablated away.
pub fn build_full_pathway(
    g: &CategoryGraph,
    task_classes: &BTreeSet<ClassId>,
    t_steps: u32,
    protos: &BTreeMap<ClassId, Vec<f64>>,
) -> Result<PropagationPathway> {
    let (members, edges) = candidate_subgraph(g, task_classes, t_steps, protos)?;
    Ok(PropagationPathway::from_parts(members, edges))
}

/// Re-anchors test classes that already exist as nodes of `g`. Every arc
/// incident to a test class is dropped and replaced with exactly `k_c` arcs
/// to classes holding a stored prototype: true taxonomy neighbors are taken
/// first (best cosine first), then the globally nearest stored prototypes
/// fill the remaining budget. Matching the per-class arc budget of
/// [`attach_test_classes`] keeps pathway degrees in the regime the raw
/// (unnormalized) attention was trained under; taxonomy neighbors without a
/// stored prototype cannot carry a message and are skipped.
pub fn augment_test_classes(
    g: &CategoryGraph,
    test_protos: &BTreeMap<ClassId, Vec<f64>>,
    train_protos: &BTreeMap<ClassId, Vec<f64>>,
    k_c: usize,
) -> Result<CategoryGraph> {
    if train_protos.is_empty() {
        return Err(Error::State("no training prototypes to attach to".into()));
    }
    if k_c == 0 {
        return Err(Error::Argument("k_c must be >= 1".into()));
    }
    if k_c > train_protos.len() {
        return Err(Error::Argument(format!(
            "k_c={k_c} exceeds {} training prototypes",
            train_protos.len()
        )));
    }
    let nodes: Vec<ClassId> = g.nodes().collect();
    let mut arcs: Vec<(ClassId, ClassId)> = g
        .arcs()
        .into_iter()
        .filter(|&(a, b)| !test_protos.contains_key(&a) && !test_protos.contains_key(&b))
        .collect();
    for (&t, tp) in test_protos {
        if !g.contains(t) {
            return Err(Error::Argument(format!("test class {t} not in graph")));
        }
        let mut tax_nbrs: Vec<ClassId> = g.parents(t)?.to_vec();
        tax_nbrs.extend(g.children(t)?.iter().copied());
        let mut ranked_tax: Vec<(f64, ClassId)> = Vec::new();
        for y in tax_nbrs {
            if let Some(yp) = train_protos.get(&y) {
                ranked_tax.push((cosine(tp, yp)?, y));
            }
        }
        ranked_tax.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        let mut chosen: Vec<ClassId> = ranked_tax.iter().take(k_c).map(|&(_, y)| y).collect();
        if chosen.len() < k_c {
            let taken: BTreeSet<ClassId> = chosen.iter().copied().collect();
            let mut scored: Vec<(f64, ClassId)> = Vec::with_capacity(train_protos.len());
            for (&y, yp) in train_protos {
                if !g.contains(y) {
                    return Err(Error::Argument(format!("training class {y} not in graph")));
                }
                if !taken.contains(&y) {
                    scored.push((cosine(tp, yp)?, y));
                }
            }
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
            chosen.extend(scored.iter().take(k_c - chosen.len()).map(|&(_, y)| y));
        }
        // all arcs touching t were removed above, so t cannot sit on a
        // cycle regardless of arc direction
        for y in chosen {
            arcs.push((t, y));
        }
    }
    CategoryGraph::new(&nodes, &arcs)
}

/// Returns a copy of `g` with each test class attached to its `k_c`
/// nearest training classes by cosine similarity of initial prototypes
/// (arcs run from the test class to the training class). The input graph
/// is not modified.
pub fn attach_test_classes(
    g: &CategoryGraph,
    test_protos: &BTreeMap<ClassId, Vec<f64>>,
    train_protos: &BTreeMap<ClassId, Vec<f64>>,
    k_c: usize,
) -> Result<CategoryGraph> {
    if train_protos.is_empty() {
        return Err(Error::State("no training prototypes to attach to".into()));
    }
    if k_c == 0 {
        return Err(Error::Argument("k_c must be >= 1".into()));
    }
    if k_c > train_protos.len() {
        return Err(Error::Argument(format!(
            "k_c={k_c} exceeds {} training prototypes",
            train_protos.len()
        )));
    }
    let mut nodes: Vec<ClassId> = g.nodes().collect();
    let mut arcs = g.arcs();
    for (&t, tp) in test_protos {
        if g.contains(t) {
            return Err(Error::Argument(format!("test class {t} already in graph")));
        }
        let mut scored: Vec<(f64, ClassId)> = Vec::with_capacity(train_protos.len());
        for (&y, yp) in train_protos {
            if !g.contains(y) {
                return Err(Error::Argument(format!("training class {y} not in graph")));
            }
            scored.push((cosine(tp, yp)?, y));
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        nodes.push(t);
        for &(_, y) in scored.iter().take(k_c) {
            arcs.push((t, y));
        }
    }
    CategoryGraph::new(&nodes, &arcs)
}
