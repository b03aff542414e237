//! Synthetic hierarchical benchmark generator: a rooted class taxonomy,
//! hierarchical Gaussian feature pools where non-leaf classes draw from
//! their descendant leaves, and Close/Far train/test splits constrained
//! by minimal hop distance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{CategoryGraph, ClassId};

/// Train/test split regime, distinguished by the allowed minimal hop
/// distance from each test class to the nearest training class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Close,
    Far,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Close => "close",
            Regime::Far => "far",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "close" => Ok(Regime::Close),
            "far" => Ok(Regime::Far),
            other => Err(Error::Config(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    /// Number of levels including the root.
    pub depth: usize,
    /// Expected children per internal node, drawn per node from this range
    /// with stochastic rounding (minimum one child).
    pub branching: (f64, f64),
    pub feature_dim: usize,
    /// Per-dimension std of leaf samples around their class center.
    pub leaf_cluster_spread: f64,
    /// Per-dimension std of a child center's drift from its parent.
    pub class_drift: f64,
    pub samples_per_class: usize,
    pub close_dist_range: (u32, u32),
    pub far_dist_range: (u32, u32),
    pub n_train_classes: usize,
    pub n_test_classes: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            depth: 6,
            branching: (2.2, 2.5),
            feature_dim: 20,
            leaf_cluster_spread: 3.5,
            class_drift: 2.0,
            samples_per_class: 100,
            close_dist_range: (1, 4),
            far_dist_range: (5, 10),
            n_train_classes: 40,
            n_test_classes: 10,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::Config("depth must be >= 3".into()));
        }
        if !(self.branching.0 >= 1.0 && self.branching.1 >= self.branching.0) {
            return Err(Error::Config("branching range must satisfy 1 <= min <= max".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if self.leaf_cluster_spread <= 0.0 || self.class_drift < 0.0 {
            return Err(Error::Config("spreads must be positive".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be >= 1".into()));
        }
        for (lo, hi) in [self.close_dist_range, self.far_dist_range] {
            if lo == 0 || hi < lo {
                return Err(Error::Config("distance ranges must satisfy 1 <= min <= max".into()));
            }
        }
        if self.close_dist_range.1 >= self.far_dist_range.0 {
            return Err(Error::Config("close and far distance ranges must not overlap".into()));
        }
        if self.n_train_classes == 0 || self.n_test_classes == 0 {
            return Err(Error::Config("class counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Parses line-oriented `key = value` text; unknown keys are errors,
    /// omitted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = BenchSpec::default();
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
                "depth" => spec.depth = value.parse().map_err(|_| bad("count"))?,
                "branching_min" => spec.branching.0 = value.parse().map_err(|_| bad("real"))?,
                "branching_max" => spec.branching.1 = value.parse().map_err(|_| bad("real"))?,
                "feature_dim" => spec.feature_dim = value.parse().map_err(|_| bad("count"))?,
                "leaf_cluster_spread" => {
                    spec.leaf_cluster_spread = value.parse().map_err(|_| bad("real"))?
                }
                "class_drift" => spec.class_drift = value.parse().map_err(|_| bad("real"))?,
                "samples_per_class" => {
                    spec.samples_per_class = value.parse().map_err(|_| bad("count"))?
                }
                "close_dist_min" => spec.close_dist_range.0 = value.parse().map_err(|_| bad("count"))?,
                "close_dist_max" => spec.close_dist_range.1 = value.parse().map_err(|_| bad("count"))?,
                "far_dist_min" => spec.far_dist_range.0 = value.parse().map_err(|_| bad("count"))?,
                "far_dist_max" => spec.far_dist_range.1 = value.parse().map_err(|_| bad("count"))?,
                "n_train_classes" => {
                    spec.n_train_classes = value.parse().map_err(|_| bad("count"))?
                }
                "n_test_classes" => spec.n_test_classes = value.parse().map_err(|_| bad("count"))?,
                "seed" => spec.seed = value.parse().map_err(|_| bad("seed"))?,
                other => {
                    return Err(Error::Parse(format!("line {}: unknown key `{other}`", lineno + 1)))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// `key = value` echo, parseable by [`BenchSpec::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "depth = {}", self.depth);
        let _ = writeln!(s, "branching_min = {}", self.branching.0);
        let _ = writeln!(s, "branching_max = {}", self.branching.1);
        let _ = writeln!(s, "feature_dim = {}", self.feature_dim);
        let _ = writeln!(s, "leaf_cluster_spread = {}", self.leaf_cluster_spread);
        let _ = writeln!(s, "class_drift = {}", self.class_drift);
        let _ = writeln!(s, "samples_per_class = {}", self.samples_per_class);
        let _ = writeln!(s, "close_dist_min = {}", self.close_dist_range.0);
        let _ = writeln!(s, "close_dist_max = {}", self.close_dist_range.1);
        let _ = writeln!(s, "far_dist_min = {}", self.far_dist_range.0);
        let _ = writeln!(s, "far_dist_max = {}", self.far_dist_range.1);
        let _ = writeln!(s, "n_train_classes = {}", self.n_train_classes);
        let _ = writeln!(s, "n_test_classes = {}", self.n_test_classes);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

/// Rooted tree taxonomy of exactly `spec.depth` levels; node 0 is the
/// root and children always lie one level deeper, so the result is
/// acyclic by construction.
pub fn gen_taxonomy<R: Rng>(spec: &BenchSpec, rng: &mut R) -> Result<CategoryGraph> {
    spec.validate()?;
    let mut arcs: Vec<(ClassId, ClassId)> = Vec::new();
    let mut level: Vec<u32> = vec![0];
    let mut next_id: u32 = 1;
    for _ in 1..spec.depth {
        let mut next_level = Vec::new();
        for &parent in &level {
            let b = rng.random_range(spec.branching.0..=spec.branching.1);
            let mut n = b.floor() as usize;
            if rng.random_range(0.0..1.0) < b.fract() {
                n += 1;
            }
            let n = n.max(1);
            for _ in 0..n {
                arcs.push((ClassId(parent), ClassId(next_id)));
                next_level.push(next_id);
                next_id += 1;
            }
        }
        level = next_level;
    }
    CategoryGraph::new(&[ClassId(0)], &arcs)
}

/// Latent class centers plus per-class sample pools.
pub struct FeaturePools {
    pub centers: BTreeMap<ClassId, Vec<f64>>,
    pub pools: BTreeMap<ClassId, Vec<Vec<f64>>>,
}

fn descendant_leaves(g: &CategoryGraph, y: ClassId) -> Result<Vec<ClassId>> {
    let mut out = Vec::new();
    let mut stack = vec![y];
    let mut seen = BTreeSet::new();
    while let Some(v) = stack.pop() {
        if !seen.insert(v) {
            continue;
        }
        let children = g.children(v)?;
        if children.is_empty() {
            out.push(v);
        } else {
            stack.extend(children.iter().copied());
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Hierarchical Gaussian features: the root center sits at the origin,
/// each child center drifts from its parent, leaves sample around their
/// center, and non-leaf pools are uniform draws over descendant-leaf
/// samples.
pub fn gen_features<R: Rng>(
    g: &CategoryGraph,
    spec: &BenchSpec,
    rng: &mut R,
) -> Result<FeaturePools> {
    let drift = Normal::new(0.0, spec.class_drift).map_err(|e| Error::Numeric(e.to_string()))?;
    let spread =
        Normal::new(0.0, spec.leaf_cluster_spread).map_err(|e| Error::Numeric(e.to_string()))?;

    let mut centers: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
    for y in g.topo_order()? {
        let parents = g.parents(y)?;
        let center = if parents.is_empty() {
            vec![0.0; spec.feature_dim]
        } else {
            let base = &centers[&parents[0]];
            base.iter().map(|&c| c + drift.sample(rng)).collect()
        };
        centers.insert(y, center);
    }

    let mut pools: BTreeMap<ClassId, Vec<Vec<f64>>> = BTreeMap::new();
    let mut leaf_ids: Vec<ClassId> = Vec::new();
    for y in g.nodes() {
        if g.children(y)?.is_empty() {
            let center = &centers[&y];
            let pool: Vec<Vec<f64>> = (0..spec.samples_per_class)
                .map(|_| center.iter().map(|&c| c + spread.sample(rng)).collect())
                .collect();
            pools.insert(y, pool);
            leaf_ids.push(y);
        }
    }
    for y in g.nodes() {
        if pools.contains_key(&y) {
            continue;
        }
        let leaves = descendant_leaves(g, y)?;
        let flat: Vec<(ClassId, usize)> = leaves
            .iter()
            .flat_map(|&l| (0..spec.samples_per_class).map(move |i| (l, i)))
            .collect();
        let pool: Vec<Vec<f64>> = (0..spec.samples_per_class)
            .map(|_| {
                let (l, i) = flat[rng.random_range(0..flat.len())];
                pools_get(&pools, l, i)
            })
            .collect();
        pools.insert(y, pool);
    }
    Ok(FeaturePools { centers, pools })
}

fn pools_get(pools: &BTreeMap<ClassId, Vec<Vec<f64>>>, y: ClassId, i: usize) -> Vec<f64> {
    pools[&y][i].clone()
}

/// One joint split: a single training set shared by both regimes plus a
/// Close and a Far test set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: BTreeSet<ClassId>,
    pub close_test: BTreeSet<ClassId>,
    pub far_test: BTreeSet<ClassId>,
}

const SPLIT_ATTEMPTS: usize = 500;

/// Rejection-samples a joint split until every Far test class has minimal
/// train distance in the Far range and every Close test class in the
/// Close range.
pub fn split_joint<R: Rng>(g: &CategoryGraph, spec: &BenchSpec, rng: &mut R) -> Result<Splits> {
    let nodes: Vec<ClassId> = g.nodes().collect();
    let (close_lo, close_hi) = spec.close_dist_range;
    let (far_lo, far_hi) = spec.far_dist_range;

    // deepest nodes make the best Far anchors: the exclusion ball around
    // them stays small
    let root = ClassId(0);
    let depth_of: BTreeMap<ClassId, u32> = {
        let mut m = BTreeMap::new();
        for &y in &nodes {
            m.insert(y, g.hop_distance(root, y)?.unwrap_or(0));
        }
        m
    };
    let max_depth = depth_of.values().copied().max().unwrap_or(0);

    'attempt: for _ in 0..SPLIT_ATTEMPTS {
        // pick a deep anchor and take Far test classes from its vicinity
        let deep: Vec<ClassId> = nodes
            .iter()
            .copied()
            .filter(|y| depth_of[y] + 2 >= max_depth)
            .collect();
        let anchor = deep[rng.random_range(0..deep.len())];
        let ball = g.hop_neighborhood(&[anchor], far_lo.saturating_sub(2))?;
        let candidates: Vec<ClassId> = ball.keys().copied().collect();
        if candidates.len() < spec.n_test_classes {
            continue;
        }
        let picked = rand::seq::index::sample(rng, candidates.len(), spec.n_test_classes);
        let far_test: BTreeSet<ClassId> =
            picked.iter().map(|i| candidates[i]).collect();

        // training classes must avoid everything within far_lo - 1 hops of
        // any Far test class
        let far_vec: Vec<ClassId> = far_test.iter().copied().collect();
        let forbidden = g.hop_neighborhood(&far_vec, far_lo - 1)?;
        let eligible: Vec<ClassId> = nodes
            .iter()
            .copied()
            .filter(|y| !forbidden.contains_key(y))
            .collect();
        if eligible.len() < spec.n_train_classes + spec.n_test_classes {
            continue;
        }
        let picked = rand::seq::index::sample(rng, eligible.len(), spec.n_train_classes);
        let train: BTreeSet<ClassId> = picked.iter().map(|i| eligible[i]).collect();

        for &y in &far_test {
            match g.min_distance_to(y, &train)? {
                Some(d) if d >= far_lo && d <= far_hi => {}
                _ => continue 'attempt,
            }
        }

        // Close test classes: outside train/far, within the Close range
        let mut close_candidates: Vec<ClassId> = Vec::new();
        for &y in &nodes {
            if train.contains(&y) || far_test.contains(&y) {
                continue;
            }
            if let Some(d) = g.min_distance_to(y, &train)? {
                if d >= close_lo && d <= close_hi {
                    close_candidates.push(y);
                }
            }
        }
        if close_candidates.len() < spec.n_test_classes {
            continue;
        }
        let picked = rand::seq::index::sample(rng, close_candidates.len(), spec.n_test_classes);
        let close_test: BTreeSet<ClassId> =
            picked.iter().map(|i| close_candidates[i]).collect();

        return Ok(Splits { train, close_test, far_test });
    }
    Err(Error::Generation(format!(
        "no valid split after {SPLIT_ATTEMPTS} attempts; relax distance ranges or class counts"
    )))
}

/// Per-regime view of the joint split, so both regimes share one training
/// set for a given rng state.
pub fn split_classes<R: Rng>(
    g: &CategoryGraph,
    spec: &BenchSpec,
    regime: Regime,
    rng: &mut R,
) -> Result<(BTreeSet<ClassId>, BTreeSet<ClassId>)> {
    let splits = split_joint(g, spec, rng)?;
    let test = match regime {
        Regime::Close => splits.close_test,
        Regime::Far => splits.far_test,
    };
    Ok((splits.train, test))
}

/// A fully generated benchmark: taxonomy, feature pools and both splits.
pub struct SyntheticBenchmark {
    pub spec: BenchSpec,
    pub graph: CategoryGraph,
    pub pools: BTreeMap<ClassId, Vec<Vec<f64>>>,
    pub splits: Splits,
}

impl SyntheticBenchmark {
    pub fn generate(spec: &BenchSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let graph = gen_taxonomy(spec, &mut rng)?;
        let features = gen_features(&graph, spec, &mut rng)?;
        let splits = split_joint(&graph, spec, &mut rng)?;
        Ok(SyntheticBenchmark { spec: spec.clone(), graph, pools: features.pools, splits })
    }

    pub fn test_classes(&self, regime: Regime) -> &BTreeSet<ClassId> {
        match regime {
            Regime::Close => &self.splits.close_test,
            Regime::Far => &self.splits.far_test,
        }
    }

    /// Writes `taxonomy.edges`, `features.csv`, `split_close.txt`,
    /// `split_far.txt` and `spec.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.graph.save(&dir.join("taxonomy.edges"))?;

        let mut csv = String::new();
        for (y, pool) in &self.pools {
            for (i, sample) in pool.iter().enumerate() {
                let _ = write!(csv, "{y},{i}");
                for v in sample {
                    let _ = write!(csv, ",{v}");
                }
                csv.push('\n');
            }
        }
        std::fs::write(dir.join("features.csv"), csv)?;

        for regime in [Regime::Close, Regime::Far] {
            let mut text = String::new();
            for y in &self.splits.train {
                let _ = writeln!(text, "train {y}");
            }
            for y in self.test_classes(regime) {
                let _ = writeln!(text, "test {y}");
            }
            std::fs::write(dir.join(format!("split_{}.txt", regime.label())), text)?;
        }

        std::fs::write(dir.join("spec.txt"), self.spec.to_text())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec = BenchSpec::parse(&std::fs::read_to_string(dir.join("spec.txt"))?)?;
        let graph = CategoryGraph::from_file(&dir.join("taxonomy.edges"))?;

        let mut pools: BTreeMap<ClassId, Vec<Vec<f64>>> = BTreeMap::new();
        let csv = std::fs::read_to_string(dir.join("features.csv"))?;
        for (lineno, line) in csv.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let bad = |what: &str| Error::Parse(format!("features.csv line {}: {what}", lineno + 1));
            let y = ClassId(
                parts.next().ok_or_else(|| bad("missing class id"))?.parse().map_err(|_| bad("bad class id"))?,
            );
            let idx: usize =
                parts.next().ok_or_else(|| bad("missing sample index"))?.parse().map_err(|_| bad("bad sample index"))?;
            let feats: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|_| bad("bad feature value")))
                .collect::<Result<_>>()?;
            if feats.len() != spec.feature_dim {
                return Err(bad("wrong feature count"));
            }
            let pool = pools.entry(y).or_default();
            if pool.len() != idx {
                return Err(bad("sample indices out of order"));
            }
            pool.push(feats);
        }

        let read_split = |name: &str| -> Result<(BTreeSet<ClassId>, BTreeSet<ClassId>)> {
            let text = std::fs::read_to_string(dir.join(name))?;
            let mut train = BTreeSet::new();
            let mut test = BTreeSet::new();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let (kind, id) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::Parse(format!("{name} line {}: bad line", lineno + 1)))?;
                let y = ClassId(id.trim().parse().map_err(|_| {
                    Error::Parse(format!("{name} line {}: bad class id", lineno + 1))
                })?);
                match kind {
                    "train" => train.insert(y),
                    "test" => test.insert(y),
                    _ => {
                        return Err(Error::Parse(format!(
                            "{name} line {}: unknown kind `{kind}`",
                            lineno + 1
                        )))
                    }
                };
            }
            Ok((train, test))
        };
        let (train, close_test) = read_split("split_close.txt")?;
        let (train_far, far_test) = read_split("split_far.txt")?;
        if train != train_far {
            return Err(Error::Parse("split files disagree on the training set".into()));
        }

        Ok(SyntheticBenchmark {
            spec,
            graph,
            pools,
            splits: Splits { train, close_test, far_test },
        })
    }
}
