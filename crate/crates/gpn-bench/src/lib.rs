//! Shared fixtures for the criterion benchmarks: a generated synthetic
//! benchmark, freshly initialized parameters, a refreshed prototype memory
//! and one sampled few-shot task.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gpn_core::encoder::{init_encoder_params, EncoderConfig};
use gpn_core::memory::PrototypeMemory;
use gpn_core::propagation::{init_propagation_params, PropagationConfig};
use gpn_core::synth::{BenchSpec, SyntheticBenchmark};
use gpn_core::trainer::{sample_task, FewShotTask, TrainConfig};
use gpn_core::{CategoryGraph, ClassId, ParameterStore};

pub struct BenchFixture {
    pub bench: SyntheticBenchmark,
    pub train_graph: CategoryGraph,
    pub cfg: TrainConfig,
    pub enc_cfg: EncoderConfig,
    pub prop_cfg: PropagationConfig,
    pub store: ParameterStore,
    pub memory: PrototypeMemory,
    pub task: FewShotTask,
}

pub fn fixture() -> BenchFixture {
    let spec = BenchSpec { samples_per_class: 40, ..BenchSpec::default() };
    let bench = SyntheticBenchmark::generate(&spec).expect("benchmark generation");
    let mut removed: BTreeSet<ClassId> = bench.splits.close_test.clone();
    removed.extend(&bench.splits.far_test);
    let train_graph = bench.graph.without_nodes(&removed);

    let cfg = TrainConfig::default();
    let enc_cfg = cfg.encoder(spec.feature_dim);
    let prop_cfg = cfg.propagation();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParameterStore::new();
    init_encoder_params(&mut store, &enc_cfg, &mut rng);
    init_propagation_params(&mut store, enc_cfg.embed_dim, &prop_cfg, &mut rng);

    let train_pools: BTreeMap<ClassId, Vec<Vec<f64>>> = bench
        .pools
        .iter()
        .filter(|(y, _)| bench.splits.train.contains(y))
        .map(|(&y, p)| (y, p.clone()))
        .collect();
    let mut memory = PrototypeMemory::new();
    memory
        .refresh(&store, &enc_cfg, &train_pools, 0, cfg.refresh_cap, &mut rng)
        .expect("memory refresh");

    let task = sample_task(&train_graph, &bench.pools, &bench.splits.train, &cfg, &mut rng)
        .expect("task sampling");

    BenchFixture { bench, train_graph, cfg, enc_cfg, prop_cfg, store, memory, task }
}
