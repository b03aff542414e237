//! Command-line entry point: benchmark generation, training, evaluation
//! and ablation sweeps.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gpn_core::error::Error;
use gpn_core::evaluator::{evaluate, EvalConfig, EvalInputs, EvalSampling, Mode};
use gpn_core::graph::{CategoryGraph, ClassId};
use gpn_core::memory::PrototypeMemory;
use gpn_core::propagation::{AttentionKind, Variant};
use gpn_core::synth::{BenchSpec, Regime, SyntheticBenchmark};
use gpn_core::trainer::{log_to_jsonl, train, SamplingMix, TrainConfig};
use gpn_core::ParameterStore;

#[derive(Parser)]
#[command(name = "gpn", about = "Graph meta-learning for few-shot classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic hierarchical benchmark directory.
    Gen {
        /// key = value benchmark spec file
        #[arg(long)]
        spec: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated benchmark.
    Train {
        /// Benchmark directory from `gen`
        #[arg(long)]
        bench: PathBuf,
        /// key = value training config file
        #[arg(long)]
        config: PathBuf,
        /// Output directory for params.bin, memory.bin, train.jsonl
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained checkpoint.
    Eval {
        #[arg(long)]
        bench: PathBuf,
        /// Checkpoint directory from `train`
        #[arg(long)]
        ckpt: PathBuf,
        /// gpn+ | gpn | protonet
        #[arg(long, default_value = "gpn")]
        mode: String,
        /// close | far
        #[arg(long, default_value = "close")]
        regime: String,
        /// random | snowball
        #[arg(long, default_value = "random")]
        sampling: String,
        #[arg(long, default_value_t = 600)]
        tasks: usize,
        #[arg(long, default_value_t = 5)]
        way: usize,
        #[arg(long, default_value_t = 1)]
        shot: usize,
        #[arg(long, default_value_t = 15)]
        query: usize,
        /// Attachment degree for GPN mode
        #[arg(long, default_value_t = 2)]
        k_c: usize,
        /// Test-time prototype mixing weight
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional per-task accuracy CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train + evaluate every variant along one ablation axis.
    Ablate {
        #[arg(long)]
        bench: PathBuf,
        /// Base training config shared by all variants
        #[arg(long)]
        config: PathBuf,
        /// sampling | direction | aux | mst | heads | attention
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
        /// Evaluation tasks per variant
        #[arg(long, default_value_t = 600)]
        tasks: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen { spec, out } => cmd_gen(&spec, &out),
        Cmd::Train { bench, config, out } => cmd_train(&bench, &config, &out),
        Cmd::Eval {
            bench, ckpt, mode, regime, sampling, tasks, way, shot, query, k_c, lambda, seed,
            out, csv,
        } => cmd_eval(&EvalArgs {
            bench, ckpt, mode, regime, sampling, tasks, way, shot, query, k_c, lambda, seed,
            out, csv,
        }),
        Cmd::Ablate { bench, config, axis, out, tasks } => {
            cmd_ablate(&bench, &config, &axis, &out, tasks)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for usage/config problems, 3 for runtime numeric failures.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Parse(_) | Error::Config(_) | Error::Io(_)
        | Error::Generation(_) => 2,
        Error::Numeric(_) | Error::Abort(_) | Error::State(_) => 3,
    }
}

fn cmd_gen(spec_path: &Path, out: &Path) -> gpn_core::Result<()> {
    let spec = BenchSpec::parse(&std::fs::read_to_string(spec_path)?)?;
    let bench = SyntheticBenchmark::generate(&spec)?;
    bench.save(out)?;
    println!(
        "generated benchmark: {} classes, {} train / {} test per regime -> {}",
        bench.graph.len(),
        bench.splits.train.len(),
        bench.splits.close_test.len(),
        out.display()
    );
    Ok(())
}

/// Taxonomy with every test class (both regimes) removed.
fn train_graph_of(bench: &SyntheticBenchmark) -> CategoryGraph {
    let all_test: BTreeSet<ClassId> = bench
        .splits
        .close_test
        .union(&bench.splits.far_test)
        .copied()
        .collect();
    bench.graph.without_nodes(&all_test)
}

fn cmd_train(bench_dir: &Path, config: &Path, out: &Path) -> gpn_core::Result<()> {
    let bench = SyntheticBenchmark::load(bench_dir)?;
    let cfg = TrainConfig::parse(&std::fs::read_to_string(config)?)?;
    let graph = train_graph_of(&bench);
    let result = train(&graph, &bench.pools, &bench.splits.train, bench.spec.feature_dim, &cfg)?;
    std::fs::create_dir_all(out)?;
    result.store.save(&out.join("params.bin"))?;
    result.memory.save(&out.join("memory.bin"))?;
    std::fs::write(out.join("train.jsonl"), log_to_jsonl(&result.log)?)?;
    // echoed so `eval` can rebuild the encoder/propagation shapes
    std::fs::write(out.join("train_config.txt"), cfg.to_text())?;
    let last = result.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} episodes (final loss {last:.4}) -> {}",
        result.log.len(),
        out.display()
    );
    Ok(())
}

struct EvalArgs {
    bench: PathBuf,
    ckpt: PathBuf,
    mode: String,
    regime: String,
    sampling: String,
    tasks: usize,
    way: usize,
    shot: usize,
    query: usize,
    k_c: usize,
    lambda: f64,
    seed: u64,
    out: Option<PathBuf>,
    csv: Option<PathBuf>,
}

fn cmd_eval(args: &EvalArgs) -> gpn_core::Result<()> {
    let bench = SyntheticBenchmark::load(&args.bench)?;
    let store = ParameterStore::load(&args.ckpt.join("params.bin"))?;
    let memory = PrototypeMemory::load(&args.ckpt.join("memory.bin"))?;
    let tcfg = TrainConfig::parse(&std::fs::read_to_string(args.ckpt.join("train_config.txt"))?)?;
    let mode: Mode = args.mode.parse()?;
    let regime: Regime = args.regime.parse()?;
    let sampling: EvalSampling = args.sampling.parse()?;

    let enc_cfg = tcfg.encoder(bench.spec.feature_dim);
    if !store.contains("enc/w0") {
        return Err(Error::Config(format!(
            "checkpoint {} holds no encoder parameters",
            args.ckpt.display()
        )));
    }
    let prop_cfg = tcfg.propagation();
    let train_graph = train_graph_of(&bench);
    let inputs = EvalInputs {
        store: &store,
        memory: &memory,
        full_graph: &bench.graph,
        train_graph: &train_graph,
        pools: &bench.pools,
        train_classes: &bench.splits.train,
        test_classes: bench.test_classes(regime),
        enc_cfg: &enc_cfg,
        prop_cfg: &prop_cfg,
    };
    let ecfg = EvalConfig {
        mode,
        n_tasks: args.tasks,
        n_way: args.way,
        k_shot: args.shot,
        query_per_class: args.query,
        sampling,
        k_n: tcfg.k_n,
        k_c: args.k_c,
        lambda_eval: args.lambda,
        seed: args.seed,
        threads: None,
    };
    let report = evaluate(&inputs, &ecfg)?;
    print!("{}", report.table());
    let json = report.to_json()?;
    match &args.out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, report.to_csv())?;
    }
    Ok(())
}

fn axis_variants(axis: &str) -> gpn_core::Result<Vec<(String, Box<dyn Fn(&mut TrainConfig)>)>> {
    type Setter = Box<dyn Fn(&mut TrainConfig)>;
    let mk = |name: &str, f: Setter| (name.to_string(), f);
    Ok(match axis {
        "sampling" => vec![
            mk("sr-s", Box::new(|c| c.sampling_mix = SamplingMix::Hybrid)),
            mk("s-s", Box::new(|c| c.sampling_mix = SamplingMix::Snowball)),
            mk("r-s", Box::new(|c| c.sampling_mix = SamplingMix::Random)),
        ],
        "direction" => vec![
            mk("n-c", Box::new(|c| c.variant = Variant::Neighbors)),
            mk("f-c", Box::new(|c| c.variant = Variant::Parents)),
            mk("c-c", Box::new(|c| c.variant = Variant::Children)),
            mk("b-p", Box::new(|c| c.variant = Variant::ForwardBackward)),
            mk("m-p", Box::new(|c| c.variant = Variant::Alternating)),
        ],
        "aux" => vec![
            mk("on", Box::new(|c| c.aux = true)),
            mk("off", Box::new(|c| c.aux = false)),
        ],
        "mst" => vec![
            mk("on", Box::new(|c| c.mst = true)),
            mk("off", Box::new(|c| c.mst = false)),
        ],
        "heads" => vec![
            mk("1", Box::new(|c| c.heads = 1)),
            mk("5", Box::new(|c| c.heads = 5)),
        ],
        "attention" => vec![
            mk("m-a", Box::new(|c| c.attention = AttentionKind::Multiplicative)),
            mk("a-a", Box::new(|c| c.attention = AttentionKind::Additive)),
        ],
        other => return Err(Error::Config(format!("unknown ablation axis `{other}`"))),
    })
}

fn cmd_ablate(
    bench_dir: &Path,
    config: &Path,
    axis: &str,
    out: &Path,
    tasks: usize,
) -> gpn_core::Result<()> {
    let bench = SyntheticBenchmark::load(bench_dir)?;
    let base = TrainConfig::parse(&std::fs::read_to_string(config)?)?;
    let variants = axis_variants(axis)?;
    let graph = train_graph_of(&bench);
    std::fs::create_dir_all(out)?;

    let mut csv = String::from("variant,mean,ci95\n");
    for (name, set) in &variants {
        let mut cfg = base.clone();
        set(&mut cfg);
        eprintln!("[{axis}={name}] training {} episodes...", cfg.tau_total);
        let result = train(&graph, &bench.pools, &bench.splits.train, bench.spec.feature_dim, &cfg)?;
        let enc_cfg = cfg.encoder(bench.spec.feature_dim);
        let prop_cfg = cfg.propagation();
        let inputs = EvalInputs {
            store: &result.store,
            memory: &result.memory,
            full_graph: &bench.graph,
            train_graph: &graph,
            pools: &bench.pools,
            train_classes: &bench.splits.train,
            test_classes: &bench.splits.close_test,
            enc_cfg: &enc_cfg,
            prop_cfg: &prop_cfg,
        };
        let ecfg = EvalConfig {
            mode: Mode::Gpn,
            n_tasks: tasks,
            n_way: cfg.n_way,
            k_shot: cfg.k_shot,
            query_per_class: cfg.query_per_class,
            sampling: EvalSampling::Random,
            k_n: cfg.k_n,
            seed: base.seed,
            ..EvalConfig::default()
        };
        let report = evaluate(&inputs, &ecfg)?;
        eprintln!("[{axis}={name}] mean {:.4} +- {:.4}", report.mean, report.ci95);
        let _ = writeln!(csv, "{name},{},{}", report.mean, report.ci95);
    }
    let path = out.join(format!("ablation_{axis}.csv"));
    std::fs::write(&path, &csv)?;
    print!("{csv}");
    println!("-> {}", path.display());
    Ok(())
}
