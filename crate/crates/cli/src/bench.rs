use std::time::Instant;

use anyhow::Result;
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use raremem::learner::BackendKind;
use raremem::nn::{exact_topk, recall_eval, LshIndex, LshParams};
use raremem::NeighborBackend;

use crate::config::{usage, ConfigFile, Settings};
use crate::SeedArg;

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    memory_size: Option<usize>,
    #[arg(long)]
    key_size: Option<usize>,
    /// Number of queries.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Signature bits per LSH table.
    #[arg(long)]
    l: Option<usize>,
    /// Number of LSH tables.
    #[arg(long)]
    tables: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Query perturbation: each query is a stored key plus noise of about this norm.
    #[arg(long)]
    noise: Option<f64>,
    #[command(flatten)]
    seed: SeedArg,
}

const KEYS: &[&str] = &[
    "memory-size",
    "key-size",
    "batch",
    "backend",
    "l",
    "tables",
    "k",
    "noise",
    "seed",
];

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| (x / norm) as f32));
    }
    out
}

pub fn bench_nn(args: BenchArgs, file: Option<ConfigFile>) -> Result<()> {
    let mut s = Settings::new(file, KEYS)?;
    let memory_size = s.value("memory-size", args.memory_size, 65_536)?;
    let key_size = s.value("key-size", args.key_size, 64)?;
    let batch = s.value("batch", args.batch, 1_000)?;
    let backend_kind = s.value("backend", args.backend, BackendKind::Exact)?;
    let seed = s.seed(args.seed.seed)?;
    let defaults = LshParams::for_memory(memory_size, seed);
    let bits = s.value("l", args.l, defaults.bits)?;
    let tables = s.value("tables", args.tables, defaults.tables)?;
    let k = s.value("k", args.k, 10usize.min(memory_size))?;
    let noise = s.value("noise", args.noise, 0.5)?;
    s.log("bench-nn");

    if memory_size == 0 || key_size == 0 || batch == 0 {
        return Err(usage("--memory-size, --key-size and --batch must be positive"));
    }
    if k == 0 || k > memory_size {
        return Err(usage(format!("--k must lie in 1..={memory_size}")));
    }
    if !(noise >= 0.0) {
        return Err(usage("--noise must be non-negative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = unit_rows(&mut rng, memory_size, key_size);
    let mut queries = Vec::with_capacity(batch * key_size);
    let per_coord = noise / (key_size as f64).sqrt();
    for _ in 0..batch {
        let row = rng.random_range(0..memory_size);
        let q: Vec<f64> = keys[row * key_size..(row + 1) * key_size]
            .iter()
            .map(|&x| x as f64 + per_coord * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        queries.extend(q.iter().map(|x| (x / norm) as f32));
    }

    let build_start = Instant::now();
    let backend = match backend_kind {
        BackendKind::Exact => NeighborBackend::Exact,
        BackendKind::Lsh => {
            let params = LshParams { bits, tables, seed };
            NeighborBackend::Lsh(LshIndex::build(&keys, key_size, params).map_err(|e| usage(e.to_string()))?)
        }
    };
    let build_secs = build_start.elapsed().as_secs_f64();

    let start = Instant::now();
    match &backend {
        NeighborBackend::Exact => {
            exact_topk(&queries, &keys, key_size, k)?;
        }
        NeighborBackend::Lsh(_) => {
            for q in queries.chunks_exact(key_size) {
                backend.top_k(&keys, key_size, q, k)?;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let report = recall_eval(&backend, &NeighborBackend::Exact, &keys, key_size, &queries, k)?;

    println!(
        "backend={backend_kind} slots={memory_size} key_size={key_size} queries={batch} k={k} build_s={build_secs:.3} \
         search_s={secs:.3} qps={:.1} recall@1={:.4} recall@k={:.4} candidate_fraction={:.5}",
        batch as f64 / secs.max(1e-9),
        report.recall_at_1,
        report.recall_at_k,
        report.candidate_fraction
    );
    Ok(())
}
