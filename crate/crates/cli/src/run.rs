//! Training, evaluation and context ingestion against checkpoint directories.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use raremem::learner::{
    evaluate, oneshot_context_eval, BackendKind, BatchSampler, EvalMetrics, Learner, TrainRunConfig,
};
use raremem::persist::{self, EncoderCheckpoint};
use raremem::task::SyntheticExample;
use raremem::{LshIndex, MemoryConfig, MemoryStore, NeighborBackend};

use crate::config::{usage, ConfigFile, PathArg, Settings};
use crate::data::{read_split, TEST_FILE, TRAIN_FILE};
use crate::SeedArg;

pub const ENCODER_FILE: &str = "encoder.ltrm";
pub const MEMORY_FILE: &str = "memory.ltrm";
pub const LSH_FILE: &str = "lsh.ltrm";

/// Everything needed to continue a run or evaluate it.
struct Checkpoint {
    encoder: EncoderCheckpoint,
    store: MemoryStore,
    backend: NeighborBackend,
}

impl Checkpoint {
    fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| dir.join(name);
        let encoder: EncoderCheckpoint =
            persist::load(read(ENCODER_FILE)).with_context(|| format!("loading {}", read(ENCODER_FILE).display()))?;
        let store: MemoryStore =
            persist::load(read(MEMORY_FILE)).with_context(|| format!("loading {}", read(MEMORY_FILE).display()))?;
        let backend = if read(LSH_FILE).exists() {
            let index: LshIndex =
                persist::load(read(LSH_FILE)).with_context(|| format!("loading {}", read(LSH_FILE).display()))?;
            NeighborBackend::Lsh(index)
        } else {
            NeighborBackend::Exact
        };
        Ok(Self {
            encoder,
            store,
            backend,
        })
    }

    fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        persist::save(&self.encoder, dir.join(ENCODER_FILE))?;
        persist::save(&self.store, dir.join(MEMORY_FILE))?;
        match &self.backend {
            NeighborBackend::Lsh(index) => persist::save(index, dir.join(LSH_FILE))?,
            NeighborBackend::Exact => match std::fs::remove_file(dir.join(LSH_FILE)) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            },
        }
        Ok(())
    }

    fn adam_rate(&self) -> f64 {
        self.encoder.adam.learning_rate
    }

    fn backend_kind(&self) -> BackendKind {
        if self.backend.is_exact() {
            BackendKind::Exact
        } else {
            BackendKind::Lsh
        }
    }
}

fn metrics_line(m: &EvalMetrics) -> String {
    format!(
        "examples={} seq_acc={:.6} pos_acc={:.6} digit_acc={:.6}",
        m.examples, m.sequence_accuracy, m.position_accuracy, m.digit_position_accuracy
    )
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `gen-data`.
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathArg>,
    #[arg(long)]
    memory_size: Option<usize>,
    /// `exact` or `lsh`.
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Number of steps to run (in addition to any resumed ones).
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Neighbors retrieved per query.
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    seed: SeedArg,
    /// Evaluate on the test split every this many steps (0 = only at the end).
    #[arg(long)]
    eval_every: Option<u64>,
    /// Checkpoint directory to continue from.
    #[arg(long, value_name = "DIR")]
    resume: Option<PathArg>,
    /// Directory to write the final checkpoint into.
    #[arg(long, value_name = "DIR")]
    checkpoint_out: Option<PathArg>,
}

const TRAIN_KEYS: &[&str] = &[
    "data-dir",
    "memory-size",
    "backend",
    "steps",
    "lr",
    "batch-size",
    "k",
    "seed",
    "eval-every",
    "resume",
    "checkpoint-out",
];

pub fn train(args: TrainArgs, file: Option<ConfigFile>) -> Result<()> {
    let defaults = TrainRunConfig::default();
    let mut s = Settings::new(file, TRAIN_KEYS)?;
    let data_dir = s.required("data-dir", args.data_dir)?.0;
    let resume = s.optional("resume", args.resume)?.map(|p| p.0);
    let resumed = resume.as_deref().map(Checkpoint::load).transpose()?;

    let mut config = defaults.clone();
    match &resumed {
        Some(ck) => {
            // Geometry and seed come from the checkpoint; contradicting flags are refused.
            config.memory_size = s.value("memory-size", args.memory_size, ck.store.len())?;
            config.backend = s.value("backend", args.backend, ck.backend_kind())?;
            config.seed = s.value("seed", args.seed.seed, ck.encoder.seed)?;
            config.k = s.value("k", args.k, ck.store.config().k)?;
            config.learning_rate = s.value("lr", args.lr, ck.adam_rate())?;
            if config.memory_size != ck.store.len()
                || config.backend != ck.backend_kind()
                || config.seed != ck.encoder.seed
                || config.k != ck.store.config().k
            {
                return Err(usage(
                    "--memory-size, --backend, --seed and --k must match the resumed checkpoint",
                ));
            }
        }
        None => {
            config.memory_size = s.value("memory-size", args.memory_size, defaults.memory_size)?;
            config.backend = s.value("backend", args.backend, defaults.backend)?;
            config.seed = s.seed(args.seed.seed)?;
            config.k = s.value("k", args.k, MemoryConfig::new(config.memory_size, 1).k)?;
            config.learning_rate = s.value("lr", args.lr, defaults.learning_rate)?;
        }
    }
    config.steps = s.value("steps", args.steps, defaults.steps)?;
    config.batch_size = s.value("batch-size", args.batch_size, defaults.batch_size)?;
    config.eval_every = s.value("eval-every", args.eval_every, 0)?;
    let checkpoint_out = s.optional("checkpoint-out", args.checkpoint_out)?.map(|p| p.0);
    s.log("train");
    config.validate().map_err(|e| usage(e.to_string()))?;

    let train_set = read_split(&data_dir.join(TRAIN_FILE))?;
    if train_set.is_empty() {
        return Err(usage(format!("{} holds no examples", data_dir.join(TRAIN_FILE).display())));
    }
    let test_path = data_dir.join(TEST_FILE);
    let test_set = if test_path.exists() {
        read_split(&test_path)?
    } else {
        Vec::new()
    };

    let mut learner = match resumed {
        Some(ck) => {
            let mut adam = ck.encoder.adam;
            adam.learning_rate = config.learning_rate;
            Learner {
                params: ck.encoder.params,
                adam,
                store: ck.store,
                backend: ck.backend,
            }
        }
        None => Learner::new(&config)?,
    };

    let first = learner.adam.step;
    let mut sampler = BatchSampler::new(train_set.len(), config.batch_size, config.seed);
    let start = Instant::now();
    for step in first..first + config.steps {
        let batch: Vec<SyntheticExample> = sampler
            .batch(step)
            .into_iter()
            .map(|i| train_set[i].clone())
            .collect();
        let report = learner.train_step(&batch)?;
        println!(
            "step={} loss={:.6} seq_acc={:.6} pos_acc={:.6}",
            step + 1,
            report.mean_loss,
            report.sequence_accuracy,
            report.position_accuracy
        );
        let done = step + 1 - first;
        if config.eval_every > 0 && done % config.eval_every == 0 && done < config.steps && !test_set.is_empty() {
            println!("eval step={} {}", step + 1, metrics_line(&learner.evaluate(&test_set)?));
        }
    }
    eprintln!(
        "trained {} steps in {:.1}s",
        config.steps,
        start.elapsed().as_secs_f64()
    );
    if !test_set.is_empty() {
        println!(
            "eval step={} backend={} {}",
            learner.adam.step,
            config.backend,
            metrics_line(&learner.evaluate(&test_set)?)
        );
    }

    if let Some(dir) = checkpoint_out {
        let ck = Checkpoint {
            encoder: EncoderCheckpoint {
                seed: config.seed,
                params: learner.params,
                adam: learner.adam,
            },
            store: learner.store,
            backend: learner.backend,
        };
        ck.save(&dir)?;
        eprintln!("checkpoint written to {}", dir.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathArg>,
    /// Data directory, or a corpus file.
    #[arg(long, value_name = "PATH")]
    data: Option<PathArg>,
    /// `train` or `test`; used when `--data` is a directory.
    #[arg(long)]
    split: Option<String>,
}

const EVAL_KEYS: &[&str] = &["checkpoint", "data", "split"];

fn split_path(data: &Path, split: &str) -> Result<PathBuf> {
    if !data.is_dir() {
        return Ok(data.to_path_buf());
    }
    match split {
        "train" => Ok(data.join(TRAIN_FILE)),
        "test" => Ok(data.join(TEST_FILE)),
        other => Err(usage(format!("unknown split {other:?} (expected train or test)"))),
    }
}

pub fn eval(args: EvalArgs, file: Option<ConfigFile>) -> Result<()> {
    let mut s = Settings::new(file, EVAL_KEYS)?;
    let checkpoint = s.required("checkpoint", args.checkpoint)?.0;
    let data = s.required("data", args.data)?.0;
    let split = s.value("split", args.split, "test".to_string())?;
    s.log("eval");

    let path = split_path(&data, &split)?;
    let examples = read_split(&path)?;
    let ck = Checkpoint::load(&checkpoint)?;
    let m = evaluate(&ck.encoder.params, &ck.store, &ck.backend, &examples)?;
    println!("{}", metrics_line(&m));
    Ok(())
}

#[derive(Debug, Args)]
pub struct OneshotArgs {
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathArg>,
    /// Corpus whose examples are written into memory.
    #[arg(long, value_name = "FILE")]
    context_file: Option<PathArg>,
    /// Corpus scored before and after ingestion.
    #[arg(long, value_name = "FILE")]
    eval_file: Option<PathArg>,
    /// Passes over the context set.
    #[arg(long)]
    passes: Option<usize>,
}

const ONESHOT_KEYS: &[&str] = &["checkpoint", "context-file", "eval-file", "passes"];

pub fn oneshot_eval(args: OneshotArgs, file: Option<ConfigFile>) -> Result<()> {
    let mut s = Settings::new(file, ONESHOT_KEYS)?;
    let checkpoint = s.required("checkpoint", args.checkpoint)?.0;
    let context_file = s.required("context-file", args.context_file)?.0;
    let eval_file = s.required("eval-file", args.eval_file)?.0;
    let passes = s.value("passes", args.passes, 3)?;
    s.log("oneshot-eval");

    let context = read_split(&context_file)?;
    let eval_set = read_split(&eval_file)?;
    let mut ck = Checkpoint::load(&checkpoint)?;
    let report = oneshot_context_eval(
        &ck.encoder.params,
        &mut ck.store,
        &mut ck.backend,
        &context,
        &eval_set,
        passes,
    )?;
    println!("before {}", metrics_line(&report.before));
    println!("after {}", metrics_line(&report.after));
    println!(
        "delta seq_acc={:+.6} pos_acc={:+.6} digit_acc={:+.6}",
        report.after.sequence_accuracy - report.before.sequence_accuracy,
        report.after.position_accuracy - report.before.position_accuracy,
        report.after.digit_position_accuracy - report.before.digit_position_accuracy
    );
    Ok(())
}

