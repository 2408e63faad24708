use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use raremem::persist;
use raremem::task::{
    read_corpus, write_corpus, CorpusHeader, SyntheticExample, SyntheticTaskSpec, DEFAULT_MAX_LEN, DEFAULT_TEST_COUNT,
    DEFAULT_TRAIN_COUNT, TEST_SPLIT, TRAIN_SPLIT,
};

use crate::config::{usage, ConfigFile, PathArg, Settings};
use crate::SeedArg;

pub const TRAIN_FILE: &str = "train.txt";
pub const TEST_FILE: &str = "test.txt";
pub const TASK_FILE: &str = "task.ltrm";

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    /// Longest sequence length.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathArg>,
}

const KEYS: &[&str] = &["seed", "train-count", "test-count", "max-len", "out-dir"];

pub fn gen_data(args: GenDataArgs, file: Option<ConfigFile>) -> Result<()> {
    let mut s = Settings::new(file, KEYS)?;
    let seed = s.seed(args.seed.seed)?;
    let train_count = s.value("train-count", args.train_count, DEFAULT_TRAIN_COUNT)?;
    let test_count = s.value("test-count", args.test_count, DEFAULT_TEST_COUNT)?;
    let max_len = s.value("max-len", args.max_len, DEFAULT_MAX_LEN)?;
    let out_dir = s.required("out-dir", args.out_dir)?.0;
    s.log("gen-data");

    if train_count == 0 {
        return Err(usage("--train-count must be positive"));
    }
    if test_count == 0 {
        return Err(usage("--test-count must be positive"));
    }
    let spec = SyntheticTaskSpec::new(seed)
        .with_max_len(max_len)
        .with_counts(train_count, test_count);
    spec.validate().map_err(|e| usage(e.to_string()))?;

    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let train = spec.generate(train_count, TRAIN_SPLIT);
    let test = spec.generate(test_count, TEST_SPLIT);
    write_split(&out_dir.join(TRAIN_FILE), seed, "train", &train)?;
    write_split(&out_dir.join(TEST_FILE), seed, "test", &test)?;
    persist::save(&spec, out_dir.join(TASK_FILE))?;
    println!(
        "wrote {} train and {} test examples to {}",
        train.len(),
        test.len(),
        out_dir.display()
    );
    Ok(())
}

fn write_split(path: &Path, seed: u64, split: &str, examples: &[SyntheticExample]) -> Result<()> {
    let header = CorpusHeader {
        seed,
        split: split.to_string(),
    };
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_corpus(&mut w, &header, examples)?;
    w.flush()?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<Vec<SyntheticExample>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (_, examples) = read_corpus(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    Ok(examples)
}
