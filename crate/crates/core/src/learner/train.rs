//! Training, evaluation and one-shot context ingestion.
//!
//! Every output position of every example is one supervised memory query
//! whose target is the output token id. Within a step the encoder weights are
//! fixed, so all queries are computed up front; memory reads and writes then
//! run serially in (example, position) order and a single Adam step applies
//! the position-averaged gradient.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use super::encoder::{EncoderCache, EncoderConfig, EncoderParams, GradAccumulator, PreparedEncoder};
use crate::error::{Error, Result};
use crate::memory::{MemoryConfig, MemoryStore};
use crate::nn::{exact_topk_unchecked, LshParams, NeighborBackend};
use crate::task::SyntheticExample;

/// Output of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub mean_loss: f64,
    pub positions: usize,
    /// Accuracy of the memory's predictions made during the step, before each write.
    pub sequence_accuracy: f64,
    pub position_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub examples: usize,
    pub positions: usize,
    pub digit_positions: usize,
    pub sequence_accuracy: f64,
    pub position_accuracy: f64,
    pub digit_position_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneShotReport {
    pub before: EvalMetrics,
    pub after: EvalMetrics,
}

struct EncodedBatch {
    queries: Vec<f64>,
    caches: Vec<EncoderCache>,
    values: Vec<u32>,
    /// Example index of every position.
    owners: Vec<usize>,
}

fn encode_all(prepared: &PreparedEncoder<'_>, examples: &[SyntheticExample], keep_caches: bool) -> Result<EncodedBatch> {
    let total: usize = examples.iter().map(SyntheticExample::len).sum();
    let key_size = prepared.params().config.key_size;
    let mut batch = EncodedBatch {
        queries: Vec::with_capacity(total * key_size),
        caches: Vec::with_capacity(if keep_caches { total } else { 0 }),
        values: Vec::with_capacity(total),
        owners: Vec::with_capacity(total),
    };
    for (e, ex) in examples.iter().enumerate() {
        for p in 0..ex.len() {
            let (q, cache) = prepared.encode(ex, p)?;
            batch.queries.extend_from_slice(&q);
            if keep_caches {
                batch.caches.push(cache);
            }
            batch.values.push(ex.output[p].id());
            batch.owners.push(e);
        }
    }
    Ok(batch)
}

/// Sequence and position accuracy from per-position correctness flags.
fn accuracy(owners: &[usize], correct: &[bool], examples: usize) -> (f64, f64) {
    if owners.is_empty() {
        return (0.0, 0.0);
    }
    let mut seq_ok = vec![true; examples];
    for (&o, &c) in owners.iter().zip(correct) {
        seq_ok[o] &= c;
    }
    let seq = seq_ok.iter().filter(|&&b| b).count() as f64 / examples as f64;
    let pos = correct.iter().filter(|&&b| b).count() as f64 / correct.len() as f64;
    (seq, pos)
}

/// One training step over `batch`; on error memory is rolled back and weights are untouched.
pub fn train_step(
    params: &mut EncoderParams,
    adam: &mut AdamState,
    store: &mut MemoryStore,
    backend: &mut NeighborBackend,
    batch: &[SyntheticExample],
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty training batch".into()));
    }
    let encoded = {
        let prepared = PreparedEncoder::new(params);
        encode_all(&prepared, batch, true)?
    };
    let n = encoded.values.len();
    let mut acc = GradAccumulator::new(params.config);
    let mut total_loss = 0.0;
    let mut correct = vec![false; n];
    let mut grad_err = None;

    store.begin_journal();
    let run = store.learn_sequence(&encoded.queries, &encoded.values, backend, |i, result, loss| {
        correct[i] = result.predicted_value == encoded.values[i];
        total_loss += loss.loss;
        if loss.loss > 0.0 && grad_err.is_none() {
            if let Err(e) = acc.add(params, &encoded.caches[i], &loss.grad_q) {
                grad_err = Some(e);
            }
        }
    });
    if let Some(e) = run.err().or(grad_err) {
        store.rollback(backend);
        return Err(e);
    }
    let mut grads = acc.finish(params);
    grads.scale(1.0 / n as f64);
    let mean_loss = total_loss / n as f64;
    if !grads.is_finite() || !mean_loss.is_finite() {
        store.rollback(backend);
        return Err(Error::Numerical("non-finite gradient in training step".into()));
    }
    let mut updated = params.clone();
    let mut next_adam = adam.clone();
    next_adam.step_params(&mut updated, &grads)?;
    if !updated.is_finite() {
        store.rollback(backend);
        return Err(Error::Numerical("Adam step produced non-finite weights".into()));
    }
    store.commit();
    *params = updated;
    *adam = next_adam;

    let (sequence_accuracy, position_accuracy) = accuracy(&encoded.owners, &correct, batch.len());
    Ok(StepReport {
        mean_loss,
        positions: n,
        sequence_accuracy,
        position_accuracy,
    })
}

/// Examples encoded per exact-search batch during evaluation.
const EVAL_CHUNK: usize = 256;

/// Greedy memory predictions over `test`; memory is not modified.
pub fn evaluate(
    params: &EncoderParams,
    store: &MemoryStore,
    backend: &NeighborBackend,
    test: &[SyntheticExample],
) -> Result<EvalMetrics> {
    let prepared = PreparedEncoder::new(params);
    let d = store.key_size();
    let mut correct = Vec::new();
    let mut owners = Vec::new();
    let mut digit_total = 0usize;
    let mut digit_correct = 0usize;
    for (chunk_idx, chunk) in test.chunks(EVAL_CHUNK).enumerate() {
        let encoded = encode_all(&prepared, chunk, false)?;
        let predictions: Vec<u32> = if backend.is_exact() {
            let q32: Vec<f32> = encoded.queries.iter().map(|&x| x as f32).collect();
            exact_topk_unchecked(&q32, store.keys(), d, 1)
                .into_iter()
                .map(|r| store.values()[r[0].index])
                .collect()
        } else {
            encoded
                .queries
                .chunks_exact(d)
                .map(|q| store.query(q, backend).map(|r| r.predicted_value))
                .collect::<Result<_>>()?
        };
        let mut cursor = 0;
        for (e, ex) in chunk.iter().enumerate() {
            let digits = ex.digit_range();
            for p in 0..ex.len() {
                let ok = predictions[cursor] == encoded.values[cursor];
                if digits.contains(&p) {
                    digit_total += 1;
                    digit_correct += ok as usize;
                }
                correct.push(ok);
                owners.push(chunk_idx * EVAL_CHUNK + e);
                cursor += 1;
            }
        }
    }
    let (sequence_accuracy, position_accuracy) = accuracy(&owners, &correct, test.len());
    Ok(EvalMetrics {
        examples: test.len(),
        positions: correct.len(),
        digit_positions: digit_total,
        sequence_accuracy,
        position_accuracy,
        digit_position_accuracy: if digit_total == 0 {
            0.0
        } else {
            digit_correct as f64 / digit_total as f64
        },
    })
}

/// Runs query + update over every position of `context`, `passes` times, with frozen weights.
pub fn ingest_context(
    params: &EncoderParams,
    store: &mut MemoryStore,
    backend: &mut NeighborBackend,
    context: &[SyntheticExample],
    passes: usize,
) -> Result<()> {
    let encoded = encode_all(&PreparedEncoder::new(params), context, false)?;
    for _ in 0..passes {
        store.learn_sequence(&encoded.queries, &encoded.values, backend, |_, _, _| {})?;
    }
    Ok(())
}

/// Metrics on `eval_set` before and after ingesting `context`.
pub fn oneshot_context_eval(
    params: &EncoderParams,
    store: &mut MemoryStore,
    backend: &mut NeighborBackend,
    context: &[SyntheticExample],
    eval_set: &[SyntheticExample],
    passes: usize,
) -> Result<OneShotReport> {
    let before = evaluate(params, store, backend, eval_set)?;
    ingest_context(params, store, backend, context, passes)?;
    let after = evaluate(params, store, backend, eval_set)?;
    Ok(OneShotReport { before, after })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Exact,
    Lsh,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "exact" => Ok(BackendKind::Exact),
            "lsh" => Ok(BackendKind::Lsh),
            other => Err(format!("unknown backend {other:?} (expected exact or lsh)")),
        }
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Exact => "exact",
            BackendKind::Lsh => "lsh",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub memory_size: usize,
    pub batch_size: usize,
    pub steps: u64,
    /// Evaluate every this many steps; 0 disables periodic evaluation.
    pub eval_every: u64,
    pub seed: u64,
    pub backend: BackendKind,
    pub learning_rate: f64,
    pub encoder: EncoderConfig,
    pub k: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            memory_size: 65_536,
            batch_size: 32,
            steps: 1_000,
            eval_every: 0,
            seed: 0,
            backend: BackendKind::Exact,
            learning_rate: TrainRunConfig::DEFAULT_LEARNING_RATE,
            encoder: EncoderConfig::default(),
            k: MemoryConfig::DEFAULT_K,
        }
    }
}

/// SplitMix64 finalizer, for deriving independent component seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl TrainRunConfig {
    /// Below Adam's usual 1e-3: at that rate the digit keys collapse onto each
    /// other before retrieval has anything to separate.
    pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

    pub fn memory_config(&self) -> MemoryConfig {
        MemoryConfig::new(self.memory_size, self.encoder.key_size)
            .with_k(self.k)
            .with_seed(mix_seed(self.seed, 1))
    }

    pub fn lsh_params(&self) -> LshParams {
        LshParams::for_memory(self.memory_size, mix_seed(self.seed, 2))
    }

    pub fn validate(&self) -> Result<()> {
        self.memory_config().validate()?;
        self.encoder.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder, optimizer, memory and search backend of one training run.
#[derive(Debug, Clone)]
pub struct Learner {
    pub params: EncoderParams,
    pub adam: AdamState,
    pub store: MemoryStore,
    pub backend: NeighborBackend,
}

impl Learner {
    pub fn new(config: &TrainRunConfig) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(config.encoder, mix_seed(config.seed, 0))?;
        let adam = AdamState::for_params(&params, config.learning_rate);
        let store = MemoryStore::new(config.memory_config())?;
        let backend = match config.backend {
            BackendKind::Exact => NeighborBackend::Exact,
            BackendKind::Lsh => store.lsh_backend(config.lsh_params())?,
        };
        Ok(Self {
            params,
            adam,
            store,
            backend,
        })
    }

    pub fn train_step(&mut self, batch: &[SyntheticExample]) -> Result<StepReport> {
        train_step(&mut self.params, &mut self.adam, &mut self.store, &mut self.backend, batch)
    }

    pub fn evaluate(&self, test: &[SyntheticExample]) -> Result<EvalMetrics> {
        evaluate(&self.params, &self.store, &self.backend, test)
    }
}

/// Deterministic epoch-shuffled batches, addressable by step number.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            len,
            batch_size,
            seed,
            epoch: None,
        }
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            let mut perm: Vec<usize> = (0..self.len).collect();
            perm.shuffle(&mut rng);
            self.epoch = Some((epoch, perm));
        }
        &self.epoch.as_ref().expect("just set").1
    }

    /// Example indices of batch `step` (0-based); batches run through each epoch's shuffle in order.
    pub fn batch(&mut self, step: u64) -> Vec<usize> {
        if self.len == 0 {
            return Vec::new();
        }
        let n = self.len as u64;
        (0..self.batch_size as u64)
            .map(|j| {
                let g = step * self.batch_size as u64 + j;
                self.permutation(g / n)[(g % n) as usize]
            })
            .collect()
    }
}
