//! The life-long key-value memory.
//!
//! A [`MemoryStore`] holds `memory_size` slots, each a unit-norm key, an
//! integer value and an age. A query returns the `k` most similar keys, the
//! value of the best one and temperature-softmax confidences. A supervised
//! query additionally yields a margin loss between the best correct
//! (positive) and best incorrect (negative) neighbor and is then written
//! back:
//!
//! * if the top neighbor already holds the right value its key moves to the
//!   normalized mean of key and query and its age resets;
//! * otherwise the pair overwrites one of the oldest slots, chosen by
//!   `argmax(age + jitter)`.
//!
//! Every update ages all untouched slots by one. Ages are kept as a global
//! update clock and a per-slot last-touch stamp, so aging is O(1), and the
//! slots are threaded on a recency list so the oldest ones are found without
//! a scan.
//!
//! Keys are stored as `f32`. Queries, losses and gradients are `f64`; the
//! ranking itself is done on `f32` copies of the query.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{dot, exact_topk_unchecked, select_top_k, Neighbor, NeighborBackend};

/// Value of a slot that has never been written.
pub const NONE_VALUE: u32 = u32::MAX;

const QUERY_NORM_TOLERANCE: f64 = 1e-4;
const AVERAGE_NORM_FLOOR: f64 = 1e-12;
/// Queries processed against one search snapshot in [`MemoryStore::learn_sequence`].
const SEQUENCE_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryConfig {
    pub memory_size: usize,
    pub key_size: usize,
    /// Neighbors retrieved per query.
    pub k: usize,
    /// Margin of the memory loss.
    pub alpha: f64,
    /// Inverse softmax temperature applied to similarities.
    pub inverse_temperature: f64,
    /// Upper bound of the uniform eviction jitter added to ages.
    pub jitter_bound: usize,
    pub seed: u64,
}

impl MemoryConfig {
    pub const DEFAULT_K: usize = 256;
    pub const DEFAULT_ALPHA: f64 = 0.1;
    pub const DEFAULT_INVERSE_TEMPERATURE: f64 = 40.0;

    /// Default configuration; `k` is capped at `memory_size`.
    pub fn new(memory_size: usize, key_size: usize) -> Self {
        Self {
            memory_size,
            key_size,
            k: Self::DEFAULT_K.min(memory_size),
            alpha: Self::DEFAULT_ALPHA,
            inverse_temperature: Self::DEFAULT_INVERSE_TEMPERATURE,
            jitter_bound: Self::default_jitter(memory_size),
            seed: 0,
        }
    }

    /// `max(1, memory_size / 1024)`, kept within the `memory_size / 16` cap.
    pub fn default_jitter(memory_size: usize) -> usize {
        (memory_size / 1024).max(1).min(memory_size / 16)
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_jitter(mut self, jitter_bound: usize) -> Self {
        self.jitter_bound = jitter_bound;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.memory_size == 0 || self.key_size == 0 {
            return fail("memory_size and key_size must be positive".into());
        }
        if self.memory_size > u32::MAX as usize {
            return fail(format!("memory_size {} exceeds u32 range", self.memory_size));
        }
        if self.k == 0 || self.k > self.memory_size {
            return fail(format!(
                "k = {} must lie in 1..={}",
                self.k, self.memory_size
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha = {} must be positive", self.alpha));
        }
        if !(self.inverse_temperature > 0.0 && self.inverse_temperature.is_finite()) {
            return fail(format!(
                "inverse temperature {} must be positive",
                self.inverse_temperature
            ));
        }
        if self.jitter_bound > self.memory_size / 16 {
            return fail(format!(
                "jitter_bound {} exceeds memory_size / 16 = {}",
                self.jitter_bound,
                self.memory_size / 16
            ));
        }
        Ok(())
    }
}

/// Output of a memory query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    /// Slots `n_1..n_k`, best first.
    pub indices: Vec<usize>,
    /// `q · K[n_i]`, non-increasing.
    pub similarities: Vec<f64>,
    /// `softmax(t · d_1, ..., t · d_k)`.
    pub confidences: Vec<f64>,
    /// `V[n_1]`.
    pub predicted_value: u32,
}

impl QueryResult {
    fn from_neighbors(neighbors: &[Neighbor], values: &[u32], inverse_temperature: f64) -> Self {
        let similarities: Vec<f64> = neighbors.iter().map(|n| n.similarity as f64).collect();
        let confidences = softmax(&similarities, inverse_temperature);
        Self {
            indices: neighbors.iter().map(|n| n.index).collect(),
            predicted_value: neighbors.first().map_or(NONE_VALUE, |n| values[n.index]),
            similarities,
            confidences,
        }
    }
}

/// Numerically stable `softmax(t · x)`.
pub fn softmax(x: &[f64], t: f64) -> Vec<f64> {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * t));
    let exps: Vec<f64> = x.iter().map(|&v| (v * t - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Memory loss for one supervised query.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub positive_index: Option<usize>,
    pub negative_index: Option<usize>,
    /// Gradient of the loss with respect to the normalized query.
    pub grad_q: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteKind {
    /// The top neighbor already held the value; its key was averaged with the query.
    Averaged,
    /// The pair was written into an evicted slot.
    Written,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOutcome {
    pub kind: WriteKind,
    pub slot: Option<usize>,
}

/// Undo log for a sequence of updates.
#[derive(Debug, Clone)]
struct Journal {
    clock: u64,
    rng: ChaCha8Rng,
    entries: Vec<JournalEntry>,
}

#[derive(Debug, Clone)]
struct JournalEntry {
    slot: usize,
    key: Vec<f32>,
    value: u32,
    last_touch: u64,
}

const NIL: u32 = u32::MAX;

/// Doubly linked list of slots ordered by `(last_touch, slot)`, oldest first.
#[derive(Debug, Clone)]
struct Recency {
    prev: Vec<u32>,
    next: Vec<u32>,
    head: u32,
    tail: u32,
}

impl Recency {
    fn from_touches(last_touch: &[u64]) -> Self {
        let mut order: Vec<u32> = (0..last_touch.len() as u32).collect();
        order.sort_by_key(|&i| (last_touch[i as usize], i));
        let n = order.len();
        let mut prev = vec![NIL; n];
        let mut next = vec![NIL; n];
        for w in order.windows(2) {
            next[w[0] as usize] = w[1];
            prev[w[1] as usize] = w[0];
        }
        Self {
            prev,
            next,
            head: order.first().copied().unwrap_or(NIL),
            tail: order.last().copied().unwrap_or(NIL),
        }
    }

    fn move_to_back(&mut self, slot: usize) {
        let s = slot as u32;
        if self.tail == s {
            return;
        }
        let (p, n) = (self.prev[slot], self.next[slot]);
        if p == NIL {
            self.head = n;
        } else {
            self.next[p as usize] = n;
        }
        self.prev[n as usize] = p;
        self.prev[slot] = self.tail;
        self.next[slot] = NIL;
        self.next[self.tail as usize] = s;
        self.tail = s;
    }
}

#[derive(Debug, Clone)]
pub struct MemoryStore {
    config: MemoryConfig,
    keys: Vec<f32>,
    values: Vec<u32>,
    /// Clock value at each slot's last write; `age = clock - last_touch`.
    last_touch: Vec<u64>,
    recency: Recency,
    clock: u64,
    rng: ChaCha8Rng,
    journal: Option<Journal>,
}

impl PartialEq for MemoryStore {
    /// Equality of the observable state: config, key bits, values, ages and RNG.
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.keys.len() == other.keys.len()
            && self
                .keys
                .iter()
                .zip(&other.keys)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.values == other.values
            && self.ages() == other.ages()
            && self.rng == other.rng
    }
}

impl MemoryStore {
    /// Fresh memory: random unit keys, every value [`NONE_VALUE`], every age 0.
    pub fn new(config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut keys = Vec::with_capacity(config.memory_size * config.key_size);
        let mut row = vec![0f64; config.key_size];
        for _ in 0..config.memory_size {
            loop {
                for x in row.iter_mut() {
                    *x = StandardNormal.sample(&mut rng);
                }
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > AVERAGE_NORM_FLOOR {
                    keys.extend(row.iter().map(|x| (x / norm) as f32));
                    break;
                }
            }
        }
        Ok(Self {
            config,
            keys,
            values: vec![NONE_VALUE; config.memory_size],
            last_touch: vec![0; config.memory_size],
            recency: Recency::from_touches(&vec![0; config.memory_size]),
            clock: 0,
            rng,
            journal: None,
        })
    }

    /// Reassembles a store from its stored components.
    pub fn from_parts(
        config: MemoryConfig,
        keys: Vec<f32>,
        values: Vec<u32>,
        ages: &[u32],
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.memory_size;
        if keys.len() != n * config.key_size || values.len() != n || ages.len() != n {
            return Err(Error::Config("component lengths do not match the config".into()));
        }
        let clock = ages.iter().copied().max().unwrap_or(0) as u64;
        let last_touch: Vec<u64> = ages.iter().map(|&a| clock - a as u64).collect();
        Ok(Self {
            config,
            keys,
            values,
            recency: Recency::from_touches(&last_touch),
            last_touch,
            clock,
            rng,
            journal: None,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.config.memory_size
    }

    pub fn is_empty(&self) -> bool {
        self.config.memory_size == 0
    }

    pub fn key_size(&self) -> usize {
        self.config.key_size
    }

    /// Row-major `memory_size × key_size` key matrix.
    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn key(&self, slot: usize) -> &[f32] {
        let d = self.config.key_size;
        &self.keys[slot * d..(slot + 1) * d]
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn age(&self, slot: usize) -> u64 {
        self.clock - self.last_touch[slot]
    }

    pub fn ages(&self) -> Vec<u64> {
        self.last_touch.iter().map(|&t| self.clock - t).collect()
    }

    /// Number of updates applied since creation (or since the oldest stored age on load).
    pub fn update_count(&self) -> u64 {
        self.clock
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Builds an LSH backend over the current keys.
    pub fn lsh_backend(&self, params: crate::nn::LshParams) -> Result<NeighborBackend> {
        crate::nn::LshIndex::build(&self.keys, self.config.key_size, params).map(NeighborBackend::Lsh)
    }

    fn check_query(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.config.key_size {
            return Err(Error::Precondition(format!(
                "query has {} entries, key size is {}",
                q.len(),
                self.config.key_size
            )));
        }
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= QUERY_NORM_TOLERANCE) {
            return Err(Error::Precondition(format!(
                "query norm {norm} is not 1 within {QUERY_NORM_TOLERANCE}"
            )));
        }
        Ok(())
    }

    fn check_value(v: u32) -> Result<()> {
        if v == NONE_VALUE {
            return Err(Error::Precondition("the NONE sentinel cannot be a target value".into()));
        }
        Ok(())
    }

    /// Retrieves the `k` nearest keys to the unit query `q`.
    pub fn query(&self, q: &[f64], backend: &NeighborBackend) -> Result<QueryResult> {
        self.check_query(q)?;
        let q32 = to_f32(q);
        let neighbors = backend.top_k(&self.keys, self.config.key_size, &q32, self.config.k)?;
        Ok(QueryResult::from_neighbors(
            &neighbors,
            &self.values,
            self.config.inverse_temperature,
        ))
    }

    fn similarity64(&self, q: &[f64], slot: usize) -> f64 {
        q.iter().zip(self.key(slot)).map(|(a, &b)| a * b as f64).sum()
    }

    /// Margin loss `[q·K[n_b] − q·K[n_p] + α]_+` and its gradient in `q`.
    ///
    /// The positive is the best-ranked retrieved slot holding `v`, falling back
    /// to the most similar slot anywhere in memory holding `v`. The negative is
    /// the best-ranked retrieved slot not holding `v`. Without either the loss
    /// is zero.
    pub fn memory_loss(&self, q: &[f64], v: u32, result: &QueryResult) -> Result<LossReport> {
        Self::check_value(v)?;
        if q.len() != self.config.key_size {
            return Err(Error::Precondition("query width mismatch".into()));
        }
        let positive = result
            .indices
            .iter()
            .copied()
            .find(|&i| self.values[i] == v)
            .or_else(|| self.best_slot_with_value(q, v));
        let negative = result.indices.iter().copied().find(|&i| self.values[i] != v);
        let zero = || vec![0.0; self.config.key_size];
        let (loss, grad_q) = match (positive, negative) {
            (Some(p), Some(b)) => {
                let loss = self.similarity64(q, b) - self.similarity64(q, p) + self.config.alpha;
                if loss > 0.0 {
                    let grad = self
                        .key(b)
                        .iter()
                        .zip(self.key(p))
                        .map(|(&kb, &kp)| kb as f64 - kp as f64)
                        .collect();
                    (loss, grad)
                } else {
                    (0.0, zero())
                }
            }
            _ => (0.0, zero()),
        };
        Ok(LossReport {
            loss,
            positive_index: positive,
            negative_index: negative,
            grad_q,
        })
    }

    fn best_slot_with_value(&self, q: &[f64], v: u32) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (i, _) in self.values.iter().enumerate().filter(|(_, &x)| x == v) {
            let s = self.similarity64(q, i);
            if best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, i));
            }
        }
        best.map(|(_, i)| i)
    }

    /// Writes the supervised pair `(q, v)` into memory.
    ///
    /// `backend` is updated in lockstep when its state depends on the keys.
    pub fn update(
        &mut self,
        q: &[f64],
        v: u32,
        result: &QueryResult,
        backend: &mut NeighborBackend,
    ) -> Result<WriteOutcome> {
        self.check_query(q)?;
        Self::check_value(v)?;
        let Some(&top) = result.indices.first() else {
            return Err(Error::Precondition("query result is empty".into()));
        };
        if top >= self.len() {
            return Err(Error::Precondition(format!("slot {top} out of range")));
        }
        let d = self.config.key_size;
        if self.values[top] == v {
            self.record(top);
            let sum: Vec<f64> = q.iter().zip(self.key(top)).map(|(a, &b)| a + b as f64).collect();
            let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm >= AVERAGE_NORM_FLOOR {
                for (dst, x) in self.keys[top * d..(top + 1) * d].iter_mut().zip(&sum) {
                    *dst = (x / norm) as f32;
                }
                backend.on_write(top, &self.keys[top * d..(top + 1) * d]);
            }
            self.touch(top);
            Ok(WriteOutcome {
                kind: WriteKind::Averaged,
                slot: Some(top),
            })
        } else {
            let slot = self.eviction_slot();
            self.record(slot);
            let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (dst, x) in self.keys[slot * d..(slot + 1) * d].iter_mut().zip(q) {
                *dst = (x / norm) as f32;
            }
            self.values[slot] = v;
            backend.on_write(slot, &self.keys[slot * d..(slot + 1) * d]);
            self.touch(slot);
            Ok(WriteOutcome {
                kind: WriteKind::Written,
                slot: Some(slot),
            })
        }
    }

    /// `argmax_i(age_i + r_i)` with `r_i` uniform in `[0, jitter_bound]`, ties to the lowest slot.
    ///
    /// Slots are visited oldest first and jitter is drawn only while a slot
    /// can still win, so the cost is independent of the memory size.
    fn eviction_slot(&mut self) -> usize {
        let jitter = self.config.jitter_bound as u64;
        let mut best: Option<(u64, usize)> = None;
        let mut cur = self.recency.head;
        while cur != NIL {
            let slot = cur as usize;
            let age = self.clock - self.last_touch[slot];
            if let Some((bs, bi)) = best {
                // later slots are no older; equally old ones come in ascending index order
                if age + jitter < bs || (age + jitter == bs && slot > bi) {
                    break;
                }
            }
            let r = if jitter == 0 {
                0
            } else {
                self.rng.random_range(0..=jitter)
            };
            let score = age + r;
            if best.is_none_or(|(bs, bi)| score > bs || (score == bs && slot < bi)) {
                best = Some((score, slot));
            }
            cur = self.recency.next[slot];
        }
        best.map_or(0, |(_, i)| i)
    }

    fn touch(&mut self, slot: usize) {
        self.clock += 1;
        self.last_touch[slot] = self.clock;
        self.recency.move_to_back(slot);
    }

    fn record(&mut self, slot: usize) {
        if let Some(journal) = self.journal.as_mut() {
            let d = self.config.key_size;
            journal.entries.push(JournalEntry {
                slot,
                key: self.keys[slot * d..(slot + 1) * d].to_vec(),
                value: self.values[slot],
                last_touch: self.last_touch[slot],
            });
        }
    }

    /// Starts recording updates so they can be undone with [`rollback`](Self::rollback).
    pub fn begin_journal(&mut self) {
        self.journal = Some(Journal {
            clock: self.clock,
            rng: self.rng.clone(),
            entries: Vec::new(),
        });
    }

    /// Keeps all updates since [`begin_journal`](Self::begin_journal).
    pub fn commit(&mut self) {
        self.journal = None;
    }

    /// Restores the state captured by [`begin_journal`](Self::begin_journal).
    pub fn rollback(&mut self, backend: &mut NeighborBackend) {
        let Some(journal) = self.journal.take() else {
            return;
        };
        let d = self.config.key_size;
        for e in journal.entries.into_iter().rev() {
            self.keys[e.slot * d..(e.slot + 1) * d].copy_from_slice(&e.key);
            self.values[e.slot] = e.value;
            self.last_touch[e.slot] = e.last_touch;
            backend.on_write(e.slot, &e.key);
        }
        self.clock = journal.clock;
        self.rng = journal.rng;
        self.recency = Recency::from_touches(&self.last_touch);
    }

    /// Runs query, loss and update for each `(q, v)` pair in order.
    ///
    /// Equivalent to calling [`query`](Self::query),
    /// [`memory_loss`](Self::memory_loss) and [`update`](Self::update) per
    /// pair; each query sees all earlier writes. With the exact backend the
    /// search runs batched against a snapshot and is patched with the slots
    /// written since. `visit` receives each pair's index, result and loss
    /// before the pair is written.
    pub fn learn_sequence<F>(
        &mut self,
        queries: &[f64],
        values: &[u32],
        backend: &mut NeighborBackend,
        mut visit: F,
    ) -> Result<Vec<WriteOutcome>>
    where
        F: FnMut(usize, &QueryResult, &LossReport),
    {
        let d = self.config.key_size;
        if queries.len() != values.len() * d {
            return Err(Error::Precondition("queries and values differ in count".into()));
        }
        for (q, &v) in queries.chunks_exact(d).zip(values) {
            self.check_query(q)?;
            Self::check_value(v)?;
        }
        let mut outcomes = Vec::with_capacity(values.len());
        if !backend.is_exact() {
            for (i, (q, &v)) in queries.chunks_exact(d).zip(values).enumerate() {
                let result = self.query(q, backend)?;
                let loss = self.memory_loss(q, v, &result)?;
                visit(i, &result, &loss);
                outcomes.push(self.update(q, v, &result, backend)?);
            }
            return Ok(outcomes);
        }

        let k = self.config.k;
        let q32_all = to_f32(queries);
        for chunk_start in (0..values.len()).step_by(SEQUENCE_CHUNK) {
            let chunk_end = (chunk_start + SEQUENCE_CHUNK).min(values.len());
            let depth = (k + chunk_end - chunk_start).min(self.len());
            let snapshot = exact_topk_unchecked(
                &q32_all[chunk_start * d..chunk_end * d],
                &self.keys,
                d,
                depth,
            );
            let mut dirty: Vec<usize> = Vec::new();
            for (offset, snap) in snapshot.into_iter().enumerate() {
                let i = chunk_start + offset;
                let q = &queries[i * d..(i + 1) * d];
                let q32 = &q32_all[i * d..(i + 1) * d];
                let fresh = snap
                    .into_iter()
                    .filter(|n| !dirty.contains(&n.index))
                    .chain(dirty.iter().map(|&s| Neighbor {
                        index: s,
                        similarity: dot(q32, self.key(s)),
                    }));
                let neighbors = select_top_k(fresh, k);
                let result =
                    QueryResult::from_neighbors(&neighbors, &self.values, self.config.inverse_temperature);
                let loss = self.memory_loss(q, values[i], &result)?;
                visit(i, &result, &loss);
                let outcome = self.update(q, values[i], &result, backend)?;
                if let Some(s) = outcome.slot {
                    if !dirty.contains(&s) {
                        dirty.push(s);
                    }
                }
                outcomes.push(outcome);
            }
        }
        Ok(outcomes)
    }
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// Backpropagates `grad_q` through `q = x / ‖x‖`.
///
/// Returns `(grad_q − (q·grad_q) q) / ‖x‖`.
pub fn query_grad_through_normalization(x: &[f64], grad_q: &[f64]) -> Result<Vec<f64>> {
    if x.len() != grad_q.len() {
        return Err(Error::Precondition("vector widths differ".into()));
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > AVERAGE_NORM_FLOOR) {
        return Err(Error::Numerical(format!(
            "cannot differentiate normalization at ‖x‖ = {norm}"
        )));
    }
    let radial: f64 = x.iter().zip(grad_q).map(|(a, g)| a / norm * g).sum();
    Ok(x
        .iter()
        .zip(grad_q)
        .map(|(a, g)| (g - radial * a / norm) / norm)
        .collect())
}

/// `x / ‖x‖`, or a numerical error when `x` is (near) zero.
pub fn normalize(x: &[f64]) -> Result<Vec<f64>> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > AVERAGE_NORM_FLOOR) {
        return Err(Error::Numerical(format!("cannot normalize vector of norm {norm}")));
    }
    Ok(x.iter().map(|v| v / norm).collect())
}
